"""Compression stage: warm-up, then iterative magnitude pruning with 8-bit QAT."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from hwnas import trainer as tr
from hwnas.data import Dataset
from hwnas.estimator import DeviceProfile, ResourceEstimate, RuleBasedEstimator, VU13P
from hwnas.netir import NetworkDescription, count_bops, validate_shapes

log = logging.getLogger(__name__)


class EmptyRecordsError(ValueError):
    pass


class AccuracyFallbackWarning(UserWarning):
    """No checkpoint met the accuracy floor; the most accurate one was chosen."""


@dataclass(frozen=True)
class LocalSearchConfig:
    warmup_epochs: int = 5
    iterations: int = 10
    epochs_per_iteration: int = 10
    prune_fraction: float = 0.2
    qat_bits: int = 8
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.prune_fraction < 1.0:
            raise ValueError("prune_fraction must lie in [0, 1)")
        if min(self.warmup_epochs, self.iterations, self.epochs_per_iteration) < 0:
            raise ValueError("epoch and iteration counts must be >= 0")


@dataclass
class CheckpointRecord:
    iteration: int
    sparsity: float
    weight_bits: int
    val_accuracy: float
    bops: int
    estimate: ResourceEstimate
    weights_path: str = ""
    params: tr.ModelParams | None = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        return {
            "iteration": self.iteration,
            "sparsity": repr(self.sparsity),
            "weight_bits": self.weight_bits,
            "val_accuracy": repr(self.val_accuracy),
            "bops": self.bops,
            **{f"est_{k}": repr(v) for k, v in self.estimate.to_dict().items()},
            "weights_path": self.weights_path,
        }


def local_search(net: NetworkDescription, train_ds: Dataset, val_ds: Dataset,
                 cfg: LocalSearchConfig = LocalSearchConfig(), estimator=None,
                 device: DeviceProfile = VU13P, out_dir: str | Path | None = None
                 ) -> list[CheckpointRecord]:
    """Warm up at full precision, then prune-and-retrain under QAT.

    Checkpoint 0 is the warm-up model; checkpoint k follows the k-th prune
    step and ``epochs_per_iteration`` epochs of quantization-aware training.
    Weights are fine-tuned continuously (no rewinding). With `out_dir`, each
    checkpoint's parameters are written to ``out_dir/checkpoints`` and the
    list so far to ``out_dir/checkpoints.csv``, so an aborted run leaves its
    partial history behind.
    """
    validate_shapes(net)
    estimator = estimator or RuleBasedEstimator()
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    records: list[CheckpointRecord] = []

    def record(k: int, model: tr.TrainedModel) -> None:
        params = model.params
        desc = tr.compressed_description(net, params)
        rec = CheckpointRecord(
            iteration=k,
            sparsity=params.sparsity(),
            weight_bits=params.quant.weight_bits if params.quant.enabled else 32,
            val_accuracy=tr.evaluate(model, val_ds),
            bops=count_bops(desc),
            estimate=estimator.estimate(desc, device),
            params=params.copy(),
        )
        if ckpt_dir is not None:
            path = ckpt_dir / f"ckpt_{k:03d}.json"
            tr.save_params(params, path, extra={"iteration": k, "network": desc.to_dict()})
            rec.weights_path = str(path.relative_to(ckpt_dir.parent))
        records.append(rec)
        if out_dir is not None:
            write_checkpoints_csv(records, Path(out_dir) / "checkpoints.csv")
        log.info("checkpoint %d: sparsity %.3f acc %.4f bops %d", k, rec.sparsity,
                 rec.val_accuracy, rec.bops)

    seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.iterations + 1)
    warm = tr.TrainConfig.for_network(net, cfg.warmup_epochs, batch_size=cfg.batch_size,
                                      seed=int(seeds[0]))
    model = tr.train(net, train_ds, val_ds, warm)
    record(0, model)
    params = model.params
    for k in range(1, cfg.iterations + 1):
        params = tr.prune_step(params, cfg.prune_fraction)
        params.quant = tr.QuantConfig(True, cfg.qat_bits, cfg.qat_bits)
        step = tr.TrainConfig.for_network(net, cfg.epochs_per_iteration, batch_size=cfg.batch_size,
                                          seed=int(seeds[k]))
        model = tr.train(net, train_ds, val_ds, step, params=params)
        params = model.params
        record(k, model)
    return records


CHECKPOINT_COLUMNS = ["iteration", "sparsity", "weight_bits", "val_accuracy", "bops",
                      "est_bram", "est_dsp", "est_ff", "est_lut", "est_ii_cycles",
                      "est_latency_cycles", "weights_path"]


def write_checkpoints_csv(records: list[CheckpointRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CHECKPOINT_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow(r.row())


def read_checkpoints_csv(path: str | Path) -> list[CheckpointRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            est = ResourceEstimate(**{k[4:]: float(row[k]) for k in CHECKPOINT_COLUMNS if k.startswith("est_")})
            out.append(CheckpointRecord(int(row["iteration"]), float(row["sparsity"]),
                                        int(row["weight_bits"]), float(row["val_accuracy"]),
                                        int(row["bops"]), est, row["weights_path"]))
    return out


def select_checkpoint(records: list[CheckpointRecord], target_sparsity: float = 0.5,
                      min_accuracy: float = 0.0) -> CheckpointRecord:
    """Checkpoint closest to `target_sparsity` among those meeting `min_accuracy`.

    Ties go to the higher accuracy. If nothing meets the floor, the most
    accurate checkpoint is returned and AccuracyFallbackWarning is issued.
    """
    if not records:
        raise EmptyRecordsError("no checkpoints to select from")
    ok = [r for r in records if r.val_accuracy >= min_accuracy]
    if not ok:
        warnings.warn(f"no checkpoint reaches accuracy {min_accuracy}; using the most accurate",
                      AccuracyFallbackWarning, stacklevel=2)
        return max(records, key=lambda r: r.val_accuracy)
    return min(ok, key=lambda r: (abs(r.sparsity - target_sparsity), -r.val_accuracy))


def export_model(record: CheckpointRecord, net: NetworkDescription, out_dir: str | Path,
                 provenance: dict | None = None, params: tr.ModelParams | None = None,
                 base_dir: str | Path = ".") -> Path:
    """Write ``model.json`` + ``weights.bin`` for a checkpoint.

    Dense weights are exported as the values the forward pass uses: masked,
    and fake-quantized when QAT is on, together with their quantizer scale.
    Reloading with `load_model` reproduces eval-mode logits bitwise.
    """
    params = params or record.params
    if params is None:
        if not record.weights_path:
            raise OSError("checkpoint has neither in-memory parameters nor a weights file")
        params, _ = tr.load_params(Path(base_dir) / record.weights_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    exported = params.copy()
    scales = []
    for i in range(len(exported.weights)):
        w = tr.effective_weight(params, i)
        exported.weights[i] = w
        scales.append(float(tr.quant_scale(w, params.quant.weight_bits)) if params.quant.enabled else None)
    desc = tr.compressed_description(net, exported)
    extra = {
        "network": desc.to_dict(),
        "weight_scales": scales,
        "checkpoint": {"iteration": record.iteration, "sparsity": record.sparsity,
                       "weight_bits": record.weight_bits, "val_accuracy": record.val_accuracy,
                       "bops": record.bops, "estimate": record.estimate.to_dict()},
        "provenance": provenance or {},
    }
    return tr.save_params(exported, out_dir / "model.json", extra=extra, bin_name="weights.bin")


def load_model(path: str | Path) -> tuple[tr.TrainedModel, dict]:
    params, manifest = tr.load_params(path)
    net = NetworkDescription.from_dict(manifest["network"])
    return tr.TrainedModel(net, params), manifest


def uncompressed(net: NetworkDescription) -> NetworkDescription:
    """Strip bit-width and sparsity annotations."""
    layers = tuple(replace(l, weight_bits=32, act_bits=32, sparsity=0.0) for l in net.layers)
    return replace(net, layers=layers)
