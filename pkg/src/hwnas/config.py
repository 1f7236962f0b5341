"""JSON run configuration.

Schema (version 1); every section is optional except ``data``::

    {
      "version": 1,
      "master_seed": 0,
      "output_dir": "runs/demo",
      "batch_size": 128,
      "data": {"path": "jets.csv", "label_column": "label",
               "split": [0.6, 0.2, 0.2], "seed": 0}
           | {"synthetic": {"n_per_class": 200, "dim": 16, "classes": 5,
                            "separation": 6.0, "seed": 0}, "split": [...]},
      "space": {<SearchSpaceConfig overrides; input_dim/num_classes come from data>},
      "search": {"population_size": 20, "total_trials": 500, "epochs_per_trial": 5,
                 "objective_set": "snacpack" | "nac" | [metric, ...], "seed": 0, "workers": 1},
      "selection": {"min_accuracy": 0.638},
      "local": {"warmup_epochs": 5, "iterations": 10, "epochs_per_iteration": 10,
                "prune_fraction": 0.2, "qat_bits": 8, "seed": 0},
      "estimator": {"reuse_factor": 1, "strategy": "latency", "dsp_bit_threshold": 10,
                    "device": "VU13P" | {<DeviceProfile fields>},
                    "precision_bits": 8, "surrogate": null | "coeffs.json"}
    }

Relative paths are resolved against the config file's directory. Seeds that
are not given default to ``master_seed``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from hwnas.estimator import DeviceProfile, EstimatorConfig, device_from_config
from hwnas.local_search import LocalSearchConfig
from hwnas.nsga2 import SearchConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    label_column: str = "label"
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    synthetic: dict | None = None


@dataclass(frozen=True)
class EstimatorSection:
    reuse_factor: int = 1
    strategy: str = "latency"
    dsp_bit_threshold: int = 10
    device: str | dict = "VU13P"
    precision_bits: int = 8
    surrogate: str | None = None

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(self.reuse_factor, self.strategy, self.dsp_bit_threshold)

    def device_profile(self) -> DeviceProfile:
        return device_from_config(self.device)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    search: SearchConfig
    local: LocalSearchConfig
    estimator: EstimatorSection
    space: dict = field(default_factory=dict)
    output_dir: str = "runs/default"
    master_seed: int = 0
    batch_size: int = 128
    selection_min_accuracy: float = 0.638
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _section(doc: dict, name: str, cls, defaults: dict | None = None):
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be an object")
    known = {f.name for f in fields(cls)}
    for key in sec:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
    kwargs = {**(defaults or {}), **sec}
    for k, v in list(kwargs.items()):
        if isinstance(v, list) and k != "objective_set":
            kwargs[k] = tuple(v)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc


def parse_config(doc: dict, base_dir: str | Path = ".") -> RunConfig:
    base = Path(base_dir)
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported version {version!r}")
    allowed = {"version", "master_seed", "output_dir", "batch_size", "data", "space", "search",
               "selection", "local", "estimator"}
    for key in doc:
        if key not in allowed:
            raise ConfigError(key, "unknown key")
    seed = doc.get("master_seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("master_seed", "must be an integer")
    if "data" not in doc:
        raise ConfigError("data", "section is required")
    data = _section(doc, "data", DataConfig, {"seed": seed})
    if (data.path is None) == (data.synthetic is None):
        raise ConfigError("data", "give exactly one of 'path' or 'synthetic'")
    if data.path is not None:
        p = (base / data.path).resolve()
        if not p.exists():
            raise ConfigError("data.path", f"file not found: {p}")
        data = DataConfig(str(p), data.label_column, data.split, data.seed, None)
    if len(data.split) != 3:
        raise ConfigError("data.split", "needs three fractions (train, val, test)")
    search = _section(doc, "search", SearchConfig, {"seed": seed})
    local = _section(doc, "local", LocalSearchConfig, {"seed": seed})
    est = _section(doc, "estimator", EstimatorSection)
    try:
        est.estimator_config()
        est.device_profile()
    except (TypeError, ValueError) as exc:
        raise ConfigError("estimator", str(exc)) from exc
    if not 2 <= est.precision_bits <= 32:
        raise ConfigError("estimator.precision_bits", "must lie in 2..32")
    if est.surrogate is not None:
        sp = (base / est.surrogate).resolve()
        if not sp.exists():
            raise ConfigError("estimator.surrogate", f"file not found: {sp}")
        est = EstimatorSection(**{**asdict(est), "surrogate": str(sp)})
    space = doc.get("space", {})
    if not isinstance(space, dict):
        raise ConfigError("space", "must be an object")
    selection = doc.get("selection", {})
    batch = doc.get("batch_size", 128)
    if not isinstance(batch, int) or batch < 1:
        raise ConfigError("batch_size", "must be a positive integer")
    out = doc.get("output_dir", "runs/default")
    return RunConfig(
        data=data, search=search, local=local, estimator=est, space=dict(space),
        output_dir=str((base / out).resolve()), master_seed=seed, batch_size=batch,
        selection_min_accuracy=float(selection.get("min_accuracy", 0.638)),
        raw=_resolved_raw(doc, data, est, str((base / out).resolve())),
    )


def _resolved_raw(doc: dict, data: DataConfig, est: EstimatorSection, out: str) -> dict[str, Any]:
    raw = json.loads(json.dumps(doc))
    raw["output_dir"] = out
    if data.path is not None:
        raw["data"]["path"] = data.path
    if est.surrogate is not None:
        raw["estimator"]["surrogate"] = est.surrogate
    raw.setdefault("version", CONFIG_VERSION)
    return raw


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
    return parse_config(doc, path.parent)
