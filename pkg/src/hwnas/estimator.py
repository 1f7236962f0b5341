"""Rule-based FPGA resource/latency surrogate and a linear-coefficient hook.

The rule-based estimator is a closed-form stand-in for a trained predictor.
It keeps the ordinal structure that matters to a search: wider layers cost
more fabric, the reuse factor trades multipliers for cycles, and narrow
(<= ``dsp_bit_threshold``) products are mapped to LUTs instead of DSPs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from hwnas.netir import NetworkDescription, ceil_log2, param_count

BRAM_BITS = 36 * 1024
ONCHIP_BITS = 2 ** 18
TABLE_ENTRIES = 1024
TABLE_LUTS_PER_UNIT = 64
METRICS = ("bram", "dsp", "ff", "lut", "ii_cycles", "latency_cycles")
RESOURCES = ("bram", "dsp", "ff", "lut")


class SurrogateSchemaError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ResourceEstimate:
    bram: float = 0.0
    dsp: float = 0.0
    ff: float = 0.0
    lut: float = 0.0
    ii_cycles: float = 0.0
    latency_cycles: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    lut_capacity: int
    ff_capacity: int
    dsp_capacity: int
    bram_capacity: int
    clock_period_ns: float = 5.0

    def __post_init__(self):
        caps = (self.lut_capacity, self.ff_capacity, self.dsp_capacity, self.bram_capacity)
        if min(caps) <= 0 or self.clock_period_ns <= 0:
            raise ValueError("device capacities and clock period must be positive")

    def capacity(self, resource: str) -> int:
        return getattr(self, f"{resource}_capacity")

    def to_dict(self) -> dict:
        return asdict(self)


# Virtex UltraScale+ VU13P catalog figures; 5 ns period = 105 ns / 21 cycles.
VU13P = DeviceProfile("VU13P", lut_capacity=1_728_000, ff_capacity=3_456_000,
                      dsp_capacity=12_288, bram_capacity=2_688, clock_period_ns=5.0)
DEVICES = {"VU13P": VU13P}


def device_from_config(spec: str | dict) -> DeviceProfile:
    if isinstance(spec, str):
        try:
            return DEVICES[spec]
        except KeyError:
            raise ValueError(f"unknown device {spec!r}; known: {sorted(DEVICES)}") from None
    return DeviceProfile(**spec)


@dataclass(frozen=True)
class EstimatorConfig:
    reuse_factor: int = 1
    strategy: str = "latency"
    dsp_bit_threshold: int = 10

    def __post_init__(self):
        if self.reuse_factor < 1:
            raise ValueError("reuse_factor must be >= 1")
        if self.strategy not in ("latency", "resource"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


def _multipliers(count: float, bw: int, ba: int, cfg: EstimatorConfig) -> tuple[float, float]:
    """(dsp, lut) cost of `count` parallel multipliers."""
    if max(bw, ba) > cfg.dsp_bit_threshold:
        return count, 0.0
    return 0.0, count * bw * ba


class RuleBasedEstimator:
    """Deterministic per-layer resource and cycle model.

    Per dense layer (n inputs, m outputs, sparsity s, reuse R):
    ``ceil(m*n*(1-s)/R)`` multipliers, ``m*(n-1)*max(bits)/R`` adder LUTs,
    ``m*(b_w+b_a)`` pipeline FFs and ``ceil(log2 n) + 1 + (R-1)`` cycles.
    BatchNorm is one multiply-add per feature and one cycle. ReLU costs
    ``m*b_a`` LUTs; Tanh/Sigmoid use a 1024-entry table (counted as memory
    bits), 64 LUTs per unit and one cycle. Stored weight bits above 2^18
    spill to 36Kb BRAM blocks (always, under the resource strategy).
    """

    def __init__(self, cfg: EstimatorConfig | None = None):
        self.cfg = cfg or EstimatorConfig()

    def estimate(self, net: NetworkDescription, device: DeviceProfile | None = None) -> ResourceEstimate:
        cfg = self.cfg
        R = cfg.reuse_factor
        dsp = lut = ff = 0.0
        cycles = 0
        stages = 0
        mem_bits = 0.0
        for l in net.layers:
            bw, ba = l.weight_bits, l.act_bits
            if l.kind == "dense":
                n, m = l.in_dim, l.out_dim
                mults = math.ceil(m * n * (1.0 - l.sparsity) / R)
                d, t = _multipliers(mults, bw, ba, cfg)
                dsp += d
                lut += t + m * (n - 1) * max(bw, ba) / R
                ff += m * (bw + ba)
                mem_bits += (n * m * (1.0 - l.sparsity) + m) * bw
                cycles += ceil_log2(n) + 1 + (R - 1)
                stages += 1
            elif l.kind == "batchnorm":
                m = l.dim
                d, t = _multipliers(m, bw, ba, cfg)
                dsp += d
                lut += t + m * max(bw, ba)
                ff += m * (bw + ba)
                mem_bits += 2 * m * bw
                cycles += 1
                stages += 1
            elif l.kind == "activation":
                m = l.dim
                if l.activation == "ReLU":
                    lut += m * ba
                else:
                    lut += TABLE_LUTS_PER_UNIT * m
                    mem_bits += TABLE_ENTRIES * ba
                    cycles += 1
        if stages == 0:
            return ResourceEstimate()
        if cfg.strategy == "resource" or mem_bits > ONCHIP_BITS:
            bram = math.ceil(mem_bits / BRAM_BITS)
        else:
            bram = 0
        ii = 1 if R == 1 else R * stages
        return ResourceEstimate(bram=float(bram), dsp=float(dsp), ff=float(ff), lut=float(lut),
                                ii_cycles=float(ii), latency_cycles=float(cycles + stages))


def estimate(net: NetworkDescription, device: DeviceProfile | None = None,
             cfg: EstimatorConfig | None = None) -> ResourceEstimate:
    return RuleBasedEstimator(cfg).estimate(net, device)


def utilization_pct(est: ResourceEstimate, device: DeviceProfile) -> dict[str, float]:
    return {r: 100.0 * getattr(est, r) / device.capacity(r) for r in RESOURCES}


def avg_resource_pct(est: ResourceEstimate, device: DeviceProfile) -> float:
    """Mean of the BRAM, DSP, FF and LUT utilization percentages."""
    return sum(utilization_pct(est, device).values()) / 4.0


def latency_ns(est: ResourceEstimate, device: DeviceProfile) -> float:
    return est.latency_cycles * device.clock_period_ns


# -- linear surrogate hook --------------------------------------------------

SURROGATE_FEATURES = ("layer_count", "total_params", "max_width", "total_mults", "bits",
                      "reuse_factor")


def surrogate_features(net: NetworkDescription, reuse_factor: int = 1) -> np.ndarray:
    """Feature vector consumed by linear surrogates, in SURROGATE_FEATURES order."""
    denses = net.dense_layers()
    if not denses:
        return np.array([0.0, 0.0, 0.0, 0.0, 0.0, float(reuse_factor)])
    mults = sum(l.in_dim * l.out_dim * (1.0 - l.sparsity) for l in denses)
    return np.array([
        float(len(denses)),
        float(param_count(net)),
        float(max(l.out_dim for l in denses)),
        float(mults),
        float(max(max(l.weight_bits, l.act_bits) for l in denses)),
        float(reuse_factor),
    ])


class LinearSurrogate:
    """Per-metric ``max(0, intercept + w . features)``.

    Coefficient file schema::

        {"version": 1,
         "features": ["layer_count", "total_params", "max_width", "total_mults", "bits", "reuse_factor"],
         "metrics": {"lut": {"intercept": 0.0, "weights": [w0, ..., w5]}, ...}}

    Metrics absent from the file estimate 0.
    """

    def __init__(self, intercepts: dict[str, float], weights: dict[str, np.ndarray],
                 reuse_factor: int = 1):
        self.intercepts = intercepts
        self.weights = weights
        self.reuse_factor = reuse_factor

    def estimate(self, net: NetworkDescription, device: DeviceProfile | None = None) -> ResourceEstimate:
        if not net.dense_layers():
            feats = np.zeros(len(SURROGATE_FEATURES))
        else:
            feats = surrogate_features(net, self.reuse_factor)
        out = {}
        for m in METRICS:
            v = self.intercepts.get(m, 0.0) + float(self.weights.get(m, np.zeros(len(feats))) @ feats)
            out[m] = max(0.0, v)
        return ResourceEstimate(**out)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "features": list(SURROGATE_FEATURES),
            "metrics": {m: {"intercept": self.intercepts[m], "weights": list(map(float, self.weights[m]))}
                        for m in self.intercepts},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def fit(cls, nets: list[NetworkDescription], targets: list[ResourceEstimate],
            reuse_factor: int = 1) -> "LinearSurrogate":
        """Ordinary least squares per metric."""
        X = np.array([surrogate_features(n, reuse_factor) for n in nets])
        A = np.hstack([np.ones((len(X), 1)), X])
        intercepts, weights = {}, {}
        for m in METRICS:
            y = np.array([getattr(t, m) for t in targets])
            coef, *_ = np.linalg.lstsq(A, y, rcond=None)
            intercepts[m] = float(coef[0])
            weights[m] = coef[1:]
        return cls(intercepts, weights, reuse_factor)


def load_linear_surrogate(path: str | Path, reuse_factor: int = 1) -> LinearSurrogate:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read surrogate file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SurrogateSchemaError("<file>", f"invalid JSON: {exc}") from exc
    if doc.get("version") != 1:
        raise SurrogateSchemaError("version", f"unsupported version {doc.get('version')!r}")
    feats = doc.get("features", list(SURROGATE_FEATURES))
    if list(feats) != list(SURROGATE_FEATURES):
        raise SurrogateSchemaError("features", f"expected {list(SURROGATE_FEATURES)}")
    metrics = doc.get("metrics")
    if not isinstance(metrics, dict):
        raise SurrogateSchemaError("metrics", "must be an object keyed by metric name")
    intercepts, weights = {}, {}
    for name, rec in metrics.items():
        if name not in METRICS:
            raise SurrogateSchemaError(f"metrics.{name}", f"unknown metric; known {METRICS}")
        try:
            intercepts[name] = float(rec.get("intercept", 0.0))
            w = np.array(rec.get("weights", [0.0] * len(SURROGATE_FEATURES)), dtype=float)
        except (TypeError, ValueError, AttributeError) as exc:
            raise SurrogateSchemaError(f"metrics.{name}", str(exc)) from exc
        if w.shape != (len(SURROGATE_FEATURES),):
            raise SurrogateSchemaError(f"metrics.{name}.weights",
                                       f"need {len(SURROGATE_FEATURES)} coefficients")
        weights[name] = w
    return LinearSurrogate(intercepts, weights, reuse_factor)
