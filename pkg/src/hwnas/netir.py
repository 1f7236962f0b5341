"""Network description IR: layers, shape checks, parameter and BOPs counts.

JSON layout of a serialized network::

    {"input_dim": 16, "num_classes": 5,
     "training_meta": {"learning_rate": 0.001, "l1": 0.0},
     "layers": [{"kind": "dense", "in_dim": 16, "out_dim": 64,
                 "weight_bits": 32, "act_bits": 32, "sparsity": 0.0},
                {"kind": "activation", "activation": "ReLU", "in_dim": 64, "out_dim": 64, ...},
                ...]}
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Sequence

LAYER_KINDS = ("dense", "batchnorm", "activation", "dropout")


class ShapeError(ValueError):
    def __init__(self, index: int, expected: int, found: int, what: str = "input dim"):
        super().__init__(f"layer {index}: expected {what} {expected}, found {found}")
        self.index = index
        self.expected = expected
        self.found = found


@dataclass(frozen=True)
class LayerDesc:
    kind: str
    in_dim: int
    out_dim: int
    activation: str | None = None
    rate: float = 0.0
    weight_bits: int = 32
    act_bits: int = 32
    sparsity: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be positive")
        if self.kind != "dense" and self.in_dim != self.out_dim:
            raise ValueError(f"{self.kind} layers are shape-preserving")
        if not (1 <= self.weight_bits <= 32 and 1 <= self.act_bits <= 32):
            raise ValueError("bit widths must lie in 1..32")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must lie in [0, 1)")
        if self.kind != "dense" and self.sparsity != 0.0:
            raise ValueError("only dense layers carry sparsity")

    @property
    def dim(self) -> int:
        return self.out_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.kind != "activation":
            d.pop("activation")
        if self.kind != "dropout":
            d.pop("rate")
        return d


def dense(n: int, m: int, **kw) -> LayerDesc:
    return LayerDesc("dense", n, m, **kw)


def batchnorm(d: int, **kw) -> LayerDesc:
    return LayerDesc("batchnorm", d, d, **kw)


def activation(kind: str, d: int, **kw) -> LayerDesc:
    return LayerDesc("activation", d, d, activation=kind, **kw)


def dropout(rate: float, d: int, **kw) -> LayerDesc:
    return LayerDesc("dropout", d, d, rate=rate, **kw)


@dataclass(frozen=True)
class NetworkDescription:
    layers: tuple[LayerDesc, ...] = ()
    input_dim: int | None = None
    num_classes: int | None = None
    learning_rate: float = 1e-3
    l1: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def training_meta(self) -> dict:
        return {"learning_rate": self.learning_rate, "l1": self.l1}

    def dense_layers(self) -> list[LayerDesc]:
        return [l for l in self.layers if l.kind == "dense"]

    def with_precision(self, weight_bits: int, act_bits: int | None = None) -> "NetworkDescription":
        act_bits = weight_bits if act_bits is None else act_bits
        layers = [replace(l, weight_bits=weight_bits, act_bits=act_bits) for l in self.layers]
        return replace(self, layers=tuple(layers))

    def with_sparsity(self, sparsities: Sequence[float]) -> "NetworkDescription":
        """Annotate dense layers, in order, with the given sparsities."""
        it = iter(sparsities)
        layers = [replace(l, sparsity=float(next(it))) if l.kind == "dense" else l for l in self.layers]
        return replace(self, layers=tuple(layers))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "training_meta": self.training_meta,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkDescription":
        meta = d.get("training_meta", {})
        return cls(
            layers=tuple(LayerDesc(**l) for l in d["layers"]),
            input_dim=d.get("input_dim"),
            num_classes=d.get("num_classes"),
            learning_rate=float(meta.get("learning_rate", 1e-3)),
            l1=float(meta.get("l1", 0.0)),
        )


def validate_shapes(net: NetworkDescription) -> None:
    """Raise ShapeError at the first layer whose input does not chain."""
    current = net.input_dim
    for i, layer in enumerate(net.layers):
        if current is not None and layer.in_dim != current:
            raise ShapeError(i, current, layer.in_dim)
        current = layer.out_dim
    denses = [(i, l) for i, l in enumerate(net.layers) if l.kind == "dense"]
    if net.num_classes is not None and denses:
        i, last = denses[-1]
        if last.out_dim != net.num_classes:
            raise ShapeError(i, net.num_classes, last.out_dim, what="output dim")
        if any(l.kind != "dense" for l in net.layers[i + 1:]):
            # logits must come straight from the last dense layer
            raise ShapeError(i + 1, net.num_classes, net.layers[i + 1].out_dim, what="logit layer")


def param_count(net: NetworkDescription) -> int:
    total = 0
    for l in net.layers:
        if l.kind == "dense":
            total += l.in_dim * l.out_dim + l.out_dim
        elif l.kind == "batchnorm":
            total += 2 * l.dim
    return total


def ceil_log2(n: int) -> int:
    return (n - 1).bit_length() if n > 1 else 0


def layer_bops(l: LayerDesc) -> int:
    bw, ba = l.weight_bits, l.act_bits
    if l.kind == "dense":
        n, m = l.in_dim, l.out_dim
        mults = round((1.0 - l.sparsity) * m * n * bw * ba)
        return int(mults) + m * n * (bw + ba + ceil_log2(n))
    if l.kind == "batchnorm":
        return l.dim * (bw * ba + bw + ba)
    return 0


def count_bops(net: NetworkDescription) -> int:
    """Bit operations: multiplies over nonzero weights plus accumulator bits per MAC."""
    return sum(layer_bops(l) for l in net.layers)
