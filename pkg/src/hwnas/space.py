"""Categorical MLP search space, genome encoding and variation operators."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, fields
from typing import Any, Sequence

import numpy as np

from hwnas.netir import NetworkDescription, activation, batchnorm, dense, dropout

ACTIVATIONS = ("ReLU", "Tanh", "Sigmoid")
MAX_LAYERS = 8
NUM_GENES = 1 + MAX_LAYERS + 5

DEFAULT_WIDTHS = (
    (64, 120, 128),
    (32, 60, 64),
    (16, 32),
    (32, 64),
    (32, 64),
    (32, 64),
    (16, 32),
    (32, 44, 64),
)


class SpaceError(ValueError):
    pass


class DecodeError(ValueError):
    pass


def _tuple(values: Sequence[Any]) -> tuple:
    return tuple(values)


@dataclass(frozen=True)
class SearchSpaceConfig:
    input_dim: int
    num_classes: int = 5
    num_layers_choices: tuple[int, ...] = (4, 5, 6, 7, 8)
    width_choices: tuple[tuple[int, ...], ...] = DEFAULT_WIDTHS
    activation_choices: tuple[str, ...] = ACTIVATIONS
    batchnorm_choices: tuple[bool, ...] = (True, False)
    lr_choices: tuple[float, ...] = (0.0010, 0.0015, 0.0020)
    l1_choices: tuple[float, ...] = (0.0, 1e-6, 1e-5, 1e-4)
    dropout_choices: tuple[float, ...] = (0.0, 0.05, 0.1)

    def __post_init__(self):
        # accept lists from JSON configs
        object.__setattr__(self, "width_choices", tuple(_tuple(w) for w in self.width_choices))
        for name in ("num_layers_choices", "activation_choices", "batchnorm_choices",
                     "lr_choices", "l1_choices", "dropout_choices"):
            object.__setattr__(self, name, _tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.input_dim < 1 or self.num_classes < 1:
            raise SpaceError("input_dim and num_classes must be positive")
        if len(self.width_choices) != MAX_LAYERS:
            raise SpaceError(f"width_choices needs {MAX_LAYERS} position lists")
        for name, choices in self._named_choice_sets():
            if len(choices) == 0:
                raise SpaceError(f"empty choice list: {name}")
        if any(not 1 <= n <= MAX_LAYERS for n in self.num_layers_choices):
            raise SpaceError("num_layers_choices must lie in 1..8")
        if any(w < 1 for ws in self.width_choices for w in ws):
            raise SpaceError("all widths must be >= 1")
        if any(a not in ACTIVATIONS for a in self.activation_choices):
            raise SpaceError(f"activations must be among {ACTIVATIONS}")
        if any(lr <= 0 for lr in self.lr_choices):
            raise SpaceError("learning rates must be positive")
        if any(v < 0 for v in self.l1_choices):
            raise SpaceError("l1 values must be non-negative")
        if any(not 0 <= p < 1 for p in self.dropout_choices):
            raise SpaceError("dropout rates must lie in [0, 1)")

    def _named_choice_sets(self) -> list[tuple[str, tuple]]:
        named = [("num_layers", self.num_layers_choices)]
        named += [(f"width{i + 1}", ws) for i, ws in enumerate(self.width_choices)]
        named += [
            ("activation", self.activation_choices),
            ("use_batchnorm", self.batchnorm_choices),
            ("learning_rate", self.lr_choices),
            ("l1", self.l1_choices),
            ("dropout", self.dropout_choices),
        ]
        return named

    def choice_sets(self) -> list[tuple]:
        """Choice set of every gene, in genome order."""
        return [c for _, c in self._named_choice_sets()]

    def gene_names(self) -> list[str]:
        return [n for n, _ in self._named_choice_sets()]

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["width_choices"] = [list(w) for w in self.width_choices]
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpaceConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpaceError(f"unknown search-space keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ArchitectureGenome:
    num_layers: int
    widths: tuple[int, ...]
    activation: str
    use_batchnorm: bool
    learning_rate: float
    l1: float
    dropout: float

    def genes(self) -> tuple:
        return (self.num_layers, *self.widths, self.activation, self.use_batchnorm,
                self.learning_rate, self.l1, self.dropout)

    @classmethod
    def from_genes(cls, genes: Sequence[Any]) -> "ArchitectureGenome":
        genes = list(genes)
        if len(genes) != NUM_GENES:
            raise SpaceError(f"expected {NUM_GENES} genes, got {len(genes)}")
        return cls(
            num_layers=int(genes[0]),
            widths=tuple(int(w) for w in genes[1:1 + MAX_LAYERS]),
            activation=str(genes[9]),
            use_batchnorm=bool(genes[10]),
            learning_rate=float(genes[11]),
            l1=float(genes[12]),
            dropout=float(genes[13]),
        )

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "widths": list(self.widths),
            "activation": self.activation,
            "use_batchnorm": self.use_batchnorm,
            "learning_rate": self.learning_rate,
            "l1": self.l1,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureGenome":
        return cls(
            num_layers=int(d["num_layers"]),
            widths=tuple(int(w) for w in d["widths"]),
            activation=str(d["activation"]),
            use_batchnorm=bool(d["use_batchnorm"]),
            learning_rate=float(d["learning_rate"]),
            l1=float(d["l1"]),
            dropout=float(d["dropout"]),
        )


def is_valid(g: ArchitectureGenome, space: SearchSpaceConfig) -> bool:
    genes = g.genes()
    return len(genes) == NUM_GENES and all(v in c for v, c in zip(genes, space.choice_sets()))


def check_genome(g: ArchitectureGenome, space: SearchSpaceConfig) -> None:
    for name, value, choices in zip(space.gene_names(), g.genes(), space.choice_sets()):
        if value not in choices:
            raise SpaceError(f"gene {name}={value!r} not in {choices}")


def _draw(choices: tuple, rng: np.random.Generator):
    return choices[int(rng.integers(len(choices)))]


def sample(space: SearchSpaceConfig, rng: np.random.Generator) -> ArchitectureGenome:
    """Draw every gene uniformly from its choice set."""
    return ArchitectureGenome.from_genes([_draw(c, rng) for c in space.choice_sets()])


def default_mutation_rate() -> float:
    return 1.0 / NUM_GENES


def mutate(g: ArchitectureGenome, space: SearchSpaceConfig, per_gene_rate: float,
           rng: np.random.Generator) -> ArchitectureGenome:
    """Resample each gene independently with probability `per_gene_rate`.

    A resampled gene may land on its old value, so the observed change rate of a
    gene with k choices is ``per_gene_rate * (1 - 1/k)``.
    """
    if not 0.0 <= per_gene_rate <= 1.0:
        raise ValueError("per_gene_rate must lie in [0, 1]")
    genes = list(g.genes())
    for i, choices in enumerate(space.choice_sets()):
        if rng.random() < per_gene_rate:
            genes[i] = _draw(choices, rng)
    return ArchitectureGenome.from_genes(genes)


def crossover(a: ArchitectureGenome, b: ArchitectureGenome,
              rng: np.random.Generator) -> tuple[ArchitectureGenome, ArchitectureGenome]:
    """Uniform crossover: each gene position is swapped with probability 1/2."""
    ga, gb = list(a.genes()), list(b.genes())
    swap = rng.random(NUM_GENES) < 0.5
    ca = [y if s else x for x, y, s in zip(ga, gb, swap)]
    cb = [x if s else y for x, y, s in zip(ga, gb, swap)]
    return ArchitectureGenome.from_genes(ca), ArchitectureGenome.from_genes(cb)


def decode(g: ArchitectureGenome, space: SearchSpaceConfig) -> NetworkDescription:
    """Build the layer sequence for a genome.

    Hidden block order is Dense -> BatchNorm -> Activation -> Dropout; the
    output Dense produces logits and has no activation.
    """
    if g.num_layers < 1 or len(g.widths) < g.num_layers:
        raise DecodeError(f"genome uses {g.num_layers} widths but has {len(g.widths)}")
    layers = []
    prev = space.input_dim
    for i in range(g.num_layers):
        width = g.widths[i]
        if width is None or width < 1:
            raise DecodeError(f"missing width at position {i + 1}")
        layers.append(dense(prev, width))
        if g.use_batchnorm:
            layers.append(batchnorm(width))
        layers.append(activation(g.activation, width))
        if g.dropout > 0:
            layers.append(dropout(g.dropout, width))
        prev = width
    layers.append(dense(prev, space.num_classes))
    return NetworkDescription(
        layers=tuple(layers),
        input_dim=space.input_dim,
        num_classes=space.num_classes,
        learning_rate=g.learning_rate,
        l1=g.l1,
    )


def genome_key(g: ArchitectureGenome) -> str:
    """Canonical text key; covers every gene including inert widths."""
    widths = ".".join(str(w) for w in g.widths)
    return (f"L{g.num_layers}_w{widths}_{g.activation}_bn{int(g.use_batchnorm)}"
            f"_lr{g.learning_rate!r}_l1{g.l1!r}_do{g.dropout!r}")


def genome_from_key(key: str) -> ArchitectureGenome:
    try:
        parts = key.split("_")
        num_layers, widths, act, bn, lr, l1, do = parts
        return ArchitectureGenome(
            num_layers=int(num_layers[1:]),
            widths=tuple(int(w) for w in widths[1:].split(".")),
            activation=act,
            use_batchnorm=bn == "bn1",
            learning_rate=float(lr[2:]),
            l1=float(l1[2:]),
            dropout=float(do[2:]),
        )
    except (ValueError, IndexError) as exc:
        raise SpaceError(f"malformed genome key {key!r}") from exc


def space_size(space: SearchSpaceConfig, num_layers: int | None = None) -> int:
    """Number of structurally distinct networks (inert widths not counted)."""
    counts = [num_layers] if num_layers is not None else list(space.num_layers_choices)
    shared = (len(space.activation_choices) * len(space.batchnorm_choices) * len(space.lr_choices)
              * len(space.l1_choices) * len(space.dropout_choices))
    return sum(math.prod(len(w) for w in space.width_choices[:n]) * shared for n in counts)


def enumerate_genomes(space: SearchSpaceConfig, num_layers: int):
    """Yield one genome per distinct network with `num_layers` hidden layers.

    Inert width positions are pinned to their first choice.
    """
    used = space.width_choices[:num_layers]
    inert = tuple(ws[0] for ws in space.width_choices[num_layers:])
    for combo in itertools.product(*used, space.activation_choices, space.batchnorm_choices,
                                   space.lr_choices, space.l1_choices, space.dropout_choices):
        widths = tuple(combo[:num_layers]) + inert
        act, bn, lr, l1, do = combo[num_layers:]
        yield ArchitectureGenome(num_layers, widths, act, bn, lr, l1, do)
