"""Deterministic numpy MLP trainer with fake quantization and magnitude pruning.

Weights are stored as ``(in_dim, out_dim)`` matrices so a dense layer is
``x @ W + b``. Training runs in float32; `gradient_check` runs in float64.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from hwnas.data import Dataset
from hwnas.netir import NetworkDescription, ShapeError

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite (a failed trial)."""


@dataclass(frozen=True)
class QuantConfig:
    enabled: bool = False
    weight_bits: int = 8
    act_bits: int = 8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-3
    l1: float = 0.0
    batch_size: int = 128
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def for_network(cls, net: NetworkDescription, epochs: int, **kw) -> "TrainConfig":
        return cls(epochs=epochs, learning_rate=net.learning_rate, l1=net.l1, **kw)


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    masks: list[np.ndarray]
    bn_gamma: list[np.ndarray] = field(default_factory=list)
    bn_beta: list[np.ndarray] = field(default_factory=list)
    bn_mean: list[np.ndarray] = field(default_factory=list)
    bn_var: list[np.ndarray] = field(default_factory=list)
    quant: QuantConfig = QuantConfig()

    @property
    def dtype(self):
        return self.weights[0].dtype if self.weights else np.float32

    def copy(self) -> "ModelParams":
        cp = lambda xs: [x.copy() for x in xs]  # noqa: E731
        return ModelParams(cp(self.weights), cp(self.biases), cp(self.masks), cp(self.bn_gamma),
                           cp(self.bn_beta), cp(self.bn_mean), cp(self.bn_var), self.quant)

    def trainable(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"dense{i}.weight", w), (f"dense{i}.bias", b)]
        for i, (g, b) in enumerate(zip(self.bn_gamma, self.bn_beta)):
            out += [(f"bn{i}.gamma", g), (f"bn{i}.beta", b)]
        return out

    def sparsity(self) -> float:
        total = sum(m.size for m in self.masks)
        return 0.0 if total == 0 else 1.0 - sum(float(m.sum()) for m in self.masks) / total

    def layer_sparsities(self) -> list[float]:
        return [1.0 - float(m.mean()) for m in self.masks]


@dataclass
class TrainedModel:
    net: NetworkDescription
    params: ModelParams
    history: list[dict] = field(default_factory=list)


def init_params(net: NetworkDescription, seed: int, dtype=np.float32) -> ModelParams:
    """Uniform fan-in init, bound sqrt(6 / fan_in); biases zero; BN identity."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    p = ModelParams([], [], [])
    for layer in net.layers:
        if layer.kind == "dense":
            bound = math.sqrt(6.0 / layer.in_dim)
            w = rng.uniform(-bound, bound, size=(layer.in_dim, layer.out_dim)).astype(dtype)
            p.weights.append(w)
            p.biases.append(np.zeros(layer.out_dim, dtype))
            p.masks.append(np.ones_like(w))
        elif layer.kind == "batchnorm":
            p.bn_gamma.append(np.ones(layer.dim, dtype))
            p.bn_beta.append(np.zeros(layer.dim, dtype))
            p.bn_mean.append(np.zeros(layer.dim, dtype))
            p.bn_var.append(np.ones(layer.dim, dtype))
    return p


# -- quantization -----------------------------------------------------------

def quant_scale(x: np.ndarray, bits: int) -> float:
    """Symmetric per-tensor scale max|x| / (2^(bits-1) - 1), 0 for all-zero input.

    The scale is nudged to a fixed point of ``(levels * s) / levels`` in the
    tensor's dtype so that quantizing an already-quantized tensor reproduces
    the same scale, which makes the quantizer bitwise idempotent.
    Guarantees assume the scale is a normal number of the dtype; tensors whose
    largest magnitude is near the subnormal range are not meaningful inputs.
    """
    if not 2 <= bits <= 16:
        raise ValueError("fake quantization supports 2..16 bits")
    levels = x.dtype.type(2 ** (bits - 1) - 1)
    top = np.max(np.abs(x)) if x.size else x.dtype.type(0)
    if top == 0:
        return x.dtype.type(0)
    s = top / levels
    for _ in range(8):
        nxt = (s * levels) / levels
        if nxt == s:
            break
        s = nxt
    return s


def fake_quantize(x: np.ndarray, bits: int) -> np.ndarray:
    s = quant_scale(x, bits)
    if s == 0:
        return np.zeros_like(x)
    return np.round(x / s) * s


def effective_weight(params: ModelParams, i: int) -> np.ndarray:
    w = params.weights[i] * params.masks[i]
    if params.quant.enabled:
        w = fake_quantize(w, params.quant.weight_bits)
    return w


# -- forward / backward -----------------------------------------------------

def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "ReLU":
        return np.maximum(z, 0)
    if kind == "Tanh":
        return np.tanh(z)
    if kind == "Sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {kind!r}")


def _act_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "ReLU":
        return (z > 0).astype(z.dtype)
    if kind == "Tanh":
        return 1 - a * a
    return a * (1 - a)


def forward(params: ModelParams, net: NetworkDescription, x: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None, cache: list | None = None,
            update_stats: bool = True) -> np.ndarray:
    """Return logits for a batch.

    In train mode BatchNorm uses batch statistics (and updates the running
    ones unless `update_stats` is false) and dropout is applied with `rng`.
    Pass a list as `cache` to collect what `backward` needs.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x)
    if x.ndim != 2 or (net.input_dim is not None and x.shape[1] != net.input_dim):
        raise ShapeError(0, net.input_dim or -1, x.shape[-1])
    h = x.astype(params.dtype, copy=False)
    train = mode == "train"
    di = bi = 0
    for layer in net.layers:
        if layer.kind == "dense":
            w = effective_weight(params, di)
            if cache is not None:
                cache.append(("dense", di, h))
            h = h @ w + params.biases[di]
            di += 1
        elif layer.kind == "batchnorm":
            if train:
                mu, var = h.mean(axis=0), h.var(axis=0)
                if update_stats:
                    params.bn_mean[bi] *= 1 - BN_MOMENTUM
                    params.bn_mean[bi] += BN_MOMENTUM * mu
                    params.bn_var[bi] *= 1 - BN_MOMENTUM
                    params.bn_var[bi] += BN_MOMENTUM * var
            else:
                mu, var = params.bn_mean[bi], params.bn_var[bi]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (h - mu) * inv
            if cache is not None:
                cache.append(("bn", bi, xhat, inv, train))
            h = params.bn_gamma[bi] * xhat + params.bn_beta[bi]
            bi += 1
        elif layer.kind == "activation":
            a = _act(layer.activation, h)
            if cache is not None:
                cache.append(("act", layer.activation, h, a))
            if params.quant.enabled:
                a = fake_quantize(a, params.quant.act_bits)
            h = a
        elif layer.kind == "dropout":
            if train and layer.rate > 0:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                keep = (rng.random(h.shape) >= layer.rate).astype(h.dtype) / h.dtype.type(1 - layer.rate)
                if cache is not None:
                    cache.append(("drop", keep))
                h = h * keep
    return h


def backward(params: ModelParams, cache: list, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a loss w.r.t. trainable parameters given d(loss)/d(logits).

    Quantizers pass gradients straight through. Weight gradients are masked.
    """
    grads: dict[str, np.ndarray] = {}
    g = dlogits
    for entry in reversed(cache):
        tag = entry[0]
        if tag == "dense":
            _, i, h_in = entry
            grads[f"dense{i}.weight"] = (h_in.T @ g) * params.masks[i]
            grads[f"dense{i}.bias"] = g.sum(axis=0)
            g = g @ effective_weight(params, i).T
        elif tag == "bn":
            _, i, xhat, inv, batch_stats = entry
            grads[f"bn{i}.gamma"] = (g * xhat).sum(axis=0)
            grads[f"bn{i}.beta"] = g.sum(axis=0)
            dxhat = g * params.bn_gamma[i]
            if batch_stats:
                n = g.shape[0]
                g = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                g = dxhat * inv
        elif tag == "act":
            _, kind, z, a = entry
            g = g * _act_grad(kind, z, a)
        elif tag == "drop":
            g = g * entry[1]
    return grads


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


def l1_penalty(params: ModelParams, l1: float) -> float:
    if l1 == 0:
        return 0.0
    return l1 * sum(float(np.abs(w * m).sum()) for w, m in zip(params.weights, params.masks))


def loss_and_grads(params: ModelParams, net: NetworkDescription, x: np.ndarray, y: np.ndarray,
                   l1: float, mode: str = "train", rng=None, update_stats: bool = True):
    cache: list = []
    logits = forward(params, net, x, mode, rng=rng, cache=cache, update_stats=update_stats)
    loss, dlogits = cross_entropy(logits, y)
    grads = backward(params, cache, dlogits.astype(logits.dtype))
    if l1:
        loss += l1_penalty(params, l1)
        for i, (w, m) in enumerate(zip(params.weights, params.masks)):
            grads[f"dense{i}.weight"] = grads[f"dense{i}.weight"] + l1 * np.sign(w) * m
    return loss, grads


class Adam:
    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named: list[tuple[str, np.ndarray]], grads: dict[str, np.ndarray]) -> None:
        b1, b2 = ADAM_BETAS
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p in named:
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, named, grads) -> None:
        for name, p in named:
            p -= (self.lr * grads[name]).astype(p.dtype)


def apply_masks(params: ModelParams) -> None:
    for w, m in zip(params.weights, params.masks):
        w *= m


def train(net: NetworkDescription, train_ds: Dataset, val_ds: Dataset | None, cfg: TrainConfig,
          params: ModelParams | None = None) -> TrainedModel:
    """Train for ``cfg.epochs`` epochs; continues from `params` when given.

    Shuffle order, dropout masks and initialization all derive from
    ``cfg.seed``. Raises TrainingDivergedError on a non-finite loss.
    """
    if train_ds.dim != net.input_dim and net.input_dim is not None:
        raise ShapeError(0, net.input_dim, train_ds.dim)
    params = init_params(net, cfg.seed) if params is None else params
    opt = Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    x_all = train_ds.features.astype(params.dtype)
    y_all = train_ds.labels
    eval_ds = val_ds if val_ds is not None else train_ds
    model = TrainedModel(net, params)
    named = params.trainable()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y_all))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(params, net, x_all[idx], y_all[idx], cfg.l1, "train", rng=rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            opt.step(named, grads)
            apply_masks(params)
            total += loss * len(idx)
            seen += len(idx)
        if not all(np.all(np.isfinite(p)) for _, p in named):
            raise TrainingDivergedError(f"non-finite parameters after epoch {epoch}")
        model.history.append({"epoch": epoch, "train_loss": total / seen,
                              "val_accuracy": evaluate(model, eval_ds)})
    return model


def predict(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    return forward(model.params, model.net, x, "eval")


def evaluate(model: TrainedModel, ds: Dataset) -> float:
    """Eval-mode accuracy; argmax ties resolve to the lowest class index."""
    logits = predict(model, ds.features)
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


# -- pruning ----------------------------------------------------------------

def prune_step(params: ModelParams, fraction: float) -> ModelParams:
    """Zero the globally smallest-magnitude `fraction` of still-unmasked weights.

    Returns a new ModelParams; masks only ever lose entries.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("prune fraction must lie in [0, 1)")
    out = params.copy()
    alive = [np.flatnonzero(m.ravel()) for m in out.masks]
    mags = np.concatenate([np.abs(w.ravel()[a]) for w, a in zip(out.weights, alive)]) \
        if alive else np.zeros(0)
    k = int(round(fraction * mags.size))
    if k == 0:
        return out
    drop = np.argsort(mags, kind="stable")[:k]
    offsets = np.cumsum([0] + [len(a) for a in alive])
    for li, (w, m, a) in enumerate(zip(out.weights, out.masks, alive)):
        sel = drop[(drop >= offsets[li]) & (drop < offsets[li + 1])] - offsets[li]
        flat = m.reshape(-1)
        flat[a[sel]] = 0
        w *= m
    return out


def compressed_description(net: NetworkDescription, params: ModelParams) -> NetworkDescription:
    """Annotate `net` with the masks' per-layer sparsity and the active bit widths."""
    out = net.with_sparsity(params.layer_sparsities())
    if params.quant.enabled:
        out = out.with_precision(params.quant.weight_bits, params.quant.act_bits)
    return out


# -- gradient verification --------------------------------------------------

def gradient_check(net: NetworkDescription, seed: int = 0, batch: int = 8, h: float = 1e-5,
                   mode: str = "eval", kink_margin: float = 1e-3, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central finite differences.

    Runs in float64 with dropout disabled. In eval mode BatchNorm uses random
    frozen running statistics; in train mode it uses batch statistics without
    updating the running ones. Samples with any ReLU pre-activation within
    `kink_margin` of zero are dropped. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    net = replace(net, layers=tuple(l for l in net.layers if l.kind != "dropout"))
    params = init_params(net, seed, dtype=np.float64)
    for i in range(len(params.bn_gamma)):
        d = params.bn_gamma[i].size
        params.bn_gamma[i] = rng.uniform(0.5, 1.5, d)
        params.bn_beta[i] = rng.normal(0, 0.1, d)
        params.bn_mean[i] = rng.normal(0, 0.5, d)
        params.bn_var[i] = rng.uniform(0.5, 2.0, d)
    for b in params.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    x = rng.standard_normal((batch * 4, net.input_dim))
    y = rng.integers(0, net.num_classes, len(x))
    if any(l.kind == "activation" and l.activation == "ReLU" for l in net.layers):
        cache: list = []
        forward(params, net, x, mode, cache=cache, update_stats=False)
        ok = np.ones(len(x), bool)
        for entry in cache:
            if entry[0] == "act" and entry[1] == "ReLU":
                ok &= np.all(np.abs(entry[2]) > kink_margin, axis=1)
        x, y = x[ok], y[ok]
    x, y = x[:batch], y[:batch]
    if len(x) == 0:
        raise ValueError("no samples away from ReLU kinks; raise batch or lower the margin")

    def loss_at() -> float:
        return loss_and_grads(params, net, x, y, net.l1, mode, update_stats=False)[0]

    _, grads = loss_and_grads(params, net, x, y, net.l1, mode, update_stats=False)
    worst = 0.0
    for name, p in params.trainable():
        g = grads[name]
        flat = p.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = loss_at()
            flat[j] = old - h
            down = loss_at()
            flat[j] = old
            num = (up - down) / (2 * h)
            ana = g.reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst


# -- persistence ------------------------------------------------------------

def _arrays(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, (w, b, m) in enumerate(zip(params.weights, params.biases, params.masks)):
        out += [(f"dense{i}.weight", w), (f"dense{i}.bias", b), (f"dense{i}.mask", m)]
    for i in range(len(params.bn_gamma)):
        out += [(f"bn{i}.gamma", params.bn_gamma[i]), (f"bn{i}.beta", params.bn_beta[i]),
                (f"bn{i}.running_mean", params.bn_mean[i]), (f"bn{i}.running_var", params.bn_var[i])]
    return out


def save_params(params: ModelParams, manifest_path: str | Path, extra: dict | None = None,
                bin_name: str | None = None) -> Path:
    """Write a JSON manifest plus a sidecar ``.bin`` of little-endian float32 arrays.

    Manifest keys: ``format``, ``version``, ``dtype`` ("<f4"), ``weights_file``
    (sidecar name, relative to the manifest), ``quant`` and ``arrays``, a list
    of ``{"name", "shape", "offset"}`` with byte offsets into the sidecar.
    Array names are ``dense{i}.weight|bias|mask`` and
    ``bn{i}.gamma|beta|running_mean|running_var``.
    """
    manifest_path = Path(manifest_path)
    bin_path = manifest_path.parent / bin_name if bin_name else manifest_path.with_suffix(".bin")
    arrays = _arrays(params)
    entries, offset = [], 0
    with bin_path.open("wb") as fh:
        for name, arr in arrays:
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += data.nbytes
    manifest = {
        "format": "hwnas-weights",
        "version": 1,
        "dtype": "<f4",
        "weights_file": bin_path.name,
        "quant": {"enabled": params.quant.enabled, "weight_bits": params.quant.weight_bits,
                  "act_bits": params.quant.act_bits},
        "arrays": entries,
        **(extra or {}),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_params(manifest_path: str | Path) -> tuple[ModelParams, dict]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    raw = (manifest_path.parent / manifest["weights_file"]).read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(raw, "<f4", count, e["offset"]).reshape(e["shape"]) \
            .astype(np.float32)
    q = manifest["quant"]
    p = ModelParams([], [], [], quant=QuantConfig(q["enabled"], q["weight_bits"], q["act_bits"]))
    i = 0
    while f"dense{i}.weight" in arrays:
        p.weights.append(arrays[f"dense{i}.weight"])
        p.biases.append(arrays[f"dense{i}.bias"])
        p.masks.append(arrays.get(f"dense{i}.mask", np.ones_like(p.weights[-1])))
        i += 1
    i = 0
    while f"bn{i}.gamma" in arrays:
        p.bn_gamma.append(arrays[f"bn{i}.gamma"])
        p.bn_beta.append(arrays[f"bn{i}.beta"])
        p.bn_mean.append(arrays[f"bn{i}.running_mean"])
        p.bn_var.append(arrays[f"bn{i}.running_var"])
        i += 1
    return p, manifest
