"""Small convolutional classifier over the descriptor lattice.

conv3x3(69->32) -> ReLU -> conv3x3(32->64) -> ReLU -> dropout
-> per-node dense(64->32) -> ReLU -> per-node dense(32->3) -> softmax

The dense layers act on every lattice node independently (1x1 maps), so
the network labels each superpixel whatever the lattice size.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import imaging
from .errors import DataError, FormatError

log = logging.getLogger(__name__)

PARAM_ORDER = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b")
N_CLASSES = 3
IGNORE = -1  # target value for nodes excluded from the loss
PROB_FLOOR = 1e-12


@dataclass
class CnnModel:
    params: dict = field(default_factory=dict)
    dropout: float = 0.5

    @classmethod
    def init(cls, n_in: int = 69, widths=(32, 64, 32), n_classes: int = N_CLASSES, seed: int = 0,
             dropout: float = 0.5) -> "CnnModel":
        """He-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        c1, c2, f1 = widths
        shapes = {
            "conv1.w": (3, 3, n_in, c1),
            "conv2.w": (3, 3, c1, c2),
            "fc1.w": (c2, f1),
            "fc2.w": (f1, n_classes),
        }
        params = {}
        for name in PARAM_ORDER:
            if name.endswith(".w"):
                shape = shapes[name]
                fan_in = int(np.prod(shape[:-1]))
                limit = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-limit, limit, size=shape)
            else:
                params[name] = np.zeros(shapes[name[:-2] + ".w"][-1])
        return cls(params, dropout)

    @classmethod
    def zeros_like(cls, other: "CnnModel") -> "CnnModel":
        return cls({k: np.zeros_like(v) for k, v in other.params.items()}, other.dropout)

    def copy(self) -> "CnnModel":
        return CnnModel({k: v.copy() for k, v in self.params.items()}, self.dropout)

    @property
    def n_inputs(self) -> int:
        return self.params["conv1.w"].shape[2]

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class ClassLattice:
    probs: np.ndarray  # (R, C, 3)

    @property
    def labels(self) -> np.ndarray:
        # argmax returns the first maximum, i.e. the smaller class on ties
        return np.argmax(self.probs, axis=-1)


# ---------------------------------------------------------------------------
# layers


@lru_cache(maxsize=32)
def _gather_index(r: int, c: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(r), np.arange(c), indexing="ij")
    ky, kx = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
    idx = (ys.reshape(-1, 1) + ky.reshape(1, -1)) * (c + 2) + xs.reshape(-1, 1) + kx.reshape(1, -1)
    return idx.reshape(-1)


def _patches(x: np.ndarray) -> np.ndarray:
    """(..., R, C, F) -> (..., R*C, 9*F) zero-padded 3x3 neighborhoods in (ky, kx, f) order."""
    *lead, r, c, f = x.shape
    xp = np.zeros((*lead, r + 2, c + 2, f))
    xp[..., 1:-1, 1:-1, :] = x
    cols = xp.reshape(*lead, (r + 2) * (c + 2), f)[..., _gather_index(r, c), :]
    return cols.reshape(*lead, r * c, 9 * f)


def _col2im(dcols: np.ndarray, r: int, c: int, f: int) -> np.ndarray:
    d = dcols.reshape(r, c, 3, 3, f)
    dxp = np.zeros((r + 2, c + 2, f))
    for ky in range(3):
        for kx in range(3):
            dxp[ky : ky + r, kx : kx + c] += d[:, :, ky, kx]
    return dxp[1:-1, 1:-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(model: CnnModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != model.n_inputs:
        raise DataError(f"lattice shape {x.shape} does not match model input depth {model.n_inputs}")
    return x


def _forward(model: CnnModel, x: np.ndarray, training: bool, rng) -> tuple[np.ndarray, dict]:
    p = model.params
    r, c, f = x.shape
    cols1 = _patches(x)
    z1 = cols1 @ p["conv1.w"].reshape(-1, p["conv1.w"].shape[-1]) + p["conv1.b"]
    a1 = np.maximum(z1, 0.0)
    cols2 = _patches(a1.reshape(r, c, -1))
    z2 = cols2 @ p["conv2.w"].reshape(-1, p["conv2.w"].shape[-1]) + p["conv2.b"]
    a2 = np.maximum(z2, 0.0)
    mask = None
    if training and model.dropout > 0:
        keep = 1.0 - model.dropout
        mask = (rng.random(a2.shape) < keep) / keep
        a2 = a2 * mask
    z3 = a2 @ p["fc1.w"] + p["fc1.b"]
    a3 = np.maximum(z3, 0.0)
    logits = a3 @ p["fc2.w"] + p["fc2.b"]
    cache = dict(shape=(r, c, f), cols1=cols1, z1=z1, cols2=cols2, z2=z2, mask=mask, a2=a2, z3=z3, a3=a3)
    return logits, cache


def forward(model: CnnModel, x: np.ndarray, training: bool = False, seed=None) -> ClassLattice:
    """Class probabilities for every lattice node."""
    x = _check_input(model, x)
    rng = None
    if training and model.dropout > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    logits, _ = _forward(model, x, training, rng)
    r, c, _ = x.shape
    return ClassLattice(softmax(logits).reshape(r, c, -1))


def loss(lattice: ClassLattice, targets: np.ndarray) -> float:
    """Mean cross-entropy over nodes whose target is not ``IGNORE``."""
    probs = lattice.probs.reshape(-1, lattice.probs.shape[-1])
    t = np.asarray(targets).reshape(-1)
    valid = t != IGNORE
    if not valid.any():
        return 0.0
    picked = probs[np.flatnonzero(valid), t[valid]]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def loss_and_grad(model: CnnModel, x: np.ndarray, targets: np.ndarray, training: bool = False,
                  rng=None) -> tuple[float, dict]:
    """Loss and exact parameter gradients for one lattice."""
    x = _check_input(model, x)
    if rng is None:
        rng = np.random.default_rng(0)
    p = model.params
    logits, cache = _forward(model, x, training, rng)
    probs = softmax(logits)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != probs.shape[0]:
        raise DataError(f"targets cover {t.shape[0]} nodes, lattice has {probs.shape[0]}")
    valid = t != IGNORE
    n = int(valid.sum())
    grads = {}
    if n == 0:
        return 0.0, {k: np.zeros_like(v) for k, v in p.items()}
    idx = np.flatnonzero(valid)
    value = float(np.mean(-np.log(np.maximum(probs[idx, t[valid]], PROB_FLOOR))))

    dlogits = np.zeros_like(probs)
    dlogits[idx] = probs[idx]
    dlogits[idx, t[valid]] -= 1.0
    dlogits /= n

    grads["fc2.w"] = cache["a3"].T @ dlogits
    grads["fc2.b"] = dlogits.sum(axis=0)
    dz3 = (dlogits @ p["fc2.w"].T) * (cache["z3"] > 0)
    grads["fc1.w"] = cache["a2"].T @ dz3
    grads["fc1.b"] = dz3.sum(axis=0)
    da2 = dz3 @ p["fc1.w"].T
    if cache["mask"] is not None:
        da2 = da2 * cache["mask"]
    dz2 = da2 * (cache["z2"] > 0)
    w2 = p["conv2.w"]
    grads["conv2.w"] = (cache["cols2"].T @ dz2).reshape(w2.shape)
    grads["conv2.b"] = dz2.sum(axis=0)
    r, c, _ = cache["shape"]
    da1 = _col2im(dz2 @ w2.reshape(-1, w2.shape[-1]).T, r, c, w2.shape[2])
    dz1 = da1.reshape(r * c, -1) * (cache["z1"] > 0)
    w1 = p["conv1.w"]
    grads["conv1.w"] = (cache["cols1"].T @ dz1).reshape(w1.shape)
    grads["conv1.b"] = dz1.sum(axis=0)
    return value, {k: grads[k] for k in PARAM_ORDER}


def backward(model: CnnModel, x: np.ndarray, targets: np.ndarray) -> dict:
    """Gradients of the (dropout-free) loss with respect to every parameter."""
    return loss_and_grad(model, x, targets, training=False)[1]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainParams:
    lr: float = 0.01
    epochs: int = 200
    batch: int = 1
    seed: int = 0
    dropout: float = 0.5
    momentum: float = 0.9


def accuracy(model: CnnModel, dataset) -> float:
    hits = total = 0
    for x, t in dataset:
        t = np.asarray(t).reshape(-1)
        pred = forward(model, x).labels.reshape(-1)
        valid = t != IGNORE
        hits += int((pred[valid] == t[valid]).sum())
        total += int(valid.sum())
    return hits / total if total else 0.0


def train(dataset, hp: TrainParams = TrainParams(), model: CnnModel | None = None, widths=(32, 64, 32),
          history: list | None = None) -> CnnModel:
    """Mini-batch SGD with momentum on (lattice, targets) pairs.

    ``history`` receives one ``(epoch, mean_loss, sp_accuracy)`` row per
    epoch; accuracy is measured in inference mode after the epoch.
    """
    dataset = list(dataset)
    if not dataset:
        raise DataError("training set is empty")
    if hp.batch < 1 or hp.epochs < 0:
        raise DataError("batch must be >= 1 and epochs >= 0")
    rng = np.random.default_rng(hp.seed)
    if model is None:
        model = CnnModel.init(n_in=dataset[0][0].shape[-1], widths=widths, seed=hp.seed, dropout=hp.dropout)
    else:
        model = model.copy()
        model.dropout = hp.dropout
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), hp.batch):
            batch = order[start : start + hp.batch]
            total = {k: np.zeros_like(v) for k, v in model.params.items()}
            for i in batch:
                x, t = dataset[i]
                value, grads = loss_and_grad(model, x, t, training=True, rng=rng)
                losses.append(value)
                for k in total:
                    total[k] += grads[k]
            for k, v in model.params.items():
                velocity[k] *= hp.momentum
                velocity[k] -= hp.lr * total[k] / len(batch)
                v += velocity[k]
                if not np.all(np.isfinite(v)):
                    raise FloatingPointError(f"non-finite values in {k} at epoch {epoch}")
        mean_loss = float(np.mean(losses))
        acc = accuracy(model, dataset)
        log.debug("epoch %d loss %.5f acc %.4f", epoch, mean_loss, acc)
        if history is not None:
            history.append((epoch, mean_loss, acc))
    return model


def write_history(history, path) -> None:
    lines = ["epoch,mean_loss,sp_accuracy"]
    lines += [f"{e},{l:.10g},{a:.10g}" for e, l, a in history]
    imaging._atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------------
# persistence

MAGIC = b"SPCNN1\0"


def save_model(model: CnnModel, path) -> None:
    out = bytearray(MAGIC)
    for name in PARAM_ORDER:
        arr = np.asarray(model.params[name], dtype=np.float64)
        enc = name.encode("ascii")
        out += struct.pack("<B", len(enc)) + enc
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f8").tobytes()
    imaging._atomic_write(Path(path), bytes(out))


def load_model(path, dropout: float = 0.5) -> CnnModel:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an SPCNN1 model")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated model file")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    params = {}
    for expected in PARAM_ORDER:
        (nlen,) = struct.unpack("<B", take(1))
        name = take(nlen).decode("ascii", errors="replace")
        if name != expected:
            raise FormatError(f"{path}: unexpected tensor {name!r}, expected {expected!r}")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return CnnModel(params, dropout)


# ---------------------------------------------------------------------------
# gradient check


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps structural zeros from dividing by 0."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


_LAYERS = (("conv1.w", "conv1.b"), ("conv2.w", "conv2.b"), ("fc1.w", "fc1.b"), ("fc2.w", "fc2.b"))


def _tail_losses(p: dict, level: int, z: np.ndarray, shape, targets: np.ndarray) -> np.ndarray:
    """Finish a forward pass from the pre-activation of layer ``level`` (0-3).

    ``z`` has a leading batch axis; returns the inference-mode loss per item.
    """
    r, c = shape
    for lvl in range(level, 3):
        a = np.maximum(z, 0.0)
        w, b = p[_LAYERS[lvl + 1][0]], p[_LAYERS[lvl + 1][1]]
        if lvl == 0:
            a = _patches(a.reshape(a.shape[0], r, c, -1))
        z = a @ w.reshape(-1, w.shape[-1]) + b
    probs = softmax(z)
    t = np.asarray(targets).reshape(-1)
    valid = np.flatnonzero(t != IGNORE)
    if valid.size == 0:
        return np.zeros(probs.shape[0])
    picked = probs[:, valid, t[valid]]
    return np.mean(-np.log(np.maximum(picked, PROB_FLOOR)), axis=1)


def numeric_gradient(model: CnnModel, x: np.ndarray, targets: np.ndarray, h: float = 1e-5,
                     chunk: int = 256) -> dict:
    """Central finite differences of the inference-mode loss, every parameter.

    A perturbed weight only changes its own layer's pre-activation, and
    that change is exactly ``h`` times the matching input column, so each
    perturbed model is evaluated from that layer onward.  ``chunk`` models
    are evaluated together.
    """
    x = _check_input(model, x)
    p = model.params
    r, c, _ = x.shape
    _, cache = _forward(model, x, False, None)
    inputs = (cache["cols1"], cache["cols2"], cache["a2"], cache["a3"])
    pre = (cache["z1"], cache["z2"], cache["z3"], None)
    out = {}
    for level, (wname, bname) in enumerate(_LAYERS):
        inp = inputs[level]
        w = p[wname]
        n_out = w.shape[-1]
        z = pre[level] if pre[level] is not None else inp @ w.reshape(-1, n_out) + p[bname]
        for name in (wname, bname):
            size = p[name].size
            g = np.zeros(size)
            for start in range(0, size, chunk):
                idx = np.arange(start, min(start + chunk, size))
                if name == wname:
                    k, o = np.divmod(idx, n_out)
                    col = inp[:, k].T  # (B, N)
                else:
                    o = idx
                    col = np.ones((idx.size, z.shape[0]))
                delta = np.zeros((idx.size,) + z.shape)
                delta[np.arange(idx.size), :, o] = col
                up = _tail_losses(p, level, z[None] + h * delta, (r, c), targets)
                down = _tail_losses(p, level, z[None] - h * delta, (r, c), targets)
                g[idx] = (up - down) / (2 * h)
            out[name] = g.reshape(p[name].shape)
    return {k: out[k] for k in PARAM_ORDER}


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    per_param: dict

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def random_problem(seed: int, rows: int = 4, cols: int = 4, n_in: int = 69, widths=(32, 64, 32)):
    rng = np.random.default_rng(seed)
    model = CnnModel.init(n_in=n_in, widths=widths, seed=seed, dropout=0.0)
    for k, v in model.params.items():
        if k.endswith(".b"):
            v[:] = rng.normal(0, 0.1, size=v.shape)
    x = rng.random((rows, cols, n_in))
    targets = rng.integers(0, N_CLASSES, size=(rows, cols))
    targets[rng.random((rows, cols)) < 0.1] = IGNORE
    return model, x, targets


def gradcheck(seed: int, rows: int = 4, cols: int = 4, h: float = 1e-5, backward_fn=None) -> GradCheckResult:
    """Compare backpropagated gradients with central differences on a random problem."""
    model, x, targets = random_problem(seed, rows, cols)
    analytic = (backward_fn or backward)(model, x, targets)
    numeric = numeric_gradient(model, x, targets, h)
    worst = (-1.0, "", ())
    per = {}
    for name in PARAM_ORDER:
        err = relative_error(analytic[name], numeric[name])
        i = int(np.argmax(err))
        per[name] = float(err.flat[i])
        if err.flat[i] > worst[0]:
            worst = (float(err.flat[i]), name, np.unravel_index(i, err.shape))
    return GradCheckResult(worst[0], worst[1], tuple(int(v) for v in worst[2]), per)
