"""Student switching policy: a one-hidden-layer ReLU classifier over the 6 features.

Everything is plain numpy: forward pass, hand-derived backprop through
softmax cross-entropy, and Adam.  Weights are float32; inputs are
standardized with a normalizer stored alongside the weights.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from fcdistill._backend import kernels
from fcdistill.converter import BOOST

logger = logging.getLogger(__name__)

N_FEATURES = 6
N_CLASSES = 4
MODEL_MAGIC = b"FCMLP"
MODEL_VERSION = 1


_BOUND = ("w1", "b1", "w2", "b2", "mean", "std")


class TrainingError(FloatingPointError):
    pass


@dataclass
class MlpModel:
    w1: np.ndarray  # (hidden, 6)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (4, hidden)
    b2: np.ndarray  # (4,)
    mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    std: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))
    mode_names: tuple[str, ...] = BOOST.mode_names

    def __post_init__(self):
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        self.std = np.ascontiguousarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("normalizer std must be positive")

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def dtype(self):
        return self.w1.dtype

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "MlpModel":
        return replace(self, **{k: v.copy() for k, v in self.params().items()},
                       mean=self.mean.copy(), std=self.std.copy())

    def astype(self, dtype) -> "MlpModel":
        return replace(self, **{k: np.ascontiguousarray(v, dtype=dtype)
                                for k, v in self.params().items()})

    def __setattr__(self, name, value):
        # rebinding a weight array invalidates the bound kernel
        if name in _BOUND:
            object.__setattr__(self, "_kernel", None)
        object.__setattr__(self, name, value)

    def decision_kernel(self):
        """Bare ``z -> mode`` callable (float32 models only)."""
        k = self.__dict__.get("_kernel")
        if k is None:
            k = kernels.MlpPolicy(self.mean, self.std, self.w1, self.b1, self.w2, self.b2)
            object.__setattr__(self, "_kernel", k)
        return k

    def refresh(self) -> None:
        """Drop the cached decision kernel after editing weights in place."""
        object.__setattr__(self, "_kernel", None)

    def __call__(self, z: Sequence[float]) -> int:
        """Switching-policy interface: feature vector -> mode index.

        Float32 models go through a kernel holding a snapshot of the weights
        (see ``refresh``); float64 models use ``predict_mode``.
        """
        k = self.__dict__.get("_kernel")
        if k is None:
            if self.w1.dtype != np.float32:
                return predict_mode(self, z)
            k = self.decision_kernel()
        return k(z)

    def __getstate__(self):
        d = dict(self.__dict__)
        d.pop("_kernel", None)
        return d

    def save(self, path) -> None:
        Path(path).write_bytes(model_to_bytes(self))

    @classmethod
    def load(cls, path) -> "MlpModel":
        return model_from_bytes(Path(path).read_bytes())


def init_model(hidden: int = 128, seed: int = 0, mean=None, std=None,
               mode_names: tuple[str, ...] = BOOST.mode_names,
               dtype=np.float32) -> MlpModel:
    """He-style uniform fan-in initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    w1, b1 = _init_layer(rng, N_FEATURES, hidden, dtype)
    w2, b2 = _init_layer(rng, hidden, N_CLASSES, dtype)
    return MlpModel(w1, b1, w2, b2,
                    np.zeros(N_FEATURES) if mean is None else mean,
                    np.ones(N_FEATURES) if std is None else std,
                    tuple(mode_names))


def _init_layer(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
    return np.ascontiguousarray(w), np.zeros(fan_out, dtype=dtype)


def normalizer(z: np.ndarray, min_std: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    mean = z.mean(axis=0)
    std = z.std(axis=0)
    std[std < min_std] = 1.0
    return mean, std


def _normalize(model: MlpModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite feature vector")
    return ((z - model.mean) / model.std).astype(model.dtype)


def logits(model: MlpModel, z) -> np.ndarray:
    zn = _normalize(model, z)
    h = np.maximum(zn @ model.w1.T + model.b1, 0)
    return h @ model.w2.T + model.b2


def _softmax(a: np.ndarray) -> np.ndarray:
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: MlpModel, z) -> np.ndarray:
    """Class probabilities; a single vector or a ``(n, 6)`` batch."""
    return _softmax(logits(model, z))


def predict_mode(model: MlpModel, z):
    """Argmax class; ties resolve to the lowest index (fixed mode order)."""
    out = np.argmax(logits(model, z), axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def accuracy(model: MlpModel, z, y, batch: int = 65536) -> float:
    if len(y) == 0:
        return float("nan")
    hits = 0
    for s in range(0, len(y), batch):
        hits += int(np.count_nonzero(predict_mode(model, z[s:s + batch]) == y[s:s + batch]))
    return hits / len(y)


def loss_and_grad(model: MlpModel, z, y, alpha) -> tuple[float, dict[str, np.ndarray]]:
    """Class-weighted cross-entropy ``mean_i(-alpha[y_i] * log p[y_i])`` and its gradient.

    The log-probabilities come from a max-shifted log-sum-exp so they never
    underflow.  ReLU's subgradient at zero is taken as zero.
    """
    dt = model.dtype
    y = np.asarray(y, dtype=np.int64)
    alpha = np.asarray(alpha, dtype=dt)
    if alpha.shape != (N_CLASSES,) or np.any(alpha <= 0):
        raise ValueError("alpha must hold 4 positive class weights")
    n = len(y)
    zn = _normalize(model, z)
    a1 = zn @ model.w1.T + model.b1
    h = np.maximum(a1, 0)
    out = h @ model.w2.T + model.b2
    shifted = out - out.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    w = alpha[y]
    loss = float(-np.sum(w * logp[rows, y]) / n)

    dout = np.exp(logp)
    dout[rows, y] -= 1
    dout *= (w / dt.type(n))[:, None]
    grads = {
        "w2": dout.T @ h,
        "b2": dout.sum(axis=0),
    }
    dh = dout @ model.w2
    da1 = dh * (a1 > 0)
    grads["w1"] = da1.T @ zn
    grads["b1"] = da1.sum(axis=0)
    return loss, grads


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update of ``params``."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2048
    epochs: int = 260
    class_weights: tuple[float, ...] | None = None  # None: inverse frequency of the train set
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    allow_empty_classes: bool = False

    def __post_init__(self):
        if not self.lr > 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need lr > 0, batch_size >= 1, epochs >= 0")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


def _eval_loss(model, z, y, alpha, batch=65536) -> float:
    if len(y) == 0:
        return float("nan")
    total = 0.0
    for s in range(0, len(y), batch):
        zb, yb = z[s:s + batch], y[s:s + batch]
        shifted = logits(model, zb).astype(np.float64)
        shifted -= shifted.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        total += float(-np.sum(alpha[yb] * logp[np.arange(len(yb)), yb]))
    return total / len(y)


def train(model: MlpModel, train_set, val_set=None, cfg: TrainConfig | None = None,
          eval_every: int = 1) -> tuple[MlpModel, list[EpochStats]]:
    """Minibatch Adam on the class-weighted loss; returns the last-epoch model.

    ``train_set``/``val_set`` expose ``z`` (n, 6) and ``y`` (n,) arrays.
    The input model is not modified.
    """
    from fcdistill.dataset import class_weights

    cfg = cfg or TrainConfig()
    z, y = np.asarray(train_set.z), np.asarray(train_set.y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty training set")
    alpha = np.asarray(cfg.class_weights if cfg.class_weights is not None
                       else class_weights(np.bincount(y, minlength=N_CLASSES), cfg.allow_empty_classes),
                       dtype=np.float64)
    model = model.copy()
    if cfg.epochs == 0:
        return model, []
    params = model.params()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for b, s in enumerate(range(0, len(y), cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            loss, grads = loss_and_grad(model, z[idx], y[idx], alpha)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.step(params, grads)
            total += loss * len(idx)
        last = epoch == cfg.epochs - 1
        if eval_every and ((epoch + 1) % eval_every == 0 or last):
            st = EpochStats(epoch + 1, total / len(y), accuracy(model, z, y),
                            _eval_loss(model, val_set.z, val_set.y, alpha) if val_set is not None else float("nan"),
                            accuracy(model, val_set.z, val_set.y) if val_set is not None else float("nan"))
            history.append(st)
            logger.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f", st.epoch,
                        st.train_loss, st.train_acc, st.val_loss, st.val_acc)
    return model, history


def write_history(history: Sequence[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for h in history:
            w.writerow([h.epoch, h.train_loss, h.train_acc, h.val_loss, h.val_acc])


def model_to_bytes(model: MlpModel) -> bytes:
    """Little-endian container: header, shapes, mode names, normalizer (f64), weights (f32)."""
    m = model.astype(np.float32)
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<HIII", MODEL_VERSION, N_FEATURES, m.hidden, N_CLASSES))
    for name in m.mode_names:
        raw = name.encode("ascii")
        buf.write(struct.pack("<B", len(raw)) + raw)
    buf.write(m.mean.astype("<f8").tobytes())
    buf.write(m.std.astype("<f8").tobytes())
    for arr in (m.w1, m.b1, m.w2, m.b2):
        buf.write(arr.astype("<f4").tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes) -> MlpModel:
    if data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ValueError("not a model file")
    pos = len(MODEL_MAGIC)
    version, n_in, hidden, n_out = struct.unpack_from("<HIII", data, pos)
    pos += struct.calcsize("<HIII")
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    if n_in != N_FEATURES or n_out != N_CLASSES:
        raise ValueError(f"unexpected layer shapes {n_in}x{hidden}x{n_out}")
    names = []
    for _ in range(n_out):
        (k,) = struct.unpack_from("<B", data, pos)
        names.append(data[pos + 1:pos + 1 + k].decode("ascii"))
        pos += 1 + k

    def take(count, dtype):
        nonlocal pos
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        return arr.astype(dtype[1:] if dtype.startswith("<") else dtype)

    mean, std = take(n_in, "<f8"), take(n_in, "<f8")
    w1 = take(hidden * n_in, "<f4").reshape(hidden, n_in)
    b1 = take(hidden, "<f4")
    w2 = take(n_out * hidden, "<f4").reshape(n_out, hidden)
    b2 = take(n_out, "<f4")
    return MlpModel(np.ascontiguousarray(w1), b1.copy(), np.ascontiguousarray(w2), b2.copy(),
                    mean, std, tuple(names))
