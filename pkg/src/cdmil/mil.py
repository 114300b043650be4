"""Multi-view gated-attention MIL classifier in plain numpy.

Per view k and real instance i::

    h_i^k = sigmoid(W_g^k x_i) * tanh(W_f^k x_i) * p_i
    h^k   = sum_i mask_i h_i^k
    h     = mean_k h^k
    z'    = tanh(W_z z)
    v     = relu(W_c [h; z'])          (dropout on v while training)
    probs = softmax(W_o v)

There are no bias terms.  Gradients are written out by hand for this fixed
graph; ``tests/test_gradients.py`` checks them against finite differences.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .embedding import BagBatch, EmbeddedBag
from .exceptions import DivergedLoss, NonFiniteActivation, ShapeMismatch

PARAM_NAMES = ("W_g", "W_f", "W_z", "W_c", "W_o")
LOG_CLAMP = 1e-12


@dataclass
class ModelParams:
    W_g: np.ndarray  # (K, d_h, d_e)
    W_f: np.ndarray  # (K, d_h, d_e)
    W_z: np.ndarray  # (d_h, d_e)
    W_c: np.ndarray  # (d_h, 2 d_h)
    W_o: np.ndarray  # (C, d_h)

    def __post_init__(self):
        K, d_h, d_e = self.W_g.shape
        C = self.W_o.shape[0]
        expected = {
            "W_g": (K, d_h, d_e),
            "W_f": (K, d_h, d_e),
            "W_z": (d_h, d_e),
            "W_c": (d_h, 2 * d_h),
            "W_o": (C, d_h),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dims(self) -> dict:
        K, d_h, d_e = self.W_g.shape
        return {"d_e": d_e, "d_h": d_h, "K": K, "C": self.W_o.shape[0]}

    @classmethod
    def init(cls, d_e=384, d_h=128, K=4, C=10, rng=None) -> "ModelParams":
        """Glorot-uniform weights, seeded through ``rng``."""
        rng = np.random.default_rng(rng)

        def glorot(shape):
            fan_out, fan_in = shape[-2], shape[-1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            glorot((K, d_h, d_e)),
            glorot((K, d_h, d_e)),
            glorot((d_h, d_e)),
            glorot((d_h, 2 * d_h)),
            glorot((C, d_h)),
        )

    @classmethod
    def zeros(cls, d_e=384, d_h=128, K=4, C=10) -> "ModelParams":
        return cls(
            np.zeros((K, d_h, d_e)),
            np.zeros((K, d_h, d_e)),
            np.zeros((d_h, d_e)),
            np.zeros((d_h, 2 * d_h)),
            np.zeros((C, d_h)),
        )

    def arrays(self):
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()))


@dataclass
class TrainConfig:
    lr0: float = 0.0005
    lr_decay: float = 0.00001
    lr_min: float = 0.00001
    batch_size: int = 32
    dropout: float = 0.5
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig | None = None) -> float:
    """Linear decay per (0-based) epoch, floored at ``lr_min``."""
    cfg = cfg or TrainConfig()
    # round away float noise so that e.g. epoch 49 gives exactly lr_min
    return max(round(cfg.lr0 - epoch * cfg.lr_decay, 12), cfg.lr_min)


def _as_arrays(batch):
    """Accept a BagBatch, a single EmbeddedBag, or a (z, X, mask, p) tuple."""
    if isinstance(batch, EmbeddedBag):
        return batch.z[None], batch.X[None], batch.mask[None], batch.p[None]
    if isinstance(batch, BagBatch):
        return batch.z, batch.X, batch.mask, batch.p
    if isinstance(batch, dict):
        return batch["z"], batch["X"], batch["mask"], batch["p"]
    z, X, mask, p = batch
    return z, X, mask, p


def check_bag_batch(batch, d_e: int | None = None):
    """Validate and return float arrays ``(z, X, mask, p)``.

    Shapes must agree, everything must be finite, the mask binary and the
    weights zero on padding rows.
    """
    z, X, mask, p = (np.asarray(a, dtype=np.float64) for a in _as_arrays(batch))
    if X.ndim != 3 or z.ndim != 2:
        raise ShapeMismatch(f"expected X (B,N,d) and z (B,d), got {X.shape} and {z.shape}")
    B, N, d = X.shape
    if z.shape != (B, d):
        raise ShapeMismatch(f"z has shape {z.shape}, expected {(B, d)}")
    if mask.shape != (B, N) or p.shape != (B, N):
        raise ShapeMismatch(f"mask/p must have shape {(B, N)}, got {mask.shape} and {p.shape}")
    if d_e is not None and d != d_e:
        raise ShapeMismatch(f"embedding dim {d} does not match model dim {d_e}")
    for name, arr in (("z", z), ("X", X), ("p", p)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite values")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    if np.any(p[mask == 0] != 0):
        raise ValueError("salience weights must be zero on padding rows")
    if np.any(p < 0):
        raise ValueError("salience weights must be non-negative")
    return z, X, mask, p


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Trace:
    z: np.ndarray
    X: np.ndarray
    mask: np.ndarray
    p: np.ndarray
    G: np.ndarray  # (B, N, K, d_h) sigmoid gate
    F: np.ndarray  # (B, N, K, d_h) tanh features
    z_proj: np.ndarray  # (B, d_h)
    u: np.ndarray  # (B, 2 d_h) = [h_multi ; z']
    a: np.ndarray  # (B, d_h) pre-ReLU
    v: np.ndarray  # (B, d_h) after ReLU and dropout
    drop: np.ndarray | None  # (B, d_h) inverted-dropout multiplier
    probs: np.ndarray
    params: ModelParams = field(repr=False)


def forward(params: ModelParams, batch, training: bool = False, rng=None, dropout: float = 0.5):
    """Class probabilities ``(B, C)`` and the trace needed by :func:`backward`."""
    z, X, mask, p = (np.asarray(a, dtype=np.float64) for a in _as_arrays(batch))
    K, d_h, d_e = params.W_g.shape
    if X.shape[-1] != d_e or z.shape[-1] != d_e:
        raise ShapeMismatch(f"inputs have dim {X.shape[-1]}, model expects {d_e}")

    B, N = mask.shape
    # all views in one GEMM: (B*N, d_e) x (d_e, K*d_h)
    X2 = X.reshape(B * N, d_e)
    G = _sigmoid(X2 @ params.W_g.reshape(K * d_h, d_e).T).reshape(B, N, K, d_h)
    F = np.tanh(X2 @ params.W_f.reshape(K * d_h, d_e).T).reshape(B, N, K, d_h)
    w = (p * mask)[:, :, None, None]
    h_views = (G * F * w).sum(axis=1)  # (B, K, d_h)
    h_multi = h_views.mean(axis=1)
    z_proj = np.tanh(z @ params.W_z.T)
    u = np.concatenate([h_multi, z_proj], axis=1)
    a = u @ params.W_c.T
    v = np.maximum(a, 0.0)
    drop = None
    if training and dropout > 0:
        rng = np.random.default_rng(rng)
        keep = 1.0 - dropout
        drop = (rng.random(v.shape) < keep) / keep
        v = v * drop
    logits = v @ params.W_o.T
    probs = _softmax(logits)
    if not np.all(np.isfinite(probs)):
        raise NonFiniteActivation("non-finite activations in forward pass")
    return probs, Trace(z, X, mask, p, G, F, z_proj, u, a, v, drop, probs, params)


def loss(probs, y):
    """Cross-entropy ``-sum_c y_c log(probs_c)``; per row for 2-d input."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(np.maximum(probs, LOG_CLAMP))).sum(axis=-1)


def backward(trace: Trace, y) -> ModelParams:
    """Gradient of the summed batch loss with respect to every weight matrix."""
    params = trace.params
    y = np.asarray(y, dtype=np.float64).reshape(trace.probs.shape)
    K, d_h, _ = params.W_g.shape

    d_logits = trace.probs - y  # (B, C)
    gW_o = d_logits.T @ trace.v
    d_v = d_logits @ params.W_o
    if trace.drop is not None:
        d_v = d_v * trace.drop
    d_a = d_v * (trace.a > 0)
    gW_c = d_a.T @ trace.u
    d_u = d_a @ params.W_c
    d_h_multi, d_zp = d_u[:, :d_h], d_u[:, d_h:]

    d_zpre = d_zp * (1.0 - trace.z_proj**2)
    gW_z = d_zpre.T @ trace.z

    # every view receives 1/K of the pooled gradient, spread over real instances
    B, N, _, _ = trace.G.shape
    d_e = trace.X.shape[-1]
    w = (trace.p * trace.mask)[:, :, None, None]
    d_hi = (d_h_multi / K)[:, None, None, :] * w  # (B, N, 1, d_h)
    d_gpre = (d_hi * trace.F * trace.G * (1.0 - trace.G)).reshape(B * N, K * d_h)
    d_fpre = (d_hi * trace.G * (1.0 - trace.F**2)).reshape(B * N, K * d_h)
    X2 = trace.X.reshape(B * N, d_e)
    gW_g = (d_gpre.T @ X2).reshape(K, d_h, d_e)
    gW_f = (d_fpre.T @ X2).reshape(K, d_h, d_e)
    return ModelParams(gW_g, gW_f, gW_z, gW_c, gW_o)


def predict(params: ModelParams, batch):
    """Argmax class (lowest index on ties) and the probabilities."""
    probs, _ = forward(params, batch, training=False)
    return probs.argmax(axis=1), probs


class Adam:
    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name in PARAM_NAMES:
            g = getattr(grads, name)
            m = getattr(self.m, name)
            v = getattr(self.v, name)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            getattr(params, name)[...] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EarlyStopping:
    """Stop once the monitored loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _one_hot(y, C):
    y = np.asarray(y)
    if y.ndim == 2:
        return y.astype(np.float64)
    out = np.zeros((len(y), C))
    out[np.arange(len(y)), y.astype(int)] = 1.0
    return out


def mean_loss(params: ModelParams, batch, Y, chunk: int = 512) -> float:
    z, X, mask, p = _as_arrays(batch)
    total = 0.0
    for s in range(0, len(z), chunk):
        sl = slice(s, s + chunk)
        probs, _ = forward(params, (z[sl], X[sl], mask[sl], p[sl]))
        total += loss(probs, Y[sl]).sum()
    return total / len(z)


def train(
    params0: ModelParams,
    train_data,
    y_train,
    val_data,
    y_val,
    cfg: TrainConfig | None = None,
    on_epoch: Callable[[int, ModelParams], None] | None = None,
):
    """Mini-batch Adam with the linear LR schedule and early stopping on
    validation loss.  Returns the parameters of the best validation epoch and
    the per-epoch history (``epoch, lr, train_loss, val_loss``)."""
    cfg = cfg or TrainConfig()
    C = params0.W_o.shape[0]
    z, X, mask, p = _as_arrays(train_data)
    n = len(z)
    if n == 0 or len(_as_arrays(val_data)[0]) == 0:
        raise ValueError("train and validation sets must be non-empty")
    Y = _one_hot(y_train, C)
    Yv = _one_hot(y_val, C)
    rng = np.random.default_rng(cfg.seed)
    params = params0.copy()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    stopper = EarlyStopping(cfg.patience)
    best = params.copy()
    history = []
    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        running = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            probs, trace = forward(params, (z[idx], X[idx], mask[idx], p[idx]), True, rng, cfg.dropout)
            batch_loss = loss(probs, Y[idx]).sum()
            if not math.isfinite(batch_loss):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}")
            running += batch_loss
            grads = backward(trace, Y[idx])
            for name in PARAM_NAMES:
                getattr(grads, name)[...] /= len(idx)
            opt.step(params, grads, lr)
        val_loss = mean_loss(params, val_data, Yv)
        history.append({"epoch": epoch, "lr": lr, "train_loss": running / n, "val_loss": val_loss})
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best = params.copy()
        # a truthy callback result ends training early
        if on_epoch is not None and on_epoch(epoch, params):
            stop = True
        if stop:
            break
    return best, history


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"MVGMIL01"


def save_checkpoint(path, params: ModelParams, seed: int = 0, epoch: int = 0) -> None:
    """Header (magic, d_e, d_h, K, C, seed, epoch as int32) then float32
    matrices W_g, W_f, W_z, W_c, W_o in row-major order."""
    dims = params.dims
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<6i", dims["d_e"], dims["d_h"], dims["K"], dims["C"], seed, epoch))
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    d_e, d_h, K, C, seed, epoch = struct.unpack_from("<6i", data, 8)
    shapes = [(K, d_h, d_e), (K, d_h, d_e), (d_h, d_e), (d_h, 2 * d_h), (C, d_h)]
    off = 8 + 24
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float64))
        off += 4 * count
    if off != len(data):
        raise ValueError(f"{path}: unexpected trailing bytes")
    return ModelParams(*arrays), {"d_e": d_e, "d_h": d_h, "K": K, "C": C, "seed": seed, "epoch": epoch}


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "val_loss"])
        for row in history:
            w.writerow([row["epoch"], repr(row["lr"]), repr(row["train_loss"]), repr(row["val_loss"])])


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------


class MultiViewGatedMIL(ClassifierMixin, BaseEstimator):
    """scikit-learn classifier over :class:`BagBatch` inputs.

    ``fit`` carves a stratified validation split out of the training data
    (``validation_fraction``) unless ``X_val``/``y_val`` are passed.

    Parameters mirror :class:`TrainConfig` plus the network sizes.
    """

    def __init__(
        self,
        n_views=4,
        hidden_dim=128,
        n_classes=None,
        learning_rate=0.0005,
        lr_decay=0.00001,
        lr_min=0.00001,
        batch_size=32,
        dropout=0.5,
        patience=10,
        max_epochs=200,
        validation_fraction=0.1,
        random_state=0,
    ):
        self.n_views = n_views
        self.hidden_dim = hidden_dim
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.lr_min = lr_min
        self.batch_size = batch_size
        self.dropout = dropout
        self.patience = patience
        self.max_epochs = max_epochs
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.learning_rate,
            lr_decay=self.lr_decay,
            lr_min=self.lr_min,
            batch_size=self.batch_size,
            dropout=self.dropout,
            patience=self.patience,
            max_epochs=self.max_epochs,
            seed=int(self.random_state or 0),
        )

    def _encode(self, y):
        y = np.asarray(y)
        pos = np.searchsorted(self.classes_, y)
        pos = np.clip(pos, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[pos] == y):
            raise ValueError("y contains labels not seen in classes_")
        return pos

    def fit(self, X, y, X_val=None, y_val=None, on_epoch=None):
        z, Xi, mask, p = check_bag_batch(X)
        y = np.asarray(y)
        if y.shape[0] != z.shape[0]:
            raise ValueError(f"X has {z.shape[0]} bags but y has {y.shape[0]} labels")
        if self.n_classes is not None:
            self.classes_ = np.arange(int(self.n_classes))
        else:
            self.classes_ = np.unique(y)
        yi = self._encode(y)
        if X_val is None:
            from sklearn.model_selection import train_test_split

            idx = np.arange(len(yi))
            counts = np.bincount(yi)
            strat = yi if counts[counts > 0].min() >= 2 else None
            tr, va = train_test_split(
                idx, test_size=self.validation_fraction, random_state=self.random_state, stratify=strat
            )
            train_data = (z[tr], Xi[tr], mask[tr], p[tr])
            val_data = (z[va], Xi[va], mask[va], p[va])
            y_tr, y_va = yi[tr], yi[va]
        else:
            train_data = (z, Xi, mask, p)
            val_data = check_bag_batch(X_val, d_e=z.shape[1])
            y_tr, y_va = yi, self._encode(y_val)

        rng = np.random.default_rng(self.random_state)
        params0 = ModelParams.init(z.shape[1], self.hidden_dim, self.n_views, len(self.classes_), rng)
        self.params_, self.history_ = train(params0, train_data, y_tr, val_data, y_va, self._train_config(), on_epoch)
        self.best_epoch_ = min(self.history_, key=lambda r: r["val_loss"])["epoch"]
        self.n_iter_ = len(self.history_)
        self.n_features_in_ = z.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        probs, _ = forward(self.params_, check_bag_batch(X, d_e=self.n_features_in_))
        return probs

    def predict(self, X):
        probs = self.predict_proba(X)
        return self.classes_[probs.argmax(axis=1)]

    def save(self, path):
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, int(self.random_state or 0), int(self.best_epoch_))

    def _more_tags(self):
        return {"X_types": ["bags"], "requires_y": True}
