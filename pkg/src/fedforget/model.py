"""The 196-16C_4M_1024D activity classifier with hand-written backprop.

Layer pipeline for a batch ``x`` of shape ``[B, 128, 6]``::

    conv1d (196 filters, kernel 16, stride 1, valid) + bias -> ReLU   [B, 113, 196]
    max-pool (window 4, stride 4, first max wins)                     [B, 28, 196]
    flatten, time-major: index = t * 196 + f                          [B, 5488]
    dense 1024 + ReLU -> inverted dropout (train mode only)           [B, 1024]
    dense 6 (logits)                                                  [B, 6]

The network sizes are read from the parameter shapes, so the same code
runs the reduced architectures used for gradient checks.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Rng, check_finite, check_shape, derive
from .dataset import N_CHANNELS, N_CLASSES, WINDOW, Dataset
from .errors import CheckpointCorrupt, EmptyDataset, IoFailure, ShapeMismatch

log = logging.getLogger(__name__)

N_FILTERS = 196
KERNEL = 16
POOL = 4
N_HIDDEN = 1024
PARAM_NAMES = ("conv_w", "conv_b", "fc1_w", "fc1_b", "out_w", "out_b")


@dataclass
class ModelParams:
    conv_w: np.ndarray  # [F, K, C]
    conv_b: np.ndarray  # [F]
    fc1_w: np.ndarray  # [H, F * P]
    fc1_b: np.ndarray  # [H]
    out_w: np.ndarray  # [6, H]
    out_b: np.ndarray  # [6]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()))

    def allclose(self, other: "ModelParams", **kw) -> bool:
        return all(np.allclose(a, b, **kw) for a, b in zip(self.arrays(), other.arrays()))

    def equal(self, other: "ModelParams") -> bool:
        return all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    @property
    def n_filters(self) -> int:
        return self.conv_w.shape[0]

    @property
    def kernel(self) -> int:
        return self.conv_w.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.fc1_w.shape[0]

    def validate(self, window: int = WINDOW, pool: int = POOL) -> None:
        f, k, c = self.conv_w.shape
        p = (window - k + 1) // pool
        h = self.fc1_w.shape[0]
        check_shape("conv_b", self.conv_b, (f,))
        check_shape("fc1_w", self.fc1_w, (h, f * p))
        check_shape("fc1_b", self.fc1_b, (h,))
        check_shape("out_w", self.out_w, (N_CLASSES, h))
        check_shape("out_b", self.out_b, (N_CLASSES,))
        for name, a in zip(PARAM_NAMES, self.arrays()):
            check_finite(name, a)


# gradients share the parameter layout
Gradients = ModelParams


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 0.01
    batch_size: int = 32
    dropout_rate: float = 0.5
    epochs: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def init_params(
    rng: Rng,
    n_filters: int = N_FILTERS,
    kernel: int = KERNEL,
    n_hidden: int = N_HIDDEN,
    window: int = WINDOW,
    channels: int = N_CHANNELS,
    pool: int = POOL,
) -> ModelParams:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases.

    Tensors are drawn in the fixed order conv_w, fc1_w, out_w from ``rng``.
    """
    flat = n_filters * ((window - kernel + 1) // pool)
    conv_fan = kernel * channels
    return ModelParams(
        conv_w=rng.normal((n_filters, kernel, channels), np.sqrt(2.0 / conv_fan)),
        conv_b=np.zeros(n_filters),
        fc1_w=rng.normal((n_hidden, flat), np.sqrt(2.0 / flat)),
        fc1_b=np.zeros(n_hidden),
        out_w=rng.normal((N_CLASSES, n_hidden), np.sqrt(2.0 / n_hidden)),
        out_b=np.zeros(N_CLASSES),
    )


# -- forward / backward --------------------------------------------------------

def _patches(x: np.ndarray, kernel: int) -> np.ndarray:
    # [B, T, C] -> [B, L, K * C] with column index k * C + c
    b, _, c = x.shape
    win = sliding_window_view(x, kernel, axis=1)  # [B, L, C, K]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(b, -1, kernel * c)


def forward(p: ModelParams, batch: np.ndarray, mode: str = "eval", rng: Rng | None = None,
            dropout_rate: float = 0.5):
    """Return ``(logits, cache)``; ``cache`` holds what :func:`backward` needs."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[2] != p.conv_w.shape[2] or batch.shape[1] < p.kernel:
        raise ShapeMismatch(f"batch shape {batch.shape} incompatible with conv_w {p.conv_w.shape}")
    n_f, k, _ = p.conv_w.shape
    bsz = batch.shape[0]

    cols = _patches(batch, k)
    length = cols.shape[1]
    n_pool = length // POOL
    if p.fc1_w.shape[1] != n_f * n_pool:
        raise ShapeMismatch(f"fc1_w expects {p.fc1_w.shape[1]} inputs, conv/pool yields {n_f * n_pool}")

    z1 = cols @ p.conv_w.reshape(n_f, -1).T + p.conv_b  # [B, L, F]
    a1 = np.maximum(z1, 0.0)
    windows = a1[:, : n_pool * POOL].reshape(bsz, n_pool, POOL, n_f)
    arg = windows.argmax(axis=2)  # first occurrence on ties
    pooled = np.take_along_axis(windows, arg[:, :, None, :], axis=2)[:, :, 0, :]
    flat = pooled.reshape(bsz, n_pool * n_f)

    z2 = flat @ p.fc1_w.T + p.fc1_b
    a2 = np.maximum(z2, 0.0)
    if mode == "train" and dropout_rate > 0:
        if rng is None:
            raise ValueError("train mode needs an rng for the dropout mask")
        keep = 1.0 - dropout_rate
        mask = rng.bernoulli_mask(a2.shape, keep) / keep
        h = a2 * mask
    else:
        mask = None
        h = a2
    logits = h @ p.out_w.T + p.out_b
    cache = dict(cols=cols, z1=z1, arg=arg, flat=flat, z2=z2, mask=mask, h=h,
                 shape=(bsz, length, n_pool, n_f))
    return logits, cache


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def backward(p: ModelParams, cache: dict, dlogits: np.ndarray) -> Gradients:
    bsz, length, n_pool, n_f = cache["shape"]
    h = cache["h"]
    g_out_w = dlogits.T @ h
    g_out_b = dlogits.sum(axis=0)

    dh = dlogits @ p.out_w
    if cache["mask"] is not None:
        dh = dh * cache["mask"]
    dz2 = dh * (cache["z2"] > 0)
    g_fc1_w = dz2.T @ cache["flat"]
    g_fc1_b = dz2.sum(axis=0)

    dpooled = (dz2 @ p.fc1_w).reshape(bsz, n_pool, 1, n_f)
    dwin = np.zeros((bsz, n_pool, POOL, n_f))
    np.put_along_axis(dwin, cache["arg"][:, :, None, :], dpooled, axis=2)
    da1 = np.zeros((bsz, length, n_f))
    da1[:, : n_pool * POOL] = dwin.reshape(bsz, n_pool * POOL, n_f)
    dz1 = da1 * (cache["z1"] > 0)

    dz1_flat = dz1.reshape(-1, n_f)
    g_conv_w = (dz1_flat.T @ cache["cols"].reshape(-1, cache["cols"].shape[2])).reshape(p.conv_w.shape)
    g_conv_b = dz1_flat.sum(axis=0)
    return Gradients(g_conv_w, g_conv_b, g_fc1_w, g_fc1_b, g_out_w, g_out_b)


def _check_labels(labels: np.ndarray, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    check_shape("labels", labels, (n,))
    if n == 0:
        raise EmptyDataset("batch is empty")
    if labels.min() < 0 or labels.max() >= N_CLASSES:
        raise ValueError("labels must lie in 0..5")
    return labels


def loss_and_grad(p: ModelParams, batch: np.ndarray, labels: np.ndarray, mode: str = "train",
                  rng: Rng | None = None, dropout_rate: float = 0.5):
    """Mean cross-entropy over the batch and its exact gradient.

    In train mode the dropout mask is drawn from ``rng``; passing an equal
    rng reproduces the same mask, which is what finite-difference checks
    rely on.
    """
    labels = _check_labels(labels, len(batch))
    logits, cache = forward(p, batch, mode, rng, dropout_rate)
    logp = log_softmax(logits)
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), backward(p, cache, dlogits)


def sgd_step(p: ModelParams, g: Gradients, lr: float) -> None:
    for a, ga in zip(p.arrays(), g.arrays()):
        a -= lr * ga


def train_epoch(p: ModelParams, data: Dataset, hp: HyperParams, rng: Rng, epoch: int) -> float:
    """One in-place SGD pass; returns the mean batch loss."""
    order = derive(derive(rng, 2), epoch).permutation(len(data))
    dropout = derive(derive(rng, 1), epoch)
    losses = []
    for b, start in enumerate(range(0, len(data), hp.batch_size)):
        idx = order[start : start + hp.batch_size]
        loss, g = loss_and_grad(p, data.signals[idx], data.labels[idx], "train",
                                derive(dropout, b), hp.dropout_rate)
        sgd_step(p, g, hp.learning_rate)
        losses.append(loss)
    return float(np.mean(losses))


def train(p: ModelParams, data: Dataset, hp: HyperParams, rng: Rng, losses: list | None = None) -> ModelParams:
    """Plain mini-batch SGD for ``hp.epochs`` epochs on a private copy of ``p``.

    Epoch ``e`` shuffles with ``derive(derive(rng, 2), e)`` and draws the
    dropout mask of batch ``b`` from ``derive(derive(derive(rng, 1), e), b)``.
    Per-epoch mean losses are appended to ``losses`` when given.
    """
    if len(data) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    p = p.copy()
    for epoch in range(hp.epochs):
        loss = train_epoch(p, data, hp, rng, epoch)
        if losses is not None:
            losses.append(loss)
    return p


def predict_logits(p: ModelParams, signals: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward(p, signals[i : i + batch_size], "eval")[0] for i in range(0, len(signals), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES))


def evaluate(p: ModelParams, data: Dataset) -> tuple[float, np.ndarray]:
    """Overall accuracy and per-class accuracy; absent classes come back as NaN."""
    if len(data) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    pred = predict_logits(p, data.signals).argmax(axis=1)
    correct = pred == data.labels
    counts = np.bincount(data.labels, minlength=N_CLASSES)
    hits = np.bincount(data.labels, weights=correct, minlength=N_CLASSES)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return float(correct.mean()), per_class


def extract_features(p: ModelParams, data: Dataset, layer: str = "penultimate",
                     batch_size: int = 256) -> np.ndarray:
    """Eval-mode activations: dense-1024 pre-ReLU (``penultimate``) or the logits."""
    if layer not in ("penultimate", "logits"):
        raise ValueError(f"unknown layer {layer!r}")
    if len(data) == 0:
        raise EmptyDataset("cannot extract features from an empty dataset")
    key = "z2" if layer == "penultimate" else None
    out = []
    for i in range(0, len(data), batch_size):
        logits, cache = forward(p, data.signals[i : i + batch_size], "eval")
        out.append(cache[key] if key else logits)
    return np.concatenate(out)


@dataclass
class BaseTrainingResult:
    params: ModelParams
    best_epoch: int
    history: list[dict]
    metrics: dict


def train_base(train_set: Dataset, val_set: Dataset, test_set: Dataset, hp: HyperParams,
               rng: Rng, max_epochs: int = 50) -> BaseTrainingResult:
    """Train from scratch, keeping the parameters with the best validation accuracy.

    Initialisation uses ``derive(rng, 0)`` and SGD uses ``derive(rng, 1)``.
    With ``max_epochs=0`` the result is the initialisation itself.
    """
    params = init_params(derive(rng, 0))
    best = params.copy()
    best_val, best_epoch = evaluate(params, val_set)[0], 0
    history = []
    sgd_rng = derive(rng, 1)
    for epoch in range(max_epochs):
        loss = train_epoch(params, train_set, hp, sgd_rng, epoch)
        val_acc = evaluate(params, val_set)[0]
        history.append({"epoch": epoch + 1, "loss": loss, "val": val_acc})
        log.info("epoch %d loss %.4f val %.4f", epoch + 1, loss, val_acc)
        if val_acc > best_val:
            best, best_val, best_epoch = params.copy(), val_acc, epoch + 1
    metrics = {
        "train": evaluate(best, train_set)[0],
        "val": evaluate(best, val_set)[0],
        "test": evaluate(best, test_set)[0],
        "best_epoch": best_epoch,
    }
    return BaseTrainingResult(best, best_epoch, history, metrics)


# -- checkpoint file -----------------------------------------------------------
#
# magic (8 bytes) | version u32 | tensor count u32
# per tensor: name length u8 | name ascii | ndim u32 | dims u32 * ndim
# then every tensor as little-endian float64, row-major, in PARAM_NAMES order

CKPT_MAGIC = b"FFCKPT\x00\x01"
CKPT_VERSION = 1


def save_checkpoint(path, p: ModelParams) -> None:
    header = bytearray(CKPT_MAGIC)
    header += struct.pack("<II", CKPT_VERSION, len(PARAM_NAMES))
    for name, a in zip(PARAM_NAMES, p.arrays()):
        header += struct.pack("<B", len(name)) + name.encode("ascii")
        header += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(header))
            for a in p.arrays():
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointCorrupt(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if blob[:8] != CKPT_MAGIC:
            raise CheckpointCorrupt(f"{path}: bad magic")
        version, count = struct.unpack_from("<II", blob, 8)
        if version != CKPT_VERSION or count != len(PARAM_NAMES):
            raise CheckpointCorrupt(f"{path}: unsupported version {version} / {count} tensors")
        off = 16
        shapes = []
        for expected in PARAM_NAMES:
            (nlen,) = struct.unpack_from("<B", blob, off)
            name = blob[off + 1 : off + 1 + nlen].decode("ascii")
            off += 1 + nlen
            if name != expected:
                raise CheckpointCorrupt(f"{path}: expected tensor {expected}, found {name}")
            (ndim,) = struct.unpack_from("<I", blob, off)
            shapes.append(struct.unpack_from(f"<{ndim}I", blob, off + 4))
            off += 4 + 4 * ndim
        total = sum(int(np.prod(s)) for s in shapes)
        if len(blob) != off + 8 * total:
            raise CheckpointCorrupt(f"{path}: payload is {len(blob) - off} bytes, expected {8 * total}")
        arrays = []
        for s in shapes:
            n = int(np.prod(s))
            arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(s))
            off += 8 * n
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointCorrupt(f"{path}: truncated header") from exc
    p = ModelParams(*arrays)
    try:
        p.validate()
    except (ShapeMismatch, FloatingPointError) as exc:
        raise CheckpointCorrupt(f"{path}: {exc}") from exc
    return p
