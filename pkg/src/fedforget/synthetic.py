"""Synthetic inertial windows written in the raw UCI HAR file layout.

Used for tests and dry runs where the real dataset is not available. The
signals only loosely imitate the real ones: the three walking classes are
periodic gait patterns with overlapping frequencies, the two upright static
classes differ by a small offset, and lying is well separated. Nothing
measured on this data says anything about the real dataset.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import Rng, derive
from .dataset import CHANNELS, N_CLASSES, WINDOW

UCI_COUNTS = (1722, 1544, 1406, 1777, 1906, 1944)
# UCI's own train/test partition sizes per class
UCI_TRAIN_COUNTS = (1226, 1073, 986, 1286, 1374, 1407)

_GAIT = {0: (1.9, 1.00), 1: (1.8, 1.05), 2: (2.0, 1.10)}  # cycles per window, amplitude
_STATIC_OFFSET = {3: 0.10, 4: -0.10, 5: 0.0}


def synth_windows(label: int, n: int, rng: Rng, noise: float = 0.9) -> np.ndarray:
    t = np.arange(WINDOW) / WINDOW
    out = np.empty((n, WINDOW, len(CHANNELS)))
    if label in _GAIT:
        freq, amp = _GAIT[label]
        f = freq * (1.0 + 0.2 * (rng.uniform(n) - 0.5))
        phase = 2 * np.pi * rng.uniform(n)
        a = amp * (0.8 + 0.4 * rng.uniform(n))
        base = np.sin(2 * np.pi * f[:, None] * t[None, :] * 2 + phase[:, None])
        harm = np.sin(4 * np.pi * f[:, None] * t[None, :] * 2 + 2 * phase[:, None])
        ch_w = np.array([1.0, 0.6, 0.4, 0.5, 0.8, 0.3])
        harm_w = {0: 0.3, 1: 0.5, 2: 0.2}[label]
        sig = a[:, None] * (base + harm_w * harm)
        out[:] = sig[:, :, None] * ch_w[None, None, :]
        out[..., 2] += 0.15 * (label - 1)
    else:
        out[:] = 0.0
        out[..., 0] += _STATIC_OFFSET[label]
        if label == 5:
            out[..., 1] += 0.8
            out[..., 4] -= 0.5
        noise = noise * 0.3
    out += rng.normal(out.shape, noise)
    return out


def write_synthetic_uci(root, counts=UCI_COUNTS, train_counts=None, seed: int = 0,
                        n_subjects: int = 30) -> Path:
    """Write a dataset with the given per-class totals in the UCI layout under ``root``.

    ``train_counts`` sets how many windows of each class go to the ``train``
    partition; by default roughly 71%. Returns ``root``.
    """
    root = Path(root)
    rng = Rng(seed)
    if train_counts is None:
        train_counts = UCI_TRAIN_COUNTS if tuple(counts) == UCI_COUNTS else tuple(
            int(round(0.714 * c)) for c in counts
        )
    parts = {"train": [], "test": []}
    for c in range(N_CLASSES):
        x = synth_windows(c, counts[c], derive(rng, c))
        subj = 1 + (np.arange(counts[c]) % n_subjects)
        k = train_counts[c]
        parts["train"].append((x[:k], np.full(k, c + 1), subj[:k]))
        parts["test"].append((x[k:], np.full(counts[c] - k, c + 1), subj[k:]))
    for part, chunks in parts.items():
        x = np.concatenate([ch[0] for ch in chunks])
        y = np.concatenate([ch[1] for ch in chunks])
        s = np.concatenate([ch[2] for ch in chunks])
        # interleave classes like the real files do
        order = derive(rng, 100 + len(part)).permutation(len(y))
        x, y, s = x[order], y[order], s[order]
        sig_dir = root / part / "Inertial Signals"
        sig_dir.mkdir(parents=True, exist_ok=True)
        for ch, name in enumerate(CHANNELS):
            np.savetxt(sig_dir / f"{name}_{part}.txt", x[:, :, ch], fmt="%.7e")
        np.savetxt(root / part / f"y_{part}.txt", y, fmt="%d")
        np.savetxt(root / part / f"subject_{part}.txt", s, fmt="%d")
    return root
