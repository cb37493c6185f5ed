"""UCI HAR inertial-signal loading, splitting, normalisation and sampling."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .core import Rng, check_shape
from .errors import (
    EmptyDataset,
    InsufficientData,
    LabelOutOfRange,
    LengthMismatch,
    MalformedLine,
    MissingFile,
)

WINDOW = 128
N_CHANNELS = 6
N_CLASSES = 6
CHANNELS = ("body_acc_x", "body_acc_y", "body_acc_z", "body_gyro_x", "body_gyro_y", "body_gyro_z")
PARTITIONS = ("train", "test")
STD_FLOOR = 1e-8


class ActivityClass(IntEnum):
    WALKING = 0
    WALKING_UPSTAIRS = 1
    WALKING_DOWNSTAIRS = 2
    SITTING = 3
    STANDING = 4
    LYING = 5

    @classmethod
    def from_raw(cls, raw: int) -> "ActivityClass":
        return cls(raw - 1)


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray  # [6]
    std: np.ndarray  # [6], already floored

    def to_dict(self) -> dict:
        return {
            "channels": list(CHANNELS),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered set of labelled windows.

    ``signals`` has shape ``[n, 128, 6]``; ``labels``, ``subjects`` and
    ``uids`` are parallel int arrays of length ``n``.
    """

    signals: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    uids: np.ndarray
    normalization: Normalization | None = field(default=None)

    def __post_init__(self):
        n = len(self.labels)
        check_shape("signals", self.signals, (n, WINDOW, N_CHANNELS))
        for name in ("subjects", "uids"):
            check_shape(name, getattr(self, name), (n,))
        if n and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise ValueError("labels must lie in 0..5")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def empty(cls) -> "Dataset":
        return cls(
            np.zeros((0, WINDOW, N_CHANNELS)),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            signals=self.signals[idx],
            labels=self.labels[idx],
            subjects=self.subjects[idx],
            uids=self.uids[idx],
        )

    def per_class_count(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=N_CLASSES)

    def restrict(self, classes) -> "Dataset":
        return self.take(np.flatnonzero(np.isin(self.labels, sorted(classes))))

    def without_uids(self, uids) -> "Dataset":
        return self.take(np.flatnonzero(~np.isin(self.uids, np.asarray(uids))))

    def sorted_by_uid(self) -> "Dataset":
        return self.take(np.argsort(self.uids, kind="stable"))


def concat(parts: list[Dataset]) -> Dataset:
    parts = [p for p in parts if len(p)]
    if not parts:
        return Dataset.empty()
    return Dataset(
        np.concatenate([p.signals for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.subjects for p in parts]),
        np.concatenate([p.uids for p in parts]),
        parts[0].normalization,
    )


# -- loading -----------------------------------------------------------------

def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise MissingFile(path)
    with open(path, "r") as fh:
        return [ln for ln in fh.read().splitlines() if ln.strip()]


def _read_signal_file(path: Path) -> np.ndarray:
    lines = _read_lines(path)
    out = np.empty((len(lines), WINDOW), dtype=np.float64)
    for i, line in enumerate(lines):
        fields = line.split()
        if len(fields) != WINDOW:
            raise MalformedLine(path, i + 1, f"expected {WINDOW} fields, found {len(fields)}")
        try:
            out[i] = [float(f) for f in fields]
        except ValueError:
            raise MalformedLine(path, i + 1, "non-numeric field") from None
        if not np.all(np.isfinite(out[i])):
            raise MalformedLine(path, i + 1, "non-finite value")
    return out


def _read_int_file(path: Path, *, labels: bool) -> np.ndarray:
    lines = _read_lines(path)
    out = np.empty(len(lines), dtype=np.int64)
    for i, line in enumerate(lines):
        fields = line.split()
        if len(fields) != 1:
            raise MalformedLine(path, i + 1, f"expected 1 field, found {len(fields)}")
        try:
            value = float(fields[0])
        except ValueError:
            raise MalformedLine(path, i + 1, "non-numeric field") from None
        if value != int(value):
            raise MalformedLine(path, i + 1, "expected an integer")
        if labels and not 1 <= value <= 6:
            raise LabelOutOfRange(path, i + 1, fields[0])
        out[i] = int(value)
    return out


def _resolve_root(root: Path) -> Path:
    # accept either the "UCI HAR Dataset" folder or its parent
    nested = root / "UCI HAR Dataset"
    if not (root / "train").exists() and nested.is_dir():
        return nested
    return root


def load_uci(root_dir) -> Dataset:
    """Load and merge the train and test partitions of the raw UCI HAR layout.

    Only the body_acc and body_gyro inertial channels are read. Raw labels
    1..6 become class ids 0..5 and uids are assigned in file order, train
    partition first.
    """
    root = _resolve_root(Path(root_dir))
    signals, labels, subjects = [], [], []
    for part in PARTITIONS:
        base = root / part
        chans = [_read_signal_file(base / "Inertial Signals" / f"{c}_{part}.txt") for c in CHANNELS]
        y = _read_int_file(base / f"y_{part}.txt", labels=True)
        subj = _read_int_file(base / f"subject_{part}.txt", labels=False)
        counts = {f"{c}_{part}.txt": len(a) for c, a in zip(CHANNELS, chans)}
        counts[f"y_{part}.txt"] = len(y)
        counts[f"subject_{part}.txt"] = len(subj)
        if len(set(counts.values())) != 1:
            raise LengthMismatch(f"{base}: line counts differ: {counts}")
        signals.append(np.stack(chans, axis=-1))
        labels.append(y - 1)
        subjects.append(subj)
    signals = np.concatenate(signals)
    return Dataset(
        signals,
        np.concatenate(labels),
        np.concatenate(subjects),
        np.arange(len(signals), dtype=np.int64),
    )


# -- splitting and normalisation -----------------------------------------------

def stratified_split(d: Dataset, ratios=(0.70, 0.15, 0.15), rng: Rng | None = None):
    """Per-class shuffle and cut into (train, val, test).

    Each class's windows are shuffled with ``rng`` (classes in id order) and
    cut at ``floor(n_c * r0)`` and ``floor(n_c * (r0 + r1))``.
    """
    if len(d) == 0:
        raise EmptyDataset("cannot split an empty dataset")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if rng is None:
        raise ValueError("stratified_split needs an rng")
    out = ([], [], [])
    for c in range(N_CLASSES):
        idx = np.flatnonzero(d.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        cut1 = min(n, math.floor(n * ratios[0] + 1e-9))
        cut2 = min(n, math.floor(n * (ratios[0] + ratios[1]) + 1e-9))
        for bucket, part in zip(out, (idx[:cut1], idx[cut1:cut2], idx[cut2:])):
            bucket.append(part)
    return tuple(d.take(np.concatenate(b)) for b in out)


def fit_normalizer(train: Dataset) -> Normalization:
    if len(train) == 0:
        raise EmptyDataset("cannot fit normaliser on an empty dataset")
    flat = train.signals.reshape(-1, N_CHANNELS)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    return Normalization(mean, std)


def apply_normalizer(stats: Normalization, d: Dataset) -> Dataset:
    return replace(d, signals=(d.signals - stats.mean) / stats.std, normalization=stats)


# -- sampling ----------------------------------------------------------------

def balanced_quota(classes, n: int) -> dict[int, int]:
    """``floor(n / |classes|)`` per class; the remainder goes to the lowest ids."""
    classes = sorted(int(c) for c in classes)
    if not classes:
        raise ValueError("class set must be non-empty")
    base, rem = divmod(n, len(classes))
    return {c: base + (1 if i < rem else 0) for i, c in enumerate(classes)}


def draw_disjoint(pool: Dataset, classes, n: int, rng: Rng) -> tuple[Dataset, Dataset]:
    """Draw ``n`` windows with labels in ``classes`` without replacement.

    Returns ``(sample, remaining_pool)``. Multi-class draws are class
    balanced per :func:`balanced_quota`. Within each class the candidates
    are permuted with ``rng`` (classes in id order) and the first ones taken.
    """
    if n == 0:
        return Dataset.empty(), pool
    quota = balanced_quota(classes, n)
    counts = pool.per_class_count()
    for c, q in quota.items():
        if counts[c] < q:
            raise InsufficientData(
                f"class {c}: need {q} windows, pool has {counts[c]} (short by {q - counts[c]})",
                label=c,
                shortfall=int(q - counts[c]),
            )
    picked = []
    for c, q in quota.items():
        idx = np.flatnonzero(pool.labels == c)
        picked.append(idx[rng.permutation(len(idx))[:q]])
    picked = np.concatenate(picked)
    keep = np.ones(len(pool), dtype=bool)
    keep[picked] = False
    return pool.take(picked), pool.take(np.flatnonzero(keep))


def build_common_test(test_split: Dataset, per_class: int, rng: Rng) -> Dataset:
    """Exactly ``per_class`` windows of every class, sampled without replacement."""
    if per_class == 0:
        return Dataset.empty()
    sample, _ = draw_disjoint(test_split, range(N_CLASSES), per_class * N_CLASSES, rng)
    return sample


# -- prepared-data cache -----------------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class PreparedData:
    """Normalised train/val/test splits as written by ``fedforget prepare``."""

    train: Dataset
    val: Dataset
    test: Dataset
    normalization: Normalization

    def split(self, name: str) -> Dataset:
        return getattr(self, name)

    def all(self) -> Dataset:
        return concat([self.train, self.val, self.test]).sorted_by_uid()


def prepare(d: Dataset, rng: Rng, ratios=(0.70, 0.15, 0.15)) -> PreparedData:
    train, val, test = stratified_split(d, ratios, rng)
    stats = fit_normalizer(train)
    return PreparedData(*(apply_normalizer(stats, s) for s in (train, val, test)), stats)


def write_manifest(path, prepared: PreparedData) -> None:
    """CSV ``uid,subject,label,split`` sorted by uid."""
    rows = []
    for name in SPLIT_NAMES:
        s = prepared.split(name)
        rows.extend(zip(s.uids.tolist(), s.subjects.tolist(), s.labels.tolist(), [name] * len(s)))
    rows.sort()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["uid", "subject", "label", "split"])
        w.writerows(rows)


def save_prepared(out_dir, prepared: PreparedData) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "manifest.csv", out / "normalization.json", out / "dataset.npz"]
    write_manifest(paths[0], prepared)
    paths[1].write_text(json.dumps(prepared.normalization.to_dict(), indent=2) + "\n")
    arrays = {}
    for name in SPLIT_NAMES:
        s = prepared.split(name)
        arrays[f"{name}_signals"] = s.signals
        arrays[f"{name}_labels"] = s.labels
        arrays[f"{name}_subjects"] = s.subjects
        arrays[f"{name}_uids"] = s.uids
    with open(paths[2], "wb") as fh:
        np.savez(fh, **arrays)
    return paths


def load_prepared(data_dir) -> PreparedData:
    base = Path(data_dir)
    npz_path, stats_path = base / "dataset.npz", base / "normalization.json"
    for p in (npz_path, stats_path):
        if not p.is_file():
            raise MissingFile(p)
    stats = Normalization.from_dict(json.loads(stats_path.read_text()))
    with np.load(npz_path) as z:
        splits = [
            Dataset(
                z[f"{name}_signals"],
                z[f"{name}_labels"].astype(np.int64),
                z[f"{name}_subjects"].astype(np.int64),
                z[f"{name}_uids"].astype(np.int64),
                stats,
            )
            for name in SPLIT_NAMES
        ]
    return PreparedData(*splits, stats)
