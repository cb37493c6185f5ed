"""Forgetting scores, PCA / t-SNE projections and report files."""
from __future__ import annotations

import csv
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Rng
from .dataset import N_CLASSES, ActivityClass
from .errors import DegenerateInput, IoFailure, PerplexityInfeasible, TooFewRounds
from .fedsim import RoundLog, fmt, write_accuracy_csv

log = logging.getLogger(__name__)

CLASS_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")
CLASS_NAMES = tuple(c.name.replace("_", " ").title() for c in ActivityClass)


# -- forgetting ----------------------------------------------------------------

def forgetting(m) -> np.ndarray:
    """Per-class forgetting of an ``[R, 6]`` accuracy matrix.

    ``f[c] = max_r m[r, c] - m[R, c]`` with the maximum taken over every
    round including the last, so ``f`` is never negative and appending a
    copy of the final round leaves it unchanged. Absent classes (NaN
    columns) stay NaN.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2:
        raise TooFewRounds(f"forgetting needs at least 2 rounds, got shape {m.shape}")
    with np.errstate(invalid="ignore"):
        return np.max(m, axis=0) - m[-1]


# -- PCA -----------------------------------------------------------------------

@dataclass
class Projection:
    coords: np.ndarray  # [n, d]
    labels: np.ndarray  # [n]
    method: str
    meta: dict = field(default_factory=dict)


def _fix_signs(components: np.ndarray) -> np.ndarray:
    # each component's largest-magnitude entry is made positive
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def pca(features, k: int = 3, labels=None) -> Projection:
    """Project centred ``features`` on their top-``k`` principal axes (via SVD).

    ``meta`` carries ``components`` ``[k, d]``, ``mean``,
    ``explained_variance`` and ``explained_variance_ratio`` (relative to
    the total variance of the data).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DegenerateInput(f"features must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if n <= k or d < k:
        raise DegenerateInput(f"pca needs n > k and d >= k, got n={n}, d={d}, k={k}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s**2 / (n - 1)
    total = var.sum()
    components = _fix_signs(vt[:k])
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels)
    return Projection(
        coords=xc @ components.T,
        labels=labels,
        method="pca",
        meta={
            "components": components,
            "mean": mean,
            "explained_variance": var[:k],
            "explained_variance_ratio": ratio,
        },
    )


# -- t-SNE ---------------------------------------------------------------------

def _sq_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_entropy_bits(d: np.ndarray, beta: np.ndarray):
    """Conditional P rows and their entropy in bits for precisions ``beta``.

    ``d`` holds each row's off-diagonal squared distances shifted so the
    row minimum is 0 (the shift cancels on normalisation).
    """
    w = np.exp(-d * beta[:, None])
    s = w.sum(axis=1)
    p = w / s[:, None]
    h_nats = np.log(s) + beta * (d * p).sum(axis=1)
    return p, h_nats / np.log(2.0)


def conditional_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 50):
    """Binary-search per-point Gaussian precisions to hit ``log2(perplexity)`` bits.

    Returns ``(P_conditional [n, n], beta [n], entropy_bits [n])``. The
    search bisects ``log(beta)`` on a bracket wide enough for any scaling
    of the data; each iteration halves the bracket.
    """
    n = len(x)
    d_full = _sq_distances(x)
    off = ~np.eye(n, dtype=bool)
    d = d_full[off].reshape(n, n - 1)
    d = d - d.min(axis=1, keepdims=True)
    scale = np.median(d, axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    target = np.log2(perplexity)
    # H(beta) decreases in beta; bracket log(beta * scale) in [-30, 30]
    lo = np.full(n, -30.0) - np.log(scale)
    hi = np.full(n, 30.0) - np.log(scale)
    log_beta = np.log(1.0 / scale)
    p, h = _row_entropy_bits(d, np.exp(log_beta))
    for _ in range(max_iter):
        err = h - target
        if np.all(np.abs(err) < tol):
            break
        too_flat = err > 0  # entropy too high -> raise precision
        lo = np.where(too_flat, log_beta, lo)
        hi = np.where(too_flat, hi, log_beta)
        log_beta = np.where(np.abs(err) < tol, log_beta, 0.5 * (lo + hi))
        p, h = _row_entropy_bits(d, np.exp(log_beta))
    cond = np.zeros((n, n))
    cond[off] = p.reshape(-1)
    return cond, np.exp(log_beta), h


def joint_affinities(x: np.ndarray, perplexity: float):
    cond, beta, h = conditional_affinities(x, perplexity)
    p = (cond + cond.T) / (2.0 * len(x))
    return p, beta, h


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))))


def tsne(features, perplexity: float = 30.0, iterations: int = 1000, rng: Rng | None = None,
         labels=None, learning_rate: float = 200.0, exaggeration: float = 12.0,
         exaggeration_iters: int = 250, momentum_switch: int = 250, checkpoint_every: int = 50) -> Projection:
    """Exact t-SNE to 2-D.

    Gaussian input affinities with per-point bandwidths from
    :func:`conditional_affinities`, Student-t (one degree of freedom) output
    affinities, gradient descent on KL(P || Q) with early exaggeration,
    momentum 0.5 then 0.8, and per-parameter adaptive gains. ``meta``
    records the KL divergence every ``checkpoint_every`` iterations and
    10 iterations after exaggeration ends.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n < 10:
        raise PerplexityInfeasible(f"t-SNE needs at least 10 points, got {n}")
    if not 1 < perplexity < (n - 1) / 3:
        raise PerplexityInfeasible(f"perplexity {perplexity} outside (1, {(n - 1) / 3:.3g}) for n={n}")
    if rng is None:
        raise ValueError("tsne needs an rng")
    p, beta, h = joint_affinities(x, perplexity)
    kl_probe = exaggeration_iters + 10

    y = rng.normal((n, 2), 1e-4)
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    kl_trace = []
    for it in range(1, iterations + 1):
        exag = exaggeration if it <= exaggeration_iters else 1.0
        momentum = 0.5 if it <= momentum_switch else 0.8
        num = 1.0 / (1.0 + _sq_distances(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        pq = (exag * p - q) * num
        grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
        if it % checkpoint_every == 0 or it == iterations or it == kl_probe:
            kl_trace.append((it, _kl(p, q)))
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels)
    return Projection(
        coords=y,
        labels=labels,
        method="tsne",
        meta={
            "perplexity": perplexity,
            "iterations": iterations,
            "beta": beta,
            "entropy_bits": h,
            "kl_trace": kl_trace,
            "kl": kl_trace[-1][1] if kl_trace else float("nan"),
        },
    )


# -- reports -------------------------------------------------------------------

def _write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_forgetting_csv(path, rlog: RoundLog) -> dict[str, np.ndarray]:
    scores = {m: forgetting(rlog.accuracy_matrix(m)) for m in rlog.models}
    _write_csv(Path(path), ["model", "class", "forgetting"],
               ([m, c, fmt(f[c])] for m, f in scores.items() for c in range(N_CLASSES)))
    return scores


def write_projection_csv(path, proj: Projection) -> None:
    d = proj.coords.shape[1]
    header = ["x", "y", "z"][:d] + ["class"]
    _write_csv(Path(path), header,
               ([fmt(v) for v in row] + [int(c)] for row, c in zip(proj.coords, proj.labels)))


def _svg_root(width: int, height: int, title: str) -> ET.Element:
    root = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "version": "1.1",
        "width": str(width),
        "height": str(height),
        "viewBox": f"0 0 {width} {height}",
    })
    ET.SubElement(root, "title").text = title
    ET.SubElement(root, "text", {"x": str(width // 2), "y": "20", "text-anchor": "middle",
                                 "font-family": "sans-serif", "font-size": "14"}).text = title
    return root


def _legend(root: ET.Element, x: int, y: int) -> None:
    for c in range(N_CLASSES):
        ET.SubElement(root, "circle", {"cx": str(x), "cy": str(y + 16 * c), "r": "5",
                                       "fill": CLASS_COLORS[c], "class": "legend"})
        ET.SubElement(root, "text", {"x": str(x + 10), "y": str(y + 16 * c + 4), "font-family": "sans-serif",
                                     "font-size": "11"}).text = f"C{c} {CLASS_NAMES[c]}"


def _save_svg(root: ET.Element, path: Path) -> None:
    try:
        ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def bar_chart_svg(matrix: np.ndarray, title: str, path) -> None:
    """Grouped bars: one group per round, one ``rect.bar`` per class."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n_rounds = len(matrix)
    left, top, plot_h, group_w = 50, 40, 240, 90
    width = left + max(n_rounds, 1) * group_w + 200
    height = top + plot_h + 50
    root = _svg_root(width, height, title)
    base = top + plot_h
    ET.SubElement(root, "line", {"x1": str(left), "y1": str(base), "x2": str(left + n_rounds * group_w),
                                 "y2": str(base), "stroke": "black"})
    ET.SubElement(root, "line", {"x1": str(left), "y1": str(top), "x2": str(left), "y2": str(base),
                                 "stroke": "black"})
    for tick in (0, 25, 50, 75, 100):
        ty = base - plot_h * tick / 100
        ET.SubElement(root, "text", {"x": str(left - 6), "y": fmt(ty + 4), "text-anchor": "end",
                                     "font-family": "sans-serif", "font-size": "10"}).text = f"{tick}%"
    bar_w = (group_w - 12) / N_CLASSES
    for r in range(n_rounds):
        gx = left + r * group_w + 6
        for c in range(N_CLASSES):
            v = matrix[r, c]
            v = 0.0 if v != v else float(np.clip(v, 0.0, 1.0))
            h = plot_h * v
            rect = ET.SubElement(root, "rect", {
                "class": "bar",
                "x": fmt(gx + c * bar_w),
                "y": fmt(base - h),
                "width": fmt(bar_w - 1),
                "height": fmt(h),
                "fill": CLASS_COLORS[c],
                "data-round": str(r + 1),
                "data-class": str(c),
            })
            ET.SubElement(rect, "title").text = f"round {r + 1}, C{c}: {fmt(100 * v)}%"
        ET.SubElement(root, "text", {"x": fmt(gx + 3 * bar_w), "y": str(base + 16), "text-anchor": "middle",
                                     "font-family": "sans-serif", "font-size": "11"}).text = str(r + 1)
    _legend(root, left + n_rounds * group_w + 30, top + 10)
    _save_svg(root, Path(path))


def scatter_svg(proj: Projection, title: str, path) -> None:
    """2-D scatter of the first two projection axes, coloured by class."""
    size, margin = 480, 40
    root = _svg_root(size + 200, size + 2 * margin, title)
    xy = proj.coords[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pts = margin + (xy - lo) / span * size
    for (px, py), c in zip(pts, proj.labels):
        ET.SubElement(root, "circle", {"class": "point", "cx": fmt(px), "cy": fmt(margin + size - (py - margin)),
                                       "r": "2.5", "fill": CLASS_COLORS[int(c) % N_CLASSES],
                                       "fill-opacity": "0.7"})
    _legend(root, size + 2 * margin, margin + 10)
    _save_svg(root, Path(path))


def emit_reports(rlog: RoundLog, out_dir, projections: dict | None = None) -> list[Path]:
    """Write accuracy/forgetting CSVs, one bar chart per model and projection files.

    ``projections`` maps a name to a :class:`Projection`; each yields
    ``projection_<name>.csv`` and ``projection_<name>.svg``.
    """
    if not rlog.rounds:
        raise ValueError("round log is empty")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    written = [out / "accuracy.csv"]
    try:
        write_accuracy_csv(written[0], rlog)
    except OSError as exc:
        raise IoFailure(f"cannot write {written[0]}: {exc}") from exc
    if len(rlog.rounds) >= 2:
        written.append(out / "forgetting.csv")
        write_forgetting_csv(written[-1], rlog)
    for m in rlog.models:
        path = out / f"accuracy_{m}.svg"
        bar_chart_svg(rlog.accuracy_matrix(m), f"Per-class test accuracy: {m}", path)
        written.append(path)
    for name, proj in (projections or {}).items():
        csv_path, svg_path = out / f"projection_{name}.csv", out / f"projection_{name}.svg"
        write_projection_csv(csv_path, proj)
        scatter_svg(proj, f"{proj.method.upper()} projection: {name}", svg_path)
        written += [csv_path, svg_path]
    return written
