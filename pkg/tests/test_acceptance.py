"""Exit criteria. Each test appends one PASS/FAIL line to the terminal summary.

Criteria 1, 3, 4, 5 and 10 need the real UCI HAR dataset; point
``FEDFORGET_UCI_DIR`` at the extracted ``UCI HAR Dataset`` folder. Without it
those criteria fail with an explanatory message. Criteria 6 and 7 run on the
real data when present and otherwise on full-size synthetic data in the same
layout, since they check protocol properties rather than learned accuracy.
"""
import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest

from fedforget.analysis import conditional_affinities, pca, tsne
from fedforget.cli import main, scenario_path
from fedforget.core import Rng
from fedforget.dataset import load_uci
from fedforget.errors import ScheduleInvalid
from fedforget.fedsim import OBSERVED, TaskSchedule, read_accuracy_csv
from fedforget.model import init_params
from fedforget.synthetic import write_synthetic_uci

from conftest import ACCEPTANCE_LINES
from test_model import grad_check_batch, numeric_grad_check

pytestmark = pytest.mark.acceptance

UCI_ENV = "FEDFORGET_UCI_DIR"
NO_DATA = (f"real UCI HAR data required: set {UCI_ENV} to the extracted 'UCI HAR Dataset' directory "
           "(not downloadable from this environment)")


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    if not ok:
        pytest.fail(f"criterion {n}: {detail}", pytrace=False)


def uci_dir():
    value = os.environ.get(UCI_ENV)
    return Path(value) if value else None


def run_cli(argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"fedforget {' '.join(map(str, argv))} exited with {code}"


# -- shared fixtures ---------------------------------------------------------------

@pytest.fixture(scope="session")
def real_prepared(tmp_path_factory):
    src = uci_dir()
    if src is None:
        return None
    out = tmp_path_factory.mktemp("real_prepared")
    run_cli(["prepare", "--uci-dir", src, "--out", out, "--seed", 0])
    return out


@pytest.fixture(scope="session")
def real_base(real_prepared, tmp_path_factory):
    """Base model trained with the default settings (best of up to 50 epochs)."""
    if real_prepared is None:
        return None
    ckpt = tmp_path_factory.mktemp("real_base") / "base.ffckpt"
    run_cli(["train-base", "--data", real_prepared, "--out", ckpt, "--seed", 0])
    return ckpt


@pytest.fixture(scope="session")
def protocol_env(real_prepared, real_base, tmp_path_factory):
    """(prepared dir, checkpoint, description) used for the shipped scenario runs."""
    if real_prepared is not None:
        return real_prepared, real_base, "UCI HAR, trained base model"
    raw = write_synthetic_uci(tmp_path_factory.mktemp("synthetic_uci"), seed=1)
    prep = tmp_path_factory.mktemp("synthetic_prepared")
    run_cli(["prepare", "--uci-dir", raw, "--out", prep])
    ckpt = prep / "init.ffckpt"
    run_cli(["train-base", "--data", prep, "--out", ckpt, "--epochs", 0])
    return prep, ckpt, "synthetic UCI-layout data, untrained initialisation"


@pytest.fixture(scope="session")
def shipped_runs(protocol_env, tmp_path_factory):
    prep, ckpt, _ = protocol_env
    outs = {}
    for name in ("baseline", "federated"):
        out = tmp_path_factory.mktemp(f"run_{name}")
        run_cli(["run", "--scenario", name, "--data", prep, "--checkpoint", ckpt, "--out", out])
        outs[name] = out
    return outs


# -- criteria ----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_01_base_accuracy(real_base):
    if real_base is None:
        record(1, False, NO_DATA)
    metrics = json.loads(real_base.with_name(real_base.name + ".metrics.json").read_text())
    acc = metrics["test"]
    record(1, acc >= 0.92, f"base test accuracy {acc:.4f} (need >= 0.92, best epoch {metrics['best_epoch']})")


def test_criterion_02_gradients():
    worst = 0.0
    for batch in range(3):
        x, y, drop = grad_check_batch(batch)
        errs = numeric_grad_check(init_params(Rng(3), n_filters=4, n_hidden=8), x, y, drop)
        worst = max(worst, max(errs.values()))
    record(2, worst < 1e-5, f"worst relative gradient error {worst:.3g} over 3 batches (need < 1e-5)")


@pytest.mark.slow
def test_criterion_03_baseline_forgetting(real_prepared, shipped_runs):
    if real_prepared is None:
        record(3, False, NO_DATA)
    m = read_accuracy_csv(shipped_runs["baseline"] / "accuracy.csv")[OBSERVED]
    s4, s8 = m[3], m[7]
    checks = {
        "step4 C1>=0.80": s4[1] >= 0.80,
        "step4 C0,C2,C3,C4<=0.30": bool(np.all(s4[[0, 2, 3, 4]] <= 0.30)),
        "step8 C2>=0.80": s8[2] >= 0.80,
        "step8 C1<=0.20": s8[1] <= 0.20,
        "C5>=0.60 every step": bool(np.all(m[:, 5] >= 0.60)),
    }
    failed = [k for k, v in checks.items() if not v]
    record(3, not failed, f"step4 {np.round(s4, 3).tolist()} step8 {np.round(s8, 3).tolist()} "
                          f"min C5 {m[:, 5].min():.3f}" + (f"; failed: {failed}" if failed else ""))


@pytest.mark.slow
def test_criterion_04_knowledge_transfer(real_prepared, shipped_runs):
    if real_prepared is None:
        record(4, False, NO_DATA)
    m = read_accuracy_csv(shipped_runs["federated"] / "accuracy.csv")[OBSERVED]
    static_min = float(m[1:, 3:6].min())
    checks = {
        "C3,C4,C5>=0.60 rounds 2..8": static_min >= 0.60,
        "round8 C1<=0.20": m[7, 1] <= 0.20,
        "round4 C2<=0.20": m[3, 2] <= 0.20,
    }
    failed = [k for k, v in checks.items() if not v]
    record(4, not failed, f"client1 min static acc (rounds 2-8) {static_min:.3f}, round8 C1 {m[7, 1]:.3f}, "
                          f"round4 C2 {m[3, 2]:.3f}" + (f"; failed: {failed}" if failed else ""))


@pytest.mark.slow
def test_criterion_05_server_contamination(real_prepared, shipped_runs):
    if real_prepared is None:
        record(5, False, NO_DATA)
    acc = read_accuracy_csv(shipped_runs["federated"] / "accuracy.csv")
    server = float(acc["server"][7, :3].mean())
    gen = float(acc["generalized"][7, :3].mean())
    ratio = server / gen if gen > 0 else float("nan")
    record(5, server < gen, f"round8 mean acc C0-C2: server {server:.3f}, generalized {gen:.3f}, "
                            f"ratio {ratio:.3f}")


@pytest.mark.slow
def test_criterion_06_protocol_invariants(protocol_env, shipped_runs):
    problems = []
    for name, out in shipped_runs.items():
        with open(out / "provenance.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        owners = {}
        for row in rows:
            owners.setdefault(row["uid"], set()).add((row["client"], row["round"]))
        dup = sum(len(v) > 1 for v in owners.values()) + (len(rows) - len(owners))
        if dup:
            problems.append(f"{name}: {dup} duplicated uids")
        summary = json.loads((out / "summary.json").read_text())
        bad = [w for w in summary["aggregation_weights"] if abs(sum(w) - 1.0) > 1e-9]
        if bad or (name == "federated" and len(summary["aggregation_weights"]) != 8):
            problems.append(f"{name}: bad aggregation weights {bad}")
    rejected = 0
    for entries in ([({1, 2}, 4), ({2}, 4)], [({1}, 4), ({2}, 3)]):
        try:
            TaskSchedule.from_list(entries).validate(8, OBSERVED)
        except ScheduleInvalid:
            rejected += 1
    if rejected != 2:
        problems.append("invalid schedule fixture accepted")
    record(6, not problems, f"provenance disjoint, weights sum to 1, invalid schedules rejected "
                            f"[{protocol_env[2]}]" + (f"; {problems}" if problems else ""))


@pytest.mark.slow
def test_criterion_07_determinism(protocol_env, shipped_runs, tmp_path):
    prep, ckpt, desc = protocol_env
    mismatches = []
    for name, first in shipped_runs.items():
        variants = [[]] + ([["--parallel"]] if name == "federated" else [])
        for extra in variants:
            out = tmp_path / f"{name}{''.join(extra)}"
            run_cli(["run", "--scenario", name, "--data", prep, "--checkpoint", ckpt, "--out", out] + extra)
            for csv_name in ("accuracy.csv", "provenance.csv"):
                if (out / csv_name).read_bytes() != (first / csv_name).read_bytes():
                    mismatches.append(f"{name}{extra}:{csv_name}")
    record(7, not mismatches, f"repeat and parallel runs byte-identical [{desc}]"
                              + (f"; differing: {mismatches}" if mismatches else ""))


def _eig_components(x, k):
    xc = x - x.mean(axis=0)
    vals, vecs = np.linalg.eigh(xc.T @ xc / (len(x) - 1))
    vecs = vecs[:, np.argsort(vals)[::-1][:k]]
    for j in range(k):
        if vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] *= -1
    return vecs.T


def test_criterion_08_pca_oracle():
    worst_comp = worst_orth = 0.0
    monotone = True
    for n, d in ((5, 3), (50, 10)):
        for seed in range(5):
            x = Rng(1000 * n + seed).normal((n, d))
            k = min(3, d)
            proj = pca(x, k)
            comp = proj.meta["components"]
            worst_comp = max(worst_comp, float(np.abs(comp - _eig_components(x, k)).max()))
            worst_orth = max(worst_orth, float(np.abs(comp @ comp.T - np.eye(k)).max()))
            monotone &= bool(np.all(np.diff(proj.meta["explained_variance_ratio"]) <= 0))
    ok = worst_comp < 1e-8 and worst_orth < 1e-8 and monotone
    record(8, ok, f"max component diff {worst_comp:.2e}, orthonormality {worst_orth:.2e}, "
                  f"ratios non-increasing {monotone}")


def linearly_separable_2d(points, labels):
    """Exact test: some line through two sample points' perpendicular direction separates the classes.

    If two finite 2-D sets are strictly separable, rotating a separating line
    until it is parallel to a segment between two points keeps it separating,
    so checking the normals of all pairwise segments is exhaustive.
    """
    a, b = points[labels == 0], points[labels == 1]
    diffs = points[:, None, :] - points[None, :, :]
    iu = np.triu_indices(len(points), 1)
    normals = np.stack([-diffs[iu][:, 1], diffs[iu][:, 0]], axis=1)
    normals = np.vstack([normals, a.mean(axis=0) - b.mean(axis=0)])
    pa, pb = a @ normals.T, b @ normals.T
    return bool(np.any((pa.min(axis=0) > pb.max(axis=0)) | (pb.min(axis=0) > pa.max(axis=0))))


def test_criterion_09_tsne():
    rng = Rng(2024)
    x = rng.normal((200, 50))
    x[100:, 0] += 20.0
    labels = np.repeat([0, 1], 100)
    _, _, h = conditional_affinities(x, 30.0)
    entropy_err = float(np.max(np.abs(h - np.log2(30.0))))
    proj = tsne(x, 30.0, 1000, Rng(7), labels)
    finite = bool(np.all(np.isfinite(proj.coords)))
    separable = finite and linearly_separable_2d(proj.coords, labels)
    ok = entropy_err < 1e-4 and finite and separable
    record(9, ok, f"max entropy error {entropy_err:.2e} bits, finite {finite}, separable {separable}, "
                  f"final KL {proj.meta['kl']:.4f}")


def test_criterion_10_dataset_histogram():
    src = uci_dir()
    if src is None:
        record(10, False, NO_DATA)
    counts = load_uci(src).per_class_count().tolist()
    expect = [1722, 1544, 1406, 1777, 1906, 1944]
    record(10, counts == expect and sum(counts) == 10299, f"class counts {counts} (total {sum(counts)})")


def test_scenario_files_are_the_shipped_ones():
    # guards the acceptance runs above against a scenario name resolving elsewhere
    for name in ("baseline", "federated"):
        assert scenario_path(name).is_file()
