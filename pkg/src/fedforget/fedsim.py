"""Federated continual-learning protocol and the two forgetting scenarios.

A scenario pits an observed client, which walks through a sequence of
disjoint tasks, against a single generalized client standing in for the
``K - 1`` generic clients (aggregation weight ``(K - 1) / K``). Every round
each trainer receives fresh windows drawn from one shared pool, so no window
is ever issued twice across clients or rounds.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Rng, derive, derive_path
from .dataset import N_CLASSES, Dataset, PreparedData, balanced_quota, build_common_test, draw_disjoint
from .errors import InsufficientData, RoundOutOfRange, ScheduleInvalid, ShapeMismatch, WeightSumInvalid
from .model import HyperParams, ModelParams, evaluate, load_checkpoint, train

log = logging.getLogger(__name__)

OBSERVED = "client1"
GENERALIZED = "generalized"
SERVER = "server"
# root-stream child index per trainer; index 0 is reserved for the common test set
CLIENT_INDEX = {OBSERVED: 1, GENERALIZED: 2}
GENERALIZED_EVAL = "post-local-training, pre-aggregation"


@dataclass(frozen=True)
class TaskSpec:
    classes: frozenset
    rounds: int


@dataclass(frozen=True)
class TaskSchedule:
    """Ordered ``(classes, rounds)`` entries of one client."""

    entries: tuple

    @classmethod
    def from_list(cls, items) -> "TaskSchedule":
        entries = []
        for item in items:
            if isinstance(item, TaskSpec):
                entries.append(item)
            elif isinstance(item, dict):
                entries.append(TaskSpec(frozenset(int(c) for c in item["classes"]), int(item["rounds"])))
            else:
                classes, rounds = item
                entries.append(TaskSpec(frozenset(int(c) for c in classes), int(rounds)))
        return cls(tuple(entries))

    @property
    def total_rounds(self) -> int:
        return sum(e.rounds for e in self.entries)

    def validate(self, R: int, who: str = "client") -> None:
        if not self.entries:
            raise ScheduleInvalid(f"{who}: schedule has no tasks")
        for t, e in enumerate(self.entries, 1):
            if not e.classes:
                raise ScheduleInvalid(f"{who}: task {t} has an empty class set")
            if not all(0 <= c < N_CLASSES for c in e.classes):
                raise ScheduleInvalid(f"{who}: task {t} has classes outside 0..5: {sorted(e.classes)}")
            if e.rounds < 1:
                raise ScheduleInvalid(f"{who}: task {t} must last at least one round, got {e.rounds}")
        for i in range(len(self.entries)):
            for j in range(i + 1, len(self.entries)):
                shared = self.entries[i].classes & self.entries[j].classes
                if shared:
                    raise ScheduleInvalid(
                        f"{who}: task class sets must be disjoint, "
                        f"C^{i + 1} ∩ C^{j + 1} ≠ ∅ (shared {sorted(shared)})"
                    )
        if self.total_rounds != R:
            raise ScheduleInvalid(f"{who}: rounds sum {self.total_rounds} ≠ R={R}")

    def to_list(self) -> list[dict]:
        return [{"classes": sorted(e.classes), "rounds": e.rounds} for e in self.entries]


def task_at_round(s: TaskSchedule, r: int) -> int:
    """1-based index ``t`` of the task active at round ``r`` (1-based).

    ``t`` is the unique index with ``sum(rounds[:t-1]) < r <= sum(rounds[:t])``.
    """
    total = s.total_rounds
    if not 1 <= r <= total:
        raise RoundOutOfRange(f"round {r} outside 1..{total}")
    before = 0
    for t, e in enumerate(s.entries, 1):
        if before < r <= before + e.rounds:
            return t
        before += e.rounds
    raise AssertionError("unreachable")


@dataclass
class ScenarioConfig:
    mode: str  # "federated" | "baseline"
    K: int
    R: int
    per_round_examples: int
    schedules: dict  # client id -> TaskSchedule
    hp: HyperParams
    root_seed: int
    initial_checkpoint: str | None = None
    test_per_class: int = 100
    name: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("federated", "baseline"):
            raise ScheduleInvalid(f"mode must be 'federated' or 'baseline', got {self.mode!r}")
        if self.mode == "federated" and self.K < 2:
            raise ScheduleInvalid(f"federated scenario needs K ≥ 2, got K={self.K}")
        if self.K < 1:
            raise ScheduleInvalid(f"K must be ≥ 1, got {self.K}")
        if self.R < 0 or (self.mode == "federated" and self.R < 1):
            raise ScheduleInvalid(f"invalid round count R={self.R}")
        if self.per_round_examples < 1:
            raise ScheduleInvalid(f"per_round_examples must be ≥ 1, got {self.per_round_examples}")
        if self.test_per_class < 0:
            raise ScheduleInvalid("test_per_class must be ≥ 0")
        required = [OBSERVED] + ([GENERALIZED] if self.mode == "federated" else [])
        for who in required:
            if who not in self.schedules:
                raise ScheduleInvalid(f"missing schedule for {who}")
        extra = set(self.schedules) - set(required)
        if extra:
            raise ScheduleInvalid(f"unexpected schedules for {sorted(extra)}")
        for who in required:
            if self.R > 0 or self.schedules[who].entries:
                self.schedules[who].validate(self.R, who)

    @property
    def aggregation_weights(self) -> tuple[float, float]:
        """``(generalized, observed)`` FedAvg weights."""
        return (self.K - 1) / self.K, 1.0 / self.K

    @classmethod
    def from_dict(cls, d: dict, *, base_dir: Path | None = None) -> "ScenarioConfig":
        try:
            hp = d.get("hyperparams", {})
            ckpt = d.get("checkpoint")
            if ckpt and base_dir is not None and not Path(ckpt).is_absolute():
                ckpt = str(base_dir / ckpt)
            return cls(
                mode=d.get("mode", "federated"),
                K=int(d.get("K", 1)),
                R=int(d["R"]),
                per_round_examples=int(d["per_round_examples"]),
                schedules={k: TaskSchedule.from_list(v) for k, v in d["schedules"].items()},
                hp=HyperParams(
                    learning_rate=float(hp.get("lr", 0.01)),
                    batch_size=int(hp.get("batch", 32)),
                    dropout_rate=float(hp.get("dropout", 0.5)),
                    epochs=int(hp.get("epochs", 10)),
                ),
                root_seed=int(d.get("seeds", {}).get("root", 0)),
                initial_checkpoint=ckpt,
                test_per_class=int(d.get("test_per_class", 100)),
                name=str(d.get("name", "")),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ScheduleInvalid(f"malformed scenario document: {exc!r}") from exc
        except ValueError as exc:
            if isinstance(exc, ScheduleInvalid):
                raise
            raise ScheduleInvalid(f"malformed scenario document: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ScheduleInvalid(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mode": self.mode,
            "K": self.K,
            "R": self.R,
            "per_round_examples": self.per_round_examples,
            "hyperparams": {
                "lr": self.hp.learning_rate,
                "batch": self.hp.batch_size,
                "dropout": self.hp.dropout_rate,
                "epochs": self.hp.epochs,
            },
            "schedules": {k: v.to_list() for k, v in self.schedules.items()},
            "seeds": {"root": self.root_seed},
            "checkpoint": self.initial_checkpoint,
            "test_per_class": self.test_per_class,
        }


@dataclass
class Evaluation:
    overall: float
    per_class: np.ndarray


@dataclass
class RoundRecord:
    round: int
    provenance: dict = field(default_factory=dict)  # client -> list of uids
    accuracy: dict = field(default_factory=dict)  # model id -> Evaluation
    losses: dict = field(default_factory=dict)  # client -> per-epoch mean loss
    weights: tuple | None = None


@dataclass
class RoundLog:
    mode: str
    models: tuple
    initial: Evaluation | None = None
    rounds: list = field(default_factory=list)

    def accuracy_matrix(self, model: str) -> np.ndarray:
        """``[R, 6]`` per-class accuracies of one model over rounds 1..R."""
        return np.array([rec.accuracy[model].per_class for rec in self.rounds]).reshape(-1, N_CLASSES)

    def all_uids(self) -> list[int]:
        return [u for rec in self.rounds for uids in rec.provenance.values() for u in uids]

    def check_disjoint(self) -> None:
        seen = {}
        for rec in self.rounds:
            for client, uids in rec.provenance.items():
                for u in uids:
                    if u in seen:
                        raise AssertionError(f"uid {u} issued at {seen[u]} and {(client, rec.round)}")
                    seen[u] = (client, rec.round)


# -- aggregation ---------------------------------------------------------------

def fedavg(models: list[ModelParams], weights) -> ModelParams:
    """Element-wise weighted average of parameter sets.

    Weights must be non-negative and sum to 1 within 1e-9. Identical models
    come back bit-identical regardless of the weights.
    """
    weights = [float(w) for w in weights]
    if not models or len(models) != len(weights):
        raise ValueError("need one weight per model and at least one model")
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise WeightSumInvalid(f"weights {weights} must be non-negative and sum to 1")
    ref = models[0].arrays()
    for m in models[1:]:
        for a, b in zip(ref, m.arrays()):
            if a.shape != b.shape:
                raise ShapeMismatch(f"cannot average tensors of shape {a.shape} and {b.shape}")
    out = []
    for i, first in enumerate(ref):
        tensors = [m.arrays()[i] for m in models]
        if all(np.array_equal(first, t) for t in tensors[1:]):
            out.append(first.copy())
            continue
        acc = np.zeros_like(first)
        for w, t in zip(weights, tensors):
            acc += w * t
        out.append(acc)
    return ModelParams(*out)


# -- scenario execution --------------------------------------------------------

def check_feasibility(cfg: ScenarioConfig, pool: Dataset) -> None:
    """Fail before training if the shared pool cannot serve every draw."""
    demand = np.zeros(N_CLASSES, dtype=np.int64)
    for sched in cfg.schedules.values():
        for e in sched.entries:
            for c, q in balanced_quota(e.classes, cfg.per_round_examples).items():
                demand[c] += q * e.rounds
    have = pool.per_class_count()
    short = np.flatnonzero(demand > have)
    if len(short):
        c = int(short[0])
        raise InsufficientData(
            f"scenario needs {demand[c]} class-{c} windows over {cfg.R} rounds, "
            f"training pool has {have[c]} (short by {demand[c] - have[c]})",
            label=c,
            shortfall=int(demand[c] - have[c]),
        )


def _round_rng(root: Rng, client: str, r: int) -> Rng:
    return derive_path(root, CLIENT_INDEX[client], r)


def _issue_data(cfg: ScenarioConfig, pool: Dataset, root: Rng, r: int, clients) -> tuple[dict, Dataset]:
    # draws are sequential in a fixed client order so the pool evolves identically
    # whatever the training parallelism
    issued = {}
    for client in clients:
        sched = cfg.schedules[client]
        task = sched.entries[task_at_round(sched, r) - 1]
        try:
            issued[client], pool = draw_disjoint(
                pool, task.classes, cfg.per_round_examples, derive(_round_rng(root, client, r), 0)
            )
        except InsufficientData as exc:
            raise InsufficientData(f"round {r}, {client}: {exc}", label=exc.label, shortfall=exc.shortfall) from exc
    return issued, pool


def _train_client(params: ModelParams, data: Dataset, hp: HyperParams, rng: Rng):
    losses: list[float] = []
    return train(params, data, hp, rng, losses), losses


def _evaluate(p: ModelParams, test: Dataset) -> Evaluation:
    overall, per_class = evaluate(p, test)
    return Evaluation(overall, per_class)


def _setup(cfg: ScenarioConfig, data: PreparedData, initial: ModelParams | None):
    if initial is None:
        if not cfg.initial_checkpoint:
            raise ValueError("scenario has no initial checkpoint")
        initial = load_checkpoint(cfg.initial_checkpoint)
    root = Rng(cfg.root_seed)
    test = build_common_test(data.test, cfg.test_per_class, derive(root, 0))
    pool = data.train
    check_feasibility(cfg, pool)
    return initial, root, test, pool


def run_federated(cfg: ScenarioConfig, data: PreparedData, initial: ModelParams | None = None,
                  parallel: bool = False, on_round=None) -> RoundLog:
    """Synchronous FedAvg rounds between the observed and the generalized client.

    Per round: both trainers copy the server parameters, draw fresh data from
    their current task, train ``hp.epochs`` epochs, and the server becomes
    ``(K-1)/K * generalized + 1/K * client1``. Client models are evaluated
    after local training (before aggregation), the server after aggregation.
    """
    if cfg.mode != "federated":
        raise ValueError("run_federated needs a federated scenario")
    server, root, test, pool = _setup(cfg, data, initial)
    clients = (OBSERVED, GENERALIZED)
    rlog = RoundLog("federated", (OBSERVED, GENERALIZED, SERVER), _evaluate(server, test))
    w_gen, w_obs = cfg.aggregation_weights
    executor = ThreadPoolExecutor(max_workers=len(clients)) if parallel else None
    try:
        for r in range(1, cfg.R + 1):
            t0 = time.perf_counter()
            issued, pool = _issue_data(cfg, pool, root, r, clients)
            jobs = [(server, issued[c], cfg.hp, _round_rng(root, c, r)) for c in clients]
            if executor is not None:
                results = list(executor.map(lambda a: _train_client(*a), jobs))
            else:
                results = [_train_client(*a) for a in jobs]
            trained = dict(zip(clients, (m for m, _ in results)))
            server = fedavg([trained[GENERALIZED], trained[OBSERVED]], [w_gen, w_obs])
            rec = RoundRecord(
                round=r,
                provenance={c: issued[c].uids.tolist() for c in clients},
                accuracy={
                    OBSERVED: _evaluate(trained[OBSERVED], test),
                    GENERALIZED: _evaluate(trained[GENERALIZED], test),
                    SERVER: _evaluate(server, test),
                },
                losses=dict(zip(clients, (ls for _, ls in results))),
                weights=(w_gen, w_obs),
            )
            rlog.rounds.append(rec)
            log.info("round %d done in %.1fs: %s", r, time.perf_counter() - t0,
                     {m: round(e.overall, 4) for m, e in rec.accuracy.items()})
            if on_round is not None:
                on_round(rec, trained, server)
    finally:
        if executor is not None:
            executor.shutdown()
    return rlog


def run_baseline(cfg: ScenarioConfig, data: PreparedData, initial: ModelParams | None = None,
                 on_round=None) -> RoundLog:
    """Fine-tune one model alone, step by step, on its task sequence."""
    model, root, test, pool = _setup(cfg, data, initial)
    rlog = RoundLog("baseline", (OBSERVED,), _evaluate(model, test))
    for r in range(1, cfg.R + 1):
        issued, pool = _issue_data(cfg, pool, root, r, (OBSERVED,))
        model, losses = _train_client(model, issued[OBSERVED], cfg.hp, _round_rng(root, OBSERVED, r))
        rec = RoundRecord(
            round=r,
            provenance={OBSERVED: issued[OBSERVED].uids.tolist()},
            accuracy={OBSERVED: _evaluate(model, test)},
            losses={OBSERVED: losses},
        )
        rlog.rounds.append(rec)
        log.info("step %d: %s", r, np.round(rec.accuracy[OBSERVED].per_class, 3))
        if on_round is not None:
            on_round(rec, {OBSERVED: model}, None)
    return rlog


def run_scenario(cfg: ScenarioConfig, data: PreparedData, initial: ModelParams | None = None,
                 parallel: bool = False) -> RoundLog:
    if cfg.mode == "federated":
        return run_federated(cfg, data, initial, parallel=parallel)
    return run_baseline(cfg, data, initial)


# -- RoundLog files ------------------------------------------------------------

def fmt(x: float) -> str:
    """Float text used in every CSV: 9 significant digits, ``nan`` for absent."""
    return "nan" if x != x else f"{x:.9g}"


def write_accuracy_csv(path, rlog: RoundLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "model", "class", "accuracy", "overall"])
        for rec in rlog.rounds:
            for m in rlog.models:
                ev = rec.accuracy[m]
                for c in range(N_CLASSES):
                    w.writerow([rec.round, m, c, fmt(ev.per_class[c]), fmt(ev.overall)])


def write_provenance_csv(path, rlog: RoundLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "client", "uid"])
        for rec in rlog.rounds:
            for client, uids in rec.provenance.items():
                w.writerows([rec.round, client, u] for u in uids)


def write_loss_csv(path, rlog: RoundLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "client", "epoch", "loss"])
        for rec in rlog.rounds:
            for client, losses in rec.losses.items():
                w.writerows([rec.round, client, e + 1, fmt(v)] for e, v in enumerate(losses))


def write_initial_csv(path, rlog: RoundLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "accuracy", "overall"])
        ev = rlog.initial
        for c in range(N_CLASSES):
            w.writerow([c, fmt(ev.per_class[c]), fmt(ev.overall)])


def read_accuracy_csv(path) -> dict[str, np.ndarray]:
    """Inverse of :func:`write_accuracy_csv`: model id -> ``[R, 6]`` matrix."""
    rows: dict[str, dict[int, np.ndarray]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            per_round = rows.setdefault(row["model"], {})
            per_round.setdefault(int(row["round"]), np.full(N_CLASSES, np.nan))[int(row["class"])] = float(
                row["accuracy"]
            )
    return {m: np.array([v[r] for r in sorted(v)]) for m, v in rows.items()}


def round_log_summary(rlog: RoundLog) -> dict:
    return {
        "mode": rlog.mode,
        "models": list(rlog.models),
        "rounds": len(rlog.rounds),
        "generalized_evaluation": GENERALIZED_EVAL if rlog.mode == "federated" else None,
        "initial": {"overall": rlog.initial.overall, "per_class": rlog.initial.per_class.tolist()},
        "aggregation_weights": [list(rec.weights) for rec in rlog.rounds if rec.weights is not None],
    }


__all__ = [
    "TaskSpec",
    "TaskSchedule",
    "ScenarioConfig",
    "RoundLog",
    "RoundRecord",
    "Evaluation",
    "task_at_round",
    "fedavg",
    "run_federated",
    "run_baseline",
    "run_scenario",
    "check_feasibility",
    "write_accuracy_csv",
    "write_provenance_csv",
    "write_loss_csv",
    "write_initial_csv",
    "read_accuracy_csv",
]
