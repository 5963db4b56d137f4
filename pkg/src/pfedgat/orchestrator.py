"""Communication-round loop for pFedGAT and the comparison strategies.

Strategies:

* ``pfedgat``: attention-derived allocation matrix, heads trained from client feedback.
* ``direct_matrix``: the allocation matrix is a row softmax of free logits
  trained from the same feedback (no attention, no node features).
* ``fedavg``: one global model weighted by training-set size.
* ``local``: no communication at all.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from pfedgat import gat as gat_mod
from pfedgat.client import (
    ClientFeedback,
    ClientState,
    MlpSpec,
    client_feedback,
    client_rng,
    evaluate,
    init_params,
    local_train,
)
from pfedgat.data import PARTITION_MODES, Dataset, PartitionSpec, generate_synthetic, partition
from pfedgat.gat_optimizer import allocation_grad, apply_update, backward, total_loss
from pfedgat.numerics import softmax_row, softmax_row_backward

log = logging.getLogger(__name__)

STRATEGIES = ("pfedgat", "local", "fedavg", "direct_matrix")
FLOAT_BYTES = 8

_TAG_DATA = 0x4441
_TAG_INIT = 0x494E


@dataclass(frozen=True)
class ExperimentConfig:
    n_clients: int = 10
    rounds: int = 50
    local_epochs: int = 5
    lr_local: float = 0.01
    lr_gat: float = 0.01
    batch_size: int = 64
    strategy: str = "pfedgat"
    seed: int = 0
    # data
    num_classes: int = 10
    samples_per_class: int = 100
    feature_dim: int = 32
    class_separation: float = 3.0
    # partition
    partition_mode: str = "dirichlet"
    classes_per_client: int = 2
    beta: float = 0.5
    groups: int = 1
    test_fraction: float = 0.2
    val_fraction: float = 0.0
    feedback_split: str = "test"
    # client model
    hidden_widths: tuple[int, ...] = (64, 32)
    hidden_slope: float = 0.01
    shared_init: bool = True
    # server attention
    heads: int = 8
    gat_dim: int = 16
    leaky_slope: float = 0.2
    grad_clip: float = 0.0
    # clients n_clients - join_clients .. n_clients-1 become active at join_round
    join_clients: int = 0
    join_round: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        self.validate()

    def validate(self) -> None:
        def bad(key, why):
            raise ConfigError(key, why)

        for key in ("n_clients", "rounds", "batch_size", "num_classes", "samples_per_class",
                    "feature_dim", "heads", "gat_dim", "groups"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        for key in ("local_epochs", "join_clients", "join_round"):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")
        for key in ("lr_local", "lr_gat", "class_separation", "grad_clip"):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")
        if self.strategy not in STRATEGIES:
            bad("strategy", f"must be one of {', '.join(STRATEGIES)}")
        if self.partition_mode not in PARTITION_MODES:
            bad("partition_mode", f"must be one of {', '.join(PARTITION_MODES)}")
        if self.beta <= 0:
            bad("beta", "must be > 0")
        if not 0 < self.test_fraction < 1:
            bad("test_fraction", "must lie in (0, 1)")
        if not 0 <= self.val_fraction < 1 - self.test_fraction:
            bad("val_fraction", "must be >= 0 and leave room for training data")
        if self.feedback_split not in ("test", "val"):
            bad("feedback_split", "must be 'test' or 'val'")
        if self.feedback_split == "val" and self.val_fraction <= 0:
            bad("feedback_split", "'val' needs val_fraction > 0")
        if not 0 < self.leaky_slope < 1:
            bad("leaky_slope", "must lie in (0, 1)")
        if not 0 <= self.hidden_slope < 1:
            bad("hidden_slope", "must lie in [0, 1)")
        if any(w < 1 for w in self.hidden_widths):
            bad("hidden_widths", "widths must be >= 1")
        if self.join_clients:
            if self.join_clients >= self.n_clients:
                bad("join_clients", "must leave at least one initial client")
            if not 1 <= self.join_round <= self.rounds:
                bad("join_round", "must lie in [1, rounds]")

    @property
    def initial_clients(self) -> int:
        return self.n_clients - self.join_clients

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(
            mode=self.partition_mode,
            classes_per_client=self.classes_per_client,
            beta=self.beta,
            test_fraction=self.test_fraction,
            val_fraction=self.val_fraction,
            groups=self.groups,
            seed=self.seed,
        )

    def mlp_spec(self) -> MlpSpec:
        return MlpSpec((self.feature_dim, *self.hidden_widths, self.num_classes), self.hidden_slope)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d


class ConfigError(ValueError):
    def __init__(self, key: str, message: str, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{key}{where}: {message}")


CONFIG_KEYS = tuple(f.name for f in fields(ExperimentConfig))


@dataclass
class RoundRecord:
    round: int
    client_ids: list[int]
    train_loss: list[float]
    test_loss: list[float]
    test_acc: list[float]
    total_loss: float
    allocation: Optional[np.ndarray] = None
    bytes_uploaded: dict[str, int] = field(default_factory=dict)

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.test_acc))

    @property
    def std_acc(self) -> float:
        return float(np.std(self.test_acc))


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, tag])


class Simulation:
    """Mutable state of one experiment: clients, server model, round counter."""

    def __init__(self, cfg: ExperimentConfig, threads: int = 1, dataset: Optional[Dataset] = None):
        self.cfg = cfg
        self.threads = max(1, int(threads))
        self.spec = cfg.mlp_spec()
        if dataset is None:
            dataset = generate_synthetic(
                cfg.num_classes, cfg.samples_per_class, cfg.feature_dim, cfg.class_separation,
                seed=int(_stream(cfg.seed, _TAG_DATA).integers(2**63)),
            )
        self.dataset = dataset
        self.partition = partition(dataset, cfg.n_clients, cfg.partition_spec())
        self.shared_init = init_params(self.spec, _stream(cfg.seed, _TAG_INIT))
        self.clients = [self._make_client(cid) for cid in range(cfg.n_clients)]
        self.gat = gat_mod.init_gat(self.spec.n_params, cfg.gat_dim, cfg.heads, cfg.leaky_slope, seed=cfg.seed)
        self.logits = np.zeros((0, 0))
        self.round = 0

    def _make_client(self, cid: int) -> ClientState:
        rng = client_rng(self.cfg.seed, cid)
        if self.cfg.shared_init:
            params = self.shared_init.copy()
        else:
            params = init_params(self.spec, rng)
        p = self.partition
        return ClientState(
            cid, self.spec, params, self.dataset,
            p.train[cid], p.test[cid], p.val[cid], rng=rng,
        )

    @property
    def d(self) -> int:
        return self.spec.n_params

    def active_ids(self, t: int) -> list[int]:
        cfg = self.cfg
        if cfg.join_clients and t < cfg.join_round:
            return list(range(cfg.initial_clients))
        return list(range(cfg.n_clients))

    def _map(self, fn: Callable, items: list):
        if self.threads == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    def _train(self, active: list[ClientState]) -> list[float]:
        cfg = self.cfg

        def work(c: ClientState) -> float:
            local_train(c, cfg.local_epochs, cfg.lr_local, cfg.batch_size)
            return c.epoch_losses[-1] if c.epoch_losses else float("nan")

        return self._map(work, active)

    def _report(self, c: ClientState) -> tuple[float, float]:
        return evaluate(self.spec, c.params, *c.view("test"))

    def _feedback(self, active: list[ClientState], received: list[np.ndarray]):
        """Install received parameters, collect feedback, and report test metrics."""
        split = self.cfg.feedback_split

        def work(pair):
            c, theta = pair
            c.params = theta.copy()
            fb = client_feedback(c, c.params, split)
            report = (fb.loss, fb.test_accuracy) if split == "test" else self._report(c)
            return fb, report

        out = self._map(work, list(zip(active, received)))
        return [o[0] for o in out], [o[1] for o in out]

    # ---------------------------------------------------------------- strategies

    def run_round_local(self, t: int, active: list[ClientState]) -> RoundRecord:
        train_loss = self._train(active)
        reports = self._map(self._report, active)
        return self._record(t, active, train_loss, reports, total=sum(r[0] for r in reports),
                            comms={"params": 0, "losses": 0, "gradients": 0})

    def run_round_fedavg(self, t: int, active: list[ClientState]) -> RoundRecord:
        train_loss = self._train(active)
        weights = fedavg_weights([c.n_train for c in active])
        glob = weights @ np.vstack([c.params for c in active])
        for c in active:
            c.params = glob.copy()
        reports = self._map(self._report, active)
        n = len(active)
        return self._record(t, active, train_loss, reports, total=sum(r[0] for r in reports),
                            comms={"params": n * self.d * FLOAT_BYTES, "losses": 0, "gradients": 0})

    def _mixing_round(self, t, active, alloc_fn, update_fn) -> RoundRecord:
        train_loss = self._train(active)
        uploads = [c.params.copy() for c in active]
        R, tape = alloc_fn(uploads)
        received = gat_mod.aggregate(R, uploads)
        feedback, reports = self._feedback(active, received)
        update_fn(tape, uploads, feedback)
        n = len(active)
        comms = {
            "params": n * self.d * FLOAT_BYTES,
            "losses": n * FLOAT_BYTES,
            "gradients": n * self.d * FLOAT_BYTES,
        }
        return self._record(t, active, train_loss, reports, total=total_loss(feedback),
                            comms=comms, R=R)

    def run_round_pfedgat(self, t: int, active: list[ClientState]) -> RoundRecord:
        def alloc(uploads):
            H = gat_mod.build_node_features(uploads)
            return gat_mod.allocation_matrix(H, self.gat)

        def update(tape, uploads, feedback):
            grads = backward(tape, uploads, feedback)
            clip = self.cfg.grad_clip or None
            self.gat = apply_update(self.gat, grads, self.cfg.lr_gat, clip)

        return self._mixing_round(t, active, alloc, update)

    def run_round_direct_matrix(self, t: int, active: list[ClientState]) -> RoundRecord:
        n = len(active)
        if self.logits.shape != (n, n):
            self.logits = _grow(self.logits, n)

        def alloc(uploads):
            R = softmax_row(self.logits)
            return R, R

        def update(R, uploads, feedback):
            self.logits = self.logits - self.cfg.lr_gat * direct_matrix_grad(R, uploads, feedback)

        return self._mixing_round(t, active, alloc, update)

    # ---------------------------------------------------------------- driver

    def _record(self, t, active, train_loss, reports, total, comms, R=None) -> RoundRecord:
        return RoundRecord(
            round=t,
            client_ids=[c.cid for c in active],
            train_loss=[float(x) for x in train_loss],
            test_loss=[float(r[0]) for r in reports],
            test_acc=[float(r[1]) for r in reports],
            total_loss=float(total),
            allocation=None if R is None else np.array(R),
            bytes_uploaded=comms,
        )

    def step(self) -> RoundRecord:
        t = self.round
        active = [self.clients[i] for i in self.active_ids(t)]
        runner = getattr(self, f"run_round_{self.cfg.strategy}")
        try:
            rec = runner(t, active)
        except ValueError as exc:
            raise RuntimeError(f"round {t} ({self.cfg.strategy}): {exc}") from exc
        log.debug("round %d mean acc %.4f total loss %.4f", t, rec.mean_acc, rec.total_loss)
        self.round += 1
        return rec


def fedavg_weights(sizes) -> np.ndarray:
    """p_i = n_i / n."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.ndim != 1 or len(sizes) == 0 or sizes.sum() <= 0:
        raise ValueError("need at least one client with data")
    return sizes / sizes.sum()


def _grow(logits: np.ndarray, n: int) -> np.ndarray:
    """Pad the logit matrix with zero rows/columns for newly joined clients."""
    out = np.zeros((n, n))
    m = logits.shape[0]
    out[:m, :m] = logits
    return out


def direct_matrix_grad(R: np.ndarray, uploads, feedback) -> np.ndarray:
    """Gradient of the summed client losses with respect to the allocation logits."""
    return softmax_row_backward(R, allocation_grad(uploads, feedback))


def run_experiment(cfg: ExperimentConfig, threads: int = 1,
                   dataset: Optional[Dataset] = None) -> list[RoundRecord]:
    """Run every round of ``cfg``; deterministic in ``cfg`` for any thread count."""
    cfg.validate()
    sim = Simulation(cfg, threads=threads, dataset=dataset)
    return [sim.step() for _ in range(cfg.rounds)]


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})


__all__ = [
    "ClientFeedback", "ConfigError", "CONFIG_KEYS", "ExperimentConfig", "RoundRecord",
    "STRATEGIES", "Simulation", "direct_matrix_grad", "fedavg_weights", "run_experiment", "with_overrides",
]
