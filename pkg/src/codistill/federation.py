"""Federated training loop: one generic model, one personalized model per client.

Each round, every sampled client
  1. trains the broadcast generic model against the truncated spectrum of its
     previous personalized model (``gm_update``) and uploads it;
  2. trains its personalized model against the full spectrum of the generic
     model it just produced (``pm_update``).
The server averages the uploaded generic models weighted by local sample count.
Because step 2 never reads the aggregated model, it can overlap the upload,
which is what the wait-free clock in :mod:`codistill.timing` measures.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import timing as timing_mod
from .config import ExperimentConfig
from .data import Dataset, LocalSplit, dirichlet_partition, gen_synthetic, load_csv, split_local
from .losses import DistillCoefficients, LossParts, gm_parts, l2_objective, pm_parts
from .model import LabeledBatch, MlpSpec, accuracy, ce_loss_and_grad, init_model
from .spectrum import spectrum, truncate

VARIANTS = ("spectral_codistill", "fedavg", "local_only", "ditto_l2")

# RNG stream tags, so the two local phases never share a minibatch order
_GM_PHASE, _PM_PHASE, _FT_PHASE = 1, 2, 3


class TrainingDiverged(RuntimeError):
    def __init__(self, round_: int, client: int, phase: str, detail: str = ""):
        super().__init__(f"non-finite {phase} loss for client {client} in round {round_}{detail}")
        self.round = round_
        self.client = client
        self.phase = phase


@dataclass(frozen=True)
class Strategy:
    variant: str = "spectral_codistill"
    coeffs: DistillCoefficients = DistillCoefficients()
    mu_ditto: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown strategy {self.variant!r}")
        if self.mu_ditto < 0:
            raise ValueError("mu_ditto must be >= 0")

    @property
    def trains_pm(self) -> bool:
        return self.variant != "fedavg"


@dataclass(frozen=True)
class LocalHyper:
    eta: float
    epochs: int
    batch_size: int = 0  # 0 = full batch


@dataclass
class ClientState:
    id: int
    train: Dataset
    test: Dataset
    w_p: np.ndarray
    w_g_local: np.ndarray
    timing: timing_mod.ClientTiming = field(default_factory=timing_mod.ClientTiming)
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.w_p.shape != self.w_g_local.shape:
            raise ValueError("personalized and generic models must have the same length")

    @property
    def n_i(self) -> int:
        return len(self.train)


@dataclass
class ServerState:
    w_g: np.ndarray
    round: int = 0


@dataclass
class RoundRecord:
    round: int
    gm_acc: float
    pm_acc: float
    gm_ce: float
    gm_reg: float
    pm_ce: float
    pm_reg: float
    participants: tuple[int, ...]
    t_sim: dict[str, float] = field(default_factory=dict)


def client_rng(seed: int, client: int, round_: int, phase: int) -> np.random.Generator:
    return np.random.default_rng([seed, client, round_, phase])


def _batches(data: Dataset, batch_size: int, rng: np.random.Generator | None):
    n = len(data)
    if batch_size <= 0 or batch_size >= n:
        yield LabeledBatch(data.inputs, data.labels)
        return
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield LabeledBatch(data.inputs[idx], data.labels[idx])


def local_descent(w0: np.ndarray, data: Dataset, hyper: LocalHyper,
                  objective: Callable[[np.ndarray, LabeledBatch], LossParts],
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, float, float]:
    """Plain gradient descent for ``hyper.epochs`` passes; returns weights and mean (ce, reg)."""
    w = np.array(w0, dtype=np.float64, copy=True)
    ce_sum = reg_sum = 0.0
    steps = 0
    for _ in range(hyper.epochs):
        for batch in _batches(data, hyper.batch_size, rng):
            # overflow is reported through the finiteness check below
            with np.errstate(over="ignore", invalid="ignore"):
                parts = objective(w, batch)
            if not (math.isfinite(parts.ce) and math.isfinite(parts.reg)) or not np.all(np.isfinite(parts.grad)):
                raise FloatingPointError(f"ce={parts.ce}, reg={parts.reg}")
            w = w - hyper.eta * parts.grad
            ce_sum += parts.ce
            reg_sum += parts.reg
            steps += 1
    if steps == 0:
        return w, 0.0, 0.0
    return w, ce_sum / steps, reg_sum / steps


def _check_dim(client: ClientState, w: np.ndarray) -> None:
    if np.shape(w) != client.w_p.shape:
        raise ValueError(f"model length {np.shape(w)} does not match client {client.id} ({client.w_p.shape})")


def gm_update(client: ClientState, w_g_broadcast: np.ndarray, strategy: Strategy, hyper: LocalHyper,
              spec: MlpSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Local generic-model training; the teacher is the client's previous personalized model."""
    _check_dim(client, w_g_broadcast)
    if strategy.variant == "spectral_codistill" and strategy.coeffs.lambda_g > 0:
        coeffs = strategy.coeffs
        teacher = truncate(spectrum(client.w_p), coeffs.tau) if coeffs.tau < 1 else spectrum(client.w_p)
        client.stats["gm_teacher_kind"] = teacher.kind

        def objective(w, batch):
            return gm_parts(w, teacher, spec, batch, coeffs)
    else:
        def objective(w, batch):
            return _ce_parts(w, spec, batch)

    w, ce, reg = local_descent(w_g_broadcast, client.train, hyper, objective, rng)
    client.w_g_local = w
    client.stats["gm_ce"], client.stats["gm_reg"] = ce, reg
    return w


def _ce_parts(w, spec: MlpSpec, batch: LabeledBatch) -> LossParts:
    ce, grad = ce_loss_and_grad(w, spec, batch)
    return LossParts(ce, 0.0, grad)


def pm_update(client: ClientState, w_g_updated: np.ndarray, strategy: Strategy, hyper: LocalHyper,
              spec: MlpSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Local personalized-model training against this round's locally updated generic model."""
    _check_dim(client, w_g_updated)
    variant = strategy.variant
    if variant == "fedavg":
        client.stats["pm_ce"] = client.stats["pm_reg"] = 0.0
        return client.w_p
    if variant == "spectral_codistill" and strategy.coeffs.lambda_p > 0:
        coeffs = strategy.coeffs
        teacher = spectrum(w_g_updated)
        client.stats["pm_teacher_kind"] = teacher.kind

        def objective(w, batch):
            return pm_parts(w, teacher, spec, batch, coeffs)
    elif variant == "ditto_l2":
        anchor = np.array(w_g_updated, copy=True)

        def objective(w, batch):
            return l2_objective(w, anchor, strategy.mu_ditto, spec, batch)
    else:
        def objective(w, batch):
            return _ce_parts(w, spec, batch)

    w, ce, reg = local_descent(client.w_p, client.train, hyper, objective, rng)
    client.w_p = w
    client.stats["pm_ce"], client.stats["pm_reg"] = ce, reg
    return w


def aggregate(updates: Sequence[tuple[np.ndarray, int]]) -> np.ndarray:
    """Sample-weighted average ``sum_i (n_i / sum_k n_k) w_i``."""
    if len(updates) == 0:
        raise ValueError("nothing to aggregate")
    d = np.shape(updates[0][0])
    if any(np.shape(w) != d for w, _ in updates):
        raise ValueError("updates have different lengths")
    total = float(sum(n for _, n in updates))
    if total <= 0:
        raise ValueError("total sample count must be positive")
    out = np.zeros(d)
    for w, n in updates:
        out += (n / total) * np.asarray(w, dtype=np.float64)
    return out


def sample_participants(n_clients: int, fraction: float, seed: int, round_: int) -> list[int]:
    """``ceil(fraction * n_clients)`` distinct client ids, fixed by ``(seed, round_)``."""
    if not 0 < fraction <= 1:
        raise ValueError("participation fraction must lie in (0, 1]")
    m = math.ceil(round(fraction * n_clients, 9))
    if m < 1:
        raise ValueError("participation selects no clients")
    if m >= n_clients:
        return list(range(n_clients))
    rng = np.random.default_rng([seed, round_, 0x5A])
    return sorted(int(i) for i in rng.choice(n_clients, size=m, replace=False))


def evaluate_generic(w_g: np.ndarray, test: Dataset, spec: MlpSpec) -> float:
    if len(test) == 0:
        raise ValueError("global test set is empty")
    return accuracy(w_g, spec, test.inputs, test.labels)


def evaluate_personalized(clients: Sequence[ClientState], spec: MlpSpec,
                          generic: np.ndarray | None = None) -> float:
    """Train-size-weighted mean of local test accuracies.

    Pass ``generic`` to score that model on every local test set instead of
    the clients' personalized models (used for strategies without personal models).
    """
    if len(clients) == 0:
        raise ValueError("no clients to evaluate")
    total = sum(c.n_i for c in clients)
    acc = 0.0
    for c in clients:
        w = c.w_p if generic is None else generic
        acc += (c.n_i / total) * accuracy(w, spec, c.test.inputs, c.test.labels)
    return acc


def fine_tune_new_client(w_g: np.ndarray, train: Dataset, test: Dataset, spec: MlpSpec,
                         hyper: LocalHyper, rng: np.random.Generator | None = None) -> tuple[np.ndarray, float]:
    """Fine-tune a copy of the generic model on a new client's data with plain cross-entropy."""
    if np.shape(w_g) != (spec.num_params,):
        raise ValueError("generic model does not match the model spec")
    w, _, _ = local_descent(w_g, train, hyper, lambda w, b: _ce_parts(w, spec, b), rng)
    return w, accuracy(w, spec, test.inputs, test.labels)


# ---------------------------------------------------------------------------
# full experiment


@dataclass
class Setup:
    spec: MlpSpec
    split: LocalSplit
    strategy: Strategy
    gm_hyper: LocalHyper
    pm_hyper: LocalHyper
    schedule: timing_mod.Schedule
    timings: list[timing_mod.ClientTiming]
    timelines: dict[str, timing_mod.Timeline]
    new_clients: list[ClientState]


class TrainingRun(NamedTuple):
    server: ServerState
    clients: list[ClientState]
    records: list[RoundRecord]
    setup: Setup


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "csv":
        return load_csv(cfg.csv_path, cfg.label_column)
    return gen_synthetic(cfg.dataset, cfg.n_samples, cfg.num_classes, cfg.in_dim, cfg.noise,
                         cfg.data_seed, spread=cfg.spread)


def client_timings(cfg: ExperimentConfig) -> list[timing_mod.ClientTiming]:
    total = cfg.n_clients + cfg.n_new_clients

    def column(key):
        value = getattr(cfg, key)
        return list(value) if isinstance(value, (list, tuple)) else [value] * total

    cols = [column(k) for k in ("t_gm_epoch", "t_pm_epoch", "t_up", "t_down")]
    return [timing_mod.ClientTiming(*(float(col[k]) for col in cols)) for k in range(total)]


def strategy_from_config(cfg: ExperimentConfig) -> Strategy:
    coeffs = DistillCoefficients(cfg.lambda_p, cfg.lambda_g, cfg.tau, cfg.eps, cfg.normalize_spectrum)
    return Strategy(cfg.strategy, coeffs, cfg.mu_ditto)


def prepare(cfg: ExperimentConfig) -> tuple[Setup, ServerState, list[ClientState]]:
    ds = build_dataset(cfg)
    total = cfg.n_clients + cfg.n_new_clients
    partition = dirichlet_partition(ds, total, cfg.alpha, cfg.data_seed)
    split = split_local(partition, ds, cfg.test_fraction, cfg.data_seed)
    if cfg.n_new_clients:
        # the global test set covers in-training clients only
        split.global_test = ds.subset(np.concatenate(split.test_indices[:cfg.n_clients]))

    spec = MlpSpec((ds.in_dim, *cfg.hidden, ds.num_classes), seed=cfg.init_seed)
    w0 = init_model(spec)
    timings = client_timings(cfg)
    clients = [
        ClientState(k, split.train[k], split.test[k], w0.copy(), w0.copy(), timings[k])
        for k in range(total)
    ]
    train_clients, new_clients = clients[:cfg.n_clients], clients[cfg.n_clients:]

    schedule = timing_mod.Schedule(
        tuple(tuple(sample_participants(cfg.n_clients, cfg.participation, cfg.sampling_seed, t))
              for t in range(1, cfg.rounds + 1)),
        cfg.e_g, cfg.e_p,
    )
    timelines = {}
    if cfg.rounds > 0:
        for protocol in cfg.protocols:
            timelines[protocol] = timing_mod.simulate(schedule, timings[:cfg.n_clients], cfg.t_agg, protocol)

    setup = Setup(
        spec=spec,
        split=split,
        strategy=strategy_from_config(cfg),
        gm_hyper=LocalHyper(cfg.eta_g, cfg.e_g, cfg.batch_size),
        pm_hyper=LocalHyper(cfg.eta_p, cfg.e_p, cfg.batch_size),
        schedule=schedule,
        timings=timings,
        timelines=timelines,
        new_clients=new_clients,
    )
    return setup, ServerState(w0.copy(), 0), train_clients


def _client_round(client: ClientState, w_g: np.ndarray, setup: Setup, seed: int, round_: int) -> None:
    phase = "gm"
    try:
        w_local = gm_update(client, w_g, setup.strategy, setup.gm_hyper, setup.spec,
                            client_rng(seed, client.id, round_, _GM_PHASE))
        phase = "pm"
        pm_update(client, w_local, setup.strategy, setup.pm_hyper, setup.spec,
                  client_rng(seed, client.id, round_, _PM_PHASE))
    except FloatingPointError as exc:
        raise TrainingDiverged(round_, client.id, phase, f" ({exc})") from None


def run_training(cfg: ExperimentConfig, threads: int = 1) -> TrainingRun:
    """Run ``cfg.rounds`` rounds and record metrics after each.

    Client updates inside a round may run on ``threads`` workers; every
    client draws from its own RNG stream and aggregation happens in client-id
    order, so results do not depend on ``threads``.
    """
    setup, server, clients = prepare(cfg)
    records: list[RoundRecord] = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t, participants in enumerate(setup.schedule.participants, start=1):
            w_broadcast = server.w_g.copy()
            active = [clients[k] for k in participants]
            if pool is None:
                for c in active:
                    _client_round(c, w_broadcast, setup, cfg.sampling_seed, t)
            else:
                list(pool.map(lambda c: _client_round(c, w_broadcast, setup, cfg.sampling_seed, t), active))

            server.w_g = aggregate([(c.w_g_local, c.n_i) for c in active])
            server.round = t
            if not np.all(np.isfinite(server.w_g)):
                raise TrainingDiverged(t, -1, "aggregation")

            generic = server.w_g if not setup.strategy.trains_pm else None
            records.append(RoundRecord(
                round=t,
                gm_acc=evaluate_generic(server.w_g, setup.split.global_test, setup.spec),
                pm_acc=evaluate_personalized(clients, setup.spec, generic),
                gm_ce=float(np.mean([c.stats["gm_ce"] for c in active])),
                gm_reg=float(np.mean([c.stats["gm_reg"] for c in active])),
                pm_ce=float(np.mean([c.stats["pm_ce"] for c in active])),
                pm_reg=float(np.mean([c.stats["pm_reg"] for c in active])),
                participants=tuple(participants),
                t_sim={p: tl.rounds[t - 1].end for p, tl in setup.timelines.items()},
            ))
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainingRun(server, clients, records, setup)


def fine_tune_new_clients(run: TrainingRun, epochs: int, eta: float, seed: int = 0) -> list[tuple[float, float]]:
    """(accuracy before, accuracy after) fine-tuning the final generic model on each held-out client."""
    setup = run.setup
    hyper = LocalHyper(eta, epochs, setup.gm_hyper.batch_size)
    out = []
    for c in setup.new_clients:
        before = accuracy(run.server.w_g, setup.spec, c.test.inputs, c.test.labels)
        _, after = fine_tune_new_client(run.server.w_g, c.train, c.test, setup.spec, hyper,
                                        client_rng(seed, c.id, 0, _FT_PHASE))
        out.append((before, after))
    return out
