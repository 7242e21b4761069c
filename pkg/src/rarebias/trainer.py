"""Training loops for the bias network.

``train_explore`` rolls out batches under the current bias and descends the
exploration loss; ``train_combine`` fits the bias to a fixed set of stored
successful paths without generating new ones.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import SimConfig, TrajectoryBatch, simulate
from .errors import ContractViolation, NumericOverflowError, SimulationDiverged, TrainingUnstable
from .netbias import BiasNet, init_params, loss_param_gradient
from .objective import OBJECTIVES, SmoothIndicatorParams, mode_a_loss, mode_b_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 512
    steps: int = 300
    learning_rate: float = 1e-3
    r_start: float = 1.0
    r_end: float = 0.05
    r_shape: str = "linear"
    s: float = 10.0
    optimizer: str = "adam"
    checkpoint_every: int = 25
    seed: int = 0
    hidden_widths: tuple = (64, 64, 64, 64)
    feature_mode: str = "with_control_features"
    control_sign: float = 1.0
    baseline: str = "loo"
    objective: str = "cross_entropy"
    ce_weight: float = 1.0
    max_divergent_fraction: float = 0.1

    def __post_init__(self):
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if self.batch_size < 1 or self.steps < 0:
            raise ContractViolation("batch_size must be >= 1 and steps >= 0")
        if not self.learning_rate > 0:
            raise ContractViolation("learning rate must be positive")
        if not self.r_start >= self.r_end > 0:
            raise ContractViolation("need r_start >= r_end > 0")
        if self.r_shape not in ("linear", "cosine"):
            raise ContractViolation(f"unknown r schedule {self.r_shape!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")
        if self.objective not in OBJECTIVES:
            raise ContractViolation(f"unknown mode-A objective {self.objective!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        keys = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in keys})


@dataclass
class StepRecord:
    step: int
    loss: float
    kl: float
    smooth: float
    success_rate: float
    r: float
    seconds: float
    skipped: bool = False


@dataclass
class TrainReport:
    records: list[StepRecord] = field(default_factory=list)
    divergent_steps: int = 0
    skipped_updates: int = 0
    holdout_loss: list[float] = field(default_factory=list)

    COLUMNS = ("step", "loss", "kl", "smooth", "success_rate", "r", "seconds")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for rec in self.records:
                w.writerow([getattr(rec, c) for c in self.COLUMNS])


def anneal_r(step: int, cfg: TrainConfig) -> float:
    """Indicator radius at ``step``: ``r_start`` at 0, ``r_end`` at ``cfg.steps``."""
    if cfg.steps <= 0:
        return cfg.r_start
    frac = min(max(step / cfg.steps, 0.0), 1.0)
    if frac == 1.0:
        return cfg.r_end
    if cfg.r_shape == "linear":
        return cfg.r_start + (cfg.r_end - cfg.r_start) * frac
    return cfg.r_end + (cfg.r_start - cfg.r_end) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    kind: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    skipped: int = 0


def update(theta: np.ndarray, grad: np.ndarray, lr: float, state: OptimizerState | None = None) -> np.ndarray:
    """One descent step on a flat parameter vector.

    Non-finite gradients leave ``theta`` unchanged and bump ``state.skipped``.
    """
    state = state or OptimizerState()
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape:
        raise ContractViolation("gradient shape does not match parameters")
    if not np.all(np.isfinite(grad)):
        state.skipped += 1
        log.warning("non-finite gradient; update skipped")
        return theta
    if state.kind == "sgd":
        return theta - lr * grad
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = state.m / (1 - state.beta1 ** state.t)
    vhat = state.v / (1 - state.beta2 ** state.t)
    return theta - lr * mhat / (np.sqrt(vhat) + state.eps)


def initial_net(sim_cfg: SimConfig, cfg: TrainConfig) -> BiasNet:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0xB1A5,)))
    anchors = np.stack([sim_cfg.start_near, sim_cfg.target])
    return init_params(rng, cfg.hidden_widths, cfg.feature_mode, anchors, control_sign=cfg.control_sign)


def train_explore(potential, sim_cfg: SimConfig, cfg: TrainConfig, net: BiasNet | None = None, on_checkpoint=None, threads: int = 1):
    """Exploration training: batch rollouts under the current bias, then descend.

    Returns ``(net, report)``.  A batch whose rollout diverges is skipped and
    counted; exceeding ``max_divergent_fraction`` raises TrainingUnstable.
    """
    net = initial_net(sim_cfg, cfg) if net is None else net
    report = TrainReport()
    state = OptimizerState(kind=cfg.optimizer)
    theta = net.flat()
    for k in range(cfg.steps):
        t0 = time.perf_counter()
        r = anneal_r(k + 1, cfg)
        ind = SmoothIndicatorParams(s=cfg.s, r=r)
        try:
            batch = simulate(potential, net, sim_cfg, cfg.batch_size, seed=cfg.seed, stream=k + 1, threads=threads)
            _, terms, parts = mode_a_loss(batch, potential, sim_cfg, ind, cfg.baseline, cfg.objective, cfg.ce_weight)
            grad = loss_param_gradient(net, terms).flat()
        except (SimulationDiverged, NumericOverflowError) as exc:
            report.divergent_steps += 1
            log.warning("step %d skipped: %s", k, exc)
            report.records.append(StepRecord(k, math.nan, math.nan, math.nan, math.nan, r, time.perf_counter() - t0, True))
            if report.divergent_steps > cfg.max_divergent_fraction * cfg.steps:
                raise TrainingUnstable(f"{report.divergent_steps} of {k + 1} steps diverged") from exc
            continue
        theta = update(theta, grad, cfg.learning_rate, state)
        net = net.with_flat(theta)
        report.records.append(
            StepRecord(k, parts.loss, parts.kl, parts.smooth, parts.success_rate, r, time.perf_counter() - t0)
        )
        log.info("step %d loss %.4f success %.3f r %.3f", k, parts.loss, parts.success_rate, r)
        if on_checkpoint is not None and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(k + 1, net)
    report.skipped_updates = state.skipped
    return net, report


def train_combine(stored, potential, sim_cfg: SimConfig, cfg: TrainConfig, net: BiasNet | None = None, holdout=None, on_checkpoint=None):
    """Fit the bias to stored successful paths by mini-batch descent.

    ``holdout`` (optional trajectories) is evaluated once per epoch and the
    values are appended to ``report.holdout_loss``.
    """
    data = stored if isinstance(stored, TrajectoryBatch) else TrajectoryBatch.from_list(list(stored))
    if len(data) == 0:
        raise ContractViolation("stored dataset is empty")
    hold = None
    if holdout is not None:
        hold = holdout if isinstance(holdout, TrajectoryBatch) else TrajectoryBatch.from_list(list(holdout))
    net = initial_net(sim_cfg, cfg) if net is None else net
    report = TrainReport()
    state = OptimizerState(kind=cfg.optimizer)
    theta = net.flat()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0xC0B,)))
    n = len(data)
    bs = min(cfg.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    for k in range(cfg.steps):
        t0 = time.perf_counter()
        if pos + bs > n:
            if hold is not None:
                report.holdout_loss.append(mode_b_loss(net, hold, potential, sim_cfg)[0])
            order = rng.permutation(n)
            pos = 0
        sel = np.sort(order[pos:pos + bs])
        pos += bs
        mb = _subset(data, sel)
        loss, terms = mode_b_loss(net, mb, potential, sim_cfg)
        grad = loss_param_gradient(net, terms).flat()
        theta = update(theta, grad, cfg.learning_rate, state)
        net = net.with_flat(theta)
        report.records.append(StepRecord(k, loss, loss, 0.0, math.nan, math.nan, time.perf_counter() - t0))
        if on_checkpoint is not None and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(k + 1, net)
    if hold is not None:
        report.holdout_loss.append(mode_b_loss(net, hold, potential, sim_cfg)[0])
    report.skipped_updates = state.skipped
    return net, report


def _subset(b: TrajectoryBatch, sel) -> TrajectoryBatch:
    return TrajectoryBatch(
        b.positions[sel],
        None if b.noises is None else b.noises[sel],
        b.lengths[sel],
        b.success[sel],
        b.seed,
        None if b.indices is None else b.indices[sel],
    )
