"""Euler–Maruyama integration of overdamped Langevin dynamics.

Update rule (positions in the plane, per-component noise ``δ ~ N(0, Δt)``)::

    x_t = x_{t-1} - ∇(U + U_B)(x_{t-1}) Δt / (mγ) + sqrt(ε) δ_t,   ε = 2 k_B T / (mγ)

Every trajectory ``i`` owns an independent random stream derived from
``(seed, stream, i)``, so results do not depend on how trajectories are
chunked or distributed over threads.
"""

from __future__ import annotations

import functools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolation, SimulationDiverged
from .potentials import PotentialSpec, as_potential, paper_minima

K_B = 8.617e-5
_BLOWUP = 1e6


@functools.lru_cache(maxsize=None)
def _default_minima(tilt: float = 0.05):
    a, b = paper_minima(tilt)
    return tuple(a), tuple(b)


def _default_a():
    return np.array(_default_minima()[0])


def _default_b():
    return np.array(_default_minima()[1])


@dataclass
class SimConfig:
    """Physical constants, horizon and event definition for one simulation.

    ``event="ball"`` stops a trajectory as soon as it is within ``delta`` of
    ``target``.  ``event="halfplane"`` runs every trajectory for ``n_steps``
    and counts it as a success if its final x-component exceeds
    ``halfplane_x``.  ``start_radius`` defaults to ``delta``.
    """

    temperature: float = 1200.0
    mass: float = 1.0
    gamma: float = 1.0
    dt: float = 0.01
    n_steps: int = 500
    delta: float = 0.05
    start_near: np.ndarray = field(default_factory=_default_a)
    target: np.ndarray = field(default_factory=_default_b)
    seed: int = 0
    start_radius: float | None = None
    event: str = "ball"
    halfplane_x: float = 0.0

    def __post_init__(self):
        self.start_near = np.asarray(self.start_near, dtype=float).reshape(2)
        self.target = np.asarray(self.target, dtype=float).reshape(2)
        self.validate()

    def validate(self):
        if not self.dt > 0:
            raise ContractViolation("dt must be positive")
        if self.n_steps < 1:
            raise ContractViolation("n_steps must be >= 1")
        if not self.delta > 0:
            raise ContractViolation("delta must be positive")
        if not (self.temperature > 0 and self.mass > 0 and self.gamma > 0):
            raise ContractViolation("temperature, mass and gamma must be positive")
        if self.event not in ("ball", "halfplane"):
            raise ContractViolation(f"unknown event kind {self.event!r}")

    @property
    def eps(self) -> float:
        return 2.0 * K_B * self.temperature / (self.mass * self.gamma)

    @property
    def mg(self) -> float:
        return self.mass * self.gamma

    @property
    def r_start(self) -> float:
        return self.delta if self.start_radius is None else self.start_radius

    def replace(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "mass": self.mass,
            "gamma": self.gamma,
            "k_B": K_B,
            "eps": self.eps,
            "dt": self.dt,
            "n_steps": self.n_steps,
            "delta": self.delta,
            "start_near": [float(v) for v in self.start_near],
            "target": [float(v) for v in self.target],
            "seed": self.seed,
            "start_radius": self.start_radius,
            "event": self.event,
            "halfplane_x": self.halfplane_x,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        keys = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in keys})


@dataclass
class Trajectory:
    """One sampled path ``(x_0..x_L)`` together with the noises ``(δ_1..δ_L)``."""

    positions: np.ndarray
    noises: np.ndarray | None
    terminated_at: int | None
    success: bool
    seed: int = 0
    index: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.positions) - 1


@dataclass
class TrajectoryBatch:
    """Columnar storage for many trajectories, NaN-padded past each length."""

    positions: np.ndarray  # (n, N+1, 2)
    noises: np.ndarray  # (n, N, 2)
    lengths: np.ndarray  # (n,) number of steps taken
    success: np.ndarray  # (n,) bool
    seed: int = 0
    indices: np.ndarray | None = None
    log_ratio: np.ndarray | None = None  # log dQ/dP accumulated during the rollout

    def __len__(self):
        return len(self.lengths)

    def __getitem__(self, i) -> Trajectory:
        L = int(self.lengths[i])
        noises = None if self.noises is None else self.noises[i, :L].copy()
        ok = bool(self.success[i])
        return Trajectory(
            self.positions[i, :L + 1].copy(),
            noises,
            L if ok else None,
            ok,
            self.seed,
            int(self.indices[i]) if self.indices is not None else i,
        )

    def to_list(self) -> list[Trajectory]:
        return [self[i] for i in range(len(self))]

    def step_mask(self) -> np.ndarray:
        """``(n, N)`` mask of steps that were actually taken."""
        n_max = self.positions.shape[1] - 1
        return np.arange(n_max)[None, :] < self.lengths[:, None]

    def terminal(self) -> np.ndarray:
        return self.positions[np.arange(len(self)), self.lengths]

    @classmethod
    def from_list(cls, trajs: list[Trajectory], n_steps: int | None = None) -> "TrajectoryBatch":
        if not trajs:
            raise ContractViolation("empty trajectory list")
        lengths = np.array([len(t.positions) - 1 for t in trajs])
        n_max = int(lengths.max()) if n_steps is None else n_steps
        pos = np.full((len(trajs), n_max + 1, 2), np.nan)
        has_noise = all(t.noises is not None for t in trajs)
        noi = np.full((len(trajs), n_max, 2), np.nan) if has_noise else None
        for i, t in enumerate(trajs):
            pos[i, :len(t.positions)] = t.positions
            if has_noise:
                noi[i, :len(t.noises)] = t.noises
        return cls(
            pos, noi, lengths,
            np.array([t.success for t in trajs], dtype=bool),
            trajs[0].seed,
            np.array([t.index for t in trajs]),
        )


def trajectory_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for trajectory ``index`` of run ``(seed, stream)``."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def draw_start_and_noise(rng, cfg: SimConfig):
    """Start uniform in the start ball, then ``N`` two-component noises."""
    u = rng.uniform(size=2)
    theta = 2.0 * np.pi * u[0]
    r = cfg.r_start * np.sqrt(u[1])
    start = cfg.start_near + r * np.array([np.cos(theta), np.sin(theta)])
    noises = rng.normal(0.0, np.sqrt(cfg.dt), size=(cfg.n_steps, 2))
    return start, noises


def integrate(potential, bias, cfg: SimConfig, starts, noises, keep_paths=True, indices=None):
    """Integrate trajectories from explicit starts and pre-drawn noises.

    Returns ``(positions | None, lengths, success, log_ratio)`` where
    ``log_ratio`` is ``Σ (|δ'|² - |δ|²) / (2Δt)`` with ``δ'`` the noise that
    would produce the same path under ``potential`` alone.
    """
    pot = as_potential(potential)
    starts = np.asarray(starts, dtype=float).reshape(-1, 2)
    noises = np.asarray(noises, dtype=float)
    n, N = len(starts), cfg.n_steps
    if noises.shape != (n, N, 2):
        raise ContractViolation(f"noises must have shape {(n, N, 2)}, got {noises.shape}")
    dt, mg = cfg.dt, cfg.mg
    sqrt_eps = np.sqrt(cfg.eps)
    X = starts.copy()
    paths = None
    if keep_paths:
        paths = np.full((n, N + 1, 2), np.nan)
        paths[:, 0] = X
    lengths = np.full(n, N, dtype=np.int64)
    success = np.zeros(n, dtype=bool)
    log_ratio = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    ball = cfg.event == "ball"
    r2 = cfg.delta ** 2

    if ball:
        d = X - cfg.target
        hit = np.einsum("ij,ij->i", d, d) < r2
        success[hit] = True
        lengths[hit] = 0
        alive[hit] = False

    idx = np.flatnonzero(alive)
    for t in range(1, N + 1):
        if idx.size == 0:
            break
        x = X[idx]
        gu = pot.gradient(x)
        gb = None if bias is None else bias.gradient(x)
        drift = gu if gb is None else gu + gb
        step = -drift * (dt / mg) + sqrt_eps * noises[idx, t - 1]
        xn = x + step
        bad = ~np.all(np.isfinite(xn) & (np.abs(xn) < _BLOWUP), axis=1)
        if bad.any():
            j = int(idx[np.argmax(bad)])
            raise SimulationDiverged(t, int(indices[j]) if indices is not None else j)
        if gb is not None:
            # the unbiased-noise difference is exactly the scaled bias force
            diff = gb * (-dt / (mg * sqrt_eps))
            dq = noises[idx, t - 1]
            log_ratio[idx] += np.einsum("ij,ij->i", diff, 2.0 * dq + diff) / (2.0 * dt)
        X[idx] = xn
        if keep_paths:
            paths[idx, t] = xn
        if ball:
            d = xn - cfg.target
            hit = np.einsum("ij,ij->i", d, d) < r2
            if hit.any():
                done = idx[hit]
                success[done] = True
                lengths[done] = t
                idx = idx[~hit]
    if not ball:
        success = X[:, 0] > cfg.halfplane_x
    return paths, lengths, success, log_ratio


def simulate(
    potential,
    bias,
    cfg: SimConfig,
    n: int,
    *,
    seed: int | None = None,
    stream: int = 0,
    first_index: int = 0,
    keep_paths: bool = True,
    chunk: int = 8192,
    threads: int = 1,
) -> TrajectoryBatch:
    """Roll out ``n`` trajectories with per-trajectory random streams."""
    seed = cfg.seed if seed is None else seed
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]

    def run(bound):
        lo, hi = bound
        idx = np.arange(first_index + lo, first_index + hi)
        starts = np.empty((hi - lo, 2))
        noises = np.empty((hi - lo, cfg.n_steps, 2))
        for j, i in enumerate(idx):
            starts[j], noises[j] = draw_start_and_noise(trajectory_rng(seed, i, stream), cfg)
        paths, lengths, success, lr = integrate(potential, bias, cfg, starts, noises, keep_paths, idx)
        if keep_paths:
            noises[np.arange(cfg.n_steps)[None, :] >= lengths[:, None]] = np.nan
        return paths, (noises if keep_paths else None), lengths, success, lr

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]

    if not parts:
        raise ContractViolation("n must be >= 1")
    cat = lambda k: None if parts[0][k] is None else np.concatenate([p[k] for p in parts])
    return TrajectoryBatch(
        cat(0), cat(1), cat(2), cat(3), seed,
        np.arange(first_index, first_index + n), cat(4),
    )


def rollout(potential, bias, cfg: SimConfig, rng) -> Trajectory:
    """Single trajectory drawing its start and noises from ``rng``."""
    start, noises = draw_start_and_noise(rng, cfg)
    paths, lengths, success, _ = integrate(potential, bias, cfg, start[None], noises[None])
    L = int(lengths[0])
    ok = bool(success[0])
    return Trajectory(paths[0, :L + 1], noises[:L].copy(), L if ok else None, ok, cfg.seed, 0)


def recover_noises(traj, potential, cfg: SimConfig) -> np.ndarray:
    """Noises that would reproduce ``traj`` under ``potential`` alone.

    Accepts a :class:`Trajectory` (returns ``(L, 2)``) or a
    :class:`TrajectoryBatch` (returns ``(n, N, 2)``, NaN where no step was taken).
    """
    pot = as_potential(potential)
    if isinstance(traj, TrajectoryBatch):
        P = traj.positions
        prev = P[:, :-1].reshape(-1, 2)
        ok = traj.step_mask().ravel()
        grad = np.full_like(prev, np.nan)
        grad[ok] = pot.gradient(prev[ok])
        grad = grad.reshape(P[:, :-1].shape)
        return (P[:, 1:] - P[:, :-1] + grad * (cfg.dt / cfg.mg)) / np.sqrt(cfg.eps)
    P = np.asarray(traj.positions if isinstance(traj, Trajectory) else traj, dtype=float)
    if len(P) < 2:
        return np.zeros((0, 2))
    grad = pot.gradient(P[:-1])
    return (P[1:] - P[:-1] + grad * (cfg.dt / cfg.mg)) / np.sqrt(cfg.eps)


def classify_channel(traj: Trajectory) -> str:
    """``upper`` / ``lower`` by the sign of y where the path first crosses x = 0."""
    if not traj.success:
        return "none"
    P = np.asarray(traj.positions)
    x = P[:, 0]
    cross = np.flatnonzero((x[:-1] < 0) & (x[1:] >= 0))
    if cross.size == 0:
        return "none"
    k = cross[0]
    (x0, y0), (x1, y1) = P[k], P[k + 1]
    y = y0 + (y1 - y0) * (-x0) / (x1 - x0)
    return "upper" if y >= 0 else "lower"


def paper_config(temperature: float = 1200.0, **kw) -> SimConfig:
    return SimConfig(temperature=temperature, **kw)


PAPER_POTENTIAL = PotentialSpec("paper2d", {"tilt": 0.05})
