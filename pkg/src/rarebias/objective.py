"""Training objectives and their reduction to per-position loss terms.

Both losses are differentiated with the sampled positions held fixed.  Under
the biased dynamics the path log-density at fixed positions is

    log q_θ(ν) = -Σ_t |δ_t(θ)|² / (2Δt) + const,
    δ_t(θ)     = (x_t - x_{t-1} + ∇(U + U_B)(x_{t-1}) Δt / (mγ)) / sqrt(ε),

so ``∇_θ log q_θ(ν) = -(1/(mγ sqrt(ε))) Σ_t δ_t · ∇_θ ∇_x U_B(x_{t-1})``, which
is exactly the ``gradient_weight`` form consumed by
:func:`rarebias.netbias.loss_param_gradient`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import SimConfig, Trajectory, TrajectoryBatch, recover_noises
from .errors import ContractViolation
from .netbias import BiasNet, LossTerms, bias_gradient

INDICATOR_PAD = 0.02


@dataclass
class SmoothIndicatorParams:
    s: float = 10.0
    r: float = 1.0
    offset: float = INDICATOR_PAD

    def __post_init__(self):
        if not self.s > 0:
            raise ContractViolation("indicator scale s must be positive")


def f_smooth(terminal, B, p: SmoothIndicatorParams):
    """``s * tanh(|terminal - B|² - (r + 0.02)²)``; vectorised over terminals."""
    d = np.asarray(terminal, dtype=float) - np.asarray(B, dtype=float)
    d2 = np.sum(d * d, axis=-1)
    return p.s * np.tanh(d2 - (p.r + p.offset) ** 2)


def _as_batch(batch) -> TrajectoryBatch:
    if isinstance(batch, TrajectoryBatch):
        return batch
    if isinstance(batch, Trajectory):
        return TrajectoryBatch.from_list([batch])
    return TrajectoryBatch.from_list(list(batch))


def log_likelihood_ratio(traj, noises_P, cfg: SimConfig):
    """``log dQ/dP = Σ_t (|δ'_t|² - |δ_t|²) / (2Δt)``.

    ``traj.noises`` are the draws under the biased dynamics, ``noises_P`` the
    recovered noises under the unbiased potential.  For a batch, NaN-padded
    steps are ignored and an array of ratios is returned.
    """
    if isinstance(traj, TrajectoryBatch):
        dq, dp = traj.noises, np.asarray(noises_P)
        if dq is None or dp.shape != dq.shape:
            raise ContractViolation("noise arrays must have matching shapes")
        mask = traj.step_mask()
        prod = np.einsum("ntk,ntk->nt", np.where(mask[..., None], dp - dq, 0.0), np.where(mask[..., None], dp + dq, 0.0))
        return prod.sum(axis=1) / (2.0 * cfg.dt)
    dq = np.asarray(traj.noises, dtype=float)
    dp = np.asarray(noises_P, dtype=float)
    if dq.shape != dp.shape:
        raise ContractViolation(f"noise length mismatch: {dq.shape} vs {dp.shape}")
    return float(np.einsum("tk,tk->", dp - dq, dp + dq) / (2.0 * cfg.dt))


def _step_positions(batch: TrajectoryBatch):
    mask = batch.step_mask()
    return batch.positions[:, :-1][mask], mask


@dataclass
class LossParts:
    loss: float
    kl: float
    smooth: float
    success_rate: float


OBJECTIVES = ("cross_entropy", "gated_kl")


def _mode_a_coefficients(b: TrajectoryBatch, potential, cfg: SimConfig, ind: SmoothIndicatorParams,
                         baseline: str, objective: str, ce_weight: float):
    """Per-trajectory weights multiplying ``log q_θ(ν_i)`` in the surrogate."""
    if objective not in OBJECTIVES:
        raise ContractViolation(f"unknown mode-A objective {objective!r}")
    n = len(b)
    lr = log_likelihood_ratio(b, recover_noises(b, potential, cfg), cfg)
    succ = b.success.astype(float)
    fs = f_smooth(b.terminal(), cfg.target, ind)
    R = fs if objective == "cross_entropy" else lr * succ + fs
    if baseline == "loo" and n > 1:
        base = (R.sum() - R) / (n - 1)
    elif baseline in ("loo", "none"):
        base = np.zeros(n)
    else:
        raise ContractViolation(f"unknown baseline {baseline!r}")
    if objective == "gated_kl":
        coef = (succ + R - base) / n
    else:
        # self-normalised importance weights dP/dQ over the successful paths
        coef = (R - base) / n
        if succ.any():
            logw = np.where(succ > 0, -lr, -np.inf)
            w = np.exp(logw - logw.max())
            coef = coef - ce_weight * w / w.sum()
    return coef, lr, succ, fs


def mode_a_loss(batch, potential, cfg: SimConfig, ind: SmoothIndicatorParams, baseline: str = "loo",
                objective: str = "cross_entropy", ce_weight: float = 1.0):
    """Exploration loss ``mean_i [log(dQ/dP)_i 1(ν_i ∈ S) + F_smooth(x_L^i)]``.

    Returns ``(loss, terms, parts)``; ``loss`` is always the quantity above.
    The descent direction carried by ``terms`` depends on ``objective``:

    ``gated_kl``
        score-function estimate of the gradient of the loss itself,
        ``mean_i (1(ν_i ∈ S) + R_i - b_i) ∇_θ log q_θ(ν_i)``.
    ``cross_entropy``
        the smooth-indicator part as above, while the success term is
        replaced by importance-weighted maximum likelihood of the successful
        paths, ``-Σ_i w_i 1(ν_i ∈ S) ∇_θ log q_θ(ν_i)`` with ``w ∝ dP/dQ``.
        Its minimiser is the conditioned path measure, so short-of-target
        endings cannot undercut genuine transitions.

    ``b_i`` is a leave-one-out batch mean (``baseline="loo"``) or zero.
    """
    b = _as_batch(batch)
    if len(b) == 0:
        raise ContractViolation("batch must be nonempty")
    coef, lr, succ, fs = _mode_a_coefficients(b, potential, cfg, ind, baseline, objective, ce_weight)
    kl = lr * succ
    pos, mask = _step_positions(b)
    dq = b.noises[mask]
    per_step = np.repeat(coef, b.lengths)
    gw = -(per_step / (cfg.mg * np.sqrt(cfg.eps)))[:, None] * dq
    terms = LossTerms(pos, np.zeros(len(pos)), gw)
    parts = LossParts(float((kl + fs).mean()), float(kl.mean()), float(fs.mean()), float(succ.mean()))
    return parts.loss, terms, parts


def mode_a_surrogate(net: BiasNet, batch, potential, cfg: SimConfig, ind: SmoothIndicatorParams,
                     baseline: str = "loo", objective: str = "cross_entropy", ce_weight: float = 1.0):
    """Scalar whose θ-gradient at the sampling parameters equals the mode-A terms.

    Positions are frozen; the coefficients are evaluated with the batch's
    recorded noises (i.e. treated as constants).
    """
    b = _as_batch(batch)
    coef, *_ = _mode_a_coefficients(b, potential, cfg, ind, baseline, objective, ce_weight)
    return float(np.dot(coef, path_log_density(net, b, potential, cfg)))


def path_log_density(net: BiasNet | None, batch, potential, cfg: SimConfig) -> np.ndarray:
    """``-Σ_t |δ^Q_t|² / (2Δt)`` per trajectory under ``U + U_B`` (positions fixed)."""
    b = _as_batch(batch)
    pos, mask = _step_positions(b)
    nq = recover_noises(b, potential, cfg)
    if net is not None:
        g = np.zeros(b.positions[:, :-1].shape)
        g[mask] = bias_gradient(net, pos)
        nq = nq + g * (cfg.dt / (cfg.mg * np.sqrt(cfg.eps)))
    sq = np.where(mask, np.einsum("ntk,ntk->nt", np.nan_to_num(nq), np.nan_to_num(nq)), 0.0)
    return -sq.sum(axis=1) / (2.0 * cfg.dt)


def mode_b_loss(net: BiasNet, stored, potential, cfg: SimConfig):
    """Negative mean path log-density of stored paths under the biased dynamics.

    ``loss = mean_i Σ_t |δ^Q_t|² / (2Δt)``; only positions are used.
    Returns ``(loss, terms)``.
    """
    b = _as_batch(stored)
    n = len(b)
    if n == 0:
        raise ContractViolation("stored dataset is empty")
    pos, mask = _step_positions(b)
    nq = recover_noises(b, potential, cfg)[mask]
    scale = cfg.dt / (cfg.mg * np.sqrt(cfg.eps))
    if len(pos):
        nq = nq + bias_gradient(net, pos) * scale
    loss = float(np.einsum("ij,ij->", nq, nq) / (2.0 * cfg.dt) / n)
    gw = nq / (n * cfg.mg * np.sqrt(cfg.eps))
    return loss, LossTerms(pos, np.zeros(len(pos)), gw)
