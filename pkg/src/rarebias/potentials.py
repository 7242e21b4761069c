"""Potential-energy surfaces for the 2D Langevin system.

All potentials are vectorised: ``energy`` accepts points of shape ``(n, 2)``
(or a single ``(2,)`` point) and ``gradient`` returns matching shapes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigurationError, SearchFailure

POTENTIAL_IDS = ("paper2d", "flat", "quadratic-well", "grid-interpolated")


def _as_points(p) -> tuple[np.ndarray, bool]:
    arr = np.asarray(p, dtype=float)
    single = arr.ndim == 1
    return np.atleast_2d(arr), single


@dataclass(frozen=True)
class PotentialSpec:
    """Serializable description of a potential: an id plus real-valued params.

    ``field`` is only used by ``grid-interpolated`` and holds a
    :class:`rarebias.committor.GridField` (not part of the params map).
    """

    id: str
    params: dict[str, float] = field(default_factory=dict)
    field: Any = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {"id": self.id, "params": {k: float(v) for k, v in sorted(self.params.items())}}

    @classmethod
    def from_dict(cls, d: dict, field=None) -> "PotentialSpec":
        return cls(d["id"], {k: float(v) for k, v in d.get("params", {}).items()}, field)

    def content_hash(self) -> str:
        h = hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode())
        if self.field is not None:
            h.update(np.ascontiguousarray(self.field.values, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


class Potential:
    """Base class; subclasses implement ``_energy`` and ``_gradient`` on (n, 2)."""

    def energy(self, p):
        pts, single = _as_points(p)
        e = self._energy(pts)
        return float(e[0]) if single else e

    def gradient(self, p):
        pts, single = _as_points(p)
        g = self._gradient(pts)
        return g[0] if single else g

    def _energy(self, pts):
        raise NotImplementedError

    def _gradient(self, pts):
        raise NotImplementedError


class Paper2D(Potential):
    """Two-well quartic surface with a linear tilt ``tilt * y``.

    U(x, y) = tilt*y + (4(1-x²-y²)² + 2(x²-2)² + ((x+y)²-1)² + ((x-y)²-1)² - 2) / 6
    """

    def __init__(self, tilt: float = 0.05):
        self.tilt = tilt

    def _energy(self, pts):
        x, y = pts[:, 0], pts[:, 1]
        r = 1.0 - x * x - y * y
        s = x * x - 2.0
        a = (x + y) ** 2 - 1.0
        b = (x - y) ** 2 - 1.0
        return self.tilt * y + (4.0 * r * r + 2.0 * s * s + a * a + b * b - 2.0) / 6.0

    def _gradient(self, pts):
        x, y = pts[:, 0], pts[:, 1]
        r = 1.0 - x * x - y * y
        s = x * x - 2.0
        a = (x + y) ** 2 - 1.0
        b = (x - y) ** 2 - 1.0
        gx = (-16.0 * x * r + 8.0 * x * s + 4.0 * a * (x + y) + 4.0 * b * (x - y)) / 6.0
        gy = self.tilt + (-16.0 * y * r + 4.0 * a * (x + y) - 4.0 * b * (x - y)) / 6.0
        return np.stack([gx, gy], axis=1)


class Flat(Potential):
    def _energy(self, pts):
        return np.zeros(len(pts))

    def _gradient(self, pts):
        return np.zeros_like(pts)


class QuadraticWell(Potential):
    """``k/2 * |p - c|²``."""

    def __init__(self, cx: float = 0.0, cy: float = 0.0, k: float = 1.0):
        self.center = np.array([cx, cy], dtype=float)
        self.k = k

    def _energy(self, pts):
        d = pts - self.center
        return 0.5 * self.k * np.einsum("ij,ij->i", d, d)

    def _gradient(self, pts):
        return self.k * (pts - self.center)


class GridPotential(Potential):
    """Bilinear interpolant of a :class:`GridField`.

    Outside the grid the field is treated as flat (zero gradient, edge value),
    so trajectories wandering off the tabulated box feel only the base potential.
    """

    def __init__(self, field):
        self.field = field

    def _energy(self, pts):
        return self.field.interpolate(pts, clip=True)

    def _gradient(self, pts):
        return self.field.gradient(pts, outside="zero")


def make_potential(spec: PotentialSpec) -> Potential:
    p = dict(spec.params)
    try:
        if spec.id == "paper2d":
            return Paper2D(tilt=p.get("tilt", 0.05))
        if spec.id == "flat":
            return Flat()
        if spec.id == "quadratic-well":
            return QuadraticWell(p.get("cx", 0.0), p.get("cy", 0.0), p.get("k", 1.0))
        if spec.id == "grid-interpolated":
            if spec.field is None:
                raise ConfigurationError("grid-interpolated potential needs a field")
            return GridPotential(spec.field)
    except TypeError as exc:
        raise ConfigurationError(f"bad params for potential {spec.id!r}: {exc}") from exc
    raise ConfigurationError(f"unknown potential id {spec.id!r}; expected one of {POTENTIAL_IDS}")


def as_potential(obj) -> Potential:
    if isinstance(obj, Potential):
        return obj
    if isinstance(obj, PotentialSpec):
        return make_potential(obj)
    raise ConfigurationError(f"not a potential: {obj!r}")


def energy(spec, p):
    """Energy of ``spec`` at one point or an ``(n, 2)`` array of points."""
    pts, _ = _as_points(p)
    if not np.all(np.isfinite(pts)):
        raise ValueError("position must be finite")
    return as_potential(spec).energy(p)


def gradient(spec, p):
    pts, _ = _as_points(p)
    if not np.all(np.isfinite(pts)):
        raise ValueError("position must be finite")
    return as_potential(spec).gradient(p)


def fd_hessian(pot: Potential, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian from the analytic gradient, symmetrised."""
    p = np.asarray(p, dtype=float)
    hess = np.empty((2, 2))
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        hess[:, k] = (pot.gradient(p + e) - pot.gradient(p - e)) / (2 * h)
    return 0.5 * (hess + hess.T)


def find_minima(
    spec,
    search_box=((-2.0, 2.0), (-2.0, 2.0)),
    grid_n: int = 20,
    tol: float = 1e-8,
    max_iter: int = 20000,
    dedup_radius: float = 1e-3,
) -> list[np.ndarray]:
    """Locate local minima by backtracking gradient descent from a seed grid.

    Returns minima sorted by energy. Stationary points whose finite-difference
    Hessian is not positive definite (saddles, flat regions) are dropped.
    """
    if grid_n < 2 or tol <= 0:
        raise ValueError("grid_n must be >= 2 and tol > 0")
    pot = as_potential(spec)
    (x0, x1), (y0, y1) = search_box
    gx, gy = np.meshgrid(np.linspace(x0, x1, grid_n), np.linspace(y0, y1, grid_n))
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    step = np.ones(len(pts))
    active = np.ones(len(pts), dtype=bool)
    converged = np.zeros(len(pts), dtype=bool)

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        p = pts[idx]
        g = pot.gradient(p)
        gnorm2 = np.einsum("ij,ij->i", g, g)
        done = np.sqrt(gnorm2) < tol
        converged[idx[done]] = True
        active[idx[done]] = False
        keep = ~done
        idx, p, g, gnorm2 = idx[keep], p[keep], g[keep], gnorm2[keep]
        if idx.size == 0:
            break
        e0 = pot.energy(p)
        slack = 1e-14 * (1.0 + np.abs(e0))

        def accept(trial, alpha):
            e1 = pot.energy(trial)
            armijo = e1 <= e0 - 1e-4 * alpha * gnorm2
            # below round-off the energy cannot certify descent; fall back to |grad|
            g1 = pot.gradient(trial)
            flat = (e1 <= e0 + slack) & (np.einsum("ij,ij->i", g1, g1) < gnorm2)
            return armijo | flat

        alpha = np.minimum(step[idx] * 2.0, 1.0)
        trial = p - alpha[:, None] * g
        ok = accept(trial, alpha)
        for _ in range(60):
            if ok.all():
                break
            alpha = np.where(ok, alpha, 0.5 * alpha)
            trial = p - alpha[:, None] * g
            ok = accept(trial, alpha)
        # a stalled line search is treated as non-convergent for that seed
        stalled = ~ok | ~np.all(np.isfinite(trial), axis=1)
        active[idx[stalled]] = False
        good = ~stalled
        pts[idx[good]] = trial[good]
        step[idx] = alpha

    minima: list[np.ndarray] = []
    for p in pts[converged]:
        if any(np.linalg.norm(p - m) < dedup_radius for m in minima):
            continue
        if np.linalg.norm(pot.gradient(p)) >= tol:
            continue
        if np.linalg.eigvalsh(fd_hessian(pot, p)).min() <= 1e-8:
            continue
        minima.append(p.copy())
    if not minima:
        raise SearchFailure("no local minimum converged inside the search box")
    minima.sort(key=lambda m: pot.energy(m))
    return minima


def paper_minima(tilt: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Minima (A, B) of the two-well surface, A on the left (x < 0)."""
    mins = find_minima(PotentialSpec("paper2d", {"tilt": tilt}))
    # the tilt also creates a very shallow minimum inside the lower channel (x = 0)
    left = [m for m in mins if m[0] < -0.5]
    right = [m for m in mins if m[0] > 0.5]
    if len(left) != 1 or len(right) != 1:
        raise SearchFailure(f"expected one minimum per side, got {mins}")
    return left[0], right[0]
