"""Committor solver on a regular grid and the bias potential derived from it.

The committor ``q`` solves ``∇·(e^{-βU} ∇q) = 0`` with ``q = 0`` on the
start ball, ``q = 1`` on the target ball and zero flux through the outer
boundary.  A conservative five-point finite-volume stencil is used; each
face carries the Boltzmann weight evaluated at the face midpoint.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dynamics import K_B
from .errors import CommittorSolveError, ContractViolation, OutOfDomain
from .potentials import as_potential


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = (-2.0, 2.0)
    y_range: tuple[float, float] = (-2.0, 2.0)
    nx: int = 201
    ny: int = 201

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ContractViolation("grid needs at least 3 nodes per axis")


@dataclass
class GridField:
    """Node values on a regular grid; ``values[j, i]`` sits at ``(x_i, y_j)``."""

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or min(self.values.shape) < 3:
            raise ContractViolation("grid field needs a 2D array with >= 3 nodes per axis")
        self.x_range = tuple(float(v) for v in self.x_range)
        self.y_range = tuple(float(v) for v in self.y_range)

    @property
    def nx(self) -> int:
        return self.values.shape[1]

    @property
    def ny(self) -> int:
        return self.values.shape[0]

    @property
    def hx(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / (self.ny - 1)

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(*self.x_range, self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(*self.y_range, self.ny)

    @classmethod
    def from_function(cls, f, spec: GridSpec) -> "GridField":
        X, Y = np.meshgrid(np.linspace(*spec.x_range, spec.nx), np.linspace(*spec.y_range, spec.ny))
        vals = np.asarray(f(np.stack([X.ravel(), Y.ravel()], axis=1)), dtype=float)
        return cls(spec.x_range, spec.y_range, vals.reshape(spec.ny, spec.nx))

    def inside(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        return (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)

    def _cell(self, pts):
        fx = (pts[:, 0] - self.x_range[0]) / self.hx
        fy = (pts[:, 1] - self.y_range[0]) / self.hy
        i = np.clip(np.floor(fx).astype(np.int64), 0, self.nx - 2)
        j = np.clip(np.floor(fy).astype(np.int64), 0, self.ny - 2)
        return i, j, fx - i, fy - j

    def interpolate(self, pts, clip: bool = False) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if clip:
            pts = np.stack([np.clip(pts[:, 0], *self.x_range), np.clip(pts[:, 1], *self.y_range)], axis=1)
        elif not self.inside(pts).all():
            raise OutOfDomain("point outside the grid domain")
        i, j, u, v = self._cell(pts)
        f = self.values
        return ((1 - u) * (1 - v) * f[j, i] + u * (1 - v) * f[j, i + 1]
                + (1 - u) * v * f[j + 1, i] + u * v * f[j + 1, i + 1])

    def gradient(self, pts, outside: str = "raise") -> np.ndarray:
        """Gradient of the bilinear interpolant; ``outside`` is ``raise`` or ``zero``."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        ok = self.inside(pts)
        if not ok.all() and outside == "raise":
            raise OutOfDomain("point outside the grid domain")
        i, j, u, v = self._cell(pts)
        f = self.values
        gx = ((1 - v) * (f[j, i + 1] - f[j, i]) + v * (f[j + 1, i + 1] - f[j + 1, i])) / self.hx
        gy = ((1 - u) * (f[j + 1, i] - f[j, i]) + u * (f[j + 1, i + 1] - f[j, i + 1])) / self.hy
        g = np.stack([gx, gy], axis=1)
        g[~ok] = 0.0
        return g

    # serialization: CSV matrix plus a JSON header next to it
    def save(self, path) -> None:
        path = os.fspath(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in self.values:
                w.writerow([repr(float(v)) for v in row])
        header = {"x_range": list(self.x_range), "y_range": list(self.y_range),
                  "nx": self.nx, "ny": self.ny, "hx": self.hx, "hy": self.hy,
                  "layout": "rows are y (ascending), columns are x (ascending)"}
        with open(_header_path(path), "w") as fh:
            json.dump(header, fh, indent=1)

    @classmethod
    def load(cls, path) -> "GridField":
        path = os.fspath(path)
        with open(_header_path(path)) as fh:
            header = json.load(fh)
        with open(path, newline="") as fh:
            vals = np.array([[float(v) for v in row] for row in csv.reader(fh)])
        if vals.shape != (header["ny"], header["nx"]):
            raise ContractViolation(f"{path}: shape {vals.shape} does not match header")
        return cls(header["x_range"], header["y_range"], vals)


def _header_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".header.json"


def field_drift(field: GridField, p) -> np.ndarray:
    """Gradient of the bilinear interpolant at ``p``; raises outside the grid."""
    arr = np.asarray(p, dtype=float)
    g = field.gradient(arr, outside="raise")
    return g[0] if arr.ndim == 1 else g


def _ball_nodes(X, Y, center, delta):
    d2 = (X - center[0]) ** 2 + (Y - center[1]) ** 2
    mask = d2 < delta ** 2
    if not mask.any():
        mask.flat[np.argmin(d2)] = True
    return mask


def solve_committor(potential, temperature: float, A, B, delta: float, grid: GridSpec = GridSpec(), tol: float = 1e-10, max_refine: int = 10) -> GridField:
    """Solve for the committor on ``grid``.

    Rows of the linear system are rescaled in log space so Boltzmann weights
    spanning hundreds of orders of magnitude stay representable.  A sparse LU
    solve is followed by iterative refinement until the relative residual is
    below ``tol``.
    """
    pot = as_potential(potential)
    beta = 1.0 / (K_B * temperature)
    xs = np.linspace(*grid.x_range, grid.nx)
    ys = np.linspace(*grid.y_range, grid.ny)
    hx, hy = xs[1] - xs[0], ys[1] - ys[0]
    X, Y = np.meshgrid(xs, ys)
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    mask_a = _ball_nodes(X, Y, A, delta)
    mask_b = _ball_nodes(X, Y, B, delta)
    if (mask_a & mask_b).any():
        raise ContractViolation("start and target balls overlap on the grid")

    ny, nx = X.shape
    # log face weights: -β U at the face midpoints, plus the geometric factor
    ux = pot.energy(np.stack([(X[:, :-1] + X[:, 1:]).ravel() / 2, Y[:, :-1].ravel()], axis=1)).reshape(ny, nx - 1)
    uy = pot.energy(np.stack([X[:-1, :].ravel(), (Y[:-1, :] + Y[1:, :]).ravel() / 2], axis=1)).reshape(ny - 1, nx)
    lwx = -beta * ux + np.log(hy / hx)
    lwy = -beta * uy + np.log(hx / hy)

    # per node: log weights toward E, W, N, S (-inf where no face)
    ninf = -np.inf
    lw = np.full((4, ny, nx), ninf)
    lw[0, :, :-1] = lwx  # east
    lw[1, :, 1:] = lwx  # west
    lw[2, :-1, :] = lwy  # north
    lw[3, 1:, :] = lwy  # south
    row_max = lw.max(axis=0)
    w = np.exp(lw - row_max)  # each free row now has its largest coupling equal to 1

    fixed = mask_a | mask_b
    free = ~fixed
    idx = -np.ones((ny, nx), dtype=np.int64)
    idx[free] = np.arange(free.sum())
    nfree = int(free.sum())
    q_fixed = np.where(mask_b, 1.0, 0.0)

    jj, ii = np.nonzero(free)
    rows, cols, data = [], [], []
    rhs = np.zeros(nfree)
    me = idx[jj, ii]
    diag = np.zeros(nfree)
    for k, (dj, di) in enumerate(((0, 1), (0, -1), (1, 0), (-1, 0))):
        wk = w[k, jj, ii]
        has = wk > 0
        nj, ni = jj + dj, ii + di
        has &= (nj >= 0) & (nj < ny) & (ni >= 0) & (ni < nx)
        diag[has] += wk[has]
        nj_, ni_ = nj[has], ni[has]
        nb_free = free[nj_, ni_]
        r = me[has]
        rows.append(r[nb_free])
        cols.append(idx[nj_[nb_free], ni_[nb_free]])
        data.append(-wk[has][nb_free])
        np.add.at(rhs, r[~nb_free], wk[has][~nb_free] * q_fixed[nj_[~nb_free], ni_[~nb_free]])
    rows.append(me)
    cols.append(me)
    data.append(diag)
    mat = sp.csc_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(nfree, nfree)
    )

    lu = spla.splu(mat)
    q = lu.solve(rhs)
    bnorm = np.linalg.norm(rhs) or 1.0
    history = [float(np.linalg.norm(rhs - mat @ q) / bnorm)]
    while history[-1] >= tol and len(history) <= max_refine:
        q = q + lu.solve(rhs - mat @ q)
        history.append(float(np.linalg.norm(rhs - mat @ q) / bnorm))
    if history[-1] >= tol or not np.all(np.isfinite(q)):
        raise CommittorSolveError(f"committor solve did not reach tol {tol:g}", history)

    out = q_fixed.copy()
    out[free] = np.clip(q, 0.0, 1.0)
    field = GridField(grid.x_range, grid.y_range, out)
    field.residuals = history
    return field


def ground_truth_bias(q: GridField, temperature: float, q_min: float = 1e-12) -> GridField:
    """``-2 k_B T log(max(q, q_min))`` node-wise."""
    if not q_min > 0:
        raise ContractViolation("q_min must be positive")
    vals = -2.0 * K_B * temperature * np.log(np.maximum(q.values, q_min))
    return GridField(q.x_range, q.y_range, vals)
