"""Multilayer-perceptron bias potential with hand-written derivatives.

The network maps a position (optionally augmented with two distance
features) to a scalar bias energy.  Hidden layers use ``tanh``, the output
layer is linear.  Three derivative queries are supported exactly:

* ``bias_gradient``: d U_B / d x, used as an extra drift in the dynamics;
* ``loss_param_gradient``: d/dθ of ``Σ c_n U_B(x_n) + Σ v_n · ∇_x U_B(x_n)``;
* ``grad_vjp``: the same quantity plus its derivative with respect to x.

Row-vector convention throughout: ``h_l = tanh(h_{l-1} @ W_l + b_l)``.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericOverflowError, UnsupportedVersion

FEATURE_MODES = ("raw", "with_control_features")
CHECKPOINT_MAGIC = b"RBNET"
CHECKPOINT_VERSION = 1
_CHUNK = 16384


@dataclass
class BiasNet:
    """Parameters of the bias network.

    ``weights[l]`` has shape ``(fan_in, fan_out)``; the last layer has
    ``fan_out == 1``.  ``control_sign`` selects ``exp(+|x-A|)`` (+1) or
    ``exp(-|x-A|)`` (-1) for the control features.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    feature_mode: str = "raw"
    anchors: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    control_sign: float = 1.0

    def __post_init__(self):
        if self.feature_mode not in FEATURE_MODES:
            raise ContractViolation(f"unknown feature mode {self.feature_mode!r}")
        self.anchors = np.asarray(self.anchors, dtype=float).reshape(2, 2)
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractViolation("weights and biases must be non-empty and paired")
        if self.weights[0].shape[0] != self.input_dim:
            raise ContractViolation(
                f"first layer expects {self.weights[0].shape[0]} inputs, features give {self.input_dim}"
            )
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ContractViolation("bias shape does not match weight fan_out")
        if self.weights[-1].shape[1] != 1:
            raise ContractViolation("output layer must be scalar")

    @property
    def input_dim(self) -> int:
        return 2 if self.feature_mode == "raw" else 4

    @property
    def layer_widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def hidden_widths(self) -> list[int]:
        return self.layer_widths[1:-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for w, b in zip(self.weights, self.biases) for a in (w, b)])

    def with_flat(self, vec: np.ndarray) -> "BiasNet":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ContractViolation(f"expected {self.n_params} parameters, got {vec.shape}")
        weights, biases, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[k:k + w.size].reshape(w.shape).copy())
            k += w.size
            biases.append(vec[k:k + b.size].copy())
            k += b.size
        return BiasNet(weights, biases, self.feature_mode, self.anchors.copy(), self.control_sign)

    # duck-typed potential interface used by the simulator
    def energy(self, p):
        return bias_energy(self, p)

    def gradient(self, p):
        return bias_gradient(self, p)


@dataclass
class ParamGradient:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: BiasNet) -> "ParamGradient":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for w, b in zip(self.weights, self.biases) for a in (w, b)])

    def __iadd__(self, other: "ParamGradient"):
        for a, b in zip(self.weights + self.biases, other.weights + other.biases):
            a += b
        return self


@dataclass
class LossTerm:
    """One position's contribution: ``value_weight * U_B + gradient_weight · ∇_x U_B``."""

    position: np.ndarray
    value_weight: float = 0.0
    gradient_weight: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass
class LossTerms:
    """Columnar batch of :class:`LossTerm`."""

    positions: np.ndarray
    value_weights: np.ndarray
    gradient_weights: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        n = len(self.positions)
        self.value_weights = np.broadcast_to(np.asarray(self.value_weights, dtype=float), (n,))
        self.gradient_weights = np.asarray(self.gradient_weights, dtype=float).reshape(n, 2)

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls) -> "LossTerms":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)))

    @classmethod
    def from_list(cls, terms: list[LossTerm]) -> "LossTerms":
        if not terms:
            return cls.empty()
        return cls(
            np.array([t.position for t in terms], dtype=float),
            np.array([t.value_weight for t in terms], dtype=float),
            np.array([t.gradient_weight for t in terms], dtype=float),
        )

    @classmethod
    def concat(cls, parts: list["LossTerms"]) -> "LossTerms":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.value_weights for p in parts]),
            np.concatenate([p.gradient_weights for p in parts]),
        )


def init_params(
    rng: np.random.Generator,
    hidden_widths=(64, 64, 64, 64),
    feature_mode: str = "with_control_features",
    anchors=None,
    scale: float = 1.0,
    output_scale: float = 0.1,
    control_sign: float = 1.0,
) -> BiasNet:
    """Uniform ``[-s, s]`` weights with ``s = scale / sqrt(fan_in)``, zero biases.

    The output layer is further multiplied by ``output_scale`` so the untrained
    potential stays close to zero over the domain.
    """
    if any(w < 1 for w in hidden_widths):
        raise ContractViolation("layer widths must be positive")
    d_in = 2 if feature_mode == "raw" else 4
    dims = [d_in, *hidden_widths, 1]
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        s = scale / np.sqrt(a)
        if i == len(dims) - 2:
            s *= output_scale
        weights.append(rng.uniform(-s, s, size=(a, b)))
        biases.append(np.zeros(b))
    if anchors is None:
        anchors = np.zeros((2, 2))
    return BiasNet(weights, biases, feature_mode, np.asarray(anchors, dtype=float), control_sign)


def zero_net(hidden_widths=(), feature_mode: str = "raw", anchors=None) -> BiasNet:
    return init_params(np.random.default_rng(0), hidden_widths, feature_mode, anchors, scale=0.0)


def linear_net(a: float, b: float, c: float = 0.0) -> BiasNet:
    """Single linear layer on raw features: ``U_B(x, y) = a x + b y + c``."""
    return BiasNet([np.array([[a], [b]], dtype=float)], [np.array([c], dtype=float)])


def _features(net: BiasNet, x: np.ndarray):
    """Return features z (n, d0) and Jacobian dz/dx (n, d0, 2)."""
    n = len(x)
    if net.feature_mode == "raw":
        return x, None
    sig = net.control_sign
    z = np.empty((n, 4))
    z[:, :2] = x
    jac = np.zeros((n, 4, 2))
    jac[:, 0, 0] = 1.0
    jac[:, 1, 1] = 1.0
    for k, anchor in enumerate(net.anchors):
        d = x - anchor
        r = np.sqrt(np.einsum("ij,ij->i", d, d))
        ex = np.exp(sig * r)
        z[:, 2 + k] = ex
        safe = np.where(r > 0, r, 1.0)
        # gradient of |x - anchor| at the anchor itself is taken as zero
        u = np.where((r > 0)[:, None], d / safe[:, None], 0.0)
        jac[:, 2 + k, :] = (sig * ex)[:, None] * u
    return z, jac


def _feature_hvp(net: BiasNet, x: np.ndarray, gz: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``Σ_i gz_i · (d²z_i/dx²) v`` for the control features."""
    sig = net.control_sign
    out = np.zeros_like(x)
    for k, anchor in enumerate(net.anchors):
        d = x - anchor
        r = np.sqrt(np.einsum("ij,ij->i", d, d))
        ok = r > 0
        safe = np.where(ok, r, 1.0)
        u = np.where(ok[:, None], d / safe[:, None], 0.0)
        ex = np.exp(sig * r)
        uv = np.einsum("ij,ij->i", u, v)
        # d²/dx² exp(sig r) = ex (sig² u uᵀ + sig (I - u uᵀ) / r)
        hv = ex[:, None] * (sig * sig * uv[:, None] * u + sig * (v - uv[:, None] * u) / safe[:, None])
        hv[~ok] = 0.0
        out += gz[:, 2 + k, None] * hv
    return out


def _forward(net: BiasNet, z: np.ndarray):
    hs = [z]
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        hs.append(np.tanh(hs[-1] @ w + b))
    y = hs[-1] @ net.weights[-1][:, 0] + net.biases[-1][0]
    return hs, y


def _input_backward(net: BiasNet, hs: list[np.ndarray]):
    """Reverse pass for dy/dz; returns g_0 plus the intermediate (g_l, e_l) lists."""
    n_hidden = len(hs) - 1
    g = np.broadcast_to(net.weights[-1][:, 0], (len(hs[0]), net.weights[-1].shape[0]))
    gs = [None] * (n_hidden + 1)
    es = [None] * (n_hidden + 1)
    gs[n_hidden] = g
    for l in range(n_hidden, 0, -1):
        e = gs[l] * (1.0 - hs[l] ** 2)
        es[l] = e
        gs[l - 1] = e @ net.weights[l - 1].T
    return gs, es


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericOverflowError(f"non-finite {what} in bias network")


def _points(p):
    arr = np.asarray(p, dtype=float)
    return np.atleast_2d(arr), arr.ndim == 1


def bias_energy(net: BiasNet, p):
    x, single = _points(p)
    out = np.empty(len(x))
    for s in range(0, len(x), _CHUNK):
        with np.errstate(over="ignore", invalid="ignore"):
            z, _ = _features(net, x[s:s + _CHUNK])
            _, out[s:s + _CHUNK] = _forward(net, z)
    _check_finite(out, "energy")
    return float(out[0]) if single else out


def bias_gradient(net: BiasNet, p):
    """Exact d U_B / d x at one point or ``(n, 2)`` points."""
    x, single = _points(p)
    out = np.empty_like(x)
    for s in range(0, len(x), _CHUNK):
        xc = x[s:s + _CHUNK]
        z, jac = _features(net, xc)
        hs, _ = _forward(net, z)
        gs, _ = _input_backward(net, hs)
        g0 = gs[0]
        out[s:s + _CHUNK] = g0 if jac is None else np.einsum("ni,nik->nk", g0, jac)
    _check_finite(out, "gradient")
    return out[0] if single else out


def grad_vjp(net: BiasNet, x, v, c=None, want_x: bool = True):
    """Derivatives of ``Φ = Σ_n c_n U_B(x_n) + Σ_n v_n · ∇_x U_B(x_n)``.

    Returns ``(ParamGradient dΦ/dθ, dΦ/dx of shape (n, 2) or None)``.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    v = np.asarray(v, dtype=float).reshape(-1, 2)
    c = np.zeros(len(x)) if c is None else np.broadcast_to(np.asarray(c, dtype=float), (len(x),))
    if len(v) != len(x):
        raise ContractViolation("gradient weights must match positions")
    total = ParamGradient.zeros_like(net)
    xbar_all = np.zeros_like(x) if want_x else None
    for s in range(0, len(x), _CHUNK):
        sl = slice(s, s + _CHUNK)
        xbar = _vjp_chunk(net, x[sl], v[sl], c[sl], total, want_x)
        if want_x:
            xbar_all[sl] = xbar
    _check_finite(total.flat(), "parameter gradient")
    return total, xbar_all


def _vjp_chunk(net, x, v, c, acc: ParamGradient, want_x):
    W = net.weights
    n_hidden = len(W) - 1
    z, jac = _features(net, x)
    hs, _ = _forward(net, z)
    gs, es = _input_backward(net, hs)

    gbar = v if jac is None else np.einsum("nk,nik->ni", v, jac)
    hbar = [np.zeros_like(h) for h in hs]
    # adjoint of the reverse (input-gradient) pass
    for l in range(1, n_hidden + 1):
        acc.weights[l - 1] += gbar.T @ es[l]
        ebar = gbar @ W[l - 1]
        deriv = 1.0 - hs[l] ** 2
        hbar[l] += ebar * gs[l] * (-2.0 * hs[l])
        gbar = ebar * deriv
    acc.weights[-1][:, 0] += gbar.sum(axis=0)

    # value term
    if np.any(c):
        hbar[n_hidden] += c[:, None] * W[-1][:, 0]
        acc.weights[-1][:, 0] += c @ hs[n_hidden]
        acc.biases[-1][0] += c.sum()

    # adjoint of the forward pass
    for l in range(n_hidden, 0, -1):
        abar = hbar[l] * (1.0 - hs[l] ** 2)
        acc.weights[l - 1] += hs[l - 1].T @ abar
        acc.biases[l - 1] += abar.sum(axis=0)
        hbar[l - 1] += abar @ W[l - 1].T

    if not want_x:
        return None
    zbar = hbar[0]
    if jac is None:
        return zbar
    return np.einsum("ni,nik->nk", zbar, jac) + _feature_hvp(net, x, gs[0], v)


def loss_param_gradient(net: BiasNet, terms) -> ParamGradient:
    """``Σ_terms [w_v ∇_θ U_B(p) + w_g · ∇_θ ∇_x U_B(p)]``."""
    if not isinstance(terms, LossTerms):
        terms = LossTerms.from_list(list(terms))
    if len(terms) == 0:
        return ParamGradient.zeros_like(net)
    grad, _ = grad_vjp(net, terms.positions, terms.gradient_weights, terms.value_weights, want_x=False)
    return grad


# ---------------------------------------------------------------- checkpoints

def _checkpoint_bytes(net: BiasNet) -> bytes:
    header = {
        "version": CHECKPOINT_VERSION,
        "layer_widths": net.layer_widths,
        "feature_mode": net.feature_mode,
        "anchors": [float.hex(float(a)) for a in net.anchors.ravel()],
        "control_sign": float.hex(float(net.control_sign)),
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for w, b in zip(net.weights, net.biases)
        for a in (w, b)
    )
    return CHECKPOINT_MAGIC + b"\n" + head + b"\n" + body


def checkpoint_hash(net: BiasNet) -> str:
    return hashlib.sha256(_checkpoint_bytes(net)).hexdigest()


def save_checkpoint(net: BiasNet, path) -> str:
    """Write ``net`` atomically; returns the sha256 of the file contents."""
    data = _checkpoint_bytes(net)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> BiasNet:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, _, rest = data.partition(b"\n")
    if magic != CHECKPOINT_MAGIC:
        raise UnsupportedVersion(f"{path}: not a bias-network checkpoint")
    head, _, body = rest.partition(b"\n")
    header = json.loads(head)
    if header.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"{path}: checkpoint version {header.get('version')} not supported")
    widths = header["layer_widths"]
    arr = np.frombuffer(body, dtype="<f8").astype(float)
    weights, biases, k = [], [], 0
    for a, b in zip(widths[:-1], widths[1:]):
        weights.append(arr[k:k + a * b].reshape(a, b).copy())
        k += a * b
        biases.append(arr[k:k + b].copy())
        k += b
    if k != arr.size:
        raise UnsupportedVersion(f"{path}: checkpoint body has {arr.size} floats, expected {k}")
    anchors = np.array([float.fromhex(s) for s in header["anchors"]]).reshape(2, 2)
    return BiasNet(weights, biases, header["feature_mode"], anchors, float.fromhex(header["control_sign"]))
