"""Tanh MLP with exact propagation of input derivatives.

The network maps z = (x, y, g, eps_eq) to the nonlocal strain ebar through L
hidden tanh layers of width N and a linear output. Alongside the value, the
forward pass propagates first derivatives with respect to x, y and eps_eq and
diagonal second derivatives with respect to x and y, layer by layer, with no
finite differencing:

    s   = W a_in + b            t   = tanh(s)
    u_k = W d_in_k              d_k = t' u_k
    p_m = W q_in_m              q_m = t'' u_m^2 + t' p_m

The reverse pass (`augmented_backward`) differentiates this augmented
computation with respect to the parameters; it reaches third derivatives of
tanh and is what makes the physics loss gradient exact.

All derivatives of the public API are with respect to the *physical* inputs;
the affine input/output scaling is folded into the seeds and the descale.
"""

import json
from dataclasses import dataclass

import numpy as np

CHECKPOINT_VERSION = 1

# Input component indices.
IX, IY, IG, IEPS = 0, 1, 2, 3

# Derivative channels: first derivatives in x, y, eps_eq; second in x, y.
FIRST_DIRS_ALL = (IX, IY, IEPS)
SECOND_DIRS_ALL = (IX, IY)


class NetError(ValueError):
    """Bad shapes, parameters or inputs."""


class NetEvalError(RuntimeError):
    """Numerical failure during evaluation (overflow, non-finite)."""


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


@dataclass(frozen=True)
class NetworkShape:
    """Hidden layer count and width of the MLP (inputs 4, output 1)."""

    layers: int
    width: int

    def __post_init__(self):
        if self.layers < 1:
            raise NetError("need at least one hidden layer")
        if self.width < 1:
            raise NetError("width must be at least 1")

    @property
    def aspect_ratio(self):
        """Width over depth, N / L."""
        return self.width / self.layers

    @property
    def dims(self):
        """Layer input/output sizes, [4, N, ..., N, 1]."""
        return [4] + [self.width] * self.layers + [1]

    @property
    def param_count(self):
        L, N = self.layers, self.width
        return 4 * N + N + (L - 1) * (N * N + N) + N + 1


def unpack_params(theta, shape):
    """Split a flat parameter vector into [(W, b), ...] views.

    Layout is W1 (row-major, shape (out, in)), b1, W2, b2, ... Raises on
    length mismatch.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.shape[0] != shape.param_count:
        raise NetError(
            f"parameter vector has {theta.shape} entries, expected ({shape.param_count},)"
        )
    dims = shape.dims
    layers = []
    off = 0
    for i in range(len(dims) - 1):
        fin, fout = dims[i], dims[i + 1]
        W = theta[off:off + fin * fout].reshape(fout, fin)
        off += fin * fout
        b = theta[off:off + fout]
        off += fout
        layers.append((W, b))
    return layers


def pack_params(layers):
    """Inverse of :func:`unpack_params`."""
    parts = []
    for W, b in layers:
        parts.append(np.asarray(W, dtype=float).ravel())
        parts.append(np.asarray(b, dtype=float).ravel())
    return np.concatenate(parts)


def xavier_init(shape, seed):
    """Glorot-uniform weights, zero biases, deterministic per seed.

    Each weight is uniform in +-sqrt(6 / (fan_in + fan_out)).
    """
    rng = np.random.default_rng(seed)
    dims = shape.dims
    layers = []
    for i in range(len(dims) - 1):
        fin, fout = dims[i], dims[i + 1]
        a = np.sqrt(6.0 / (fin + fout))
        W = rng.uniform(-a, a, size=(fout, fin))
        layers.append((W, np.zeros(fout)))
    return pack_params(layers)


@dataclass
class Scaling:
    """Affine input scaling and output descale.

    Scaled input is (z - shift) / scale per component; the raw network
    output v maps to the physical prediction out_scale * v + out_shift.
    """

    shift: np.ndarray
    scale: np.ndarray
    out_shift: float = 0.0
    out_scale: float = 1.0

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=float).reshape(4)
        self.scale = np.asarray(self.scale, dtype=float).reshape(4)
        if np.any(self.scale == 0.0) or self.out_scale == 0.0:
            raise NetError("scale factors must be nonzero")

    @classmethod
    def identity(cls):
        return cls(shift=np.zeros(4), scale=np.ones(4))

    @classmethod
    def for_domain(cls, x, y, eps_eq):
        """Scaling used in training: x, y to [-1, 1] over their bounding
        box, g and eps_eq passed through raw. The output descale is the
        maximum strain magnitude.

        The strain input is deliberately left at its physical magnitude.
        Normalizing it to unit range makes a shortcut representable where
        the net simply echoes that input back, which zeroes the residual
        at every collocation point without learning the field. At raw
        magnitude the coordinate channels dominate the early training
        signal and optimization settles on a spatial solution instead.
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        emax = float(np.max(np.abs(np.asarray(eps_eq, dtype=float))))
        if emax == 0.0:
            emax = 1.0
        shift = np.array([
            0.5 * (np.max(x) + np.min(x)),
            0.5 * (np.max(y) + np.min(y)),
            0.0,
            0.0,
        ])
        half_x = 0.5 * (np.max(x) - np.min(x)) or 1.0
        half_y = 0.5 * (np.max(y) - np.min(y)) or 1.0
        scale = np.array([half_x, half_y, 1.0, 1.0])
        return cls(shift=shift, scale=scale, out_shift=0.0, out_scale=emax)

    def apply(self, Z):
        return (Z - self.shift) / self.scale

    def to_dict(self):
        return {
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "out_shift": self.out_shift,
            "out_scale": self.out_scale,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            shift=np.array(data["shift"], dtype=float),
            scale=np.array(data["scale"], dtype=float),
            out_shift=float(data["out_shift"]),
            out_scale=float(data["out_scale"]),
        )


class _Tape:
    """Forward-pass record needed by :func:`augmented_backward`."""

    __slots__ = ("shape", "scaling", "weights", "layers", "head", "first_dirs",
                 "second_dirs", "n_points")

    def __init__(self, shape, scaling, weights, first_dirs, second_dirs, n_points):
        self.shape = shape
        self.scaling = scaling
        self.weights = weights
        self.layers = []
        self.head = None
        self.first_dirs = first_dirs
        self.second_dirs = second_dirs
        self.n_points = n_points


@dataclass
class Channels:
    """Physical-unit outputs of the augmented forward pass.

    Missing channels (not requested) are None. Arrays have shape (P,).
    """

    value: np.ndarray
    dx: np.ndarray = None
    dy: np.ndarray = None
    dxx: np.ndarray = None
    dyy: np.ndarray = None
    deps: np.ndarray = None


def augmented_forward(theta, shape, scaling, Z, first_dirs=(), second_dirs=(),
                      keep_tape=False):
    """Evaluate the network and requested input-derivative channels.

    Parameters
    ----------
    theta : (param_count,) ndarray
    shape : NetworkShape
    scaling : Scaling
    Z : (P, 4) ndarray
        Physical inputs (x, y, g, eps_eq).
    first_dirs, second_dirs : tuples of input indices
        Channels to propagate; second_dirs must be a subset of first_dirs.
    keep_tape : bool
        Keep intermediates for :func:`augmented_backward`.

    Returns
    -------
    Channels, or (Channels, tape) when keep_tape.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != 4:
        raise NetError(f"inputs must have shape (P, 4), got {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise NetError("non-finite network input")
    for m in second_dirs:
        if m not in first_dirs:
            raise NetError("second_dirs must be a subset of first_dirs")
    weights = unpack_params(theta, shape)
    P = Z.shape[0]

    A = scaling.apply(Z)
    D = {k: np.zeros((P, 4)) for k in first_dirs}
    for k in first_dirs:
        D[k][:, k] = 1.0 / scaling.scale[k]
    Q = {m: np.zeros((P, 4)) for m in second_dirs}

    tape = _Tape(shape, scaling, weights, tuple(first_dirs), tuple(second_dirs), P)

    for li in range(shape.layers):
        W, b = weights[li]
        s = A @ W.T + b
        if not np.all(np.isfinite(s)):
            raise NetEvalError(f"non-finite activation in hidden layer {li + 1}")
        u = {k: D[k] @ W.T for k in first_dirs}
        p = {m: Q[m] @ W.T for m in second_dirs}
        t = np.tanh(s)
        phi1 = 1.0 - t * t
        A_next = t
        D_next = {k: phi1 * u[k] for k in first_dirs}
        Q_next = {}
        if second_dirs:
            phi2 = -2.0 * t * phi1
            for m in second_dirs:
                Q_next[m] = phi2 * u[m] * u[m] + phi1 * p[m]
        if keep_tape:
            tape.layers.append((A, D, Q, t, u, p))
        A, D, Q = A_next, D_next, Q_next

    Wo, bo = weights[-1]
    w = Wo[0]
    value_raw = A @ w + bo[0]
    if not np.all(np.isfinite(value_raw)):
        raise NetEvalError("non-finite value in output layer")
    if keep_tape:
        tape.head = (A, D, Q)

    so, oo = scaling.out_scale, scaling.out_shift
    ch = Channels(value=so * value_raw + oo)
    for k in first_dirs:
        phys = so * (D[k] @ w)
        if k == IX:
            ch.dx = phys
        elif k == IY:
            ch.dy = phys
        elif k == IEPS:
            ch.deps = phys
    for m in second_dirs:
        phys = so * (Q[m] @ w)
        if m == IX:
            ch.dxx = phys
        elif m == IY:
            ch.dyy = phys

    if keep_tape:
        return ch, tape
    return ch


def augmented_backward(tape, bar_value=None, bar_dx=None, bar_dy=None,
                       bar_dxx=None, bar_dyy=None, bar_deps=None):
    """Parameter gradient of a weighted sum of channel outputs.

    Given per-point cotangents for the physical channels, returns the flat
    gradient d/d theta of sum_p (bar_value_p value_p + bar_dx_p dx_p + ...).
    This traverses the augmented pass in reverse; tanh derivatives up to
    third order appear.
    """
    shape, scaling = tape.shape, tape.scaling
    first_dirs, second_dirs = tape.first_dirs, tape.second_dirs
    P = tape.n_points
    so = scaling.out_scale

    def cot(arr):
        if arr is None:
            return np.zeros(P)
        return np.asarray(arr, dtype=float)

    bar_val = so * cot(bar_value)
    bar_first = {}
    if IX in first_dirs:
        bar_first[IX] = so * cot(bar_dx)
    if IY in first_dirs:
        bar_first[IY] = so * cot(bar_dy)
    if IEPS in first_dirs:
        bar_first[IEPS] = so * cot(bar_deps)
    bar_second = {}
    if IX in second_dirs:
        bar_second[IX] = so * cot(bar_dxx)
    if IY in second_dirs:
        bar_second[IY] = so * cot(bar_dyy)

    grads = [None] * (shape.layers + 1)

    # Output layer (linear, single unit).
    A, D, Q = tape.head
    Wo, _ = tape.weights[-1]
    w = Wo[0]
    gw = bar_val @ A
    for k in first_dirs:
        gw = gw + bar_first[k] @ D[k]
    for m in second_dirs:
        gw = gw + bar_second[m] @ Q[m]
    gb = np.array([np.sum(bar_val)])
    grads[-1] = (gw[None, :], gb)

    bar_A = bar_val[:, None] * w
    bar_D = {k: bar_first[k][:, None] * w for k in first_dirs}
    bar_Q = {m: bar_second[m][:, None] * w for m in second_dirs}

    for li in range(shape.layers - 1, -1, -1):
        A_in, D_in, Q_in, t, u, p = tape.layers[li]
        W, _ = tape.weights[li]
        phi1 = 1.0 - t * t
        phi2 = -2.0 * t * phi1
        bar_s = bar_A * phi1
        bar_u = {}
        for k in first_dirs:
            bar_s = bar_s + bar_D[k] * phi2 * u[k]
            bar_u[k] = bar_D[k] * phi1
        if second_dirs:
            phi3 = phi1 * (6.0 * t * t - 2.0)
            for m in second_dirs:
                bq = bar_Q[m]
                bar_s = bar_s + bq * (phi3 * u[m] * u[m] + phi2 * p[m])
                bar_u[m] = bar_u[m] + bq * (2.0 * phi2 * u[m])
        bar_p = {m: bar_Q[m] * phi1 for m in second_dirs}

        gW = bar_s.T @ A_in
        for k in first_dirs:
            gW += bar_u[k].T @ D_in[k]
        for m in second_dirs:
            gW += bar_p[m].T @ Q_in[m]
        gb = bar_s.sum(axis=0)
        grads[li] = (gW, gb)

        if li > 0:
            bar_A = bar_s @ W
            bar_D = {k: bar_u[k] @ W for k in first_dirs}
            bar_Q = {m: bar_p[m] @ W for m in second_dirs}

    return pack_params(grads)


def forward_batch(theta, shape, scaling, Z):
    """Network values for a batch of physical inputs, (P,)."""
    return augmented_forward(theta, shape, scaling, Z).value


def forward(theta, shape, scaling, z):
    """Network value for a single physical input z = (x, y, g, eps_eq)."""
    z = np.asarray(z, dtype=float).reshape(1, 4)
    return float(forward_batch(theta, shape, scaling, z)[0])


def forward_with_derivs_batch(theta, shape, scaling, Z):
    """All tracked channels for a batch: Channels with value, dx, dy, dxx,
    dyy and deps populated."""
    return augmented_forward(theta, shape, scaling, Z,
                             first_dirs=FIRST_DIRS_ALL, second_dirs=SECOND_DIRS_ALL)


def forward_with_derivs(theta, shape, scaling, z):
    """Single-point channels as a 6-tuple:

    (value, d/dx, d/dy, d2/dx2, d2/dy2, d/deps_eq).
    """
    z = np.asarray(z, dtype=float).reshape(1, 4)
    ch = forward_with_derivs_batch(theta, shape, scaling, z)
    return (float(ch.value[0]), float(ch.dx[0]), float(ch.dy[0]),
            float(ch.dxx[0]), float(ch.dyy[0]), float(ch.deps[0]))


@dataclass
class Network:
    """Trained network bundle: shape, flat parameters, scaling, provenance."""

    shape: NetworkShape
    theta: np.ndarray
    scaling: Scaling
    seed: int = None
    config_hash: str = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.shape.param_count,):
            raise NetError(
                f"theta has shape {self.theta.shape}, expected ({self.shape.param_count},)"
            )

    def predict(self, Z):
        return forward_batch(self.theta, self.shape, self.scaling, Z)

    def predict_channels(self, Z, first_dirs=FIRST_DIRS_ALL, second_dirs=SECOND_DIRS_ALL):
        return augmented_forward(self.theta, self.shape, self.scaling, Z,
                                 first_dirs=first_dirs, second_dirs=second_dirs)

    def save(self, path):
        checkpoint_save(path, self)

    @classmethod
    def load(cls, path):
        return checkpoint_load(path)


def checkpoint_save(path, network):
    data = {
        "version": CHECKPOINT_VERSION,
        "shape": {"layers": network.shape.layers, "width": network.shape.width},
        "theta": network.theta.tolist(),
        "scaling": network.scaling.to_dict(),
        "seed": network.seed,
        "config_hash": network.config_hash,
    }
    with open(path, "w") as fh:
        json.dump(data, fh)


def checkpoint_load(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"unreadable checkpoint {path}: {err}") from err
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data.get('version')!r}")
    try:
        shape = NetworkShape(layers=int(data["shape"]["layers"]),
                             width=int(data["shape"]["width"]))
        theta = np.array(data["theta"], dtype=float)
        scaling = Scaling.from_dict(data["scaling"])
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointError(f"malformed checkpoint {path}: {err}") from err
    if theta.shape != (shape.param_count,):
        raise CheckpointError(
            f"checkpoint theta length {theta.shape[0]} does not match shape "
            f"{shape.layers}x{shape.width} ({shape.param_count} parameters)"
        )
    return Network(shape=shape, theta=theta, scaling=scaling,
                   seed=data.get("seed"), config_hash=data.get("config_hash"))
