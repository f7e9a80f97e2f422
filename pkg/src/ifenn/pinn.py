"""Physics loss for the nonlocal-strain network.

Interior rows enforce the screened-Poisson residual

    r = ebar - g (d2 ebar/dx2 + d2 ebar/dy2) - eps_eq,

boundary rows the zero-flux residual r_b = n . grad(ebar). The loss is

    J = (1/m_c) sum r^2 + (1/m_b) sum r_b^2 = J_PDE + J_BCs,

evaluated full batch. `loss_gradient` differentiates the augmented forward
pass directly (see `ifenn.net`), so the gradient is exact for the J that is
actually computed, including the path through the second input derivatives.

Rows are kept in a canonical lexicographic order fixed at construction, so
the loss is bitwise invariant to the order collocation data arrives in.
"""

from dataclasses import dataclass

import numpy as np

from .net import IX, IY, Channels, augmented_backward, augmented_forward


class CollocationError(ValueError):
    """Malformed collocation data."""


class LossError(RuntimeError):
    """Non-finite residual; carries the offending row."""


@dataclass
class LossBreakdown:
    """Total loss and its two summands (J = J_pde + J_bc exactly)."""

    J: float
    J_pde: float
    J_bc: float


class CollocationSet:
    """Interior and boundary collocation rows with optional eval targets.

    Interior rows carry inputs (x, y, g, eps_eq); boundary rows additionally
    carry unit outward normals. Reference values of the target field
    (`eps_bar_true`) may ride along for evaluation but are stored apart from
    the inputs: the loss path never reads them.

    Rows are sorted lexicographically on construction (inputs, then normals)
    so the same point set yields bit-identical losses regardless of input
    order.
    """

    def __init__(self, interior, boundary=None, normals=None,
                 eps_bar_true=None, eps_bar_true_boundary=None):
        interior = np.atleast_2d(np.asarray(interior, dtype=float))
        if interior.ndim != 2 or interior.shape[1] != 4 or interior.shape[0] == 0:
            raise CollocationError(f"interior rows must be (m_c, 4), got {interior.shape}")
        if not np.all(np.isfinite(interior)):
            raise CollocationError("non-finite interior collocation row")

        order = np.lexsort(interior.T[::-1])
        self.interior = np.ascontiguousarray(interior[order])
        self.eps_bar_true = None
        if eps_bar_true is not None:
            eps_bar_true = np.asarray(eps_bar_true, dtype=float)
            if eps_bar_true.shape != (interior.shape[0],):
                raise CollocationError("eps_bar_true length does not match interior rows")
            self.eps_bar_true = np.ascontiguousarray(eps_bar_true[order])

        if boundary is None:
            boundary = np.zeros((0, 4))
            normals = np.zeros((0, 2))
        boundary = np.atleast_2d(np.asarray(boundary, dtype=float))
        if boundary.shape[0] and (boundary.ndim != 2 or boundary.shape[1] != 4):
            raise CollocationError(f"boundary rows must be (m_b, 4), got {boundary.shape}")
        if normals is None:
            raise CollocationError("boundary rows require normals")
        normals = np.atleast_2d(np.asarray(normals, dtype=float)).reshape(-1, 2)
        if normals.shape[0] != boundary.shape[0]:
            raise CollocationError("normals length does not match boundary rows")
        if boundary.shape[0]:
            if not np.all(np.isfinite(boundary)) or not np.all(np.isfinite(normals)):
                raise CollocationError("non-finite boundary collocation row")
            lengths = np.linalg.norm(normals, axis=1)
            if not np.allclose(lengths, 1.0, atol=1e-9):
                raise CollocationError("boundary normals must be unit length")
            stacked = np.hstack([boundary, normals])
            border = np.lexsort(stacked.T[::-1])
            boundary = boundary[border]
            normals = normals[border]
            if eps_bar_true_boundary is not None:
                eps_bar_true_boundary = np.asarray(eps_bar_true_boundary, dtype=float)[border]
        self.boundary = np.ascontiguousarray(boundary)
        self.normals = np.ascontiguousarray(normals)
        self.eps_bar_true_boundary = (
            np.ascontiguousarray(eps_bar_true_boundary)
            if eps_bar_true_boundary is not None else None
        )
        for arr in (self.interior, self.boundary, self.normals):
            arr.setflags(write=False)

    @property
    def m_c(self):
        return self.interior.shape[0]

    @property
    def m_b(self):
        return self.boundary.shape[0]

    @classmethod
    def from_snapshot(cls, snap):
        interior = np.column_stack([snap.x, snap.y, snap.g, snap.eps_eq])
        boundary = np.column_stack([snap.bx, snap.by, snap.bg, snap.beps_eq])
        normals = np.column_stack([snap.bnx, snap.bny])
        return cls(interior, boundary, normals,
                   eps_bar_true=snap.eps_bar_true,
                   eps_bar_true_boundary=snap.beps_bar_true)

    def training_inputs(self):
        """Input arrays only; the loss path goes through here."""
        return self.interior, self.boundary, self.normals


def pde_residual(channels, g, eps_eq):
    """Interior residual r = ebar - g lap(ebar) - eps_eq, vectorized."""
    return channels.value - g * (channels.dxx + channels.dyy) - eps_eq


def bc_residual(channels, normals):
    """Boundary residual r_b = n . grad(ebar), vectorized."""
    return normals[:, 0] * channels.dx + normals[:, 1] * channels.dy


def _evaluate(theta, shape, scaling, cset, keep_tape):
    # Residuals are nondimensionalized by the output scale so the loss and
    # its gradient sit at unit magnitudes regardless of the strain level.
    # With identity scaling this is the plain physical form.
    interior, boundary, normals = cset.training_inputs()
    m_c, m_b = cset.m_c, cset.m_b
    s = scaling.out_scale
    Z = np.vstack([interior, boundary]) if m_b else interior
    out = augmented_forward(theta, shape, scaling, Z,
                            first_dirs=(IX, IY), second_dirs=(IX, IY),
                            keep_tape=keep_tape)
    ch, tape = out if keep_tape else (out, None)

    ci = Channels(value=ch.value[:m_c], dxx=ch.dxx[:m_c], dyy=ch.dyy[:m_c])
    r = pde_residual(ci, interior[:, 2], interior[:, 3]) / s
    if not np.all(np.isfinite(r)):
        bad = int(np.flatnonzero(~np.isfinite(r))[0])
        raise LossError(f"non-finite interior residual at row {bad}")
    J_pde = float(np.sum(r * r) / m_c)

    rb = np.zeros(0)
    J_bc = 0.0
    if m_b:
        cb = Channels(value=None, dx=ch.dx[m_c:], dy=ch.dy[m_c:])
        rb = bc_residual(cb, normals) / s
        if not np.all(np.isfinite(rb)):
            bad = int(np.flatnonzero(~np.isfinite(rb))[0])
            raise LossError(f"non-finite boundary residual at row {bad}")
        J_bc = float(np.sum(rb * rb) / m_b)

    breakdown = LossBreakdown(J=J_pde + J_bc, J_pde=J_pde, J_bc=J_bc)
    return breakdown, r, rb, tape


def loss(theta, shape, scaling, cset):
    """LossBreakdown at theta. Raises LossError on non-finite residuals.

    J = (1/m_c) sum r^2 + (1/m_b) sum r_b^2 with both residuals divided
    by the output scale; for identity scaling this is the plain form.
    """
    breakdown, _, _, _ = _evaluate(theta, shape, scaling, cset, keep_tape=False)
    return breakdown


def loss_gradient(theta, shape, scaling, cset):
    """(LossBreakdown, flat gradient) at theta.

    The gradient is the exact derivative of the computed J: interior rows
    seed the value and second-derivative channels with 2 r / m_c weights,
    boundary rows the first-derivative channels with 2 r_b n / m_b.
    """
    breakdown, r, rb, tape = _evaluate(theta, shape, scaling, cset, keep_tape=True)
    m_c, m_b = cset.m_c, cset.m_b
    s = scaling.out_scale
    P = m_c + m_b

    bar_value = np.zeros(P)
    bar_dxx = np.zeros(P)
    bar_dyy = np.zeros(P)
    bar_dx = np.zeros(P)
    bar_dy = np.zeros(P)

    # r is already r_phys / s, so the physical-channel weight is 2 r / (s m).
    wi = 2.0 * r / (s * m_c)
    g_int = cset.interior[:, 2]
    bar_value[:m_c] = wi
    bar_dxx[:m_c] = -wi * g_int
    bar_dyy[:m_c] = -wi * g_int
    if m_b:
        wb = 2.0 * rb / (s * m_b)
        bar_dx[m_c:] = wb * cset.normals[:, 0]
        bar_dy[m_c:] = wb * cset.normals[:, 1]

    grad = augmented_backward(tape, bar_value=bar_value, bar_dx=bar_dx,
                              bar_dy=bar_dy, bar_dxx=bar_dxx, bar_dyy=bar_dyy)
    return breakdown, grad
