"""Full-batch optimizers for the physics loss.

Adam with bias correction:

    m = b1 m + (1 - b1) g        mhat = m / (1 - b1^t)
    v = b2 v + (1 - b2) g^2      vhat = v / (1 - b2^t)
    theta -= lr * mhat / (sqrt(vhat) + eps)

L-BFGS with the two-loop recursion and a strong Wolfe line search
(c1 = 1e-4, c2 = 0.9). Memory 0 reduces to steepest descent with the same
line search. Both run full batch and are bit-deterministic for a fixed
objective.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .metrics import delta_theta


class OptimError(ValueError):
    """Invalid optimizer configuration."""


class NonFiniteLossError(RuntimeError):
    """Objective went non-finite; carries the epoch it happened at."""

    def __init__(self, epoch, message=None):
        super().__init__(message or f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class AdamConfig:
    lr: float
    epochs: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8
    log_every: int = 100

    def __post_init__(self):
        if self.lr <= 0.0:
            raise OptimError("lr must be positive")
        if self.epochs < 0:
            raise OptimError("epochs must be non-negative")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise OptimError("betas must lie in [0, 1)")
        if self.eps <= 0.0:
            raise OptimError("eps must be positive")
        if self.log_every < 1:
            raise OptimError("log_every must be at least 1")


@dataclass
class AdamResult:
    theta: np.ndarray
    j_history: list
    delta_theta_samples: list
    snapshot_epochs: list
    rt100_mean: float
    block_seconds: list
    total_seconds: float


def adam_run(theta0, value_and_grad, cfg, callback=None):
    """Run Adam for a fixed number of full-batch epochs.

    Parameters
    ----------
    theta0 : (n,) ndarray
    value_and_grad : callable theta -> (J, grad)
    cfg : AdamConfig
    callback : callable (epoch, theta, J), optional
        Invoked at every snapshot epoch (multiples of log_every and the end).

    Returns
    -------
    AdamResult
        j_history has epochs + 1 entries: J at theta_0 .. theta_epochs.
        delta_theta_samples are relative parameter movements between
        consecutive snapshots (every log_every epochs; the trailing partial
        block is sampled too). rt100_mean is the mean wall time of 100
        epochs, estimated per block; wall-clock values are not deterministic.

    Raises
    ------
    NonFiniteLossError
        When J or the gradient goes non-finite, with the epoch attached.
    """
    theta = np.array(theta0, dtype=float)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    j_history = []
    snapshots = [theta.copy()]
    snapshot_epochs = [0]
    block_seconds = []
    block_epochs = []

    t_start = time.perf_counter()
    t_block = t_start
    epochs_in_block = 0

    for epoch in range(cfg.epochs):
        J, g = value_and_grad(theta)
        if not np.isfinite(J) or not np.all(np.isfinite(g)):
            raise NonFiniteLossError(epoch)
        j_history.append(float(J))
        if callback is not None and epoch % cfg.log_every == 0:
            callback(epoch, theta, float(J))
        t = epoch + 1
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        mhat = m / (1.0 - cfg.beta1 ** t)
        vhat = v / (1.0 - cfg.beta2 ** t)
        theta = theta - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        epochs_in_block += 1
        if t % cfg.log_every == 0 or t == cfg.epochs:
            now = time.perf_counter()
            block_seconds.append(now - t_block)
            block_epochs.append(epochs_in_block)
            t_block = now
            epochs_in_block = 0
            snapshots.append(theta.copy())
            snapshot_epochs.append(t)

    J_end, g_end = value_and_grad(theta)
    if not np.isfinite(J_end):
        raise NonFiniteLossError(cfg.epochs)
    j_history.append(float(J_end))
    if callback is not None:
        callback(cfg.epochs, theta, float(J_end))

    deltas = [delta_theta(a, b) for a, b in zip(snapshots, snapshots[1:])]
    per100 = [sec * (100.0 / n) for sec, n in zip(block_seconds, block_epochs) if n > 0]
    rt100 = float(np.mean(per100)) if per100 else 0.0
    return AdamResult(
        theta=theta,
        j_history=j_history,
        delta_theta_samples=deltas,
        snapshot_epochs=snapshot_epochs,
        rt100_mean=rt100,
        block_seconds=block_seconds,
        total_seconds=time.perf_counter() - t_start,
    )


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    c1: float = 1.0e-4
    c2: float = 0.9
    grad_tol: float = 1.0e-8
    rel_loss_tol: float = 1.0e-9
    max_iters: int = 20000
    max_ls_evals: int = 30

    def __post_init__(self):
        if self.memory < 0:
            raise OptimError("memory must be non-negative")
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise OptimError("need 0 < c1 < c2 < 1")
        if self.max_iters < 0:
            raise OptimError("max_iters must be non-negative")


@dataclass
class LbfgsResult:
    theta: np.ndarray
    j_history: list
    n_iters: int
    reason: str
    warning: str = None
    steps: list = field(default_factory=list)


def lbfgs_run(theta0, value_and_grad, cfg, trace=False):
    """Minimize with L-BFGS until a tolerance or iteration cap.

    Stops on: max-norm of the gradient <= grad_tol; relative loss change
    <= rel_loss_tol; max_iters; or line-search failure (graceful, with a
    warning and the best iterate found). Accepted steps satisfy strong
    Wolfe conditions, so J decreases monotonically along the history.

    Returns
    -------
    LbfgsResult
        n_iters counts accepted steps. When trace is set, `steps` records
        (alpha, dphi0, J_prev, J_new, dphi_new) per accepted step.
    """
    theta = np.array(theta0, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise OptimError("non-finite starting point")
    f, g = value_and_grad(theta)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteLossError(0, "non-finite loss at L-BFGS start")
    j_history = [float(f)]
    S, Y = [], []
    n_iters = 0
    reason = "max_iters"
    warning = None
    steps = []

    for _ in range(cfg.max_iters):
        if np.max(np.abs(g)) <= cfg.grad_tol:
            reason = "grad_tol"
            break
        d = _two_loop(g, S, Y)
        dphi0 = float(d @ g)
        if dphi0 >= 0.0:
            # Curvature information went bad; restart from steepest descent.
            S.clear()
            Y.clear()
            d = -g
            dphi0 = float(d @ g)
            if dphi0 >= 0.0:
                reason = "grad_tol"
                break
        ls = _strong_wolfe(value_and_grad, theta, d, f, dphi0, cfg)
        if ls is None:
            reason = "line_search_failure"
            warning = "strong Wolfe line search failed; returning best iterate"
            break
        alpha, f_new, g_new = ls
        s = alpha * d
        y = g_new - g
        sy = float(s @ y)
        if sy > 1.0e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > cfg.memory:
                S.pop(0)
                Y.pop(0)
        if cfg.memory == 0:
            S.clear()
            Y.clear()
        theta = theta + s
        rel = abs(f - f_new) / max(abs(f), 1.0e-30)
        if trace:
            steps.append((float(alpha), dphi0, float(f), float(f_new), float(g_new @ d)))
        f, g = f_new, g_new
        j_history.append(float(f))
        n_iters += 1
        if rel <= cfg.rel_loss_tol:
            reason = "rel_loss_tol"
            break

    return LbfgsResult(theta=theta, j_history=j_history, n_iters=n_iters,
                       reason=reason, warning=warning, steps=steps)


def _two_loop(g, S, Y):
    """L-BFGS two-loop recursion; returns the search direction -H g."""
    q = g.copy()
    k = len(S)
    alphas = np.empty(k)
    rhos = np.empty(k)
    for i in range(k - 1, -1, -1):
        rhos[i] = 1.0 / (Y[i] @ S[i])
        alphas[i] = rhos[i] * (S[i] @ q)
        q -= alphas[i] * Y[i]
    if k:
        gamma = (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        q *= gamma
    for i in range(k):
        beta = rhos[i] * (Y[i] @ q)
        q += (alphas[i] - beta) * S[i]
    return -q


class _LineObjective:
    """1D restriction of the objective along a direction, with eval budget."""

    def __init__(self, value_and_grad, x, d, budget):
        self.fg = value_and_grad
        self.x = x
        self.d = d
        self.left = budget

    def __call__(self, alpha):
        self.left -= 1
        fval, gval = self.fg(self.x + alpha * self.d)
        return fval, gval, float(gval @ self.d)


def _strong_wolfe(value_and_grad, x, d, phi0, dphi0, cfg):
    """Strong Wolfe line search (bracket then zoom).

    Returns (alpha, f, g) at an accepted point or None on failure. Every
    returned point satisfies both the sufficient-decrease and the strong
    curvature condition.
    """
    c1, c2 = cfg.c1, cfg.c2
    phi = _LineObjective(value_and_grad, x, d, cfg.max_ls_evals)

    alpha_prev, phi_prev, dphi_prev = 0.0, phi0, dphi0
    alpha = 1.0
    alpha_max = 1.0e10
    first = True

    while phi.left > 0:
        f_a, g_a, dphi_a = phi(alpha)
        if not np.isfinite(f_a):
            # Shrink back toward the last good point.
            alpha = 0.5 * (alpha_prev + alpha)
            continue
        if f_a > phi0 + c1 * alpha * dphi0 or (not first and f_a >= phi_prev):
            return _zoom(phi, phi0, dphi0, alpha_prev, phi_prev, dphi_prev,
                         alpha, f_a, c1, c2)
        if abs(dphi_a) <= -c2 * dphi0:
            return alpha, f_a, g_a
        if dphi_a >= 0.0:
            return _zoom(phi, phi0, dphi0, alpha, f_a, dphi_a,
                         alpha_prev, phi_prev, c1, c2)
        alpha_prev, phi_prev, dphi_prev = alpha, f_a, dphi_a
        first = False
        alpha = min(2.0 * alpha, alpha_max)
    return None


def _zoom(phi, phi0, dphi0, alo, flo, dlo, ahi, fhi, c1, c2):
    """Refine a bracketing interval until strong Wolfe holds."""
    while phi.left > 0:
        span = ahi - alo
        a = _quad_min(alo, flo, dlo, ahi, fhi)
        lo, hi = (alo, ahi) if alo < ahi else (ahi, alo)
        margin = 0.1 * abs(span)
        if a is None or not (lo + margin <= a <= hi - margin):
            a = 0.5 * (alo + ahi)
        f_a, g_a, dphi_a = phi(a)
        if not np.isfinite(f_a) or f_a > phi0 + c1 * a * dphi0 or f_a >= flo:
            ahi, fhi = a, f_a
        else:
            if abs(dphi_a) <= -c2 * dphi0:
                return a, f_a, g_a
            if dphi_a * (ahi - alo) >= 0.0:
                ahi, fhi = alo, flo
            alo, flo, dlo = a, f_a, dphi_a
        if abs(ahi - alo) <= 1.0e-16 * max(1.0, abs(alo)):
            return None
    return None


def _quad_min(a0, f0, d0, a1, f1):
    """Minimizer of the quadratic through (a0, f0, slope d0) and (a1, f1)."""
    h = a1 - a0
    if h == 0.0:
        return None
    denom = f1 - f0 - d0 * h
    if denom == 0.0:
        return None
    a = a0 + 0.5 * d0 * h * h / -denom
    if not np.isfinite(a):
        return None
    return a
