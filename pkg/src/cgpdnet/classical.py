"""Non-learned reference solvers.

* :func:`two_grid_cycle` -- textbook two-grid cycle (pre-relaxation, Galerkin
  coarse solve, correction, post-relaxation) on an abstract SPSD system.
* :func:`classical_cs_twogrid` -- the same cycle on the CS normal equations
  ``T^H T x = T^H y`` over the image grid.
* :func:`fista_tv` -- monotone FISTA on ``0.5 ||Tx - y||^2 + lam * TV(x)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, aslinearoperator, cg

from .kspace import MeasurementOp


class SolverError(RuntimeError):
    pass


class DivergenceError(SolverError):
    """Raised when an iteration blows up; ``iterate`` holds the last state."""

    def __init__(self, msg, iterate=None):
        super().__init__(msg)
        self.iterate = iterate


@dataclass
class TwoGridConfig:
    nu0: int = 1
    nu1: int = 0
    relax_step: float = 1.0
    coarse_solver: str = "dense_direct"
    cycles: int = 1

    def __post_init__(self):
        if self.nu0 < 1:
            raise ValueError("nu0 must be >= 1")
        if self.nu1 < 0:
            raise ValueError("nu1 must be >= 0")
        if not self.relax_step > 0:
            raise ValueError("relax_step must be positive")
        if self.coarse_solver not in ("dense_direct", "conjugate_gradient"):
            raise ValueError(f"unknown coarse solver {self.coarse_solver!r}")
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")


@dataclass
class FistaTvConfig:
    lam: float = 0.01
    iters: int = 100
    tv_inner: int = 20

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.tv_inner < 1:
            raise ValueError("tv_inner must be >= 1")


def _as_op(a, n=None) -> LinearOperator:
    if isinstance(a, LinearOperator):
        return a
    if callable(a) and not hasattr(a, "shape"):
        if n is None:
            raise TypeError("callable operators need an explicit size")
        return LinearOperator((n, n), matvec=a, dtype=float)
    return aslinearoperator(a)


# ---------------------------------------------------------------------------
# two-grid cycle

def relax(apply_A, rhs, x, step, sweeps, *, check=True):
    """Richardson sweeps ``x <- x + step * (rhs - A x)``.

    Raises :class:`DivergenceError` if the residual norm grows, which for an
    SPSD ``A`` means ``step >= 2 / lambda_max(A)``.
    """
    A = _as_op(apply_A, rhs.size)
    x = np.array(x, dtype=float, copy=True)
    r = rhs - A.matvec(x)
    rnorm = np.linalg.norm(r)
    floor = 1e-12 * max(np.linalg.norm(rhs), 1e-300)
    for sweep in range(sweeps):
        x = x + step * r
        r = rhs - A.matvec(x)
        new = np.linalg.norm(r)
        if check and new > rnorm * (1 + 1e-10) + floor:
            raise DivergenceError(
                f"residual grew from {rnorm:.3e} to {new:.3e} in relaxation sweep {sweep}; "
                f"relax_step={step} is too large for this operator",
                iterate=x,
            )
        rnorm = new
    return x


def galerkin_matrix(apply_A, restrict, prolong) -> np.ndarray:
    """Dense coarse operator ``restrict @ A @ prolong``."""
    P = _as_op(prolong)
    R = _as_op(restrict)
    A = _as_op(apply_A, P.shape[0])
    nc = P.shape[1]
    eye = np.eye(nc)
    return np.column_stack([R.matvec(A.matvec(P.matvec(eye[:, j]))) for j in range(nc)])


def _coarse_solve(Ac, rc, tol=1e-10):
    """Symmetric eigen-solve; singular operators are accepted only when the
    right-hand side has no component in the null space."""
    Ac = 0.5 * (Ac + Ac.T)
    w, V = np.linalg.eigh(Ac)
    scale = max(abs(w).max(), 1e-300)
    keep = abs(w) > tol * scale
    coef = V.T @ rc
    if not keep.all():
        leak = np.linalg.norm(coef[~keep])
        if leak > tol * max(np.linalg.norm(rc), 1e-300) and leak > 1e-14:
            raise SolverError(
                f"coarse operator is singular ({int((~keep).sum())} null directions) and the "
                f"restricted residual is inconsistent with it (null-space component {leak:.3e})"
            )
    e = V[:, keep] @ (coef[keep] / w[keep])
    return e


def two_grid_cycle(apply_A, rhs, x0, restrict, prolong, cfg: TwoGridConfig):
    """Run ``cfg.cycles`` two-grid cycles on ``A x = rhs``.

    ``restrict`` and ``prolong`` may be matrices, sparse matrices or
    ``LinearOperator`` objects; ``apply_A`` may additionally be a plain callable.
    """
    rhs = np.asarray(rhs, dtype=float).ravel()
    x = np.asarray(x0, dtype=float).ravel().copy()
    A = _as_op(apply_A, rhs.size)
    R, P = _as_op(restrict), _as_op(prolong)

    Ac = galerkin_matrix(A, R, P) if cfg.coarse_solver == "dense_direct" else None
    coarse = LinearOperator((P.shape[1], P.shape[1]), matvec=lambda v: R.matvec(A.matvec(P.matvec(v))), dtype=float)

    for _ in range(cfg.cycles):
        x = relax(A, rhs, x, cfg.relax_step, cfg.nu0)
        rc = R.matvec(rhs - A.matvec(x))
        if Ac is not None:
            ec = _coarse_solve(Ac, rc)
        else:
            ec, info = cg(coarse, rc, rtol=1e-12, atol=0.0, maxiter=10 * P.shape[1])
            if info > 0:
                raise SolverError(f"coarse conjugate gradient did not converge ({info} iterations)")
        x = x + P.matvec(ec)
        if cfg.nu1:
            x = relax(A, rhs, x, cfg.relax_step, cfg.nu1)
    return x


def linear_prolongation_1d(nc: int) -> sp.csr_matrix:
    """Cell-centred linear interpolation from ``nc`` to ``2 nc`` points
    (weights 3/4, 1/4; reflecting boundary)."""
    rows, cols, vals = [], [], []
    for i in range(nc):
        lo, hi = max(i - 1, 0), min(i + 1, nc - 1)
        rows += [2 * i, 2 * i, 2 * i + 1, 2 * i + 1]
        cols += [i, lo, i, hi]
        vals += [0.75, 0.25, 0.75, 0.25]
    return sp.csr_matrix((vals, (rows, cols)), shape=(2 * nc, nc))


def image_transfer_operators(m: int, n: int):
    """Bilinear prolongation ``P`` and full-weighting restriction ``R = P^T / 4``
    between an ``m x n`` grid and its ``m/2 x n/2`` coarsening (row-major)."""
    if m % 2 or n % 2:
        raise ValueError("grid dimensions must be even")
    P = sp.kron(linear_prolongation_1d(m // 2), linear_prolongation_1d(n // 2), format="csr")
    R = (P.T * 0.25).tocsr()
    return R, P


def normal_operator(op: MeasurementOp) -> LinearOperator:
    """``x -> Re(T^H T x)`` on real row-major images, symmetric PSD."""
    m, n = op.shape

    def matvec(v):
        return op.normal(np.asarray(v, dtype=float).reshape(m, n)).real.ravel()

    return LinearOperator((m * n, m * n), matvec=matvec, rmatvec=matvec, dtype=float)


def classical_cs_twogrid(op: MeasurementOp, y, cfg: TwoGridConfig, x0=None):
    """Two-grid solve of ``Re(T^H T) x = Re(T^H y)``; returns ``|x|``."""
    m, n = op.shape
    if m % 2 or n % 2:
        raise ValueError("mask dimensions must be even")
    R, P = image_transfer_operators(m, n)
    rhs = op.adjoint(y).real.ravel()
    start = np.zeros(m * n) if x0 is None else np.asarray(x0, dtype=float).ravel()
    x = two_grid_cycle(normal_operator(op), rhs, start, R, P, cfg)
    return np.abs(x.reshape(m, n))


# ---------------------------------------------------------------------------
# total variation

def grad2d(x):
    """Forward differences with Neumann boundary (last difference is zero)."""
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[:-1, :] = x[1:, :] - x[:-1, :]
    gy[:, :-1] = x[:, 1:] - x[:, :-1]
    return gx, gy


def div2d(px, py):
    """Negative adjoint of :func:`grad2d`."""
    dx = np.zeros_like(px)
    dx[0, :] = px[0, :]
    dx[1:-1, :] = px[1:-1, :] - px[:-2, :]
    dx[-1, :] = -px[-2, :]
    dy = np.zeros_like(py)
    dy[:, 0] = py[:, 0]
    dy[:, 1:-1] = py[:, 1:-1] - py[:, :-2]
    dy[:, -1] = -py[:, -2]
    return dx + dy


def tv(x) -> float:
    gx, gy = grad2d(x)
    return float(np.sqrt(gx**2 + gy**2).sum())


def tv_prox(v, weight, iters=20):
    """``argmin_x 0.5 ||x - v||^2 + weight * TV(x)`` by fast gradient
    projection on the dual (Beck & Teboulle 2009)."""
    if weight == 0:
        return v.copy()
    px = np.zeros_like(v)
    py = np.zeros_like(v)
    qx, qy = px, py
    t = 1.0
    for _ in range(iters):
        gx, gy = grad2d(v + weight * div2d(qx, qy))
        nx = qx + gx / (8.0 * weight)
        ny = qy + gy / (8.0 * weight)
        norm = np.maximum(1.0, np.sqrt(nx**2 + ny**2))
        nx, ny = nx / norm, ny / norm
        t_next = (1 + np.sqrt(1 + 4 * t * t)) / 2
        qx = nx + (t - 1) / t_next * (nx - px)
        qy = ny + (t - 1) / t_next * (ny - py)
        px, py, t = nx, ny, t_next
    return v + weight * div2d(px, py)


@dataclass
class FistaResult:
    image: np.ndarray
    objective: list[float] = field(default_factory=list)


def tv_objective(op: MeasurementOp, y, x, lam) -> float:
    return 0.5 * float(np.sum(np.abs(op.forward(x) - y) ** 2)) + lam * tv(x)


def fista_tv(op: MeasurementOp, y, cfg: FistaTvConfig, *, return_history=False):
    """Monotone FISTA (MFISTA) with step 1, the Lipschitz constant of the
    data term under a unitary DFT.  The iterate is real-valued."""
    x = np.zeros(op.shape)
    z = x.copy()
    t = 1.0
    f_x = tv_objective(op, y, x, cfg.lam)
    history = [f_x]
    f_prev_candidate = f_x
    rises = 0
    for _ in range(cfg.iters):
        grad = op.adjoint(op.forward(z) - y).real
        u = tv_prox(z - grad, cfg.lam, cfg.tv_inner)
        f_u = tv_objective(op, y, u, cfg.lam)
        if not np.isfinite(f_u):
            raise DivergenceError("FISTA-TV produced a non-finite objective", iterate=x)
        rises = rises + 1 if f_u > f_prev_candidate else 0
        if rises >= 5 and f_u > history[0]:
            raise DivergenceError("FISTA-TV objective increased for 5 consecutive iterations", iterate=x)
        f_prev_candidate = f_u
        # monotone variant: only accept the candidate if it does not increase the objective
        x_prev = x
        if f_u <= f_x:
            x, f_x = u, f_u
        t_next = (1 + np.sqrt(1 + 4 * t * t)) / 2
        z = x + (t / t_next) * (u - x) + ((t - 1) / t_next) * (x - x_prev)
        t = t_next
        history.append(f_x)
    if return_history:
        return FistaResult(image=x, objective=history)
    return x
