"""Lazy Kronecker operators over partially observed grids and the iterative
solvers that only need their matrix-vector products.

Grid convention: an ``n x m`` grid (configs x progressions) is flattened
config-major, so cell ``(i, j)`` sits at flat index ``i * m + j``. Under this
convention ``(A kron B) vec(C) = vec(A @ C @ B.T)`` with ``vec`` being a
row-major ravel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

logger = logging.getLogger(__name__)

DENSE_CAP = 8192
JITTER_FACTOR = 1e-6


class NumericalBreakdownError(ArithmeticError):
    """An iterative method produced non-finite or inadmissible values."""


class DenseCapError(MemoryError):
    """Refusal to materialize an operator larger than the dense cap."""


def _check_symmetric(mat, name):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square, got shape {mat.shape}")
    scale = max(np.max(np.abs(mat)), 1.0)
    if np.max(np.abs(mat - mat.T)) > 1e-12 * scale:
        raise ValueError(f"{name} is not symmetric")
    return mat


@dataclass(frozen=True)
class KroneckerOperator:
    """``left kron right`` without ever forming the ``nm x nm`` matrix."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "left", _check_symmetric(self.left, "left"))
        object.__setattr__(self, "right", _check_symmetric(self.right, "right"))

    @property
    def grid_shape(self):
        return self.left.shape[0], self.right.shape[0]

    @property
    def shape(self):
        n, m = self.grid_shape
        return n * m, n * m

    def __matmul__(self, v):
        return kron_mvm(self, v)


@dataclass(frozen=True, eq=False)
class ProjectionMask:
    """Boolean ``n x m`` grid of observed cells; ``P`` is a gather on it."""

    observed: np.ndarray
    index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        observed = np.asarray(self.observed, dtype=bool)
        if observed.ndim != 2:
            raise ValueError("mask must be a 2-d grid")
        if not observed.any():
            raise ValueError("mask has no observed entries")
        if not observed.any(axis=1).all():
            raise ValueError("every config row needs at least one observed entry")
        observed = observed.copy()
        observed.setflags(write=False)
        object.__setattr__(self, "observed", observed)
        index = np.flatnonzero(observed.ravel())
        index.setflags(write=False)
        object.__setattr__(self, "index", index)

    @classmethod
    def full(cls, n, m):
        return cls(np.ones((n, m), dtype=bool))

    @property
    def shape(self):
        return self.observed.shape

    @property
    def count(self):
        return int(self.index.size)

    @property
    def rows(self):
        """Config index of every observed entry, in flat order."""
        return self.index // self.shape[1]

    @property
    def cols(self):
        """Progression index of every observed entry, in flat order."""
        return self.index % self.shape[1]

    def pad(self, v):
        """``P^T v``: scatter ``(p,)`` or ``(p, k)`` into zero grids ``(k, n, m)``."""
        v = np.asarray(v)
        batch = v.reshape(self.count, -1).T
        n, m = self.shape
        grid = np.zeros((batch.shape[0], n * m), dtype=np.result_type(batch, float))
        grid[:, self.index] = batch
        return grid.reshape(-1, n, m)

    def gather(self, grids, like=None):
        """``P vec(grid)`` for a stack of grids; output shaped like ``like``."""
        n, m = self.shape
        out = grids.reshape(-1, n * m)[:, self.index].T
        if like is not None and np.ndim(like) == 1:
            return out[:, 0]
        return out

    def __eq__(self, other):
        return isinstance(other, ProjectionMask) and np.array_equal(
            self.observed, other.observed
        )

    __hash__ = None


def default_jitter(kron, mask):
    """Relative diagonal jitter: a millionth of the mean observed prior variance."""
    d1 = np.diag(kron.left)[mask.rows]
    d2 = np.diag(kron.right)[mask.cols]
    return JITTER_FACTOR * float(np.mean(d1 * d2))


@dataclass(frozen=True)
class ProjectedKroneckerOperator:
    """``P (K1 kron K2) P^T + (noise + jitter) I`` restricted to observed cells."""

    kron: KroneckerOperator
    mask: ProjectionMask
    noise: float = 0.0
    jitter: float = 0.0

    def __post_init__(self):
        if self.mask.shape != self.kron.grid_shape:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match Kronecker grid "
                f"{self.kron.grid_shape}"
            )
        if self.noise < 0 or self.jitter < 0:
            raise ValueError("noise and jitter must be nonnegative")

    @property
    def shift(self):
        return self.noise + self.jitter

    @property
    def shape(self):
        p = self.mask.count
        return p, p

    def __matmul__(self, v):
        return projected_mvm(self, v)


def kron_mvm(op, v):
    """``(K1 kron K2) v`` via two small matrix products; ``v`` may be ``(nm, k)``."""
    n, m = op.grid_shape
    v = np.asarray(v, dtype=float)
    if v.shape[0] != n * m:
        raise ValueError(f"expected leading dimension {n * m}, got {v.shape[0]}")
    batch = v.reshape(n * m, -1).T.reshape(-1, n, m)
    out = op.left @ batch @ op.right.T
    out = out.reshape(-1, n * m).T
    return out[:, 0] if v.ndim == 1 else out


def projected_mvm(op, v):
    """Projected Kronecker MVM: zero-pad, two matmuls, gather, plus the shift."""
    v = np.asarray(v, dtype=float)
    p = op.mask.count
    if v.shape[0] != p or v.ndim > 2:
        raise ValueError(f"expected leading dimension {p}, got shape {v.shape}")
    grids = op.mask.pad(v)
    grids = op.kron.left @ grids @ op.kron.right.T
    out = op.mask.gather(grids, like=v)
    if op.shift:
        out = out + op.shift * v
    return out


def dense_materialize(op, cap=DENSE_CAP):
    """Explicit ``p x p`` matrix of a projected operator; refuses above ``cap``."""
    p = op.mask.count
    if p > cap:
        raise DenseCapError(f"refusing to materialize {p}x{p} operator (cap {cap})")
    rows, cols = op.mask.rows, op.mask.cols
    dense = op.kron.left[np.ix_(rows, rows)] * op.kron.right[np.ix_(cols, cols)]
    dense[np.diag_indices(p)] += op.shift
    return dense


@dataclass(frozen=True)
class CgConfig:
    rel_tolerance: float = 0.01
    max_iters: int = 10000

    def __post_init__(self):
        if not self.rel_tolerance > 0:
            raise ValueError("rel_tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class CgReport:
    iterations: np.ndarray
    final_rel_residual: np.ndarray
    converged: np.ndarray

    @property
    def all_converged(self):
        return bool(np.all(self.converged))

    def summary(self):
        return {
            "max_iterations": int(np.max(self.iterations, initial=0)),
            "max_rel_residual": float(np.max(self.final_rel_residual, initial=0.0)),
            "all_converged": self.all_converged,
        }


def cg_solve(op, B, cfg=None, x0=None):
    """Batched conjugate gradients for an SPD operator supporting ``op @ X``.

    All columns of ``B`` advance together; a column stops updating as soon as
    its relative residual drops below tolerance. Convergence is confirmed on
    the recomputed residual ``b - op @ x``, never just the recurrence.

    Returns ``(X, CgReport)``. Non-convergence is reported, not raised.
    """
    cfg = cfg or CgConfig()
    B = np.asarray(B, dtype=float)
    single = B.ndim == 1
    B2 = B.reshape(B.shape[0], -1)
    k = B2.shape[1]

    b_norm = np.linalg.norm(B2, axis=0)
    safe_norm = np.where(b_norm > 0, b_norm, 1.0)
    X = np.zeros_like(B2) if x0 is None else np.array(x0, dtype=float).reshape(B2.shape)
    X[:, b_norm == 0] = 0.0
    iterations = np.zeros(k, dtype=int)

    def true_residual():
        R = B2 - _apply(op, X)
        rel = np.linalg.norm(R, axis=0) / safe_norm
        rel[b_norm == 0] = 0.0
        if not np.all(np.isfinite(rel)):
            raise NumericalBreakdownError(f"non-finite residual after {total} CG iterations")
        return R, rel

    total = 0
    R, rel = true_residual()
    while total < cfg.max_iters:
        cols = np.flatnonzero(rel > cfg.rel_tolerance)
        if cols.size == 0:
            break
        # compact copies of the still-active columns; restarted from the true residual
        Xa, Ra = X[:, cols], R[:, cols]
        Pa = Ra.copy()
        rz = np.einsum("ij,ij->j", Ra, Ra)
        live = np.arange(cols.size)
        while total < cfg.max_iters:
            AP = _apply(op, Pa)
            pAp = np.einsum("ij,ij->j", Pa, AP)
            if not np.all(np.isfinite(pAp)) or np.any(pAp <= 0):
                bad = pAp[~(np.isfinite(pAp) & (pAp > 0))][0]
                raise NumericalBreakdownError(f"CG breakdown at iteration {total + 1}: p^T A p = {bad}")
            alpha = rz / pAp
            Xa += alpha * Pa
            Ra -= alpha * AP
            rz_new = np.einsum("ij,ij->j", Ra, Ra)
            if not np.all(np.isfinite(rz_new)):
                raise NumericalBreakdownError(f"NaN residual at CG iteration {total + 1}")
            total += 1
            iterations[cols[live]] += 1
            still = np.sqrt(rz_new) / safe_norm[cols[live]] > cfg.rel_tolerance
            Pa *= rz_new / rz
            Pa += Ra
            rz = rz_new
            if not still.all():
                X[:, cols[live[~still]]] = Xa[:, ~still]
                if not still.any():
                    break
                live = live[still]
                Xa, Ra, Pa, rz = Xa[:, still], Ra[:, still], Pa[:, still], rz[still]
        X[:, cols[live]] = Xa
        R, rel = true_residual()

    report = CgReport(iterations, rel, rel <= cfg.rel_tolerance)
    if not report.all_converged:
        logger.warning(
            "CG did not converge for %d of %d right-hand sides (max rel residual %.3g)",
            int(np.sum(~report.converged)), k, float(np.max(rel)),
        )
    return (X[:, 0] if single else X), report


def _apply(op, V):
    return op @ V


@dataclass(frozen=True)
class ProbeSet:
    """Rademacher probe vectors, regenerated deterministically from ``seed``."""

    size: int
    num_probes: int = 16
    seed: int = 0

    @property
    def probes(self):
        rng = np.random.default_rng(self.seed)
        signs = rng.integers(0, 2, size=(self.size, self.num_probes), dtype=np.int8)
        return 2.0 * signs - 1.0


def lanczos_tridiag(op, Z, steps):
    """Batched Lanczos from the columns of ``Z``.

    Returns per-column ``(alphas, betas)`` lists; a column stops early on an
    invariant subspace (zero off-diagonal), which makes its quadrature exact.
    """
    p, k = Z.shape
    steps = min(steps, p)
    norms = np.linalg.norm(Z, axis=0)
    Q = Z / norms
    Q_prev = np.zeros_like(Q)
    beta_prev = np.zeros(k)
    alphas = np.zeros((steps, k))
    betas = np.zeros((steps, k))
    lengths = np.full(k, steps)
    active = np.ones(k, dtype=bool)
    for step in range(steps):
        cols = np.flatnonzero(active)
        W = _apply(op, Q[:, cols])
        a = np.einsum("ij,ij->j", Q[:, cols], W)
        W -= a * Q[:, cols] + beta_prev[cols] * Q_prev[:, cols]
        b = np.linalg.norm(W, axis=0)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise NumericalBreakdownError(f"Lanczos breakdown at step {step + 1}: non-finite")
        alphas[step, cols] = a
        betas[step, cols] = b
        done = b <= 1e-10 * np.maximum(np.abs(a), 1e-300)
        lengths[cols[done]] = step + 1
        active[cols[done]] = False
        if step + 1 == steps or not active.any():
            break
        keep = ~done
        cols, W, b = cols[keep], W[:, keep], b[keep]
        Q_prev[:, cols] = Q[:, cols]
        Q[:, cols] = W / b
        beta_prev[cols] = b
    return [
        (alphas[: lengths[j], j], betas[: lengths[j] - 1, j]) for j in range(k)
    ], norms


def _tridiag_eigh(a, b):
    try:
        return eigh_tridiagonal(a, b)
    except np.linalg.LinAlgError:
        # stemr occasionally fails on badly scaled tridiagonals; the dense path is robust
        return np.linalg.eigh(np.diag(a) + np.diag(b, 1) + np.diag(b, -1))


def slq_logdet(op, probes, lanczos_steps=30):
    """Stochastic Lanczos quadrature estimate of ``log det(op)``."""
    if lanczos_steps < 2:
        raise ValueError("lanczos_steps must be at least 2")
    Z = probes.probes
    tridiags, norms = lanczos_tridiag(op, Z, lanczos_steps)
    total = 0.0
    for j, (a, b) in enumerate(tridiags):
        if a.size == 1:
            theta, tau = a, np.ones(1)
        else:
            theta, vecs = _tridiag_eigh(a, b)
            tau = vecs[0]
        if np.any(theta <= 0):
            raise NumericalBreakdownError(
                f"Lanczos breakdown at step {a.size}: non-positive Ritz value "
                f"{theta.min():.3g} (operator not SPD)"
            )
        total += norms[j] ** 2 * np.sum(tau**2 * np.log(theta))
    return float(total / Z.shape[1])


def hutchinson_trace_grad(op, d_op, probes, cfg=None, solves=None):
    """Hutchinson estimate of ``tr(op^{-1} d_op)``.

    ``solves`` may carry precomputed ``op^{-1} Z`` to share one batched CG
    call across several derivative operators. Returns ``(estimate, report)``;
    ``report`` is None when solves were supplied.
    """
    Z = probes.probes
    report = None
    if solves is None:
        solves, report = cg_solve(op, Z, cfg)
    dZ = _apply(d_op, Z)
    return float(np.einsum("ij,ij->", solves, dZ) / Z.shape[1]), report


def factor_root(K):
    """``U sqrt(max(lam, 0))`` from the symmetric eigendecomposition of ``K``."""
    try:
        lam, U = np.linalg.eigh(K)
    except np.linalg.LinAlgError as exc:
        raise NumericalBreakdownError(f"eigendecomposition failed: {exc}") from exc
    return U * np.sqrt(np.clip(lam, 0.0, None))


def kron_root_apply(L1, L2, eps):
    """``(L1 kron L2) eps`` for eps shaped ``(nm,)`` or ``(S, nm)``."""
    n, m = L1.shape[0], L2.shape[0]
    eps = np.asarray(eps, dtype=float)
    grids = L1 @ eps.reshape(-1, L1.shape[1], L2.shape[1]) @ L2.T
    return grids.reshape(eps.shape[:-1] + (n * m,))


def kron_root_sample(K1, K2, eps):
    """Zero-mean Gaussian draw with covariance ``K1 kron K2`` from standard normals."""
    n, m = K1.shape[0], K2.shape[0]
    eps = np.asarray(eps, dtype=float)
    if eps.shape[-1] != n * m:
        raise ValueError(f"eps must have trailing dimension {n * m}")
    return kron_root_apply(factor_root(K1), factor_root(K2), eps)
