"""Dense matrix kernels: products, QR, one-sided Jacobi SVD, orthogonal init.

Tensors are plain :class:`numpy.ndarray` objects. Everything here is a pure
function of its inputs; identical input bits give identical output bits.
"""

from __future__ import annotations

from dataclasses import dataclass
import numba
import numpy as np

from .errors import DegenerateMatrixError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(s) @ vt`` with ``s`` sorted non-increasing."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def rank_max(self) -> int:
        return self.s.shape[0]

    def reconstruct(self, k: int | None = None) -> np.ndarray:
        k = self.rank_max if k is None else k
        return (self.u[:, :k] * self.s[:k]) @ self.vt[:k, :]


def _require_2d(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = _require_2d(a, "a")
    b = _require_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(_require_2d(a, "a").T)


def qr(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR factorization (Householder, via LAPACK)."""
    m = _require_2d(m)
    if not np.all(np.isfinite(m)):
        raise NumericError("qr input contains non-finite values")
    return np.linalg.qr(m, mode="reduced")


@numba.njit(cache=True)
def _jacobi_sweeps(h, m, tol, max_sweeps):
    # Row i of h is [column i of the working matrix | column i of V].
    n, width = h.shape
    for sweep in range(max_sweeps):
        worst = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    x = h[i, k]
                    y = h[j, k]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                denom = np.sqrt(alpha * beta)
                if denom == 0.0:
                    continue
                ratio = abs(gamma) / denom
                if ratio <= tol:
                    continue
                if ratio > worst:
                    worst = ratio
                zeta = (beta - alpha) / (2.0 * gamma)
                sign = 1.0 if zeta >= 0.0 else -1.0
                t = sign / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for k in range(width):
                    x = h[i, k]
                    y = h[j, k]
                    h[i, k] = c * x - s * y
                    h[j, k] = s * x + c * y
        if worst <= tol:
            return sweep + 1
    return max_sweeps


def _jacobi_tall(g: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of ``g`` (m >= n); return (rotated g, v)."""
    m, n = g.shape
    h = np.ascontiguousarray(np.hstack([g.T, np.eye(n, dtype=g.dtype)]))
    if n >= 2:
        _jacobi_sweeps(h, m, h.dtype.type(tol), JACOBI_MAX_SWEEPS)
    return np.ascontiguousarray(h[:, :m].T), np.ascontiguousarray(h[:, m:].T)


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged ``good`` by an orthonormal complement."""
    m, r = u.shape
    n_good = int(good.sum())
    if n_good == r:
        return u
    basis = u[:, good]
    q, _ = np.linalg.qr(np.hstack([basis, np.eye(m, dtype=u.dtype)]), mode="reduced")
    out = u.copy()
    out[:, ~good] = q[:, n_good : n_good + (r - n_good)]
    return out


def svd(m: np.ndarray) -> SvdResult:
    """Thin singular value decomposition by one-sided (Hestenes) Jacobi.

    Columns are rotated pairwise until every pair is orthogonal to within a
    relative Gram ratio of ``1e-12`` (or 60 sweeps). Each column of ``u`` has
    its largest-magnitude entry made non-negative, with ``vt`` flipped to
    match, so results are byte-comparable between callers.

    Raises
    ------
    ShapeError
        If ``m`` is not 2-D.
    NumericError
        If ``m`` contains NaN or Inf.
    """
    m = _require_2d(m)
    if not np.issubdtype(m.dtype, np.floating):
        m = m.astype(DEFAULT_DTYPE)
    if not np.all(np.isfinite(m)):
        raise NumericError("svd input contains non-finite values")
    rows, cols = m.shape
    flipped = rows < cols
    work = m.T if flipped else m
    tol = max(JACOBI_TOL, 8.0 * float(np.finfo(work.dtype).eps))

    g, v = _jacobi_tall(work, tol)
    s = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    g = g[:, order]
    v = v[:, order]

    cutoff = s[0] * max(work.shape) * np.finfo(work.dtype).eps if s.size else 0.0
    good = s > cutoff
    u = np.zeros_like(g)
    u[:, good] = g[:, good] / s[good]
    u = _complete_basis(u, good)

    if flipped:
        u, vt = v, u.T
    else:
        vt = v.T
    u = np.ascontiguousarray(u)
    vt = np.ascontiguousarray(vt)

    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivots, np.arange(u.shape[1])] < 0, -1.0, 1.0).astype(u.dtype)
    u *= signs
    vt *= signs[:, None]
    return SvdResult(u=u, s=s, vt=vt)


def truncate_rank(s: np.ndarray, sigma_cutoff: float) -> int:
    """Number of singular values kept: those ``>= sigma_cutoff * s[0]``.

    The largest value is always kept, so the result is at least 1.
    """
    s = np.asarray(s)
    if s.ndim != 1 or s.size == 0:
        raise ShapeError("singular values must be a non-empty vector")
    if not 0.0 <= sigma_cutoff < 1.0:
        raise ValueError(f"sigma_cutoff must lie in [0, 1), got {sigma_cutoff}")
    if not s[0] > 0:
        raise DegenerateMatrixError("largest singular value is zero")
    return max(1, int(np.count_nonzero(s >= sigma_cutoff * s[0])))


def orthogonal_init(rows: int, cols: int, seed: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Seeded orthogonal matrix: orthonormal columns if tall, rows if wide."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"invalid extents ({rows}, {cols})")
    rng = np.random.default_rng(seed)
    tall, short = max(rows, cols), min(rows, cols)
    q, r = qr(rng.standard_normal((tall, short)))
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    q = q * d
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q, dtype=dtype)
