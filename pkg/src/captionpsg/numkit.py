"""Dense linear algebra and optimization kernels.

Everything here works on float64 numpy arrays. The eigen and singular value
decompositions are Jacobi methods using a round-robin (tournament) pair
ordering, so each sweep is ``n - 1`` vectorized rounds of disjoint
rotations. Results are deterministic for a given input.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EigResult",
    "NumericalError",
    "ShapeError",
    "SplitMix64",
    "as_matrix",
    "kmeans",
    "kmeans_objective",
    "l21_shrink",
    "solve_spd",
    "svd",
    "svt",
    "sym_eig",
]

_MAX_SWEEPS = 80


class ShapeError(ValueError):
    """Raised when array dimensions are inconsistent with an operation."""


class NumericalError(ArithmeticError):
    """Raised when a numerical precondition (definiteness, nonzero norm) fails."""


@dataclass(frozen=True)
class EigResult:
    values: np.ndarray
    vectors: np.ndarray


class SplitMix64:
    """Seeded 64-bit splitmix generator.

    Fully determined by ``seed``; used wherever the pipeline needs
    reproducible pseudo-randomness independent of numpy's global state.
    """

    _MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self._MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & self._MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self._MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self._MASK
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        # rejection sampling keeps the draw unbiased
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def normal(self, size) -> np.ndarray:
        """Standard normal draws via Box-Muller, filled in C order."""
        count = int(np.prod(size)) if np.ndim(size) else int(size)
        out = np.empty(count)
        i = 0
        while i < count:
            u1 = 1.0 - self.random()
            u2 = self.random()
            r = np.sqrt(-2.0 * np.log(u1))
            out[i] = r * np.cos(2.0 * np.pi * u2)
            if i + 1 < count:
                out[i + 1] = r * np.sin(2.0 * np.pi * u2)
            i += 2
        return out.reshape(size)

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        count = int(np.prod(size)) if np.ndim(size) else int(size)
        vals = np.array([self.random() for _ in range(count)])
        return (low + (high - low) * vals).reshape(size)


def as_matrix(a, name: str = "a") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array or raise ShapeError."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} has non-finite entries")
    return m


@functools.lru_cache(maxsize=64)
def _schedule(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Round-robin rounds of disjoint (p, q) index pairs covering every pair once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p = []
        q = []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        pa = np.array(p, dtype=np.intp)
        qa = np.array(q, dtype=np.intp)
        pa.flags.writeable = False
        qa.flags.writeable = False
        rounds.append((pa, qa))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _round_robin(n: int):
    return iter(_schedule(n))


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude component positive; argmax picks the first index on ties
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sym_eig(a, sym_tol: float = 1e-10) -> EigResult:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi.

    Eigenvalues come back ascending; eigenvector columns have unit norm and
    their largest-magnitude component is positive.
    """
    a = as_matrix(a)
    n, m = a.shape
    if n != m:
        raise ShapeError(f"sym_eig needs a square matrix, got {a.shape}")
    if n and np.max(np.abs(a - a.T)) > sym_tol:
        raise ShapeError("sym_eig needs a symmetric matrix")
    A = 0.5 * (a + a.T)
    V = np.eye(n)
    if n <= 1:
        return EigResult(np.diag(A).copy(), V)

    scale = np.linalg.norm(A)
    for _ in range(_MAX_SWEEPS):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= 1e-15 * scale or scale == 0.0:
            break
        for p, q in _round_robin(n):
            apq = A[p, q]
            app = A[p, p]
            aqq = A[q, q]
            active = np.abs(apq) > 1e-300
            safe = np.where(active, apq, 1.0)
            theta = (aqq - app) / (2.0 * safe)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(1.0 + theta * theta))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)

            Ap = A[:, p].copy()
            Aq = A[:, q]
            A[:, p] = c * Ap - s * Aq
            A[:, q] = s * Ap + c * Aq
            Ap = A[p, :].copy()
            Aq = A[q, :]
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            A[p, q] = 0.0
            A[q, p] = 0.0

            Vp = V[:, p].copy()
            Vq = V[:, q]
            V[:, p] = c * Vp - s * Vq
            V[:, q] = s * Vp + c * Vq

    values = np.diag(A).copy()
    order = np.argsort(values, kind="stable")
    return EigResult(values[order], _fix_signs(V[:, order]))


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged in ``keep`` with an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if keep[j]]
    out = u.copy()
    cand = 0
    for j in range(u.shape[1]):
        if keep[j]:
            continue
        while cand < m:
            e = np.zeros(m)
            e[cand] = 1.0
            cand += 1
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 1e-8:
                e /= nrm
                basis.append(e)
                out[:, j] = e
                break
    return out


def _one_sided_jacobi(a: np.ndarray):
    m, n = a.shape
    # columns of the working matrices are stored as rows for contiguous gathers
    Ut = np.array(a.T, order="C")
    Vt = np.eye(n)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for p, q in _schedule(n):
            if p.size == 0:
                continue
            Up = Ut[p]
            Uq = Ut[q]
            alpha = np.einsum("ij,ij->i", Up, Up)
            beta = np.einsum("ij,ij->i", Uq, Uq)
            gamma = np.einsum("ij,ij->i", Up, Uq)
            active = np.abs(gamma) > 1e-15 * np.sqrt(alpha * beta)
            active &= np.abs(gamma) > 1e-300
            if not np.any(active):
                continue
            rotated = True
            safe = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)[:, None]
            s = np.where(active, s, 0.0)[:, None]
            Ut[p] = c * Up - s * Uq
            Ut[q] = s * Up + c * Uq
            Vp = Vt[p]
            Vq = Vt[q]
            Vt[p] = c * Vp - s * Vq
            Vt[q] = s * Vp + c * Vq
        if not rotated:
            break
    U = Ut.T
    V = Vt.T
    sv = np.linalg.norm(U, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv = sv[order]
    U = U[:, order]
    V = V[:, order]
    tiny = sv <= 1e-300 + (sv[0] if sv.size else 0.0) * 1e-15
    safe = np.where(tiny, 1.0, sv)
    U = U / safe
    if np.any(tiny):
        U = _complete_basis(U, ~tiny)
        sv = np.where(tiny, 0.0, sv)
    return U, sv, V


def svd(a):
    """Thin SVD by one-sided (Hestenes) Jacobi.

    Returns ``(u, s, v)`` with ``a = u @ diag(s) @ v.T``, ``s`` nonnegative
    and descending, ``u`` of shape (m, r) and ``v`` of shape (n, r) where
    ``r = min(m, n)``.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m == 0 or n == 0:
        r = min(m, n)
        return np.zeros((m, r)), np.zeros(r), np.zeros((n, r))
    if m >= n:
        u, s, v = _one_sided_jacobi(a)
    else:
        v, s, u = _one_sided_jacobi(a.T)
    return u, s, v


def svt(a, tau: float) -> np.ndarray:
    """Singular value thresholding: the proximal map of ``tau * ||.||_*``."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    u, s, v = svd(a)
    shrunk = np.maximum(s - tau, 0.0)
    keep = shrunk > 0
    if not np.any(keep):
        return np.zeros_like(np.asarray(a, dtype=np.float64))
    return (u[:, keep] * shrunk[keep]) @ v[:, keep].T


def l21_shrink(a, tau: float) -> np.ndarray:
    """Column-wise group soft threshold: the proximal map of ``tau * ||.||_{2,1}``."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    a = as_matrix(a)
    norms = np.linalg.norm(a, axis=0)
    factor = np.zeros_like(norms)
    nz = norms > tau
    factor[nz] = (norms[nz] - tau) / norms[nz]
    return a * factor


def solve_spd(a, b) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive-definite ``a`` via Cholesky."""
    a = as_matrix(a)
    b = np.asarray(b, dtype=np.float64)
    vector = b.ndim == 1
    if vector:
        b = b[:, None]
    n = a.shape[0]
    if a.shape != (n, n) or b.shape[0] != n:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
    L = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0.0:
            raise NumericalError(f"matrix is not positive definite (pivot {j})")
        L[j, j] = np.sqrt(d)
        L[j + 1 :, j] = (a[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    y = np.empty_like(b)
    for i in range(n):
        y[i] = (b[i] - L[i, :i] @ y[:i]) / L[i, i]
    x = np.empty_like(b)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - L[i + 1 :, i] @ x[i + 1 :]) / L[i, i]
    return x[:, 0] if vector else x


def kmeans_objective(points, labels, centers=None) -> float:
    """Within-cluster sum of squared distances."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    total = 0.0
    for c in np.unique(labels):
        members = points[labels == c]
        center = members.mean(axis=0) if centers is None else centers[c]
        total += float(np.sum((members - center) ** 2))
    return total


def _farthest_point_seeds(points: np.ndarray, k: int, rng: SplitMix64) -> np.ndarray:
    n = points.shape[0]
    chosen = [rng.randbelow(n)]
    dist = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        d = dist.copy()
        d[chosen] = -1.0
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[chosen].copy()


def _random_seeds(points: np.ndarray, k: int, rng: SplitMix64) -> np.ndarray:
    idx = list(range(points.shape[0]))
    for i in range(k):
        j = i + rng.randbelow(len(idx) - i)
        idx[i], idx[j] = idx[j], idx[i]
    return points[idx[:k]].copy()


def _assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1)


def _lloyd(points, centers, max_iter, history=None):
    labels = _assign(points, centers)
    for _ in range(max_iter):
        if history is not None:
            history.append(kmeans_objective(points, labels, centers))
        for c in range(centers.shape[0]):
            members = points[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
        new = _assign(points, centers)
        if np.array_equal(new, labels):
            break
        labels = new
    if history is not None:
        history.append(kmeans_objective(points, labels, centers))
    return labels, centers


def _hartigan(points: np.ndarray, labels: np.ndarray, k: int, max_passes: int = 100) -> np.ndarray:
    """Single-point moves that lower the within-cluster sum of squares.

    Moving x from cluster a (size n_a) to b (size n_b) changes the objective
    by ``n_b/(n_b+1)|x-c_b|^2 - n_a/(n_a-1)|x-c_a|^2``; the best improving
    move is applied point by point until none is left.
    """
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, labels, points)
    for _ in range(max_passes):
        moved = False
        for i, x in enumerate(points):
            a = labels[i]
            if counts[a] <= 1:
                continue
            centers = sums / np.maximum(counts, 1.0)[:, None]
            d2 = np.sum((centers - x) ** 2, axis=1)
            cost_out = counts[a] / (counts[a] - 1.0) * d2[a]
            gain = counts / (counts + 1.0) * d2
            gain[a] = np.inf
            b = int(np.argmin(gain))
            if gain[b] < cost_out - 1e-12 * (1.0 + cost_out):
                labels[i] = b
                counts[a] -= 1
                counts[b] += 1
                sums[a] -= x
                sums[b] += x
                moved = True
        if not moved:
            break
    return labels


def kmeans(points, k: int, seed: int, n_init: int = 10, max_iter: int = 100,
           history: list | None = None) -> np.ndarray:
    """Lloyd's k-means with farthest-point seeding, polished by single-point moves.

    Restarts alternate between farthest-point seeding (first center drawn
    from a :class:`SplitMix64` stream seeded with ``seed``, then repeatedly
    the point farthest from the chosen ones) and ``k`` distinct random
    points from the same stream. The run with the lowest
    within-cluster sum of squares wins (earliest run on ties). Labels are
    renumbered in order of first appearance.
    """
    points = as_matrix(points, "points")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = SplitMix64(seed)
    best = None
    best_obj = np.inf
    for run in range(max(1, n_init)):
        if run % 2 == 0:
            centers = _farthest_point_seeds(points, k, rng)
        else:
            centers = _random_seeds(points, k, rng)
        trace = [] if (history is not None and run == 0) else None
        labels, _ = _lloyd(points, centers, max_iter, trace)
        labels = _hartigan(points, labels, k)
        if trace is not None:
            trace.append(kmeans_objective(points, labels))
            history.extend(trace)
        obj = kmeans_objective(points, labels)
        if obj < best_obj - 1e-12:
            best, best_obj = labels, obj
    _, first = np.unique(best, return_index=True)
    remap = {int(best[i]): r for r, i in enumerate(sorted(first))}
    return np.array([remap[int(l)] for l in best], dtype=np.intp)
