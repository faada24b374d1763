"""One-sided (Hestenes) Jacobi SVD for small dense matrices.

Column pairs are visited in round-robin tournament order: every round touches
disjoint pairs, so a round is a single vectorized rotation over all pairs and
over any leading batch dimensions. Results are deterministic. Nothing here is
recorded on the autodiff tape.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

MAX_SWEEPS = 50
_EPS = np.finfo(np.float64).eps


class ConvergenceFailure(RuntimeError):
    pass


@lru_cache(maxsize=None)
def _rounds(n: int) -> tuple:
    """Circle-method schedule: n-1 (or n) rounds of disjoint (p, q) pairs, p < q."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    out = []
    for _ in range(m - 1):
        pairs = [(players[k], players[m - 1 - k]) for k in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            out.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(out)


def _complete_basis(u: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid columns of ``u`` (..., m, k) so that all k columns are orthonormal."""
    if valid.all():
        return u
    u = u.copy()
    m, k = u.shape[-2:]
    for j in range(k):
        bad = ~valid[..., j]
        if not bad.any():
            continue
        idx = np.nonzero(bad)
        sub = u[idx]  # (b, m, k)
        ok = valid[idx].copy()
        best = np.zeros(sub.shape[:-1])
        best_norm = np.full(sub.shape[0], -1.0)
        for e in range(m):
            cand = np.zeros_like(best)
            cand[:, e] = 1.0
            for _ in range(2):  # re-orthogonalize once for accuracy
                coef = np.einsum("bmk,bm->bk", sub, cand) * ok
                cand = cand - np.einsum("bmk,bk->bm", sub, coef)
            norm = np.linalg.norm(cand, axis=-1)
            take = norm > best_norm
            best[take] = cand[take]
            best_norm[take] = norm[take]
        sub[:, :, j] = best / best_norm[:, None]
        u[idx] = sub
        valid = valid.copy()
        valid[..., j] = True
    return u


def jacobi_svd(a: np.ndarray, max_sweeps: int = MAX_SWEEPS):
    """SVD of ``a`` with shape (..., m, n).

    Returns ``(u, s, vt)``. For m >= n: u is (..., m, n), s is (..., n),
    vt is (..., n, n). For m < n the right factor stays full, which is what
    null-space extraction needs: u is (..., m, m), s is (..., m), vt is
    (..., n, n) and ``a == u @ diag(s) @ vt[..., :m, :]``.
    Singular values are non-negative and sorted in descending order.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2:
        raise ValueError("jacobi_svd needs at least a 2-D array")
    if not np.all(np.isfinite(a)):
        raise ValueError("jacobi_svd: non-finite entries")
    m, n = a.shape[-2:]
    batch = a.shape[:-2]
    work = a.reshape((-1, m, n))
    if m < n:
        work = np.concatenate([work, np.zeros((work.shape[0], n - m, n))], axis=1)
    w = work.copy()
    rows = w.shape[1]
    v = np.broadcast_to(np.eye(n), (w.shape[0], n, n)).copy()
    scale = np.sqrt(np.sum(w * w, axis=(1, 2)))
    tiny = (scale * _EPS) ** 2
    tol = _EPS * max(rows, 4)

    converged = n < 2
    for _ in range(max_sweeps):
        if converged:
            break
        rotated = False
        for p, q in _rounds(n):
            ap, aq = w[:, :, p], w[:, :, q]
            alpha = np.sum(ap * ap, axis=1)
            beta = np.sum(aq * aq, axis=1)
            gamma = np.sum(ap * aq, axis=1)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > tiny[:, None]) & (beta > tiny[:, None])
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c3, s3 = c[:, None, :], s[:, None, :]
            w[:, :, p], w[:, :, q] = c3 * ap - s3 * aq, s3 * ap + c3 * aq
            vp, vq = v[:, :, p], v[:, :, q]
            v[:, :, p], v[:, :, q] = c3 * vp - s3 * vq, s3 * vp + c3 * vq
        converged = not rotated
    if not converged:
        raise ConvergenceFailure(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    sig = np.sqrt(np.sum(w * w, axis=1))
    order = np.argsort(-sig, axis=1, kind="stable")
    sig = np.take_along_axis(sig, order, axis=1)
    w = np.take_along_axis(w, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)

    k = min(m, n)
    valid = sig > (np.maximum(sig[:, :1], 1e-300) * _EPS * max(m, n))
    safe = np.where(valid, sig, 1.0)
    u = np.where(valid[:, None, :], w / safe[:, None, :], 0.0)
    u = u[:, :m, :k]
    sig = sig[:, :k]
    u = _complete_basis(u, valid[:, :k])

    return (
        u.reshape(batch + (m, k)),
        sig.reshape(batch + (k,)),
        np.swapaxes(v, 1, 2).reshape(batch + (n, n)),
    )


def svd3(m: np.ndarray):
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"svd3 expects a 3x3 matrix, got {m.shape}")
    return jacobi_svd(m)


def svd_small(m: np.ndarray):
    """SVD of a k x 9 design matrix (k >= 8), as used by the eight-point method."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != 9 or m.shape[0] < 8:
        raise ValueError(f"svd_small expects a k x 9 matrix with k >= 8, got {m.shape}")
    return jacobi_svd(m)


def null_vector(a: np.ndarray) -> np.ndarray:
    """Right singular vector of the smallest singular value, batched over leading dims."""
    _, _, vt = jacobi_svd(a)
    return vt[..., -1, :]
