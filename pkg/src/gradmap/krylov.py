"""Batched BiCGSTAB for many small independent nonsymmetric systems.

``scipy.sparse.linalg.bicgstab`` solves one system per call. Rollout
backward passes need one adjoint solve per (episode, step), so this module
runs the plain, unpreconditioned Bi-CGSTAB recurrence of van der Vorst
(1992) on a stack of right-hand sides at once. Each row converges (or
breaks down) independently; finished rows are frozen.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np


class KrylovResult(NamedTuple):
    x: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray


def bicgstab_batched(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    tol: float = 1e-10,
    maxiter: int | None = None,
) -> KrylovResult:
    """Solve ``A_k x_k = b_k`` for every row ``k`` of ``b``.

    Parameters
    ----------
    matvec : callable
        Maps a ``(K, n)`` array of row vectors to ``A_k x_k`` row-wise.
    b : ndarray, shape (K, n)
        Right-hand sides.
    tol : float
        Relative residual tolerance ``||b - A x|| <= tol * ||b||``.
    maxiter : int, optional
        Iteration cap, default ``2 * n``.

    Returns
    -------
    KrylovResult
        Rows that hit the cap or broke down have ``converged = False``.
    """
    b = np.atleast_2d(np.asarray(b, dtype=float))
    k, n = b.shape
    if maxiter is None:
        maxiter = 2 * n

    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b, axis=1)
    threshold = tol * bnorm
    r = b.copy()
    r_hat = b.copy()
    p = np.zeros_like(b)
    v = np.zeros_like(b)
    rho = np.ones(k)
    alpha = np.ones(k)
    omega = np.ones(k)

    res = bnorm.copy()
    done = res <= threshold  # zero rhs -> x = 0
    converged = done.copy()
    iterations = np.zeros(k, dtype=int)

    for it in range(1, maxiter + 1):
        active = ~done
        if not active.any():
            break
        iterations[active] = it

        rho_new = np.einsum("ij,ij->i", r_hat, r)
        broke = active & (rho_new == 0.0)
        done |= broke
        active = ~done
        if not active.any():
            break

        beta = np.divide(rho_new * alpha, rho * omega, out=np.zeros(k), where=active)
        p = np.where(active[:, None], r + beta[:, None] * (p - omega[:, None] * v), p)
        v = np.where(active[:, None], matvec(p), v)
        denom = np.einsum("ij,ij->i", r_hat, v)
        broke = active & (denom == 0.0)
        done |= broke
        active = ~done
        alpha = np.where(active, np.divide(rho_new, denom, out=np.zeros(k), where=active), alpha)
        rho = np.where(active, rho_new, rho)

        s = r - alpha[:, None] * v
        snorm = np.linalg.norm(s, axis=1)
        early = active & (snorm <= threshold)
        x = np.where(early[:, None], x + alpha[:, None] * p, x)
        res = np.where(early, snorm, res)
        converged |= early
        done |= early
        active = ~done
        if not active.any():
            break

        t = matvec(s)
        tt = np.einsum("ij,ij->i", t, t)
        omega_new = np.divide(np.einsum("ij,ij->i", t, s), tt, out=np.zeros(k), where=tt > 0)
        x = np.where(
            active[:, None], x + alpha[:, None] * p + omega_new[:, None] * s, x
        )
        r = np.where(active[:, None], s - omega_new[:, None] * t, r)
        rnorm = np.linalg.norm(r, axis=1)
        res = np.where(active, rnorm, res)
        ok = active & (rnorm <= threshold)
        converged |= ok
        done |= ok
        broke = active & ~ok & (omega_new == 0.0)
        done |= broke
        omega = np.where(active, omega_new, omega)

    bad = ~np.isfinite(x).all(axis=1)
    converged &= ~bad
    return KrylovResult(x, converged, iterations, res)
