"""Dense symmetric / SPD kernels: trial covariance, Jacobi eigensolver and
inverse matrix square root.

Everything is float64.  Inputs are never modified.
"""

from typing import NamedTuple

import numpy as np

from .errors import DegenerateInput, NoConvergence, ShapeMismatch

MAX_SWEEPS = 100
REL_EIG_FLOOR = 1e-10


class EigenPair(NamedTuple):
    values: np.ndarray  # descending
    vectors: np.ndarray  # columns are eigenvectors


def covariance(trial, strict=False):
    """Channel covariance of a ``(C, T)`` trial with the ``1/(T-1)`` normaliser.

    Also accepts a stack ``(..., C, T)`` and returns ``(..., C, C)``.
    With ``strict=True`` a channel with zero variance raises
    :class:`DegenerateInput`, since the result cannot be positive definite.
    """
    x = np.asarray(trial, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeMismatch(f"expected (C, T) trial, got shape {x.shape}")
    n_times = x.shape[-1]
    if n_times < 2:
        raise DegenerateInput(f"covariance needs T >= 2 samples, got {n_times}")
    if not np.all(np.isfinite(x)):
        raise DegenerateInput("trial contains non-finite values")
    centred = x - x.mean(axis=-1, keepdims=True)
    cov = centred @ np.swapaxes(centred, -1, -2) / (n_times - 1)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    if strict and np.any(np.diagonal(cov, axis1=-2, axis2=-1) <= 0.0):
        raise DegenerateInput("constant channel: covariance is singular")
    return cov


def _check_symmetric(m, rtol=1e-12):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {m.shape}")
    scale = max(np.abs(m).max(initial=0.0), 1.0)
    if np.abs(m - m.T).max(initial=0.0) > rtol * scale:
        raise ShapeMismatch("matrix is not symmetric")
    return m


def sym_eig(m, max_sweeps=MAX_SWEEPS):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    An off-diagonal entry is rotated away unless it is negligible next to both
    diagonal entries it couples; iteration stops after a sweep with no
    rotation.  Eigenvalues come back in descending order and each eigenvector
    is signed so that its largest-magnitude component (first one on ties) is
    positive.  Raises :class:`NoConvergence` if ``max_sweeps`` is exhausted.
    """
    a = _check_symmetric(m).copy()
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app, aqq = a[p, p], a[q, q]
                g = 100.0 * abs(apq)
                if abs(app) + g == abs(app) and abs(aqq) + g == abs(aqq):
                    a[p, q] = a[q, p] = 0.0
                    continue
                rotated = True
                theta = (aqq - app) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                a[:, p] = c * col_p - s * a[:, q]
                a[:, q] = s * col_p + c * a[:, q]
                row_p = a[p, :].copy()
                a[p, :] = c * row_p - s * a[q, :]
                a[q, :] = s * row_p + c * a[q, :]
                a[p, q] = a[q, p] = 0.0
                vec_p = v[:, p].copy()
                v[:, p] = c * vec_p - s * v[:, q]
                v[:, q] = s * vec_p + c * v[:, q]
        if not rotated:
            break
    else:
        raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    values = values[order]
    v = v[:, order]
    lead = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[lead, np.arange(n)] < 0.0, -1.0, 1.0)
    return EigenPair(values, v * signs)


def inv_sqrt(m, eig_floor=None):
    """Inverse square root ``U diag(max(lam, floor))^-1/2 U^T``.

    The default floor is ``1e-10 * max(lam)``; an all-zero matrix is treated
    as the identity.  Returns ``(root, n_floored)`` where ``n_floored`` counts
    the eigenvalues that were raised to the floor.
    """
    values, vectors = sym_eig(m)
    if eig_floor is None:
        top = values[0] if values.size else 0.0
        eig_floor = REL_EIG_FLOOR * top if top > 0.0 else 1.0
    floored = values < eig_floor
    clipped = np.where(floored, eig_floor, values)
    root = (vectors / np.sqrt(clipped)) @ vectors.T
    return 0.5 * (root + root.T), int(np.count_nonzero(floored))
