"""Weighted structures and quaternion-based rigid-body superposition.

A structure carries two weight vectors: displacement weights, which set each
atom's contribution to the mean-square distance, and alignment weights, which
set its contribution to the centroid removed before rotational fitting.  The
optimal rotation is found with the Kearsley quaternion method: the weighted
residual is a quadratic form q^T K q over unit quaternions, so the smallest
eigenvalue of the symmetric 4x4 matrix K is the minimal mean-square distance
and its eigenvector is the optimal rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFitError, InvalidStructureError

CENTER_TOL = 1e-12
DEGENERACY_TOL = 1e-9


class Structure:
    """Atom coordinates (nm) with displacement and alignment weights.

    Weights are normalised to sum to one on construction.  Arrays are copied
    and marked read-only, so instances can be shared between threads.
    """

    __slots__ = ("coords", "disp_weights", "align_weights")

    def __init__(self, coords, disp_weights=None, align_weights=None):
        coords = np.array(coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise InvalidStructureError(f"coords must be (n, 3), got {coords.shape}")
        n = coords.shape[0]
        if n < 2:
            raise InvalidStructureError("a structure needs at least 2 atoms")
        if not np.all(np.isfinite(coords)):
            raise InvalidStructureError("coords contain non-finite values")
        self.coords = coords
        self.disp_weights = self._normalise(disp_weights, n, "displacement")
        self.align_weights = self._normalise(align_weights, n, "alignment")
        for arr in (self.coords, self.disp_weights, self.align_weights):
            arr.flags.writeable = False

    @staticmethod
    def _normalise(w, n, kind):
        if w is None:
            return np.full(n, 1.0 / n)
        w = np.array(w, dtype=float)
        if w.shape != (n,):
            raise InvalidStructureError(f"{kind} weights must have length {n}")
        if not np.all(np.isfinite(w)) or np.any(w < 0.0):
            raise InvalidStructureError(f"{kind} weights must be finite and non-negative")
        total = w.sum()
        if total <= 0.0:
            raise InvalidStructureError(f"{kind} weights sum to zero")
        return w / total

    @property
    def n_atoms(self):
        return self.coords.shape[0]

    def centroid(self):
        """Alignment-weighted centroid."""
        return self.align_weights @ self.coords

    def is_centered(self, tol=CENTER_TOL):
        return bool(np.all(np.abs(self.centroid()) <= tol))

    def center(self):
        """Return a copy shifted so the alignment-weighted centroid is zero."""
        return self.with_coords(self.coords - self.centroid())

    def with_coords(self, coords):
        """New structure with the same weights and different coordinates."""
        return Structure(coords, self.disp_weights, self.align_weights)


def center(s: Structure) -> Structure:
    return s.center()


@dataclass(frozen=True)
class RotationFit:
    """Result of a weighted rotational superposition.

    ``rot`` maps the reference onto the fitted structure; ``quat`` is the
    unit quaternion (scalar first) it was built from; ``eigvals`` are the
    ascending eigenvalues of the 4x4 quadratic form, so ``eigvals[0]`` is
    the minimal weighted mean-square distance.  ``rot_grad[k, alpha]`` holds
    the 3x3 response of the rotation matrix to moving atom ``k`` of the
    fitted structure along axis ``alpha``; it is ``None`` unless derivatives
    were requested.
    """

    rot: np.ndarray
    quat: np.ndarray
    eigvals: np.ndarray
    rot_grad: np.ndarray | None = None


def jacobi_eigh(mat, tol=1e-14, max_sweeps=60):
    """Diagonalise a small symmetric matrix by cyclic Jacobi rotations.

    Sweeps run until the off-diagonal Frobenius norm drops below ``tol``
    (floored at a few ULPs of the matrix norm for badly scaled inputs).
    Returns eigenvalues in ascending order and the matching eigenvector
    columns, each with its largest-magnitude component made positive.
    """
    a = np.array(mat, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("jacobi_eigh expects a symmetric square matrix")
    v = np.eye(n)
    tol = max(tol, 4e-16 * np.linalg.norm(a))
    mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = math.sqrt(np.sum(a[mask] ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                a[p, q] = a[q, p] = 0.0
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    else:
        raise RuntimeError("Jacobi diagonalisation did not converge")
    order = np.argsort(np.diag(a), kind="stable")
    w = np.diag(a)[order]
    v = v[:, order]
    for j in range(n):
        i = int(np.argmax(np.abs(v[:, j])))
        if v[i, j] < 0.0:
            v[:, j] = -v[:, j]
    return w, v


def _quat_to_rot(q):
    q0, q1, q2, q3 = q
    return np.array(
        [
            [q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3, 2.0 * (q1 * q2 - q0 * q3), 2.0 * (q1 * q3 + q0 * q2)],
            [2.0 * (q1 * q2 + q0 * q3), q0 * q0 - q1 * q1 + q2 * q2 - q3 * q3, 2.0 * (q2 * q3 - q0 * q1)],
            [2.0 * (q1 * q3 - q0 * q2), 2.0 * (q2 * q3 + q0 * q1), q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3],
        ]
    )


def _rot_quat_jacobian(q):
    """d(rotation matrix)/d(quaternion component), shape (4, 3, 3)."""
    q0, q1, q2, q3 = q
    return 2.0 * np.array(
        [
            [[q0, -q3, q2], [q3, q0, -q1], [-q2, q1, q0]],
            [[q1, q2, q3], [q2, -q1, -q0], [q3, q0, -q1]],
            [[-q2, q1, q0], [q1, q2, q3], [-q0, q3, -q2]],
            [[-q3, -q0, q1], [q0, -q3, q2], [q1, q2, q3]],
        ]
    )


def _kearsley_matrix(x, a, w):
    """4x4 quadratic form whose value at a unit quaternion q is the weighted
    residual sum w_j |x_j - R(q) a_j|^2."""
    m = x - a
    p = x + a
    wm = w[:, None] * m
    k = np.empty((4, 4))
    k[0, 0] = np.sum(wm * m)
    off = -np.sum(w[:, None] * np.cross(p, m), axis=0)
    k[0, 1:] = off
    k[1:, 0] = off
    k[1:, 1:] = (
        wm.T @ m
        + np.eye(3) * np.sum(w * np.sum(p * p, axis=1))
        - (w[:, None] * p).T @ p
    )
    return k


def _kearsley_matrix_grad(a, p, w):
    """Derivative of the quadratic form w.r.t. the fitted coordinates.

    Returns shape (n, 3, 4, 4): entry [k, alpha] is dK/dx_{k,alpha}.  Uses
    m - p = -2a to collapse the block derivatives.
    """
    n = a.shape[0]
    m = p - 2.0 * a  # recover x - a without carrying x separately
    eye = np.eye(3)
    grad = np.zeros((n, 3, 4, 4))
    grad[:, :, 0, 0] = 2.0 * w[:, None] * m
    # cross-product columns: (a_k x e_alpha)_beta
    ax = np.zeros((n, 3, 3))
    ax[:, 0, 1] = -a[:, 2]
    ax[:, 0, 2] = a[:, 1]
    ax[:, 1, 0] = a[:, 2]
    ax[:, 1, 2] = -a[:, 0]
    ax[:, 2, 0] = -a[:, 1]
    ax[:, 2, 1] = a[:, 0]
    off = -2.0 * w[:, None, None] * ax.transpose(0, 2, 1)
    grad[:, :, 0, 1:] = off
    grad[:, :, 1:, 0] = off
    t1 = np.einsum("ab,kg->kabg", eye, a)
    block = -2.0 * (t1 + t1.transpose(0, 1, 3, 2)) + 2.0 * np.einsum("ka,bg->kabg", p, eye)
    grad[:, :, 1:, 1:] = w[:, None, None, None] * block
    return grad


def kearsley_fit(x: Structure, a: Structure, with_derivatives: bool = False) -> RotationFit:
    """Optimal proper rotation mapping reference ``a`` onto ``x``.

    Minimises sum_j w_j |x_j - R a_j|^2 over rotations, with w the
    displacement weights of ``x``.  Both structures are expected to be
    centered.  With ``with_derivatives`` the rotation response dR/dx is
    assembled by first-order perturbation of the smallest eigenpair:

        dq = sum_{m>0} (q_m . dK q_0) / (lambda_0 - lambda_m) q_m

    chained through the quaternion-to-matrix map.  Raises
    :class:`DegenerateFitError` when the two lowest eigenvalues are closer
    than ``DEGENERACY_TOL``, where that perturbation is ill-defined.
    """
    if x.n_atoms != a.n_atoms:
        raise InvalidStructureError(
            f"atom count mismatch: {x.n_atoms} vs {a.n_atoms}"
        )
    w = x.disp_weights
    kmat = _kearsley_matrix(x.coords, a.coords, w)
    eigvals, eigvecs = jacobi_eigh(kmat)
    quat = eigvecs[:, 0]
    rot = _quat_to_rot(quat)
    rot_grad = None
    if with_derivatives:
        if eigvals[1] - eigvals[0] < DEGENERACY_TOL:
            raise DegenerateFitError(
                f"eigenvalue gap {eigvals[1] - eigvals[0]:.3e} below {DEGENERACY_TOL:.0e}; "
                "rotation derivative is ill-defined"
            )
        dk = _kearsley_matrix_grad(a.coords, x.coords + a.coords, w)
        rest = eigvecs[:, 1:]
        coef = np.einsum("kaij,j->kai", dk, quat) @ rest
        coef /= (eigvals[0] - eigvals[1:])[None, None, :]
        dq = coef @ rest.T
        rot_grad = np.einsum("kac,cbg->kabg", dq, _rot_quat_jacobian(quat))
    return RotationFit(rot=rot, quat=quat, eigvals=eigvals, rot_grad=rot_grad)


def rotation_derivative_check(x: Structure, a: Structure, h: float = 1e-6) -> float:
    """Compare the analytic rotation response against central differences.

    Only ``x`` is perturbed (one coordinate at a time, without re-centering);
    ``a`` is held fixed.  Returns the largest entrywise deviation divided by
    max(1, largest analytic entry).
    """
    fit = kearsley_fit(x, a, with_derivatives=True)
    coords = x.coords
    worst = 0.0
    for k in range(x.n_atoms):
        for alpha in range(3):
            bumped = coords.copy()
            bumped[k, alpha] += h
            rot_plus = kearsley_fit(x.with_coords(bumped), a).rot
            bumped[k, alpha] -= 2.0 * h
            rot_minus = kearsley_fit(x.with_coords(bumped), a).rot
            fd = (rot_plus - rot_minus) / (2.0 * h)
            worst = max(worst, float(np.abs(fd - fit.rot_grad[k, alpha]).max()))
    return worst / max(1.0, float(np.abs(fit.rot_grad).max()))
