"""Householder QR on the tape and the perpendicular projection of sdot0.

Everything is batched: ``A`` has shape ``(B, n_s, m)`` with ``m = n_c + 1``
columns ``[grad c_1, ..., grad c_nc, sdot0]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape

PIVOT_GUARD = 1e-12


@dataclass
class QrResult:
    Q: Node  # (B, n_s, m), orthonormal columns
    R: Node  # (B, m, m), upper triangular


def assemble_A(tape: Tape, J, sdot0) -> Node:
    """Stack the constant gradients and ``sdot0`` as columns.

    ``J`` is ``(n_c, n_s)`` or batched ``(B, n_c, n_s)``; ``sdot0`` matches
    with ``(n_s,)`` or ``(B, n_s)``. Unbatched inputs give an unbatched A.
    """
    J, sdot0 = tape.lift(J), tape.lift(sdot0)
    single = sdot0.value.ndim == 1
    if single:
        J = J.reshape((1,) + J.shape)
        sdot0 = sdot0.reshape(1, -1)
    n_batch, n_c, n_s = J.shape
    if n_c == 0:
        A = sdot0.reshape(n_batch, n_s, 1)
        return A.reshape(n_s, 1) if single else A
    if sdot0.shape != (n_batch, n_s):
        raise ValueError(f"assemble_A: J shape {J.shape} does not match sdot0 shape {sdot0.shape}")
    if n_c >= n_s:
        raise ValueError(f"assemble_A: need n_c < n_s, got n_c={n_c}, n_s={n_s}")
    A = tape.apply("concat_rows", [J.T, sdot0.reshape(n_batch, n_s, 1)], axis=2)
    return A.reshape(n_s, n_c + 1) if single else A


def householder_qr(tape: Tape, A) -> QrResult:
    """Thin QR by successive Householder reflections, built from primitives.

    The reflector for column ``k`` is ``v = x + sign(x_k) |x| e_k`` with
    ``sign(0) = +1``; when ``|x| < 1e-12`` the reflection is skipped for that
    batch entry so values and gradients stay finite.
    """
    A = tape.lift(A)
    single = A.value.ndim == 2
    if single:
        A = A.reshape((1,) + A.shape)
    n_batch, n, m = A.shape
    if m > n:
        raise ValueError(f"householder_qr: more columns ({m}) than rows ({n})")

    R = A
    Q = tape.constant(np.broadcast_to(np.eye(n), (n_batch, n, n)).copy())
    eye = np.eye(n)
    for k in range(m):
        below = np.zeros(n)
        below[k:] = 1.0
        x = R[:, :, k] * below  # (B, n)
        normsq = tape.apply("sqnorm", [x], axis=1)
        degenerate = (np.sqrt(normsq.value) < PIVOT_GUARD).astype(float)
        keep = 1.0 - degenerate
        alpha = tape.apply("sqrt", [normsq + degenerate])  # (B,)
        sign = np.where(x.value[:, k] >= 0.0, 1.0, -1.0)
        v = x + tape.apply("outer", [alpha * sign, eye[k]])  # (B, n)
        vsq = tape.apply("sqnorm", [v], axis=1)
        beta = tape.apply("reciprocal", [vsq + degenerate]) * (2.0 * keep)  # (B,)
        # R <- R - beta v (v^T R);  Q <- Q - beta (Q v) v^T
        vTR = (v.reshape(n_batch, n, 1) * R).sum(axis=1)  # (B, m)
        R = R - tape.apply("outer", [v * beta.reshape(n_batch, 1), vTR])
        Qv = (Q * v.reshape(n_batch, 1, n)).sum(axis=2)  # (B, n)
        Q = Q - tape.apply("outer", [Qv * beta.reshape(n_batch, 1), v])

    R = R[:, :m, :] * np.triu(np.ones((m, m)))
    Q = Q[:, :, :m]
    if single:
        R = R.reshape(m, m)
        Q = Q.reshape(n, m)
    return QrResult(Q, R)


def project_sdot(tape: Tape, qr: QrResult, n_c: int) -> Node:
    """``sdot = Q[:, n_c] * R[n_c, n_c]``: sdot0 with the gradient span removed."""
    Q, R = qr.Q, qr.R
    if Q.value.ndim == 2:
        return Q[:, n_c] * R[n_c, n_c]
    n_batch = Q.shape[0]
    return Q[:, :, n_c] * R[:, n_c, n_c].reshape(n_batch, 1)


def projected_sdot(tape: Tape, J: Node, sdot0: Node) -> Node:
    """Batched pipeline ``assemble -> QR -> project``; identity when n_c = 0."""
    n_c = J.shape[1]
    if n_c == 0:
        return sdot0
    A = assemble_A(tape, J, sdot0)
    return project_sdot(tape, householder_qr(tape, A), n_c)
