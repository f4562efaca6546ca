"""Compiled 3x3 SVD helpers for batched rotation extraction.

``svd3`` follows the usual Jacobi-eigen + Givens-QR route: V diagonalises
M^T M, then M V is factored as Q R with Givens rotations so that U = Q is a
proper rotation.  Singular values come back sorted in decreasing magnitude;
the last one carries the sign of det(M), so U V^T is the closest proper
rotation to M (the smallest-singular-value flip is built in).
"""
from __future__ import annotations

import math

import numba as nb


@nb.njit(cache=True)
def _jacobi_eigen(a, v):
    """In-place cyclic Jacobi on symmetric ``a``; accumulates rotations in ``v``."""
    for i in range(3):
        for j in range(3):
            v[i, j] = 1.0 if i == j else 0.0
    for sweep in range(50):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        diag = a[0, 0] ** 2 + a[1, 1] ** 2 + a[2, 2] ** 2
        if off <= 1e-32 * diag or off == 0.0:
            break
        _jacobi_rotate(a, v, 0, 1)
        _jacobi_rotate(a, v, 0, 2)
        _jacobi_rotate(a, v, 1, 2)


@nb.njit(cache=True, inline="always")
def _jacobi_rotate(a, v, p, q):
    apq = a[p, q]
    if apq == 0.0:
        return
    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
    c = 1.0 / math.sqrt(t * t + 1.0)
    s = t * c
    for k in range(3):
        akp, akq = a[k, p], a[k, q]
        a[k, p] = c * akp - s * akq
        a[k, q] = s * akp + c * akq
    for k in range(3):
        apk, aqk = a[p, k], a[q, k]
        a[p, k] = c * apk - s * aqk
        a[q, k] = s * apk + c * aqk
    for k in range(3):
        vkp, vkq = v[k, p], v[k, q]
        v[k, p] = c * vkp - s * vkq
        v[k, q] = s * vkp + c * vkq


@nb.njit(cache=True)
def _swap_cols(m, i, j, negate):
    for k in range(3):
        t = m[k, i]
        m[k, i] = m[k, j]
        m[k, j] = -t if negate else t


@nb.njit(cache=True, inline="always")
def _givens(b, q, p, r):
    """Zero b[r, p] with a rotation acting on rows p and r; accumulate into q."""
    x, y = b[p, p], b[r, p]
    h = math.hypot(x, y)
    if h == 0.0:
        return
    c, sn = x / h, y / h
    for k in range(3):
        bp, br = b[p, k], b[r, k]
        b[p, k] = c * bp + sn * br
        b[r, k] = -sn * bp + c * br
        qp, qr = q[k, p], q[k, r]
        q[k, p] = c * qp + sn * qr
        q[k, r] = -sn * qp + c * qr


@nb.njit(cache=True)
def svd3(m, u, s, v, work):
    """SVD of 3x3 ``m`` into ``u`` (3x3), ``s`` (3,), ``v`` (3x3): m = u diag(s) v^T.

    ``u`` and ``v`` are proper rotations; ``s[2]`` may be negative.  ``work``
    is (2, 3, 3) scratch space.
    """
    a = work[0]
    b = work[1]
    for i in range(3):
        for j in range(3):
            a[i, j] = m[0, i] * m[0, j] + m[1, i] * m[1, j] + m[2, i] * m[2, j]
    _jacobi_eigen(a, v)
    e0, e1, e2 = a[0, 0], a[1, 1], a[2, 2]
    # sort eigenvalues descending; swapping with a sign flip keeps det(v) = +1
    if e0 < e1:
        e0, e1 = e1, e0
        _swap_cols(v, 0, 1, True)
    if e1 < e2:
        e1, e2 = e2, e1
        _swap_cols(v, 1, 2, True)
    if e0 < e1:
        e0, e1 = e1, e0
        _swap_cols(v, 0, 1, True)
    for i in range(3):
        for j in range(3):
            b[i, j] = m[i, 0] * v[0, j] + m[i, 1] * v[1, j] + m[i, 2] * v[2, j]
    q = u
    for i in range(3):
        for j in range(3):
            q[i, j] = 1.0 if i == j else 0.0
    _givens(b, q, 0, 1)
    _givens(b, q, 0, 2)
    _givens(b, q, 1, 2)
    for k in range(3):
        s[k] = b[k, k]
    # the first two singular values are non-negative by convention
    for k in range(2):
        if s[k] < 0.0:
            s[k] = -s[k]
            s[2] = -s[2]
            for r in range(3):
                u[r, k] = -u[r, k]
                u[r, 2] = -u[r, 2]


@nb.njit(cache=True)
def rotation3(m, out, work):
    """Closest proper rotation U V^T to ``m``; ``work`` is (5, 3, 3) scratch."""
    u = work[2]
    v = work[3]
    s = work[4, 0]
    svd3(m, u, s, v, work)
    for i in range(3):
        for j in range(3):
            out[i, j] = u[i, 0] * v[j, 0] + u[i, 1] * v[j, 1] + u[i, 2] * v[j, 2]
