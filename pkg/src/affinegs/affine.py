"""The 12-parameter affine velocity model.

Weight layout, fixed throughout the package::

    w[0:3]   translation b
    w[3:6]   rotation, acting as angular velocity omega (v = omega x x)
    w[6:9]   stretch, the diagonal of the velocity gradient
    w[9:12]  shear, symmetric off-diagonal entries (xy, yz, zx)

so that ``Phi(x) @ w == A(w) @ x + b(w)`` with ``A`` the constant velocity
gradient. All functions broadcast over leading axes.
"""
from __future__ import annotations

import numpy as np

from .autodiff.tape import Var, _unbroadcast
from .mathcore import skew

TRANSLATION = slice(0, 3)
ROTATION = slice(3, 6)
STRETCH = slice(6, 9)
SHEAR = slice(9, 12)


def basis_eval(x):
    """The 3x12 basis matrix ``Phi(x)``; columns ordered translation,
    rotation, stretch, shear."""
    x = np.asarray(x, dtype=float)
    X, Y, Z = np.moveaxis(x, -1, 0)
    o = np.zeros_like(X)
    i = np.ones_like(X)
    cols = [
        (i, o, o), (o, i, o), (o, o, i),
        (o, -Z, Y), (Z, o, -X), (-Y, X, o),
        (X, o, o), (o, Y, o), (o, o, Z),
        (Y, X, o), (o, Z, Y), (Z, o, X),
    ]
    return np.stack([np.stack(c, axis=-1) for c in cols], axis=-1)


def assemble(w):
    """Velocity gradient ``A`` and translation ``b`` from a weight vector."""
    w = np.asarray(w, dtype=float)
    A = skew(w[..., ROTATION])
    A = A + np.einsum("...i,ij->...ij", w[..., STRETCH], np.eye(3))
    sxy, syz, szx = np.moveaxis(w[..., SHEAR], -1, 0)
    o = np.zeros_like(sxy)
    A = A + np.stack([
        np.stack([o, sxy, szx], -1),
        np.stack([sxy, o, syz], -1),
        np.stack([szx, syz, o], -1),
    ], axis=-2)
    return A, w[..., TRANSLATION].copy()


def _apply_linear(w, x):
    """``A(w) @ x`` without forming A."""
    om = w[..., ROTATION]
    st = w[..., STRETCH]
    sh = w[..., SHEAR]
    X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
    ox, oy, oz = om[..., 0], om[..., 1], om[..., 2]
    return np.stack([
        oy * Z - oz * Y + st[..., 0] * X + sh[..., 0] * Y + sh[..., 2] * Z,
        oz * X - ox * Z + st[..., 1] * Y + sh[..., 0] * X + sh[..., 1] * Z,
        ox * Y - oy * X + st[..., 2] * Z + sh[..., 1] * Y + sh[..., 2] * X,
    ], axis=-1)


def _apply_linear_T(w, g):
    """``A(w)^T @ g``; the skew part flips sign, the rest is symmetric."""
    return _apply_linear(w, g) - 2.0 * _cross(w[..., ROTATION], g)


def _cross(a, b):
    return np.stack([
        a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
        a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
        a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
    ], axis=-1)


def _basis_T(x, g):
    """``Phi(x)^T @ g`` as a 12-vector."""
    X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
    gx, gy, gz = g[..., 0], g[..., 1], g[..., 2]
    return np.concatenate([
        g,
        _cross(x, g),
        x * g,
        np.stack([Y * gx + X * gy, Z * gy + Y * gz, Z * gx + X * gz], axis=-1),
    ], axis=-1)


def velocity(x, w):
    """``v = Phi(x) @ w``."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    return _apply_linear(w, x) + w[..., TRANSLATION]


def jacobian(w):
    """Spatial velocity gradient; independent of position for an affine field."""
    return assemble(w)[0]


def divergence(w):
    w = np.asarray(w, dtype=float)
    return w[..., 6] + w[..., 7] + w[..., 8]


def convective_term(x, w):
    """``grad(v) @ v = A (A x + b)``."""
    w = np.asarray(w, dtype=float)
    return _apply_linear(w, velocity(x, w))


def weights_from_affine(A, b):
    """Inverse of :func:`assemble` for any 3x3 ``A`` (the basis spans all
    affine fields)."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    W = 0.5 * (A - np.swapaxes(A, -1, -2))
    S = 0.5 * (A + np.swapaxes(A, -1, -2))
    return np.concatenate([
        b,
        np.stack([W[..., 2, 1], W[..., 0, 2], W[..., 1, 0]], -1),
        np.stack([S[..., 0, 0], S[..., 1, 1], S[..., 2, 2]], -1),
        np.stack([S[..., 0, 1], S[..., 1, 2], S[..., 2, 0]], -1),
    ], axis=-1)


# ------------------------------------------------------------- tape primitives

def affine_apply(x, w, translation=True):
    """Tape primitive for ``A(w) x (+ b(w))`` with analytic VJPs.

    Either argument may be a :class:`Var` or a plain array.
    """
    tape = x.tape if isinstance(x, Var) else w.tape
    xv = x.value if isinstance(x, Var) else np.asarray(x, dtype=float)
    wv = w.value if isinstance(w, Var) else np.asarray(w, dtype=float)
    out = _apply_linear(wv, xv)
    if translation:
        out = out + wv[..., TRANSLATION]
    shape = np.broadcast_shapes(xv.shape[:-1], wv.shape[:-1])

    def vjp(g):
        gx = _unbroadcast(_apply_linear_T(np.broadcast_to(wv, shape + (12,)), g), xv.shape)
        gw = _basis_T(np.broadcast_to(xv, shape + (3,)), g)
        if not translation:
            gw[..., TRANSLATION] = 0.0
        return gx, _unbroadcast(gw, wv.shape)

    xs = x if isinstance(x, Var) else tape.constant(xv)
    ws = w if isinstance(w, Var) else tape.constant(wv)
    return tape.record(out, (xs, ws), vjp)


def convective_apply(x, w):
    """Tape version of :func:`convective_term`."""
    return affine_apply(affine_apply(x, w), w, translation=False)
