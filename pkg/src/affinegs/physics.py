"""Transport and incompressibility residuals at random collocation points.

At each collocation point ``(x, t)`` the model's velocity field must satisfy

    dv/dt + grad(v) v - a = 0        (transport)
    div(v) = 0                       (incompressibility)

where ``a(x, t) = Phi(x) @ w_a(t, z)`` comes from an acceleration head that
shares the affine basis. For the affine model ``grad(v) = A(w)`` exactly and
``div(v) = w7 + w8 + w9``; only ``dv/dt`` uses a central difference in time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import affine
from .affine import affine_apply, convective_apply
from .autodiff import tape as T
from .autodiff.nn import mlp_forward
from .mathcore import positional_encoding


class EmptyBatchError(ValueError):
    pass


@dataclass
class CollocationBatch:
    """Spacetime samples; the ``Var`` fields are filled by :func:`evaluate_collocation`."""

    x: np.ndarray                 # (C, 3)
    t: np.ndarray                 # (C,)
    code: object = None           # PhysicsCode
    w: T.Var = None               # (C, 12) affine weights (PDS only)
    dwdt: T.Var = None            # (C, 12)
    a_w: T.Var = None             # (C, 12) acceleration weights
    velocity: T.Var = None        # (C, 3)
    dvdt: T.Var = None            # (C, 3)
    convective: T.Var = None      # (C, 3)
    div: T.Var = None             # (C,)
    a_pred: T.Var = None          # (C, 3)

    def __len__(self):
        return len(self.t)


@dataclass
class ConstraintLosses:
    transport: float
    divergence: float
    lambda_transport: float = 0.0
    lambda_div: float = 0.0


def collocation_domain(positions, t_max, inflate=0.10, extend=0.25):
    """Bounding box of ``positions`` (any shape ending in 3) grown by
    ``inflate`` of its extent on each side, and ``[0, t_max * (1 + extend)]``."""
    p = np.asarray(positions, dtype=float).reshape(-1, 3)
    lo, hi = p.min(axis=0), p.max(axis=0)
    pad = inflate * (hi - lo)
    return (lo - pad, hi + pad), (0.0, float(t_max) * (1.0 + extend))


def sample_collocation(n, bbox, t_range, rng, n_times=None) -> CollocationBatch:
    """``n`` points uniform in ``bbox x t_range``.

    With ``n_times`` set, only that many distinct uniform times are drawn and
    the points cycle through them; every point's time is still uniform on
    ``t_range`` but the time-only pattern networks run on fewer inputs.
    """
    if n < 1:
        raise EmptyBatchError("collocation batch size must be >= 1")
    lo, hi = (np.asarray(b, dtype=float) for b in bbox)
    x = lo + (hi - lo) * rng.random((n, 3))
    m = n if n_times is None else max(1, min(int(n_times), n))
    t = t_range[0] + (t_range[1] - t_range[0]) * rng.random(m)
    if m < n:
        t = t[np.arange(n) % m]
    return CollocationBatch(x=x, t=t)


def evaluate_collocation(model, P, batch: CollocationBatch, h) -> CollocationBatch:
    """Run encode, coefficients, time derivative and the acceleration head on
    the tape for every point of ``batch`` (in place; also returned)."""
    cfg = model.cfg
    tape = next(iter(P.values())).tape
    code = model.encode(P, batch.x)
    batch.code = code
    gt = tape.constant(positional_encoding(batch.t[:, None], cfg.time_freqs))
    batch.a_w = mlp_forward(cfg.spec("accel"), P, "accel", T.concat([gt, code.z], axis=-1))
    batch.a_pred = affine_apply(batch.x, batch.a_w)
    if cfg.use_pds:
        uniq, inv = np.unique(batch.t, return_inverse=True)
        W = model.pattern_outputs(P, np.concatenate([uniq, uniq + h, uniq - h]))
        W = T.reshape(W, (cfg.K, 3, len(uniq), 12))
        onehot = np.zeros((len(batch), len(uniq)))
        onehot[np.arange(len(batch)), inv.ravel()] = 1.0
        W = T.einsum("nu,ksue->ksne", onehot, W)
        w3 = T.einsum("nk,ksne->sne", code.weights, W)
        batch.w = w3[0]
        batch.dwdt = (w3[1] - w3[2]) * (0.5 / h)
        batch.velocity = affine_apply(batch.x, batch.w)
        batch.dvdt = affine_apply(batch.x, batch.dwdt)
        batch.convective = convective_apply(batch.x, batch.w)
        batch.div = batch.w[:, 6] + batch.w[:, 7] + batch.w[:, 8]
    else:
        _evaluate_generic(model, P, batch, h)
    return batch


def _evaluate_generic(model, P, batch, h, hx=1e-3):
    """Finite-difference derivatives of the unconstrained velocity MLP."""
    n = len(batch)
    x, t = batch.x, batch.t
    offs = [np.zeros(3)] + [s * hx * e for e in np.eye(3) for s in (1.0, -1.0)]
    xs = np.concatenate([x + o for o in offs] + [x, x])
    ts = np.concatenate([t] * len(offs) + [t + h, t - h])
    v = model.generic_velocity(P, xs, ts)
    v = T.reshape(v, (len(offs) + 2, n, 3))
    batch.velocity = v[0]
    cols = [(v[1 + 2 * i] - v[2 + 2 * i]) * (0.5 / hx) for i in range(3)]   # dv/dx_i
    J = T.stack(cols, axis=-1)                                              # (n, 3, 3)
    batch.dvdt = (v[7] - v[8]) * (0.5 / h)
    batch.convective = T.vsum(J * T.reshape(batch.velocity, (n, 1, 3)), axis=-1)
    batch.div = J[:, 0, 0] + J[:, 1, 1] + J[:, 2, 2]


def transport_residual(batch: CollocationBatch):
    """``dv/dt + grad(v) v - a`` per point, (C, 3) Var."""
    return batch.dvdt + batch.convective - batch.a_pred


def divergence_residual(batch: CollocationBatch):
    """``div v`` per point, (C,) Var; equals ``w7 + w8 + w9`` for the affine model."""
    return batch.div


def constraint_loss(batch: CollocationBatch):
    """Mean squared transport residual norm and mean squared divergence, as Vars."""
    if batch is None or len(batch) == 0:
        raise EmptyBatchError("constraint_loss needs a non-empty batch")
    r = transport_residual(batch)
    d = divergence_residual(batch)
    return T.mean(T.vsum(T.square(r), axis=-1)), T.mean(T.square(d))


# ---------------------------------------------------------------- numeric forms

def transport_residual_values(x, w, dwdt, a_w):
    """Numeric transport residual for given weight arrays."""
    return affine.velocity(x, dwdt) + affine.convective_term(x, w) - affine.velocity(x, a_w)


def losses_from_residuals(r_transport, r_div) -> ConstraintLosses:
    r_transport = np.atleast_2d(np.asarray(r_transport, dtype=float))
    r_div = np.atleast_1d(np.asarray(r_div, dtype=float))
    if r_transport.size == 0 or r_div.size == 0:
        raise EmptyBatchError("constraint_loss needs a non-empty batch")
    return ConstraintLosses(float(np.mean(np.sum(r_transport ** 2, axis=-1))), float(np.mean(r_div ** 2)))
