"""Per-particle dynamics: physics codes, motion patterns, RK2 rollout and
residual deformation.

A particle's affine weights are a softmax mixture of ``K`` time-only
pattern networks, with the mixture chosen by a code computed from the
particle's canonical position::

    z      = Encoder(pe(x0))
    pi     = softmax(Head(z))
    w(t)   = sum_k pi_k * Pattern_k(pe(t))

Base states are integrated with midpoint RK2 (the field is evaluated at the
current position), and a residual MLP adds small corrections on top.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .affine import affine_apply
from .autodiff import tape as T
from .autodiff.nn import MlpSpec, ParamStore, init_mlp, mlp_forward
from .mathcore import HAMILTON, QUAT_IDENTITY, GaussianCloud, positional_encoding, quat_mul


@dataclass
class ModelConfig:
    K: int = 32
    code_dim: int = 16
    pos_freqs: int = 6
    time_freqs: int = 6
    encoder_hidden: tuple = (64, 64, 64)
    coef_hidden: tuple = (64, 64, 64)
    accel_hidden: tuple = (64, 64, 64)
    adf_hidden: tuple = (128, 128, 128, 128)
    velocity_hidden: tuple = (64, 64, 64)
    n_steps: int = 32
    use_pds: bool = True
    use_adf: bool = True
    activation: str = "tanh"

    def __post_init__(self):
        for name in ("encoder_hidden", "coef_hidden", "accel_hidden", "adf_hidden", "velocity_hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @property
    def pos_dim(self):
        return 6 * self.pos_freqs

    @property
    def time_dim(self):
        return 2 * self.time_freqs

    def spec(self, which):
        a = self.activation
        if which == "enc":
            return MlpSpec((self.pos_dim, *self.encoder_hidden, self.code_dim), a)
        if which == "bank":
            return MlpSpec((self.time_dim, *self.coef_hidden, 12), a)
        if which == "accel":
            return MlpSpec((self.time_dim + self.code_dim, *self.accel_hidden, 12), a)
        if which == "adf":
            return MlpSpec((self.pos_dim + self.time_dim + self.code_dim, *self.adf_hidden, 10), a)
        if which == "vel":
            return MlpSpec((self.pos_dim + self.time_dim, *self.velocity_hidden, 3), a)
        raise KeyError(which)


@dataclass
class PhysicsCode:
    """Tape handles for a batch of codes: ``z`` (N, L), ``logits`` and
    ``weights`` (N, K)."""

    z: T.Var
    logits: T.Var
    weights: T.Var


@dataclass
class ParticleState:
    """Composed state plus its base and residual parts, for ``N`` particles
    at one time."""

    t: float
    x: np.ndarray
    q: np.ndarray
    s: np.ndarray
    x_base: np.ndarray = None
    q_base: np.ndarray = None
    s_base: np.ndarray = None
    dx: np.ndarray = None
    dq: np.ndarray = None
    ds: np.ndarray = None


@dataclass
class ResidualDeformation:
    dx: np.ndarray
    dq: np.ndarray
    ds: np.ndarray

    @classmethod
    def identity(cls, n=None):
        lead = () if n is None else (n,)
        return cls(np.zeros(lead + (3,)), np.broadcast_to(QUAT_IDENTITY, lead + (4,)).copy(), np.zeros(lead + (3,)))


@dataclass
class StepPlan:
    """Integration grid: step start times, step sizes, and for each requested
    output time the number of steps taken to reach it."""

    starts: np.ndarray
    h: np.ndarray
    obs_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def mids(self):
        return self.starts + 0.5 * self.h


def plan_steps(times, steps_per_unit):
    """Integrate from 0 through sorted ``times`` with at most ``1/steps_per_unit``
    per step; every requested time lands on a step boundary."""
    times = np.asarray(times, dtype=float)
    starts, hs, obs = [], [], []
    prev = 0.0
    for t in times:
        if t < prev - 1e-12:
            raise ValueError("times must be sorted, non-negative")
        dt = t - prev
        m = int(math.ceil(steps_per_unit * dt - 1e-9)) if dt > 0 else 0
        for j in range(m):
            starts.append(prev + j * dt / m)
            hs.append(dt / m)
        obs.append(len(starts))
        prev = t
    return StepPlan(np.array(starts), np.array(hs), np.array(obs, dtype=int))


def uniform_plan(t_target, n_steps):
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    h = t_target / n_steps
    return StepPlan(np.arange(n_steps) * h, np.full(n_steps, h), np.array([n_steps]))


# ----------------------------------------------------------------- tape helpers

def pe_tape(x, num_freqs):
    """Positional encoding of a Var, same layout as :func:`positional_encoding`."""
    freqs = (2.0 ** np.arange(num_freqs)) * np.pi
    lead = x.shape[:-1]
    ang = T.reshape(x, lead + (x.shape[-1], 1)) * freqs
    out = T.stack([T.sin(ang), T.cos(ang)], axis=-1)
    return T.reshape(out, lead + (2 * num_freqs * x.shape[-1],))


def quat_mul_tape(q, p):
    tape = q.tape if isinstance(q, T.Var) else p.tape
    qv = q.value if isinstance(q, T.Var) else np.asarray(q, dtype=float)
    pv = p.value if isinstance(p, T.Var) else np.asarray(p, dtype=float)
    out = quat_mul(qv, pv)
    shape = out.shape

    def vjp(g):
        gq = np.einsum("...k,kij,...j->...i", g, HAMILTON, np.broadcast_to(pv, shape))
        gp = np.einsum("...k,kij,...i->...j", g, HAMILTON, np.broadcast_to(qv, shape))
        return T._unbroadcast(gq, qv.shape), T._unbroadcast(gp, pv.shape)

    qs = q if isinstance(q, T.Var) else tape.constant(qv)
    ps = p if isinstance(p, T.Var) else tape.constant(pv)
    return tape.record(out, (qs, ps), vjp)


def normalize_tape(q):
    return q * T.power(T.vsum(T.square(q), axis=-1, keepdims=True), -0.5)


# ------------------------------------------------------------------- the model

class DynamicsModel:
    """Parameters plus the differentiable forward passes of the dynamics system."""

    def __init__(self, cfg: ModelConfig | None = None, params: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        if params is None:
            params = self.init_params(self.cfg, np.random.default_rng(seed))
        self.params = params

    @staticmethod
    def init_params(cfg, rng):
        ps = ParamStore()
        init_mlp(ps, "enc", cfg.spec("enc"), rng)
        # zero logits: every particle starts on the same uniform pattern mix
        ps.add("head.W", np.zeros((cfg.code_dim, cfg.K)))
        ps.add("head.b", np.zeros((1, cfg.K)))
        if cfg.use_pds:
            init_mlp(ps, "bank", cfg.spec("bank"), rng, stack=cfg.K, zero_last=True)
        else:
            init_mlp(ps, "vel", cfg.spec("vel"), rng, zero_last=True)
        init_mlp(ps, "accel", cfg.spec("accel"), rng, zero_last=True)
        if cfg.use_adf:
            init_mlp(ps, "adf", cfg.spec("adf"), rng, zero_last=True)
        return ps

    # -- binding -------------------------------------------------------------
    def bind(self, tape: T.Tape):
        return tape.params(self.params)

    # -- physics code ----------------------------------------------------------
    def encode(self, P, x0) -> PhysicsCode:
        tape = next(iter(P.values())).tape
        gx = tape.constant(positional_encoding(np.asarray(x0, dtype=float), self.cfg.pos_freqs))
        z = mlp_forward(self.cfg.spec("enc"), P, "enc", gx)
        logits = T.matmul(z, P["head.W"]) + P["head.b"]
        return PhysicsCode(z, logits, T.softmax(logits, axis=-1))

    # -- coefficient networks --------------------------------------------------
    def pattern_outputs(self, P, times):
        """All K pattern networks at ``times``: Var of shape (K, T, 12)."""
        tape = next(iter(P.values())).tape
        gt = tape.constant(positional_encoding(np.asarray(times, dtype=float)[:, None], self.cfg.time_freqs))
        return mlp_forward(self.cfg.spec("bank"), P, "bank", gt)

    def coefficients(self, P, code_weights, times):
        """Mixed affine weights for every (particle, time): Var (N, T, 12)."""
        W = self.pattern_outputs(P, times)
        return T.einsum("nk,kte->nte", code_weights, W)

    def coefficients_pointwise(self, P, code_weights, times):
        """Weights for N (particle, time) pairs, ``times`` of length N: (N, 12)."""
        W = self.pattern_outputs(P, times)
        return T.einsum("nk,kne->ne", code_weights, W)

    def coefficients_time_derivative(self, P, code_weights, times, h):
        """Central difference ``(w(t+h) - w(t-h)) / 2h`` per pair: (N, 12)."""
        times = np.asarray(times, dtype=float)
        n = len(times)
        W = self.pattern_outputs(P, np.concatenate([times + h, times - h]))
        K = W.shape[0]
        W = T.reshape(W, (K, 2, n, 12))
        w2 = T.einsum("nk,ksne->sne", code_weights, W)
        return (w2[0] - w2[1]) * (0.5 / h)

    # -- generic velocity (PDS disabled) ---------------------------------------
    def generic_velocity(self, P, x, t):
        """Unconstrained per-point velocity MLP of (pe(x), pe(t)); x is (N, 3)."""
        tape = x.tape if isinstance(x, T.Var) else next(iter(P.values())).tape
        xv = x if isinstance(x, T.Var) else tape.constant(x)
        n = xv.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        gt = tape.constant(positional_encoding(t[:, None], self.cfg.time_freqs))
        inp = T.concat([pe_tape(xv, self.cfg.pos_freqs), gt], axis=-1)
        return mlp_forward(self.cfg.spec("vel"), P, "vel", inp)

    # -- rollout ---------------------------------------------------------------
    def rollout(self, P, x0, code, times, with_orientation=False, q0=None, log_s0=None, plan=None):
        """Differentiable base-state trajectories at ``times``.

        Returns a dict with ``x`` (N, T, 3) and, when ``with_orientation``,
        ``q`` (N, T, 4) and ``log_s`` (N, T, 3).
        """
        tape = next(iter(P.values())).tape
        x0 = np.asarray(x0, dtype=float)
        n = len(x0)
        plan = plan or plan_steps(times, self.cfg.n_steps)
        S = len(plan.h)
        x = tape.constant(x0)
        xs = [x]
        qs, ls = [], []
        if with_orientation:
            q = tape.constant(np.broadcast_to(QUAT_IDENTITY, (n, 4)) if q0 is None else q0)
            lg = tape.constant(np.zeros((n, 3)) if log_s0 is None else log_s0)
            qs, ls = [q], [lg]
        if S:
            if self.cfg.use_pds:
                w = self.coefficients(P, code.weights, np.concatenate([plan.starts, plan.mids]))
                w = T.transpose(w, (1, 0, 2))  # (2S, N, 12)
            for k in range(S):
                hk = float(plan.h[k])
                if self.cfg.use_pds:
                    ws, wm = w[k], w[S + k]
                    x_mid = x + (0.5 * hk) * affine_apply(x, ws)
                    x = x + hk * affine_apply(x_mid, wm)
                else:
                    x_mid = x + (0.5 * hk) * self.generic_velocity(P, x, plan.starts[k])
                    x = x + hk * self.generic_velocity(P, x_mid, plan.mids[k])
                xs.append(x)
                if with_orientation:
                    if self.cfg.use_pds:
                        om = wm[:, 3:6]
                        pure = T.concat([tape.constant(np.zeros((n, 1))), om], axis=-1)
                        q = normalize_tape(q + (0.5 * hk) * quat_mul_tape(pure, q))
                        lg = lg + hk * wm[:, 6:9]
                    qs.append(q)
                    ls.append(lg)
        out = {"x": T.stack([xs[i] for i in plan.obs_steps], axis=1)}
        if with_orientation:
            out["q"] = T.stack([qs[i] for i in plan.obs_steps], axis=1)
            out["log_s"] = T.stack([ls[i] for i in plan.obs_steps], axis=1)
        return out

    # -- residual deformation --------------------------------------------------
    def residual(self, P, x0, z, times):
        """Residual corrections for every (particle, time).

        Returns Vars ``dx`` (N, T, 3), ``dq`` (N, T, 4, unit) and ``ds``
        (N, T, 3), or None when the residual field is disabled.
        """
        if not self.cfg.use_adf:
            return None
        tape = z.tape
        x0 = np.asarray(x0, dtype=float)
        times = np.asarray(times, dtype=float)
        n, nt = len(x0), len(times)
        gx = np.broadcast_to(positional_encoding(x0, self.cfg.pos_freqs)[:, None, :], (n, nt, self.cfg.pos_dim))
        gt = np.broadcast_to(positional_encoding(times[:, None], self.cfg.time_freqs)[None], (n, nt, self.cfg.time_dim))
        zz = T.broadcast_to(T.reshape(z, (n, 1, self.cfg.code_dim)), (n, nt, self.cfg.code_dim))
        inp = T.concat([tape.constant(gx), tape.constant(gt), zz], axis=-1)
        raw = mlp_forward(self.cfg.spec("adf"), P, "adf", T.reshape(inp, (n * nt, inp.shape[-1])))
        raw = T.reshape(raw, (n, nt, 10))
        dq = normalize_tape(raw[..., 3:7] + QUAT_IDENTITY)
        return {"dx": raw[..., 0:3], "dq": dq, "ds": raw[..., 7:10]}

    # -- full prediction on the tape -------------------------------------------
    def predict_positions(self, P, x0, times, code=None):
        """Composed positions (N, T, 3), the code and the residual dict."""
        if code is None:
            code = self.encode(P, x0)
        base = self.rollout(P, x0, code, times)
        res = self.residual(P, x0, code.z, times)
        x = base["x"] if res is None else base["x"] + res["dx"]
        return x, code, res

    # -- convenience -------------------------------------------------------------
    def set_constant_motion(self, w):
        """Make every pattern emit the constant weights ``w`` (and silence the
        residual field): an exact oracle for time-constant affine motion."""
        w = np.asarray(w, dtype=float)
        last = self.cfg.spec("bank").n_layers - 1
        self.params[f"bank.W{last}"] = np.zeros_like(self.params[f"bank.W{last}"])
        self.params[f"bank.b{last}"] = np.broadcast_to(w, self.params[f"bank.b{last}"].shape)
        if self.cfg.use_adf:
            last = self.cfg.spec("adf").n_layers - 1
            self.params[f"adf.W{last}"] = np.zeros_like(self.params[f"adf.W{last}"])
            self.params[f"adf.b{last}"] = np.zeros_like(self.params[f"adf.b{last}"])

    def code_weights(self, x0):
        tape = T.Tape()
        return self.encode(self.bind(tape), x0).weights.value

    def affine_weights(self, x0, times):
        """Numeric mixed weights (N, T, 12)."""
        tape = T.Tape()
        P = self.bind(tape)
        code = self.encode(P, x0)
        return self.coefficients(P, code.weights, times).value

    def predict_states(self, cloud: GaussianCloud, times):
        """Composed states of every particle at sorted ``times``.

        Returns arrays ``x`` (T, N, 3), ``q`` (T, N, 4), ``s`` (T, N, 3).
        The base rollout runs in the compiled kernel when the PDS is active.
        """
        times = np.asarray(times, dtype=float)
        tape = T.Tape()
        P = self.bind(tape)
        x0 = cloud.mu
        code = self.encode(P, x0)
        plan = plan_steps(times, self.cfg.n_steps)
        S = len(plan.h)
        n = len(x0)
        if self.cfg.use_pds:
            if S:
                w = self.coefficients(P, code.weights, np.concatenate([plan.starts, plan.mids])).value
                w = np.transpose(w, (1, 0, 2))
                xs, ls, qs = kernels.rollout_affine(x0, cloud.log_s, cloud.q, w[:S], w[S:], plan.h)
            else:
                xs, ls, qs = x0[None], cloud.log_s[None], cloud.q[None]
            xb, lb, qb = xs[plan.obs_steps], ls[plan.obs_steps], qs[plan.obs_steps]
        else:
            base = self.rollout(P, x0, code, times, plan=plan)
            xb = np.transpose(base["x"].value, (1, 0, 2))
            lb = np.broadcast_to(cloud.log_s, xb.shape).copy()
            qb = np.broadcast_to(cloud.q, xb.shape[:2] + (4,)).copy()
        res = self.residual(P, x0, code.z, times)
        if res is None:
            return xb, qb, np.exp(lb)
        dx = np.transpose(res["dx"].value, (1, 0, 2))
        dq = np.transpose(res["dq"].value, (1, 0, 2))
        ds = np.transpose(res["ds"].value, (1, 0, 2))
        comp = compose_state(ParticleState(0.0, xb, qb, np.exp(lb)), ResidualDeformation(dx, dq, ds))
        return comp.x, comp.q, comp.s


def compose_state(base: ParticleState, res: ResidualDeformation) -> ParticleState:
    """``x = x* + dx``, ``q = q* ⊗ dq`` (renormalised), ``s = s* exp(ds)``."""
    q = quat_mul(base.q, res.dq)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return ParticleState(
        t=base.t,
        x=base.x + res.dx,
        q=q,
        s=base.s * np.exp(res.ds),
        x_base=base.x, q_base=base.q, s_base=base.s,
        dx=res.dx, dq=res.dq, ds=res.ds,
    )


def integrate_base_state(model: DynamicsModel, prim, t_target, n_steps) -> ParticleState:
    """Base state of one canonical Gaussian at ``t_target`` with ``n_steps``
    uniform RK2 steps (no residual)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    plan = uniform_plan(float(t_target), int(n_steps))
    x0 = np.asarray(prim.mu, dtype=float)[None]
    if model.cfg.use_pds:
        w = model.affine_weights(x0, np.concatenate([plan.starts, plan.mids]))
        w = np.transpose(w, (1, 0, 2))
        xs, ls, qs = kernels.rollout_affine(x0, np.asarray(prim.log_s, dtype=float)[None],
                                            np.asarray(prim.q, dtype=float)[None],
                                            w[:n_steps], w[n_steps:], plan.h)
        x, q, s = xs[-1, 0], qs[-1, 0], np.exp(ls[-1, 0])
    else:
        tape = T.Tape()
        P = model.bind(tape)
        code = model.encode(P, x0)
        x = model.rollout(P, x0, code, [t_target], plan=plan)["x"].value[0, 0]
        q, s = np.asarray(prim.q, dtype=float), np.exp(prim.log_s)
    return ParticleState(float(t_target), x, q, s, x_base=x, q_base=q, s_base=s)
