"""Training loop, evaluation protocol, checkpoints and the ablation grid."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import physics
from .autodiff import tape as T
from .autodiff.nn import ParamStore
from .autodiff.optim import AdamState, adam_step
from .dynamics import DynamicsModel, ModelConfig
from .render import Camera, psnr, render, ssim
from .scenes import Scene, load_scene

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_HEADER = ["phase", "pos_err", "psnr", "ssim", "l_transport", "l_div", "seconds"]
ABLATIONS = {
    "full": {},
    "no-PDS": {"disable_pds": True},
    "no-ADF": {"disable_adf": True},
    "no-GPC": {"disable_gpc": True},
    "ADF-only": {"disable_pds": True, "disable_gpc": True},
}


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    scene: str = ""
    iterations: int = 5000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: str = "cosine"
    lr_final: float = 0.01
    K: int = 32
    L: int = 16
    n_steps: int = 32
    lambda_transport: float = 0.01
    lambda_div: float = 0.001
    lambda_res: float = 1e-3
    colloc_batch: int = 256
    colloc_times: int = 32
    traj_batch: int = 1024
    seed: int = 0
    disable_pds: bool = False
    disable_adf: bool = False
    disable_gpc: bool = False
    use_divergence: bool = True
    warmup: float = 0.2
    adf_start: float = 0.8
    supervise_orientation: bool = False
    pos_freqs: int = 6
    time_freqs: int = 6
    checkpoint: str = "checkpoint.json"
    loss_csv: str = "loss.csv"
    log_every: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lambda_transport", "lambda_div", "lambda_res", "lr", "warmup", "adf_start"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.traj_batch < 1 or self.colloc_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.adf_start > 1:
            raise ConfigError("adf_start must be in [0, 1]")
        if self.lr_decay not in ("none", "cosine"):
            raise ConfigError(f"lr_decay must be 'none' or 'cosine', got {self.lr_decay!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(K=self.K, code_dim=self.L, n_steps=self.n_steps, pos_freqs=self.pos_freqs,
                           time_freqs=self.time_freqs, use_pds=not self.disable_pds,
                           use_adf=not self.disable_adf, **self.model)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        cfg = cls.from_dict(doc)
        base = Path(path).parent
        for name in ("scene", "checkpoint", "loss_csv"):
            p = getattr(cfg, name)
            if p and not Path(p).is_absolute():
                setattr(cfg, name, str(base / p))
        return cfg


@dataclass
class LossTerms:
    total: float
    recon: float
    transport: float
    div: float
    residual: float
    ramp: float


@dataclass
class TrajBatch:
    x0: np.ndarray        # (P, 3)
    times: np.ndarray     # (T,)
    target: np.ndarray    # (P, T, 3)
    target_q: np.ndarray | None = None
    target_log_s: np.ndarray | None = None
    q0: np.ndarray | None = None
    log_s0: np.ndarray | None = None


@dataclass
class MetricsRow:
    phase: str
    pos_err: float
    psnr: float
    ssim: float
    l_transport: float
    l_div: float
    seconds: float

    def as_list(self):
        return [self.phase, self.pos_err, self.psnr, self.ssim, self.l_transport, self.l_div, self.seconds]


def learning_rate(iteration, cfg: TrainConfig):
    """Cosine decay from ``lr`` to ``lr * lr_final`` over the run, or constant."""
    if cfg.lr_decay == "none" or cfg.iterations <= 1:
        return cfg.lr
    frac = iteration / (cfg.iterations - 1)
    return cfg.lr * (cfg.lr_final + (1.0 - cfg.lr_final) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def physics_ramp(iteration, cfg: TrainConfig):
    """Linear warm-up factor in [0, 1] for the physics losses."""
    span = cfg.warmup * cfg.iterations
    if span <= 0:
        return 1.0
    return min(1.0, iteration / span)


def adf_active(iteration, cfg: TrainConfig):
    """The residual field is held at identity for the first ``adf_start`` of the run."""
    return iteration is None or iteration >= cfg.adf_start * cfg.iterations


def total_loss(model: DynamicsModel, traj: TrajBatch, colloc, cfg: TrainConfig, iteration=None,
               ramp=None, time_step=None):
    """Assemble the training objective on a fresh tape.

    Returns ``(LossTerms, grads)``. ``colloc`` may be None when the physics
    terms are disabled or the warm-up factor is zero. Before ``adf_start`` the
    residual field is left out of the prediction (its gradients are zero).
    """
    if len(traj.x0) == 0 or len(traj.times) == 0:
        raise TrainingError("empty trajectory batch")
    if ramp is None:
        ramp = 1.0 if iteration is None else physics_ramp(iteration, cfg)
    tape = T.Tape()
    P = model.bind(tape)
    code = model.encode(P, traj.x0)
    want_orient = cfg.supervise_orientation and traj.target_q is not None
    base = model.rollout(P, traj.x0, code, traj.times, with_orientation=want_orient,
                         q0=traj.q0, log_s0=traj.log_s0)
    res = model.residual(P, traj.x0, code.z, traj.times) if adf_active(iteration, cfg) else None
    x = base["x"] if res is None else base["x"] + res["dx"]
    recon = T.mean(T.vsum(T.square(x - traj.target), axis=-1))
    total = recon
    if want_orient:
        q = base["q"]
        ls = base["log_s"]
        if res is not None:
            from .dynamics import normalize_tape, quat_mul_tape
            q = normalize_tape(quat_mul_tape(q, res["dq"]))
            ls = ls + res["ds"]
        align = T.vsum(q * traj.target_q, axis=-1)
        total = total + T.mean(1.0 - T.square(align)) + T.mean(T.vsum(T.square(ls - traj.target_log_s), axis=-1))
    res_term = None
    if res is not None:
        pen = (T.vsum(T.square(res["dx"]), axis=-1) + T.vsum(T.square(res["ds"]), axis=-1)
               + T.vsum(T.square(res["dq"][..., 1:4]), axis=-1))
        res_term = T.mean(pen)
        total = total + cfg.lambda_res * res_term
    lt = ld = None
    if not cfg.disable_gpc and colloc is not None and ramp > 0:
        h = time_step if time_step is not None else 1e-3
        physics.evaluate_collocation(model, P, colloc, h)
        lt, ld = physics.constraint_loss(colloc)
        total = total + (ramp * cfg.lambda_transport) * lt
        if cfg.use_divergence:
            total = total + (ramp * cfg.lambda_div) * ld
    terms = LossTerms(
        total=float(total.value), recon=float(recon.value),
        transport=float(lt.value) if lt is not None else 0.0,
        div=float(ld.value) if ld is not None else 0.0,
        residual=float(res_term.value) if res_term is not None else 0.0,
        ramp=float(ramp),
    )
    for name in ("recon", "transport", "div", "residual", "total"):
        if not math.isfinite(getattr(terms, name)):
            raise TrainingError(f"non-finite loss term '{name}' at iteration {iteration}")
    grads = tape.backward(total, names=model.params.keys())
    return terms, grads


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: DynamicsModel, cfg: TrainConfig | None = None, opt: AdamState | None = None,
                    iteration=0):
    doc = {
        "version": CHECKPOINT_VERSION,
        "iteration": int(iteration),
        "model": model.cfg.to_dict(),
        "config": cfg.to_dict() if cfg is not None else None,
        "params": model.params.to_dict(),
        "optimizer": opt.to_dict() if opt is not None else None,
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(model, config_or_None, AdamState_or_None, iteration)``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    for key in ("version", "model", "params"):
        if key not in doc:
            raise ValueError(f"{path}: missing field '{key}'")
    if doc["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc['version']!r}")
    try:
        mcfg = ModelConfig(**doc["model"])
    except TypeError as exc:
        raise ValueError(f"{path}: field 'model': {exc}") from None
    params = ParamStore.from_dict(doc["params"])
    ref = DynamicsModel.init_params(mcfg, np.random.default_rng(0))
    for name, arr in ref.items():
        if name not in params:
            raise ValueError(f"{path}: missing parameter 'params.{name}'")
        if params[name].shape != arr.shape:
            raise ValueError(f"{path}: parameter 'params.{name}' has shape {params[name].shape}, expected {arr.shape}")
    model = DynamicsModel(mcfg, params)
    cfg = TrainConfig.from_dict(doc["config"]) if doc.get("config") else None
    opt = AdamState.from_dict(doc["optimizer"], params) if doc.get("optimizer") else None
    return model, cfg, opt, int(doc.get("iteration", 0))


# ----------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: DynamicsModel
    history: list
    seconds: float
    optimizer: AdamState


def _orientation_targets(scene, pidx, tidx):
    d = scene.data
    if d.quats is None or d.log_scales is None:
        return None, None
    return (np.transpose(d.quats[tidx][:, pidx], (1, 0, 2)),
            np.transpose(d.log_scales[tidx][:, pidx], (1, 0, 2)))


def train(cfg: TrainConfig, scene: Scene | None = None, write=True) -> TrainResult:
    """Fit a dynamics model to the observed (training) part of a scene."""
    if scene is None:
        scene = load_scene(cfg.scene)
    rng = np.random.default_rng(cfg.seed)
    model = DynamicsModel(cfg.model_config(), DynamicsModel.init_params(cfg.model_config(), rng))
    d = scene.data
    tidx = d.train_idx
    times = d.times[tidx]
    n = len(scene.cloud)
    per_batch = max(1, min(n, int(math.ceil(cfg.traj_batch / len(times)))))
    bbox, t_range = physics.collocation_domain(d.positions[tidx], d.t_train_max)
    h = 1e-3 * float(d.times[-1] - d.times[0])
    opt = AdamState()
    history = []
    last_good = model.params.copy()
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        pidx = np.sort(rng.choice(n, size=per_batch, replace=False))
        tq, tl = _orientation_targets(scene, pidx, tidx) if cfg.supervise_orientation else (None, None)
        batch = TrajBatch(scene.cloud.mu[pidx], times, np.transpose(d.positions[tidx][:, pidx], (1, 0, 2)),
                          tq, tl, scene.cloud.q[pidx], scene.cloud.log_s[pidx])
        ramp = physics_ramp(it, cfg)
        colloc = None
        if not cfg.disable_gpc:
            colloc = physics.sample_collocation(cfg.colloc_batch, bbox, t_range, rng, cfg.colloc_times)
        try:
            terms, grads = total_loss(model, batch, colloc, cfg, it, ramp=ramp, time_step=h)
        except TrainingError:
            model.params = last_good
            if write:
                save_checkpoint(cfg.checkpoint, model, cfg, None, it)
            raise
        if terms.total > 1e6:
            model.params = last_good
            if write:
                save_checkpoint(cfg.checkpoint, model, cfg, None, it)
            raise TrainingError(f"loss diverged ({terms.total:.3g}) at iteration {it}; last good checkpoint kept")
        history.append((it, terms))
        if it % 200 == 0:
            last_good = model.params.copy()
        adam_step(model.params, grads, opt, learning_rate(it, cfg), cfg.beta1, cfg.beta2, cfg.eps)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("it %d total %.3e recon %.3e transport %.3e div %.3e res %.3e", it, terms.total,
                     terms.recon, terms.transport, terms.div, terms.residual)
    seconds = time.perf_counter() - t0
    if write:
        save_checkpoint(cfg.checkpoint, model, cfg, opt, cfg.iterations)
        write_loss_csv(cfg.loss_csv, history)
    return TrainResult(model, history, seconds, opt)


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "total", "recon", "transport", "div", "residual", "ramp"])
        for it, t in history:
            w.writerow([it, repr(t.total), repr(t.recon), repr(t.transport), repr(t.div), repr(t.residual),
                        repr(t.ramp)])


# --------------------------------------------------------------- evaluation

def default_camera(scene: Scene, size=64):
    p = scene.data.positions.reshape(-1, 3)
    lo, hi = p.min(axis=0), p.max(axis=0)
    center = 0.5 * (lo + hi)
    radius = 0.5 * float(np.linalg.norm(hi - lo)) + 0.2
    eye = center + radius * np.array([0.35, -2.2, 1.4])
    return Camera.look_at(eye, center, up=(0.0, 0.0, 1.0), width=size, height=size, fov_deg=50.0)


def phase_indices(scene: Scene, phase):
    if phase == "interp":
        return scene.data.train_idx
    if phase == "extrap":
        return scene.data.extrap_idx
    raise ValueError(f"unknown phase {phase!r} (expected interp or extrap)")


def predicted_states(model: DynamicsModel, scene: Scene):
    """Composed states at every scene timestamp: x (T, N, 3), q, s."""
    return model.predict_states(scene.cloud, scene.data.times)


def position_errors(model, scene, phase):
    idx = phase_indices(scene, phase)
    x, _, _ = predicted_states(model, scene)
    return np.linalg.norm(x[idx] - scene.data.positions[idx], axis=-1)


def evaluate(model: DynamicsModel, scene: Scene, phase, n_render=6, image_size=64, colloc_n=256) -> MetricsRow:
    """Position error, image metrics and physics residuals for one phase."""
    t0 = time.perf_counter()
    idx = phase_indices(scene, phase)
    d, cloud = scene.data, scene.cloud
    x, q, s = predicted_states(model, scene)
    err = float(np.mean(np.linalg.norm(x[idx] - d.positions[idx], axis=-1)))
    cam = default_camera(scene, image_size)
    picks = idx[np.unique(np.linspace(0, len(idx) - 1, min(n_render, len(idx))).round().astype(int))]
    ps, ss = [], []
    for j in picks:
        gq = d.quats[j] if d.quats is not None else cloud.q
        gs = np.exp(d.log_scales[j]) if d.log_scales is not None else np.exp(cloud.log_s)
        img_gt = render(d.positions[j], gq, gs, cloud.alpha, cloud.color, cam)
        img = render(x[j], q[j], s[j], cloud.alpha, cloud.color, cam)
        ps.append(psnr(img, img_gt))
        ss.append(ssim(img, img_gt))
    # physics residuals on a fixed batch covering the phase window
    t_lo = float(d.times[idx[0]]) if phase == "extrap" else 0.0
    t_hi = float(d.times[idx[-1]])
    bbox, _ = physics.collocation_domain(d.positions[idx], t_hi, extend=0.0)
    batch = physics.sample_collocation(colloc_n, bbox, (t_lo, t_hi), np.random.default_rng(12345))
    tape = T.Tape()
    P = model.bind(tape)
    physics.evaluate_collocation(model, P, batch, 1e-3 * float(d.times[-1] - d.times[0]))
    lt, ld = physics.constraint_loss(batch)
    return MetricsRow(phase, err, float(np.mean(ps)), float(np.mean(ss)), float(lt.value), float(ld.value),
                      time.perf_counter() - t0)


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.as_list())


def run_ablation(scene: Scene, base: TrainConfig | None = None, variants=None, out_csv=None):
    """Train and evaluate each ablation variant; returns a list of dict rows."""
    base = base or TrainConfig()
    rows = []
    for name in variants or ABLATIONS:
        cfg = TrainConfig.from_dict({**base.to_dict(), **ABLATIONS[name]})
        res = train(cfg, scene, write=False)
        mi = evaluate(res.model, scene, "interp")
        me = evaluate(res.model, scene, "extrap")
        rows.append({
            "variant": name, "interp_pos_err": mi.pos_err, "extrap_pos_err": me.pos_err,
            "extrap_psnr": me.psnr, "extrap_ssim": me.ssim, "l_transport": me.l_transport,
            "l_div": me.l_div, "train_seconds": res.seconds,
        })
        log.info("ablation %s: interp %.4g extrap %.4g", name, mi.pos_err, me.pos_err)
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows
