"""Synthetic dynamic scenes with closed-form ground-truth trajectories.

A scene is a list of object groups. Each group samples canonical Gaussians
from a simple volume and moves them with one or more motion laws. Affine
laws (translation, rotation, stretch, shear, affine) are velocity fields
``v = M x + c`` constant in time; their generators add, and positions are
advanced with the matrix exponential of the augmented 4x4 generator.
Sinusoid laws add a displacement ``amp * (sin(2 pi f t + phi(x0)) - sin(phi(x0)))``
on top, zero at t = 0 so the canonical state is the t = 0 state.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .affine import weights_from_affine
from .mathcore import QUAT_IDENTITY, GaussianCloud, quat_from_axis_angle, quat_mul, skew

FORMAT_VERSION = 1
LAW_KINDS = ("translation", "rotation", "stretch", "shear", "affine", "sinusoid")
DISTRIBUTIONS = ("ball", "box", "shell")


class SceneFormatError(ValueError):
    """A scene document is malformed; the message names the offending field."""


@dataclass
class MotionLaw:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAW_KINDS:
            raise SceneFormatError(f"unknown motion law {self.kind!r}")

    def generator(self):
        """``(M, c)`` of the affine velocity field, or None for sinusoids."""
        p = self.params
        pivot = np.asarray(p.get("pivot", (0.0, 0.0, 0.0)), dtype=float)
        if self.kind == "translation":
            return np.zeros((3, 3)), np.asarray(p["b"], dtype=float)
        if self.kind == "rotation":
            M = skew(np.asarray(p["omega"], dtype=float))
        elif self.kind == "stretch":
            M = np.diag(np.asarray(p["rates"], dtype=float))
        elif self.kind == "shear":
            sxy, syz, szx = np.asarray(p["rates"], dtype=float)
            M = np.array([[0.0, sxy, szx], [sxy, 0.0, syz], [szx, syz, 0.0]])
        elif self.kind == "affine":
            return np.asarray(p["A"], dtype=float).reshape(3, 3), np.asarray(p["b"], dtype=float)
        else:
            return None
        return M, -M @ pivot

    def to_dict(self):
        return {"kind": self.kind, **{k: _plain(v) for k, v in self.params.items()}}


@dataclass
class ObjectGroup:
    count: int
    distribution: str = "ball"
    center: tuple = (0.0, 0.0, 0.0)
    extent: tuple = (0.5, 0.5, 0.5)
    color: tuple = (0.8, 0.8, 0.8)
    color_jitter: float = 0.0
    scale: float = 0.05
    opacity: float = 0.8
    motion: list = field(default_factory=list)

    def __post_init__(self):
        if int(self.count) < 1:
            raise SceneFormatError("group.count must be >= 1")
        if self.distribution not in DISTRIBUTIONS:
            raise SceneFormatError(f"unknown distribution {self.distribution!r}")

    def generator(self):
        """Summed affine generator of all affine laws of this group."""
        M, c = np.zeros((3, 3)), np.zeros(3)
        for law in self.motion:
            g = law.generator()
            if g is not None:
                M, c = M + g[0], c + g[1]
        return M, c

    def affine_weights(self):
        """The constant 12-vector that reproduces this group's affine motion."""
        return weights_from_affine(*self.generator())

    def to_dict(self):
        return {
            "count": int(self.count), "distribution": self.distribution,
            "center": _plain(self.center), "extent": _plain(self.extent),
            "color": _plain(self.color), "color_jitter": float(self.color_jitter),
            "scale": float(self.scale), "opacity": float(self.opacity),
            "motion": [m.to_dict() for m in self.motion],
        }


@dataclass
class SceneSpec:
    groups: list
    times: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 1.0, 60))
    split: float = 0.75

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if not 0.0 < self.split < 1.0:
            raise SceneFormatError("split must lie in (0, 1)")
        if len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise SceneFormatError("times must be strictly increasing")


@dataclass
class TrajectoryDataset:
    times: np.ndarray                # (T,)
    positions: np.ndarray            # (T, N, 3)
    split: float = 0.75
    quats: np.ndarray | None = None  # (T, N, 4)
    log_scales: np.ndarray | None = None
    group: np.ndarray | None = None  # (N,)

    @property
    def n_train(self):
        return int(round(self.split * len(self.times)))

    @property
    def train_idx(self):
        return np.arange(self.n_train)

    @property
    def extrap_idx(self):
        return np.arange(self.n_train, len(self.times))

    @property
    def t_train_max(self):
        return float(self.times[self.n_train - 1])


@dataclass
class Scene:
    spec: SceneSpec
    cloud: GaussianCloud
    data: TrajectoryDataset


# ----------------------------------------------------------------- generation

def _sample_volume(group, rng):
    n = int(group.count)
    c = np.asarray(group.center, dtype=float)
    e = np.asarray(group.extent, dtype=float)
    if group.distribution == "box":
        return c + e * rng.uniform(-1.0, 1.0, size=(n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    if group.distribution == "shell":
        return c + e * d
    r = rng.random(n) ** (1.0 / 3.0)
    return c + e * d * r[:, None]


def _random_quats(n, rng):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.sign(q[:, :1] + 1e-300)


def affine_flow(M, c, x0, t):
    """Exact positions of ``dx/dt = M x + c`` at time ``t``."""
    G = np.zeros((4, 4))
    G[:3, :3], G[:3, 3] = M, c
    E = expm(G * t)
    return x0 @ E[:3, :3].T + E[:3, 3]


def sinusoid_offset(law, x0, t):
    p = law.params
    amp = np.asarray(p["amplitude"], dtype=float)
    k = np.asarray(p.get("wavevector", (0.0, 0.0, 0.0)), dtype=float)
    phi = x0 @ k + float(p.get("phase", 0.0))
    f = float(p["freq"])
    return amp * (np.sin(2 * np.pi * f * t + phi) - np.sin(phi))[:, None]


def generate(spec: SceneSpec, seed: int = 0) -> Scene:
    """Sample canonical Gaussians and evaluate their trajectories in closed form."""
    rng = np.random.default_rng(seed)
    mus, logs, qs, alphas, colors, gid = [], [], [], [], [], []
    for g_i, g in enumerate(spec.groups):
        n = int(g.count)
        mus.append(_sample_volume(g, rng))
        logs.append(np.full((n, 3), np.log(g.scale)) + 0.1 * rng.normal(size=(n, 3)))
        qs.append(_random_quats(n, rng))
        alphas.append(np.full(n, float(g.opacity)))
        col = np.asarray(g.color, dtype=float) + g.color_jitter * rng.uniform(-1, 1, size=(n, 3))
        colors.append(np.clip(col, 0.0, 1.0))
        gid.append(np.full(n, g_i))
    cloud = GaussianCloud(np.concatenate(mus), np.concatenate(logs), np.concatenate(qs),
                          np.concatenate(alphas), np.concatenate(colors))
    group = np.concatenate(gid)
    times = spec.times
    T, N = len(times), len(cloud)
    pos = np.empty((T, N, 3))
    quats = np.empty((T, N, 4))
    lsc = np.empty((T, N, 3))
    for g_i, g in enumerate(spec.groups):
        sel = group == g_i
        M, c = g.generator()
        w = weights_from_affine(M, c)
        omega, rates = w[3:6], w[6:9]
        x0 = cloud.mu[sel]
        for j, t in enumerate(times):
            x = affine_flow(M, c, x0, t)
            for law in g.motion:
                if law.kind == "sinusoid":
                    x = x + sinusoid_offset(law, x0, t)
            pos[j, sel] = x
            ang = np.linalg.norm(omega) * t
            rq = quat_from_axis_angle(omega, ang) if ang > 0 else QUAT_IDENTITY
            quats[j, sel] = quat_mul(rq, cloud.q[sel])
            lsc[j, sel] = cloud.log_s[sel] + rates * t
    data = TrajectoryDataset(times.copy(), pos, spec.split, quats, lsc, group)
    return Scene(spec, cloud, data)


# -------------------------------------------------------------------- presets

def preset(name: str) -> SceneSpec:
    pi = np.pi
    if name == "spin":
        groups = [ObjectGroup(160, "box", (0, 0, 0), (0.8, 0.3, 0.15), (0.9, 0.4, 0.2), 0.1,
                              motion=[MotionLaw("rotation", {"omega": [0.0, 0.0, pi], "pivot": [0.0, 0.0, 0.0]})])]
    elif name == "drift":
        groups = [ObjectGroup(160, "ball", (0, 0, 0), (0.5, 0.5, 0.5), (0.2, 0.6, 0.9), 0.1,
                              motion=[MotionLaw("translation", {"b": [0.6, 0.3, 0.0]})])]
    elif name == "multipart":
        groups = [
            ObjectGroup(100, "box", (-1.0, 0.0, 0.0), (0.4, 0.12, 0.12), (0.9, 0.3, 0.2), 0.05,
                        motion=[MotionLaw("rotation", {"omega": [0.0, 0.0, pi], "pivot": [-1.0, 0.0, 0.0]})]),
            ObjectGroup(100, "ball", (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.2, 0.8, 0.3), 0.05,
                        motion=[MotionLaw("translation", {"b": [0.0, 0.5, 0.2]})]),
            ObjectGroup(100, "box", (0.0, 1.0, 0.0), (0.3, 0.1, 0.3), (0.2, 0.3, 0.9), 0.05,
                        motion=[MotionLaw("rotation", {"omega": [0.0, -0.75 * pi, 0.0], "pivot": [0.0, 1.0, 0.0]}),
                                MotionLaw("translation", {"b": [0.3, 0.0, 0.0]})]),
        ]
    elif name == "breathe":
        groups = [ObjectGroup(160, "ball", (0, 0, 0), (0.6, 0.6, 0.6), (0.8, 0.8, 0.3), 0.1,
                              motion=[MotionLaw("sinusoid", {"amplitude": [0.05, 0.05, 0.0], "freq": 1.0,
                                                             "wavevector": [2.0, 0.0, 0.0], "phase": 0.0})])]
    elif name == "hybrid":
        groups = [ObjectGroup(160, "box", (0, 0, 0), (0.7, 0.25, 0.15), (0.7, 0.3, 0.8), 0.1,
                              motion=[MotionLaw("rotation", {"omega": [0.0, 0.0, 0.5 * pi], "pivot": [0.0, 0.0, 0.0]}),
                                      MotionLaw("sinusoid", {"amplitude": [0.0, 0.0, 0.04], "freq": 1.5,
                                                             "wavevector": [3.0, 0.0, 0.0], "phase": 0.0})])]
    else:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return SceneSpec(groups)


PRESETS = ("spin", "drift", "multipart", "breathe", "hybrid")


# ------------------------------------------------------------------------ I/O

def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (list, tuple)):
        return [_plain(u) for u in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def scene_to_dict(scene: Scene):
    c, d = scene.cloud, scene.data
    doc = {
        "version": FORMAT_VERSION,
        "groups": [g.to_dict() for g in scene.spec.groups],
        "times": d.times.tolist(),
        "split": float(d.split),
        "particles": [
            {"mu": c.mu[i].tolist(), "log_s": c.log_s[i].tolist(), "q": c.q[i].tolist(),
             "alpha": float(c.alpha[i]), "color": c.color[i].tolist(),
             **({"group": int(d.group[i])} if d.group is not None else {})}
            for i in range(len(c))
        ],
        "trajectories": np.transpose(d.positions, (1, 0, 2)).reshape(len(c), -1).tolist(),
    }
    if d.quats is not None:
        doc["quaternions"] = np.transpose(d.quats, (1, 0, 2)).reshape(len(c), -1).tolist()
    if d.log_scales is not None:
        doc["log_scales"] = np.transpose(d.log_scales, (1, 0, 2)).reshape(len(c), -1).tolist()
    return doc


def save_scene(scene: Scene, path):
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene), fh)


def load_scene(path) -> Scene:
    with open(path) as fh:
        text = fh.read()
    return scene_from_json(text)


def scene_from_json(text) -> Scene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scene_from_dict(doc)


def _req(obj, key, path):
    if not isinstance(obj, dict):
        raise SceneFormatError(f"{path}: expected an object")
    if key not in obj:
        raise SceneFormatError(f"missing field '{path}.{key}'" if path else f"missing field '{key}'")
    return obj[key]


def _vec(obj, key, path, n):
    val = _req(obj, key, path)
    try:
        arr = np.asarray(val, dtype=float)
    except (TypeError, ValueError):
        raise SceneFormatError(f"field '{path}.{key}' is not numeric") from None
    if arr.shape != (n,) or not np.all(np.isfinite(arr)):
        raise SceneFormatError(f"field '{path}.{key}' must be {n} finite numbers")
    return arr


def _num(obj, key, path, cast=float, default=None):
    val = _req(obj, key, path) if default is None else obj.get(key, default)
    try:
        out = cast(val)
    except (TypeError, ValueError):
        raise SceneFormatError(f"field '{path}.{key}' is not a number" if path else f"field '{key}' is not a number") from None
    if cast is float and not np.isfinite(out):
        raise SceneFormatError(f"field '{path}.{key}' must be finite" if path else f"field '{key}' must be finite")
    return out


def _law_from_dict(d, path):
    kind = _req(d, "kind", path)
    if kind not in LAW_KINDS:
        raise SceneFormatError(f"{path}.kind: unknown motion law {kind!r}")
    params = {k: v for k, v in d.items() if k != "kind"}
    required = {"translation": ["b"], "rotation": ["omega"], "stretch": ["rates"], "shear": ["rates"],
                "affine": ["A", "b"], "sinusoid": ["amplitude", "freq"]}[kind]
    for key in required:
        _req(params, key, path)
    return MotionLaw(kind, params)


def _group_from_dict(d, path):
    motion = _req(d, "motion", path)
    if not isinstance(motion, list):
        raise SceneFormatError(f"field '{path}.motion' must be a list")
    try:
        return ObjectGroup(
            count=_num(d, "count", path, int),
            distribution=_req(d, "distribution", path),
            center=tuple(_vec(d, "center", path, 3)),
            extent=tuple(_vec(d, "extent", path, 3)),
            color=tuple(_vec(d, "color", path, 3)),
            color_jitter=_num(d, "color_jitter", path, default=0.0),
            scale=_num(d, "scale", path, default=0.05),
            opacity=_num(d, "opacity", path, default=0.8),
            motion=[_law_from_dict(m, f"{path}.motion[{i}]") for i, m in enumerate(motion)],
        )
    except SceneFormatError as exc:
        raise SceneFormatError(f"{exc}") from None


def scene_from_dict(doc) -> Scene:
    if not isinstance(doc, dict):
        raise SceneFormatError("scene document must be a JSON object")
    version = _req(doc, "version", "")
    if version != FORMAT_VERSION:
        raise SceneFormatError(f"field 'version': unsupported version {version!r}")
    groups = _req(doc, "groups", "")
    if not isinstance(groups, list):
        raise SceneFormatError("field 'groups' must be a list")
    groups = [_group_from_dict(g, f"groups[{i}]") for i, g in enumerate(groups)]
    try:
        times = np.asarray(_req(doc, "times", ""), dtype=float)
    except (TypeError, ValueError):
        raise SceneFormatError("field 'times' must be a list of numbers") from None
    if times.ndim != 1:
        raise SceneFormatError("field 'times' must be a list of numbers")
    split = _num(doc, "split", "")
    spec = SceneSpec(groups, times, split)
    parts = _req(doc, "particles", "")
    if not isinstance(parts, list) or not parts:
        raise SceneFormatError("field 'particles' must be a non-empty list")
    mus, logs, qs, alphas, colors, gids = [], [], [], [], [], []
    for i, p in enumerate(parts):
        path = f"particles[{i}]"
        mus.append(_vec(p, "mu", path, 3))
        logs.append(_vec(p, "log_s", path, 3))
        qs.append(_vec(p, "q", path, 4))
        alphas.append(_num(p, "alpha", path))
        colors.append(_vec(p, "color", path, 3))
        gids.append(_num(p, "group", path, int, default=-1))
    cloud = GaussianCloud(np.array(mus), np.array(logs), np.array(qs), np.array(alphas), np.array(colors))
    n, nt = len(cloud), len(times)

    def per_particle(key, width, required):
        if key not in doc:
            if required:
                raise SceneFormatError(f"missing field '{key}'")
            return None
        rows = doc[key]
        if not isinstance(rows, list) or len(rows) != n:
            raise SceneFormatError(f"field '{key}' must have one row per particle ({n})")
        out = np.empty((nt, n, width))
        for i, row in enumerate(rows):
            try:
                arr = np.asarray(row, dtype=float)
            except (TypeError, ValueError):
                raise SceneFormatError(f"field '{key}[{i}]' is not numeric") from None
            if arr.shape != (nt * width,) or not np.all(np.isfinite(arr)):
                raise SceneFormatError(f"field '{key}[{i}]' must hold {nt * width} finite numbers")
            out[:, i] = arr.reshape(nt, width)
        return out

    positions = per_particle("trajectories", 3, True)
    data = TrajectoryDataset(times, positions, split, per_particle("quaternions", 4, False),
                             per_particle("log_scales", 3, False),
                             np.array(gids) if min(gids) >= 0 else None)
    return Scene(spec, cloud, data)
