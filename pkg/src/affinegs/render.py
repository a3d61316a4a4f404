"""Forward Gaussian splatting: EWA projection, depth sort, alpha compositing.

Camera convention: world -> camera is ``p_cam = R (p - position)`` with the
camera looking down +z, x to the right and y down; pixel ``(row, col)``
samples the image plane at ``u = col, v = row``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .mathcore import covariance_from, quat_to_rotmat, rotmat_to_quat

LOWPASS = 0.3


class ImageShapeError(ValueError):
    pass


@dataclass
class Camera:
    position: np.ndarray
    rotation: np.ndarray  # world -> camera quaternion
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        self.position = np.asarray(self.position, dtype=float)
        self.rotation = np.asarray(self.rotation, dtype=float)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), width=64, height=64, fov_deg=50.0, near=0.01):
        eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # rows: camera axes in world coords
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(eye, rotmat_to_quat(R), f, f, width / 2.0, height / 2.0, width, height, near)


@dataclass
class Splat2D:
    center: np.ndarray  # (2,)
    cov2d: np.ndarray   # (2, 2) including the low-pass term
    depth: float
    alpha: float
    color: np.ndarray
    index: int = 0

    @property
    def conic(self):
        a, b, c = self.cov2d[0, 0], self.cov2d[0, 1], self.cov2d[1, 1]
        det = a * c - b * b
        return np.array([c / det, -b / det, a / det])


def project_many(mu, cov3d, alpha, color, cam: Camera, lowpass=LOWPASS):
    """Vectorised EWA projection.

    Returns ``(keep, centers, cov2d, depth)`` where ``keep`` masks splats that
    survive near-plane and 3-sigma frustum culling.
    """
    R = quat_to_rotmat(cam.rotation)
    pc = (np.asarray(mu, dtype=float) - cam.position) @ R.T
    X, Y, Z = pc[:, 0], pc[:, 1], pc[:, 2]
    in_front = Z > cam.near
    Zs = np.where(in_front, Z, 1.0)
    J = np.zeros((len(pc), 2, 3))
    J[:, 0, 0] = cam.fx / Zs
    J[:, 0, 2] = -cam.fx * X / (Zs * Zs)
    J[:, 1, 1] = cam.fy / Zs
    J[:, 1, 2] = -cam.fy * Y / (Zs * Zs)
    M = J @ R
    cov2d = M @ cov3d @ np.swapaxes(M, -1, -2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2)) + lowpass * np.eye(2)
    centers = np.stack([cam.fx * X / Zs + cam.cx, cam.fy * Y / Zs + cam.cy], axis=-1)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    r = kernels.FOOTPRINT_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))
    on_screen = ((centers[:, 0] + r >= 0) & (centers[:, 0] - r <= cam.width - 1)
                 & (centers[:, 1] + r >= 0) & (centers[:, 1] - r <= cam.height - 1))
    keep = in_front & on_screen & (a * c - b * b > 0)
    return keep, centers, cov2d, Z


def project(mu, q, s, alpha, color, cam: Camera, lowpass=LOWPASS, index=0):
    """Project a single Gaussian; returns :class:`Splat2D` or None when culled."""
    cov = covariance_from(q, s)[None]
    keep, centers, cov2d, depth = project_many(np.asarray(mu, dtype=float)[None], cov, alpha, color, cam, lowpass)
    if not keep[0]:
        return None
    return Splat2D(centers[0], cov2d[0], float(depth[0]), float(alpha), np.asarray(color, dtype=float), index)


def composite(splats, pixel, background=(0.0, 0.0, 0.0)):
    """Colour of one pixel from front-to-back sorted splats."""
    px = np.asarray(pixel, dtype=float)
    Tr = 1.0
    C = np.zeros(3)
    for sp in splats:
        if Tr < kernels.TRANSMITTANCE_EPS:
            break
        a, b, c = sp.conic
        if not np.all(np.isfinite((a, b, c))):
            continue
        d = px - sp.center
        power = a * d[0] * d[0] + 2.0 * b * d[0] * d[1] + c * d[1] * d[1]
        if power > kernels.FOOTPRINT_SIGMA ** 2:
            continue
        al = sp.alpha * np.exp(-0.5 * power)
        C = C + sp.color * al * Tr
        Tr *= 1.0 - al
    return C + Tr * np.asarray(background, dtype=float)


def sort_splats(splats):
    """Front-to-back, ties broken by ascending particle index."""
    return sorted(splats, key=lambda sp: (sp.depth, sp.index))


def render(x, q, s, alpha, color, cam: Camera, background=(0.0, 0.0, 0.0), workers=1):
    """Render Gaussians with centres ``x``, quaternions ``q`` and scales ``s``.

    Returns an ``(H, W, 3)`` float image clamped to [0, 1].
    """
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    bg = np.asarray(background, dtype=float)
    if len(x) == 0:
        return np.broadcast_to(np.clip(bg, 0, 1), (cam.height, cam.width, 3)).copy()
    qn = np.asarray(q, dtype=float)
    qn = qn / np.linalg.norm(qn, axis=-1, keepdims=True)
    cov = covariance_from(qn, s)
    alpha = np.asarray(alpha, dtype=float)
    color = np.asarray(color, dtype=float)
    keep, centers, cov2d, depth = project_many(x, cov, alpha, color, cam)
    idx = np.nonzero(keep)[0]
    order = idx[np.lexsort((idx, depth[idx]))]
    a, b, c = cov2d[order, 0, 0], cov2d[order, 0, 1], cov2d[order, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=-1)
    img = kernels.composite(centers[order], conics, alpha[order], color[order],
                            cam.height, cam.width, bg, workers=workers)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------- metrics

def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ImageShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """PSNR in dB for images in [0, 1]; 99.0 when the images (nearly) match."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 99.0
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    k = len(g)
    v = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(v, k, axis=1) @ g


def ssim(a, b, k1=0.01, k2=0.03, size=11, sigma=1.5):
    """Single-scale SSIM with a Gaussian window, averaged over valid pixels and channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < size or a.shape[1] < size:
        raise ImageShapeError(f"images must be at least {size}x{size} for SSIM")
    g = _gaussian_window(size, sigma)
    c1, c2 = (k1 ** 2), (k2 ** 2)
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def write_ppm(path, img):
    """Binary P6, maxval 255, values rounded half-up from [0, 1]."""
    img = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    h, w = img.shape[:2]
    data = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    data = np.frombuffer(raw[pos + 1: pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return data.astype(float) / maxval
