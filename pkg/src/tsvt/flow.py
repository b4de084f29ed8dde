"""Classical optical flow: warping, Horn-Schunck estimation, color rendering.

Images are H x W x C float arrays in [0, 1]; flow fields are H x W x 2
arrays where channel 0 is the horizontal displacement and channel 1 the
vertical displacement, both in pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import ParameterError, ShapeMismatchError

_LUMA = np.array([0.299, 0.587, 0.114])

# Horn-Schunck neighbour-average stencil
_AVG_KERNEL = np.array(
    [[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]]
)


@dataclass
class FlowSolverConfig:
    """Horn-Schunck solver settings."""

    alpha: float = 15.0
    iterations: int = 200
    levels: int = 3
    tol: float = 1e-4

    def __post_init__(self):
        if self.alpha <= 0 or self.iterations <= 0 or self.levels < 1 or self.tol <= 0:
            raise ParameterError(f"invalid flow solver config: {self}")


def warp(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample `image` at each pixel's flow-displaced position.

    output(x, y) = image(x + f1, y + f2), bilinear, border-clamped.
    """
    if image.shape[:2] != flow.shape[:2]:
        raise ShapeMismatchError(
            f"warp: image {image.shape[:2]} vs flow {flow.shape[:2]}"
        )
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = xs + flow[..., 0]
    sy = ys + flow[..., 1]
    x0 = np.clip(np.floor(sx), 0, w - 1).astype(np.intp)
    y0 = np.clip(np.floor(sy), 0, h - 1).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = np.clip(sx, 0, w - 1) - x0
    wy = np.clip(sy, 0, h - 1) - y0
    if image.ndim == 3:
        wx = wx[..., None]
        wy = wy[..., None]
    return (
        image[y0, x0] * (1 - wx) * (1 - wy)
        + image[y0, x1] * wx * (1 - wy)
        + image[y1, x0] * (1 - wx) * wy
        + image[y1, x1] * wx * wy
    )


def _to_gray(image: np.ndarray) -> np.ndarray:
    """Luma grayscale scaled to 0..255 (the alpha default assumes 8-bit range)."""
    if image.ndim == 3:
        image = image @ _LUMA
    return image * 255.0


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    if h % 2:
        img = np.vstack([img, img[-1:]])
    if w % 2:
        img = np.hstack([img, img[:, -1:]])
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _neighbor_avg(f: np.ndarray) -> np.ndarray:
    p = np.pad(f, 1, mode="edge")
    out = np.zeros_like(f)
    k = _AVG_KERNEL
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            wgt = k[dy + 1, dx + 1]
            if wgt:
                out += wgt * p[1 + dy : 1 + dy + f.shape[0], 1 + dx : 1 + dx + f.shape[1]]
    return out


def _gradients(i1: np.ndarray, i2: np.ndarray):
    """Forward-difference derivatives averaged over the 2x2x2 cube.

    Keeps the spatial and temporal estimates consistent at the same
    half-pixel offset, which is what makes the data term exact for pure
    translations.
    """
    a = np.pad(i1, ((0, 1), (0, 1)), mode="edge")
    b = np.pad(i2, ((0, 1), (0, 1)), mode="edge")
    ix = 0.25 * (
        (a[:-1, 1:] - a[:-1, :-1]) + (a[1:, 1:] - a[1:, :-1])
        + (b[:-1, 1:] - b[:-1, :-1]) + (b[1:, 1:] - b[1:, :-1])
    )
    iy = 0.25 * (
        (a[1:, :-1] - a[:-1, :-1]) + (a[1:, 1:] - a[:-1, 1:])
        + (b[1:, :-1] - b[:-1, :-1]) + (b[1:, 1:] - b[:-1, 1:])
    )
    it = 0.25 * (
        (b[:-1, :-1] - a[:-1, :-1]) + (b[:-1, 1:] - a[:-1, 1:])
        + (b[1:, :-1] - a[1:, :-1]) + (b[1:, 1:] - a[1:, 1:])
    )
    return ix, iy, it


def estimate_flow(i1: np.ndarray, i2: np.ndarray, cfg: FlowSolverConfig | None = None) -> np.ndarray:
    """Horn-Schunck flow from i1 to i2 on a coarse-to-fine pyramid.

    Minimizes the brightness-constancy data term plus the alpha-weighted
    smoothness term with Jacobi iterations; each finer level warps i2 by
    the upsampled flow and solves for the residual.
    """
    if i1.shape != i2.shape:
        raise ShapeMismatchError(f"estimate_flow: {i1.shape} vs {i2.shape}")
    cfg = cfg or FlowSolverConfig()
    g1, g2 = _to_gray(i1), _to_gray(i2)

    pyr1, pyr2 = [g1], [g2]
    for _ in range(cfg.levels - 1):
        if min(pyr1[-1].shape) < 8:
            break
        pyr1.append(_downsample(pyr1[-1]))
        pyr2.append(_downsample(pyr2[-1]))

    flow = np.zeros(pyr1[-1].shape + (2,))
    alpha2 = cfg.alpha * cfg.alpha
    for lvl in range(len(pyr1) - 1, -1, -1):
        a, b = pyr1[lvl], pyr2[lvl]
        if flow.shape[:2] != a.shape:
            flow = 2.0 * np.repeat(np.repeat(flow, 2, axis=0), 2, axis=1)
            flow = flow[: a.shape[0], : a.shape[1]]
        bw = warp(b, flow)
        ix, iy, it = _gradients(a, bw)
        den = alpha2 + ix * ix + iy * iy
        du = np.zeros_like(a)
        dv = np.zeros_like(a)
        for _ in range(cfg.iterations):
            du_bar = _neighbor_avg(du)
            dv_bar = _neighbor_avg(dv)
            common = (ix * du_bar + iy * dv_bar + it) / den
            du_new = du_bar - ix * common
            dv_new = dv_bar - iy * common
            delta = np.mean(np.abs(du_new - du) + np.abs(dv_new - dv))
            du, dv = du_new, dv_new
            if delta < cfg.tol:
                break
        flow = flow + np.stack([du, dv], axis=-1)
    return flow


def flow_sequence(clip: np.ndarray, cfg: FlowSolverConfig | None = None) -> np.ndarray:
    """Per-frame flow for a T x H x W x C clip; last flow duplicated so the
    sequence length matches T."""
    t = clip.shape[0]
    if t < 2:
        raise ParameterError(f"flow_sequence needs at least 2 frames, got {t}")
    flows = [estimate_flow(clip[i], clip[i + 1], cfg) for i in range(t - 1)]
    flows.append(flows[-1].copy())
    return np.stack(flows)


# color rendering ------------------------------------------------------

# Middlebury color wheel segment sizes (hue bin counts per transition)
_SEGMENTS = [("RY", 15), ("YG", 6), ("GC", 4), ("CB", 11), ("BM", 13), ("MR", 6)]


def _color_wheel() -> np.ndarray:
    ncols = sum(n for _, n in _SEGMENTS)
    wheel = np.zeros((ncols, 3))
    col = 0
    ry, yg, gc, cb, bm, mr = (n for _, n in _SEGMENTS)
    wheel[col : col + ry, 0] = 1.0
    wheel[col : col + ry, 1] = np.arange(ry) / ry
    col += ry
    wheel[col : col + yg, 0] = 1.0 - np.arange(yg) / yg
    wheel[col : col + yg, 1] = 1.0
    col += yg
    wheel[col : col + gc, 1] = 1.0
    wheel[col : col + gc, 2] = np.arange(gc) / gc
    col += gc
    wheel[col : col + cb, 1] = 1.0 - np.arange(cb) / cb
    wheel[col : col + cb, 2] = 1.0
    col += cb
    wheel[col : col + bm, 2] = 1.0
    wheel[col : col + bm, 0] = np.arange(bm) / bm
    col += bm
    wheel[col : col + mr, 2] = 1.0 - np.arange(mr) / mr
    wheel[col : col + mr, 0] = 1.0
    return wheel


_WHEEL = _color_wheel()


def flow_to_rgb(flow: np.ndarray, max_norm: float | None = None) -> np.ndarray:
    """Render a flow field as an RGB image in [0, 1] on the Middlebury wheel.

    Zero motion renders white; hue encodes direction and saturation scales
    with magnitude relative to `max_norm` (default: field maximum, floored
    at 1e-5).
    """
    u = flow[..., 0]
    v = flow[..., 1]
    mag = np.sqrt(u * u + v * v)
    if max_norm is None:
        max_norm = max(float(mag.max()), 1e-5)
    u = u / max_norm
    v = v / max_norm
    rad = np.minimum(mag / max_norm, 1.0)

    ncols = _WHEEL.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(np.intp)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1.0 - f) * _WHEEL[k0] + f * _WHEEL[k1]
    return 1.0 - rad[..., None] * (1.0 - col)


def quantize_rgb(image: np.ndarray) -> np.ndarray:
    """[0,1] floats to 8-bit, truncating like the original Middlebury code."""
    return np.clip(np.floor(image * 255.0), 0, 255).astype(np.uint8)


# binary flow file I/O -------------------------------------------------

FLO2_MAGIC = b"FLO2"


def write_flo2(path, flow: np.ndarray) -> None:
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO2_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(flow.astype("<f4").tobytes())


def read_flo2(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FLO2_MAGIC:
            raise IOError(f"{path}: bad magic {magic!r}, expected {FLO2_MAGIC!r}")
        h, w = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(h * w * 2 * 4), dtype="<f4")
        if data.size != h * w * 2:
            raise IOError(f"{path}: truncated flow data")
        return data.reshape(h, w, 2).astype(np.float64)
