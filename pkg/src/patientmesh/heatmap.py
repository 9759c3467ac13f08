"""Gaussian keypoint heatmaps: rendering and argmax / soft-argmax decoding.

Cell (r, c) of a grid covers the source-image point
``origin + ((c + 0.5) * stride, (r + 0.5) * stride)``.  Peaks are
unnormalized (value 1 at the keypoint).
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class HeatmapStack:
    grids: np.ndarray  # (N_J, H, W), nonnegative
    stride: float = 4.0
    origin: tuple = (0.0, 0.0)  # source-frame position of the grid corner

    @property
    def resolution(self):
        return self.grids.shape[-2:]

    @property
    def num_joints(self):
        return self.grids.shape[0]

    def compatible(self, other):
        return (self.grids.shape == other.grids.shape and self.stride == other.stride
                and tuple(self.origin) == tuple(other.origin))


@dataclass(frozen=True, eq=False)
class KeypointSet:
    coords: np.ndarray  # (N_J, 2) px, source frame
    confidence: np.ndarray  # (N_J,) in [0, 1]
    visibility: np.ndarray  # (N_J,) bool

    @classmethod
    def from_coords(cls, coords, visibility=None):
        coords = np.asarray(coords, dtype=float)
        vis = np.ones(coords.shape[:-1], bool) if visibility is None else np.asarray(visibility, bool)
        return cls(coords, vis.astype(float), vis)


def cell_centers(size, stride, offset):
    return offset + (np.arange(size) + 0.5) * stride


def render_grids(coords, visible, resolution, stride, sigma, origin=(0.0, 0.0)):
    """Vectorized renderer: coords (..., N, 2), visible (..., N) -> (..., N, H, W).

    The Gaussian is separable, so each grid is an outer product of a row
    and a column profile.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    H, W = resolution
    coords = np.asarray(coords, dtype=float)
    visible = np.asarray(visible, dtype=bool)
    xs = cell_centers(W, stride, origin[0])
    ys = cell_centers(H, stride, origin[1])
    x = np.where(visible, coords[..., 0], 0.0)
    y = np.where(visible, coords[..., 1], 0.0)
    gx = np.exp(-((xs - x[..., None]) ** 2) / (2.0 * sigma ** 2))
    gy = np.exp(-((ys - y[..., None]) ** 2) / (2.0 * sigma ** 2))
    gy = gy * visible[..., None]
    return gy[..., :, None] * gx[..., None, :]


def render(kps: KeypointSet, resolution=(64, 64), stride=4.0, sigma=8.0, origin=(0.0, 0.0)):
    """Render one Gaussian per visible keypoint; invisible joints give zero grids.

    ``sigma`` is in source pixels.
    """
    grids = render_grids(kps.coords, kps.visibility, resolution, stride, sigma, origin)
    return HeatmapStack(grids, float(stride), (float(origin[0]), float(origin[1])))


def argmax_coords(grids, stride, origin=(0.0, 0.0)):
    """(..., H, W) -> coords (..., 2), peak value (...).  Ties go to the first
    row-major maximum."""
    grids = np.asarray(grids)
    H, W = grids.shape[-2:]
    flat = grids.reshape(grids.shape[:-2] + (H * W,))
    idx = np.argmax(flat, axis=-1)
    peak = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    r, c = np.divmod(idx, W)
    coords = np.stack([origin[0] + (c + 0.5) * stride, origin[1] + (r + 0.5) * stride], axis=-1)
    return coords, peak


def decode_argmax(h: HeatmapStack) -> KeypointSet:
    coords, peak = argmax_coords(h.grids, h.stride, h.origin)
    visible = peak > 0
    return KeypointSet(coords, np.clip(peak, 0.0, 1.0), visible)


def soft_argmax_coords(grids, stride, origin=(0.0, 0.0), temperature=0.1):
    """Softmax-weighted expectation of cell centers, weights ``h**(1/T)``.

    This is a softmax over ``log(h) / T``; empty cells get zero weight, so a
    flat background does not bias the estimate.  All-zero grids fall back to
    uniform weights (grid center).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    g = np.asarray(grids, dtype=float)
    H, W = g.shape[-2:]
    peak = g.max(axis=(-2, -1), keepdims=True)
    empty = peak <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        logr = np.log(np.where(empty, 1.0, g)) - np.log(np.where(empty, 1.0, peak))
    w = np.exp(logr / temperature)
    w = np.where(empty, 1.0, w)
    w /= w.sum(axis=(-2, -1), keepdims=True)
    xs = cell_centers(W, stride, origin[0])
    ys = cell_centers(H, stride, origin[1])
    x = np.einsum("...hw,w->...", w, xs)
    y = np.einsum("...hw,h->...", w, ys)
    return np.stack([x, y], axis=-1), peak[..., 0, 0]


def decode_soft_argmax(h: HeatmapStack, temperature=0.1) -> KeypointSet:
    coords, peak = soft_argmax_coords(h.grids, h.stride, h.origin, temperature)
    return KeypointSet(coords, np.clip(peak, 0.0, 1.0), peak > 0)


def avg_pool(grids, out_hw):
    """Average-pool (..., H, W) down to out_hw; H, W must be multiples."""
    H, W = grids.shape[-2:]
    oh, ow = out_hw
    if H % oh or W % ow:
        raise ValueError(f"cannot pool {H}x{W} to {oh}x{ow}")
    g = grids.reshape(grids.shape[:-2] + (oh, H // oh, ow, W // ow))
    return g.mean(axis=(-3, -1))
