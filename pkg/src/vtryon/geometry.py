"""Sampling grids, bilinear backward warping, and thin-plate-spline maps.

Flow fields store *absolute* source coordinates in pixel units (x then y),
so the identity field at pixel (x, y) is exactly (x, y).  Warping is backward
sampling: ``out[y, x] = bilinear(img, flow[y, x])`` with zero padding outside
the image.  Both the warp and the TPS evaluation are differentiable on the
numcore tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import ContractError, ShapeError, Tensor


@dataclass
class FlowField:
    """Per-pixel absolute source-coordinate map, shape H x W x 2."""

    height: int
    width: int
    coords: Tensor

    def __post_init__(self):
        if not isinstance(self.coords, Tensor):
            self.coords = Tensor(self.coords)
        if self.coords.shape != (self.height, self.width, 2):
            raise ShapeError(
                f"flow coords shape {self.coords.shape} != "
                f"({self.height}, {self.width}, 2)"
            )

    def detach(self) -> "FlowField":
        return FlowField(self.height, self.width, self.coords.detach())


@dataclass
class TpsParams:
    """Control-lattice offsets, in pixel units, shape rows x cols x 2."""

    grid_rows: int
    grid_cols: int
    offsets: Tensor

    def __post_init__(self):
        if not isinstance(self.offsets, Tensor):
            self.offsets = Tensor(self.offsets)
        if self.offsets.shape != (self.grid_rows, self.grid_cols, 2):
            raise ShapeError(
                f"offsets shape {self.offsets.shape} != "
                f"({self.grid_rows}, {self.grid_cols}, 2)"
            )

    @classmethod
    def identity(cls, grid_rows=5, grid_cols=5, requires_grad=False):
        z = Tensor(np.zeros((grid_rows, grid_cols, 2)), requires_grad=requires_grad)
        return cls(grid_rows, grid_cols, z)


def identity_flow(h: int, w: int) -> FlowField:
    if h < 1 or w < 1:
        raise ContractError(f"identity_flow needs h, w >= 1, got ({h}, {w})")
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return FlowField(h, w, Tensor(np.stack([xs, ys], axis=-1)))


def warp_by_flow(img: Tensor, flow: FlowField) -> Tensor:
    """Bilinear backward warp; zero outside the image; differentiable in both.

    ``img`` is H x W x C (or H x W).  Output has the flow's spatial size.
    """
    img = nc.as_tensor(img)
    squeeze = img.ndim == 2
    data = img.data[..., None] if squeeze else img.data
    if data.ndim != 3:
        raise ShapeError(f"warp_by_flow image must be HxWxC, got {img.shape}")
    H, W, C = data.shape
    coords = flow.coords
    if coords.shape[:2] != (flow.height, flow.width):
        raise ShapeError("flow coords inconsistent with its size")

    x = coords.data[..., 0]
    y = coords.data[..., 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0

    def fetch(yy, xx):
        valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        vals = data[np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]
        return vals * valid[..., None], valid

    v00, m00 = fetch(y0, x0)
    v01, m01 = fetch(y0, x0 + 1)
    v10, m10 = fetch(y0 + 1, x0)
    v11, m11 = fetch(y0 + 1, x0 + 1)

    w00 = ((1 - fy) * (1 - fx))[..., None]
    w01 = ((1 - fy) * fx)[..., None]
    w10 = (fy * (1 - fx))[..., None]
    w11 = (fy * fx)[..., None]
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bwd(g):
        gimg = None
        gcoords = None
        if img.requires_grad:
            gimg = np.zeros((H, W, C))
            for yy, xx, m, wgt in (
                (y0, x0, m00, w00),
                (y0, x0 + 1, m01, w01),
                (y0 + 1, x0, m10, w10),
                (y0 + 1, x0 + 1, m11, w11),
            ):
                contrib = g * wgt
                np.add.at(
                    gimg,
                    (np.clip(yy, 0, H - 1)[m], np.clip(xx, 0, W - 1)[m]),
                    contrib[m],
                )
        if coords.requires_grad:
            # d(out)/dx and d(out)/dy from the bilinear weights
            dx = ((1 - fy)[..., None] * (v01 - v00) + fy[..., None] * (v11 - v10))
            dy = ((1 - fx)[..., None] * (v10 - v00) + fx[..., None] * (v11 - v01))
            gx = np.sum(g * dx, axis=-1)
            gy = np.sum(g * dy, axis=-1)
            gcoords = np.stack([gx, gy], axis=-1)
        return gimg, gcoords

    out_t = nc.custom_op(out, (img, coords), bwd)
    return nc.reshape(out_t, (flow.height, flow.width)) if squeeze else out_t


# -- thin-plate spline ---------------------------------------------------------


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r^2 with U(0) = 0."""
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = r2[nz] * np.log(r2[nz])
    return out


def lattice_points(grid_rows: int, grid_cols: int, h: int, w: int) -> np.ndarray:
    """Regular control lattice spanning the image, shape (rows*cols, 2), x then y."""
    xs = np.linspace(0.0, w - 1.0, grid_cols)
    ys = np.linspace(0.0, h - 1.0, grid_rows)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1)


def tps_eval_matrix(ctrl: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Matrix A (M x K) such that the TPS interpolant through
    (ctrl -> targets) evaluates at ``pts`` as A @ targets, per coordinate.

    Raises on a degenerate lattice (singular system).
    """
    K = ctrl.shape[0]
    d2 = np.sum((ctrl[:, None, :] - ctrl[None, :, :]) ** 2, axis=-1)
    Kmat = _tps_kernel(d2)
    P = np.concatenate([np.ones((K, 1)), ctrl], axis=1)
    L = np.zeros((K + 3, K + 3))
    L[:K, :K] = Kmat
    L[:K, K:] = P
    L[K:, :K] = P.T
    try:
        Linv = np.linalg.inv(L)
    except np.linalg.LinAlgError as e:
        raise ContractError(f"singular TPS system (degenerate lattice): {e}") from None
    d2p = np.sum((pts[:, None, :] - ctrl[None, :, :]) ** 2, axis=-1)
    B = np.concatenate(
        [_tps_kernel(d2p), np.ones((pts.shape[0], 1)), pts], axis=1
    )
    return (B @ Linv)[:, :K]


def tps_apply(params: TpsParams, h: int, w: int) -> FlowField:
    """Evaluate the TPS map (lattice -> lattice + offsets) at every pixel.

    The result is a backward-sampling flow field; it depends linearly on the
    offsets, so gradients flow through a single matmul.
    """
    if params.grid_rows < 3 or params.grid_cols < 3:
        raise ContractError("TPS grid must be at least 3x3")
    ctrl = lattice_points(params.grid_rows, params.grid_cols, h, w)
    pix = identity_flow(h, w).coords.data.reshape(-1, 2)
    A = tps_eval_matrix(ctrl, pix)  # (h*w, K)
    targets = nc.add(
        nc.reshape(params.offsets, (-1, 2)), Tensor(ctrl)
    )  # (K, 2)
    coords = nc.matmul(Tensor(A), targets)  # (h*w, 2)
    return FlowField(h, w, nc.reshape(coords, (h, w, 2)))


def tps_forward_points(params: TpsParams, pts: np.ndarray, h: int, w: int) -> np.ndarray:
    """Forward-evaluate the same TPS map at arbitrary points (numpy only)."""
    ctrl = lattice_points(params.grid_rows, params.grid_cols, h, w)
    A = tps_eval_matrix(ctrl, np.asarray(pts, dtype=np.float64))
    return A @ (ctrl + params.offsets.data.reshape(-1, 2))


def tps_reverse_map(params: TpsParams, region: np.ndarray) -> np.ndarray:
    """Source-space mask of pixels whose forward TPS image lands in ``region``.

    Forward-evaluates the TPS map at source pixel centers and tests
    nearest-pixel membership in the region mask.
    """
    region = np.asarray(region)
    if region.ndim != 2:
        raise ShapeError(f"region must be 2-d, got shape {region.shape}")
    h, w = region.shape
    pix = identity_flow(h, w).coords.data.reshape(-1, 2)
    mapped = tps_forward_points(params, pix, h, w)
    mx = np.rint(mapped[:, 0]).astype(np.int64)
    my = np.rint(mapped[:, 1]).astype(np.int64)
    inside = (mx >= 0) & (mx < w) & (my >= 0) & (my < h)
    mask = np.zeros(h * w, dtype=bool)
    mask[inside] = region[my[inside], mx[inside]] > 0
    return mask.reshape(h, w)
