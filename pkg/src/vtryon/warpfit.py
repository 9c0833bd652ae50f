"""Warp-stage losses and direct gradient-descent fitters.

The lattice regularity constraint penalizes asymmetric neighbor distances and
bent grid lines; the flow smoothness constraint applies a generalized
Charbonnier penalty to second differences of the flow coordinates.  The
fitters minimize these losses with Adam directly on the warp parameters and
stand in for learned warp-prediction networks at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry, numcore as nc, objectives
from .geometry import FlowField, TpsParams, identity_flow, tps_apply, warp_by_flow
from .numcore import ContractError, Tensor


@dataclass
class WarpLossConfig:
    lambda_sdc: float = 0.04
    lambda_sec: float = 20.0
    charbonnier_alpha: float = 0.45
    charbonnier_eps: float = 1e-3

    def __post_init__(self):
        if self.lambda_sdc < 0 or self.lambda_sec < 0:
            raise ContractError("loss weights must be >= 0")
        if not (0.0 < self.charbonnier_alpha <= 1.0):
            raise ContractError("charbonnier_alpha must be in (0, 1]")
        if self.charbonnier_eps <= 0:
            raise ContractError("charbonnier_eps must be > 0")


def charbonnier(x: Tensor, cfg: WarpLossConfig) -> Tensor:
    """P(x) = (x^2 + eps^2)^alpha, elementwise."""
    return nc.power(x * x + cfg.charbonnier_eps**2, cfg.charbonnier_alpha)


def charbonnier_floor(cfg: WarpLossConfig) -> float:
    """P(0), the per-term floor of the smoothness constraint."""
    return float(cfg.charbonnier_eps ** (2.0 * cfg.charbonnier_alpha))


def _expand_last(t: Tensor) -> Tensor:
    """(r, c) -> (r, c, 2) by duplication; stands in for broadcasting."""
    r, c = t.shape
    col = nc.reshape(t, (r, c, 1))
    return nc.concat([col, col], axis=2)


def _norm_last(t: Tensor) -> Tensor:
    # tiny offset keeps sqrt differentiable; value shift is ~1e-8
    return nc.sqrt(nc.reduce_sum(t * t, axis=-1) + 1e-16)


def sdc_loss(params: TpsParams, h: int, w: int) -> Tensor:
    """Second-order regularity of the control lattice.

    For every interior point p with top/bottom/left/right neighbors p0..p3:
    the absolute difference of opposing neighbor distances plus the norm of
    the difference of normalized directions along each grid line (zero when
    the line stays straight through p).
    """
    if params.grid_rows < 3 or params.grid_cols < 3:
        raise ContractError("sdc_loss needs a grid of at least 3x3")
    lat = geometry.lattice_points(params.grid_rows, params.grid_cols, h, w)
    lat = lat.reshape(params.grid_rows, params.grid_cols, 2)
    pos = params.offsets + Tensor(lat)

    p = pos[1:-1, 1:-1]
    p0 = pos[:-2, 1:-1]  # top
    p1 = pos[2:, 1:-1]  # bottom
    p2 = pos[1:-1, :-2]  # left
    p3 = pos[1:-1, 2:]  # right

    n0, n1 = _norm_last(p - p0), _norm_last(p1 - p)
    n2, n3 = _norm_last(p - p2), _norm_last(p3 - p)
    dist = nc.absolute(n0 - n1) + nc.absolute(n2 - n3)

    u0 = (p - p0) * nc.power(_expand_last(n0), -1.0)
    u1 = (p1 - p) * nc.power(_expand_last(n1), -1.0)
    u2 = (p - p2) * nc.power(_expand_last(n2), -1.0)
    u3 = (p3 - p) * nc.power(_expand_last(n3), -1.0)
    bend = _norm_last(u0 - u1) + _norm_last(u2 - u3)

    return nc.reduce_sum(dist + bend)


_SEC_DIRECTIONS = ((0, 1), (1, 0), (1, 1), (1, -1))


def _second_diffs(coords: Tensor):
    h, w = coords.shape[0], coords.shape[1]
    for dy, dx in _SEC_DIRECTIONS:
        if dy == 0:
            yield coords[:, :-2] + coords[:, 2:] - 2.0 * coords[:, 1:-1]
        elif dx == 0:
            yield coords[:-2, :] + coords[2:, :] - 2.0 * coords[1:-1, :]
        elif dx == 1:
            yield coords[:-2, :-2] + coords[2:, 2:] - 2.0 * coords[1:-1, 1:-1]
        else:
            yield coords[:-2, 2:] + coords[2:, :-2] - 2.0 * coords[1:-1, 1:-1]


def sec_loss(flows, cfg: WarpLossConfig) -> Tensor:
    """Charbonnier-penalized second differences of each flow in a pyramid,
    over horizontal, vertical and both diagonal directions."""
    total = None
    for flow in flows:
        if flow.height < 3 or flow.width < 3:
            raise ContractError("sec_loss needs flows of at least 3x3")
        for d in _second_diffs(flow.coords):
            term = nc.reduce_sum(charbonnier(d, cfg))
            total = term if total is None else total + term
    if total is None:
        raise ContractError("sec_loss needs at least one flow")
    return total


def sec_term_count(flows) -> int:
    """Number of Charbonnier evaluations in sec_loss (for the loss floor)."""
    n = 0
    for flow in flows:
        h, w = flow.height, flow.width
        n += 2 * (h * (w - 2) + w * (h - 2) + 2 * (h - 2) * (w - 2))
    return n


def tps_warp_loss(
    clothes: Tensor, target: Tensor, params: TpsParams, cfg: WarpLossConfig
) -> Tensor:
    """Mean-L1 between TPS-warped clothes and target plus the lattice term."""
    clothes, target = nc.as_tensor(clothes), nc.as_tensor(target)
    h, w = target.shape[0], target.shape[1]
    warped = warp_by_flow(clothes, tps_apply(params, h, w))
    data = nc.reduce_mean(nc.absolute(warped - target))
    return data + cfg.lambda_sdc * sdc_loss(params, h, w)


def flow_warp_loss(clothes: Tensor, target: Tensor, flows, cfg: WarpLossConfig) -> Tensor:
    """Mean-L1 of the finest-scale warp plus the smoothness term on all scales."""
    clothes, target = nc.as_tensor(clothes), nc.as_tensor(target)
    finest = flows[-1]
    if (finest.height, finest.width) != (target.shape[0], target.shape[1]):
        raise ContractError(
            f"finest flow {(finest.height, finest.width)} does not match "
            f"target {target.shape[:2]}"
        )
    warped = warp_by_flow(clothes, finest)
    data = nc.reduce_mean(nc.absolute(warped - target))
    return data + cfg.lambda_sec * sec_loss(flows, cfg)


class OptimizationError(RuntimeError):
    pass


def _adam_minimize(loss_fn, leaf: Tensor, steps: int, lr: float):
    """Adam descent on one leaf tensor; returns the best-loss iterate."""
    if steps < 1:
        raise ContractError("steps must be >= 1")
    if lr <= 0:
        raise ContractError("lr must be > 0")
    state = objectives.AdamState(lr=lr)
    loss = loss_fn(leaf)
    if not np.isfinite(loss.data):
        raise OptimizationError("non-finite loss at step 0")
    best_loss, best = float(loss.data), leaf.data.copy()
    for step in range(steps):
        nc.backward(loss)
        new = objectives.adam_step({"p": leaf.data}, {"p": leaf.grad}, state)
        leaf = Tensor(new["p"], requires_grad=True)
        loss = loss_fn(leaf)
        if not np.isfinite(loss.data):
            raise OptimizationError(f"loss diverged at step {step + 1}")
        if float(loss.data) < best_loss:
            best_loss, best = float(loss.data), leaf.data.copy()
    return best, best_loss


def _axis_masks(shape):
    """Broadcast helpers: (..., 2) fields selecting the x or y coordinate."""
    ex = np.zeros(shape)
    ey = np.zeros(shape)
    ex[..., 0] = 1.0
    ey[..., 1] = 1.0
    return Tensor(ex), Tensor(ey)


def _fit_translation(loss_of_field, base: np.ndarray, steps: int, lr: float):
    """Adam on a global 2-vector shift of a coordinate field.

    A uniform shift never leaves the zero-penalty manifold of either
    regularity constraint, so this phase descends the data term directly;
    the learning rate is annealed once for sub-pixel alignment.
    """
    ex, ey = _axis_masks(base.shape)
    base_t = Tensor(base)

    def loss_fn(t):
        return loss_of_field(base_t + ex * t[0:1] + ey * t[1:2])

    t, _ = _adam_minimize(loss_fn, Tensor(np.zeros(2), requires_grad=True),
                          steps, lr)
    t, _ = _adam_minimize(loss_fn, Tensor(t, requires_grad=True),
                          max(steps // 2, 1), lr * 0.1)
    return base + np.array([t[0], t[1]])


def fit_tps(
    clothes,
    target,
    cfg: WarpLossConfig | None = None,
    steps: int = 150,
    lr: float = 0.5,
    grid=(5, 5),
    init: TpsParams | None = None,
) -> TpsParams:
    """Fit TPS lattice offsets by Adam on the TPS warp loss.

    A global-translation phase runs first (the regularity term is blind to
    it), then the full lattice refines from there.
    """
    cfg = cfg or WarpLossConfig()
    clothes, target = nc.as_tensor(clothes), nc.as_tensor(target)
    if init is not None:
        rows, cols = init.grid_rows, init.grid_cols
        start = init.offsets.data.copy()
    else:
        rows, cols = grid
        start = np.zeros((rows, cols, 2))

    def loss_fn(offsets):
        return tps_warp_loss(clothes, target, TpsParams(rows, cols, offsets), cfg)

    start = _fit_translation(loss_fn, start, steps, lr)
    best, _ = _adam_minimize(loss_fn, Tensor(start, requires_grad=True), steps, lr)
    return TpsParams(rows, cols, Tensor(best))


def _avgpool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    x = img[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2])


def _upsample_flow(coords: np.ndarray) -> np.ndarray:
    """Double a flow's resolution: displacements scale by 2, grid refines."""
    h, w = coords.shape[:2]
    disp = coords - identity_flow(h, w).coords.data
    disp2 = 2.0 * np.repeat(np.repeat(disp, 2, axis=0), 2, axis=1)
    return identity_flow(2 * h, 2 * w).coords.data + disp2


def fit_flow(
    clothes,
    target,
    cfg: WarpLossConfig | None = None,
    steps: int = 100,
    lr: float = 0.1,
    init: FlowField | None = None,
    scales: int = 3,
) -> FlowField:
    """Fit a dense appearance flow coarse-to-fine by Adam on the flow warp loss.

    Each pyramid level starts from the 2x-upsampled previous level (or from
    the identity / supplied init at the coarsest level).
    """
    cfg = cfg or WarpLossConfig()
    clothes, target = nc.as_tensor(clothes), nc.as_tensor(target)
    H, W = target.shape[0], target.shape[1]
    while scales > 1 and (H % 2 ** (scales - 1) or W % 2 ** (scales - 1)
                          or min(H, W) // 2 ** (scales - 1) < 3):
        scales -= 1

    # image pyramids, coarsest first
    def pyramid(img):
        levels = [img.data]
        for _ in range(scales - 1):
            levels.append(
                np.stack([_avgpool2(levels[-1][..., c])
                          for c in range(levels[-1].shape[-1])], axis=-1)
                if levels[-1].ndim == 3
                else _avgpool2(levels[-1])
            )
        return levels[::-1]

    cpyr, tpyr = pyramid(clothes), pyramid(target)

    if init is not None:
        disp = init.coords.data - identity_flow(H, W).coords.data
        for _ in range(scales - 1):
            disp = 0.5 * np.stack([_avgpool2(disp[..., 0]), _avgpool2(disp[..., 1])], -1)
        h0, w0 = tpyr[0].shape[:2]
        coords = identity_flow(h0, w0).coords.data + disp
    else:
        h0, w0 = tpyr[0].shape[:2]
        coords = identity_flow(h0, w0).coords.data

    for level in range(scales):
        c_img, t_img = Tensor(cpyr[level]), Tensor(tpyr[level])
        h, w = t_img.shape[0], t_img.shape[1]

        def loss_fn(ct, c_img=c_img, t_img=t_img, h=h, w=w):
            return flow_warp_loss(c_img, t_img, [FlowField(h, w, ct)], cfg)

        coords = _fit_translation(loss_fn, coords, steps, lr)
        best, _ = _adam_minimize(loss_fn, Tensor(coords, requires_grad=True), steps, lr)
        coords = best
        if level < scales - 1:
            coords = _upsample_flow(coords)

    return FlowField(H, W, Tensor(coords))
