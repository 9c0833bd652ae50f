"""Temporal smoothing of appearance-flow sequences.

Each flow is flattened to a 2*W*H vector (x, y interleaved per pixel) and
regressed onto the span of the previous N frames' vectors with an L2
penalty; the result is then corrected per pixel against the motion-
compensated previous flow wherever the two agree within a threshold.
All coordinates are normalized to [0, 1] per axis before regression so the
hyper-parameters are resolution independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import FlowField, warp_by_flow
from .numcore import ContractError, ShapeError, Tensor


@dataclass
class TrackConfig:
    window_n: int = 3
    mu: float = 0.1
    epsilon: float = 0.05  # normalized coordinates, per pixel
    printed_formula: bool = False  # X(X^T X - mu I)X^T, for comparison only

    def __post_init__(self):
        if self.window_n < 1:
            raise ContractError("window_n must be >= 1")
        if self.mu < 0:
            raise ContractError("mu must be >= 0")
        if self.epsilon <= 0:
            raise ContractError("epsilon must be > 0")


@dataclass
class FlowWindow:
    """The last N flattened flow vectors, oldest first."""

    history: list = field(default_factory=list)

    def matrix(self) -> np.ndarray:
        return np.stack(self.history, axis=1)  # (2WH, N)


def ridge_smooth(
    f: np.ndarray, window: FlowWindow, mu: float, printed_formula: bool = False
) -> np.ndarray:
    """Project a flow vector onto the span of the window with ridge shrinkage.

    Solves through the N x N Gram system; the full (2WH)^2 matrix is never
    formed.  With mu = 0 a least-squares pseudo-inverse is used, so a
    rank-deficient window is not an error.
    """
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ContractError("ridge_smooth input must be finite")
    X = window.matrix()
    if X.shape[0] != f.shape[0]:
        raise ShapeError(f"window rows {X.shape[0]} != flow length {f.shape[0]}")
    gram = X.T @ X
    rhs = X.T @ f
    if printed_formula:
        # the uninverted variant, kept for reproducing the original formula
        coef = (gram - mu * np.eye(gram.shape[0])) @ rhs
    elif mu == 0.0:
        coef = np.linalg.pinv(gram) @ rhs
    else:
        coef = np.linalg.solve(gram + mu * np.eye(gram.shape[0]), rhs)
    return X @ coef


def _normalize(coords: np.ndarray, w: int, h: int) -> np.ndarray:
    scale = np.array([max(w - 1, 1), max(h - 1, 1)], dtype=np.float64)
    return coords / scale


def _denormalize(coords: np.ndarray, w: int, h: int) -> np.ndarray:
    scale = np.array([max(w - 1, 1), max(h - 1, 1)], dtype=np.float64)
    return coords * scale


def flow_correct(
    fhat_t: FlowField,
    fhat_prev: FlowField,
    optical_flow: FlowField,
    omega: np.ndarray,
    epsilon: float,
) -> FlowField:
    """Average the flow with the motion-compensated previous flow where they
    agree within ``epsilon`` (normalized units) inside the clothing region."""
    h, w = fhat_t.height, fhat_t.width
    omega = np.asarray(omega) > 0
    if omega.shape != (h, w):
        raise ShapeError(f"omega shape {omega.shape} != ({h}, {w})")
    if (fhat_prev.height, fhat_prev.width) != (h, w) or (
        optical_flow.height,
        optical_flow.width,
    ) != (h, w):
        raise ShapeError("flow_correct fields must share spatial size")

    warped_prev = warp_by_flow(fhat_prev.coords, optical_flow).data
    cur = fhat_t.coords.data
    delta = np.linalg.norm(
        _normalize(cur, w, h) - _normalize(warped_prev, w, h), axis=-1
    )
    blend = (delta <= epsilon) & omega
    out = np.where(blend[..., None], 0.5 * (cur + warped_prev), cur)
    return FlowField(h, w, Tensor(out))


def flatten_flow(flow: FlowField) -> np.ndarray:
    """H x W x 2 -> interleaved (x, y) vector of length 2*W*H."""
    return flow.coords.data.reshape(-1)


def unflatten_flow(vec: np.ndarray, h: int, w: int) -> FlowField:
    return FlowField(h, w, Tensor(vec.reshape(h, w, 2)))


def track_sequence(flows, optical_flows, omegas, cfg: TrackConfig | None = None):
    """Ridge-smooth then optical-flow-correct a flow sequence, causally.

    The first ``window_n`` frames pass through unsmoothed (no full history
    yet).  Frame t only ever reads inputs at indices <= t.
    """
    cfg = cfg or TrackConfig()
    T = len(flows)
    if len(optical_flows) != T or len(omegas) != T:
        raise ContractError(
            f"sequence lengths differ: {T}, {len(optical_flows)}, {len(omegas)}"
        )
    out = []
    smoothed_prev = None
    for t in range(T):
        h, w = flows[t].height, flows[t].width
        if t < cfg.window_n:
            smoothed = flows[t]
            result = flows[t]
        else:
            window = FlowWindow(
                [
                    _normalize(flows[k].coords.data, w, h).reshape(-1)
                    for k in range(t - cfg.window_n, t)
                ]
            )
            fvec = _normalize(flows[t].coords.data, w, h).reshape(-1)
            svec = ridge_smooth(fvec, window, cfg.mu, cfg.printed_formula)
            smoothed = FlowField(
                h, w, Tensor(_denormalize(svec.reshape(h, w, 2), w, h))
            )
            result = flow_correct(
                smoothed, smoothed_prev, optical_flows[t], omegas[t], cfg.epsilon
            )
        out.append(result)
        smoothed_prev = smoothed
    return out


def jitter_metric(warped, optical_flows, regions) -> float:
    """Mean motion-compensated frame difference over the given region.

    For every t >= 1: |warped_t - warp(warped_{t-1}, optical_flow_t)| averaged
    over region pixels and channels, then averaged over frames.
    """
    T = len(warped)
    if len(optical_flows) != T or len(regions) != T:
        raise ContractError("jitter_metric sequences must be aligned")
    vals = []
    for t in range(1, T):
        region = np.asarray(regions[t]) > 0
        if not region.any():
            continue
        prev = Tensor(np.asarray(warped[t - 1], dtype=np.float64))
        comp = warp_by_flow(prev, optical_flows[t]).data
        diff = np.abs(np.asarray(warped[t], dtype=np.float64) - comp)
        vals.append(float(diff[region].mean()))
    if not vals:
        raise ContractError("jitter_metric: empty region everywhere")
    return float(np.mean(vals))
