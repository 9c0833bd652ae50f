"""Seeded synthetic scenes with exact ground truth.

A textured garment rectangle translates over a textured background; an
occluder ellipse can cover part of it in chosen frames.  The scene ships
with exact appearance flows, optical flows, occlusion masks and label maps,
so every downstream stage can be checked against known truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .bundle import SequenceBundle
from .agnostic import DEFAULT_LABEL_TABLE
from .geometry import identity_flow


class SceneError(ValueError):
    pass


@dataclass
class SynthScene:
    seed: int = 0
    T: int = 8
    H: int = 64
    W: int = 48
    garment_size: tuple = (24, 16)  # (gh, gw)
    garment_pos: tuple = (20, 16)  # top-left (y, x) in the clothes image
    velocity: tuple = (0, 0)  # integer (vy, vx) per frame
    occluder_center: tuple | None = None  # (y, x); None disables
    occluder_radius: tuple = (6, 4)  # (ry, rx)
    occluder_frames: tuple = ()  # frame indices with the occluder drawn
    noise_sigma: float = 0.0  # flow noise, normalized coordinates
    hands_block: tuple | None = None  # (y, x, size) painted into dense


def _smooth_texture(rng, h, w, channels=3, sigma=2.5, lo=0.2, hi=0.9):
    tex = rng.random((h, w, channels))
    tex = ndimage.gaussian_filter(tex, sigma=(sigma, sigma, 0))
    tmin, tmax = tex.min(), tex.max()
    return lo + (hi - lo) * (tex - tmin) / max(tmax - tmin, 1e-9)


def _ellipse_mask(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synth_scene(spec: SynthScene) -> SequenceBundle:
    rng = np.random.default_rng(spec.seed)
    T, H, W = spec.T, spec.H, spec.W
    gh, gw = spec.garment_size
    gy, gx = spec.garment_pos
    vy, vx = spec.velocity

    background = _smooth_texture(rng, H, W, sigma=3.0, lo=0.1, hi=0.5)
    garment_tex = _smooth_texture(rng, gh, gw, sigma=2.0, lo=0.4, hi=1.0)
    occ_color = np.array([0.95, 0.1, 0.1])

    clothes = np.zeros((H, W, 3))
    clothes[gy : gy + gh, gx : gx + gw] = garment_tex
    clothes_mask = np.zeros((H, W))
    clothes_mask[gy : gy + gh, gx : gx + gw] = 1.0

    clothes_label = DEFAULT_LABEL_TABLE["clothes"][0]

    frames = np.empty((T, H, W, 3))
    seg = np.zeros((T, H, W))
    dense = np.zeros((T, H, W))
    matte = np.zeros((T, H, W))
    occlusion = np.zeros((T, H, W))
    garment_mask = np.zeros((T, H, W))
    pose = np.zeros((T, 5, 2))
    gt_flows = np.empty((T, H, W, 2))
    optical_flows = np.empty((T, H, W, 2))
    ident = identity_flow(H, W).coords.data

    for t in range(T):
        my, mx = t * vy, t * vx
        y0, x0 = gy + my, gx + mx
        if y0 < 0 or x0 < 0 or y0 + gh > H or x0 + gw > W:
            raise SceneError(f"garment out of frame at t={t}")
        frame = background.copy()
        frame[y0 : y0 + gh, x0 : x0 + gw] = garment_tex
        seg[t, y0 : y0 + gh, x0 : x0 + gw] = clothes_label
        matte[t, y0 : y0 + gh, x0 : x0 + gw] = 1.0
        garment_mask[t, y0 : y0 + gh, x0 : x0 + gw] = 1.0

        if spec.occluder_center is not None and t in set(spec.occluder_frames):
            cy, cx = spec.occluder_center
            ry, rx = spec.occluder_radius
            if cy - ry < 0 or cx - rx < 0 or cy + ry >= H or cx + rx >= W:
                raise SceneError(f"occluder out of frame at t={t}")
            blob = _ellipse_mask(H, W, cy + my, cx + mx, ry, rx)
            if (cy + my) + ry >= H or (cx + mx) + rx >= W:
                raise SceneError(f"occluder out of frame at t={t}")
            frame[blob] = occ_color
            matte[t][blob] = 1.0
            seg[t][blob] = 0.0  # parser calls the occluder "other"
            occlusion[t] = blob.astype(float)

        if spec.hands_block is not None:
            hy, hx, hs = spec.hands_block
            dense[t, hy : hy + hs, hx : hx + hs] = DEFAULT_LABEL_TABLE["hands"][0]

        frames[t] = frame
        pose[t] = np.array(
            [
                [x0, y0],
                [x0 + gw - 1, y0],
                [x0, y0 + gh - 1],
                [x0 + gw - 1, y0 + gh - 1],
                [x0 + (gw - 1) / 2, y0 + (gh - 1) / 2],
            ],
            dtype=np.float64,
        )

        gt_flows[t] = ident - np.array([mx, my], dtype=np.float64)
        if t == 0:
            optical_flows[t] = ident
        else:
            optical_flows[t] = ident - np.array([vx, vy], dtype=np.float64)

    bundle = SequenceBundle(
        T,
        H,
        W,
        {
            "frames": frames,
            "seg": seg,
            "dense": dense,
            "pose": pose,
            "matte": matte,
            "clothes": clothes,
            "clothes_mask": clothes_mask,
            "optical_flows": optical_flows,
            "gt_flows": gt_flows,
            "occlusion": occlusion,
            "garment_mask": garment_mask,
        },
    )
    bundle.validate()
    return bundle


def noisy_flows(bundle: SequenceBundle, sigma: float, seed: int) -> np.ndarray:
    """Ground-truth appearance flows plus white noise of the given magnitude
    (sigma in normalized coordinates, scaled to pixels per axis)."""
    rng = np.random.default_rng(seed)
    flows = bundle["gt_flows"].copy()
    scale = np.array([bundle.W - 1, bundle.H - 1], dtype=np.float64)
    flows += rng.normal(0.0, sigma, size=flows.shape) * scale
    return flows
