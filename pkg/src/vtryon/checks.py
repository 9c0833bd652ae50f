"""Finite-difference gradient checks over every differentiable operation.

Each check builds a tiny deterministic problem, runs the tape's gradient
against a central difference, and reports the max relative error.  Inputs are
kept away from the non-smooth points of the ops involved (integer sampling
coordinates for the warp, zero for the absolute value).
"""

from __future__ import annotations

import numpy as np

from . import convnet, generator, geometry, numcore as nc, objectives, warpfit
from .geometry import FlowField, TpsParams
from .numcore import Tensor, gradcheck
from .warpfit import WarpLossConfig

TOLERANCE = 1e-3  # run gate; individual checks usually land far below


def _rng(seed):
    return np.random.default_rng(seed)


def check_elementwise() -> float:
    x0 = _rng(0).uniform(0.3, 1.5, size=(3, 4))

    def f(x):
        y = nc.exp(nc.log(x) * 0.5) + nc.sigmoid(x) * nc.sqrt(x)
        y = y + nc.absolute(x - 5.0) + nc.power(x, 1.7) + nc.relu(x - 1.0 + 1e-2)
        return nc.reduce_sum(y / (x + 2.0))

    return gradcheck(f, Tensor(x0))


def check_softmax_matmul() -> float:
    r = _rng(1)
    a0 = r.normal(size=(4, 5))
    b = Tensor(r.normal(size=(5, 3)))

    sel = Tensor(r.normal(size=(4, 3)))

    def f(a):
        return nc.reduce_sum(nc.softmax(nc.matmul(a, b), axis=-1) * sel)

    return gradcheck(f, Tensor(a0))


def check_structural() -> float:
    x0 = _rng(2).normal(size=(2, 3, 4))
    sel = Tensor(_rng(3).normal(size=(8, 6)))

    def f(x):
        y = nc.transpose(x, (2, 0, 1))
        y = nc.reshape(y, (4, 6))
        y = nc.concat([y, y * 0.5], axis=0)
        y = nc.pad(y, ((1, 1), (0, 2)))
        z = y[1:9, 0:6]
        return nc.reduce_sum(z * sel)

    return gradcheck(f, Tensor(x0))


def check_warp_image() -> float:
    r = _rng(4)
    img0 = r.uniform(0.0, 1.0, size=(5, 6, 2))
    coords = geometry.identity_flow(5, 6).coords.data + r.uniform(-0.4, 0.4, (5, 6, 2))
    coords += 0.03  # keep clear of integer sampling corners
    flow = FlowField(5, 6, Tensor(coords))
    sel = Tensor(r.normal(size=(5, 6, 2)))

    def f(img):
        return nc.reduce_sum(geometry.warp_by_flow(img, flow) * sel)

    return gradcheck(f, Tensor(img0))


def check_warp_coords() -> float:
    r = _rng(5)
    img = Tensor(r.uniform(0.0, 1.0, size=(5, 6, 2)))
    base = geometry.identity_flow(5, 6).coords.data
    coords0 = base + r.uniform(0.1, 0.4, (5, 6, 2))
    sel = Tensor(r.normal(size=(5, 6, 2)))

    def f(c):
        return nc.reduce_sum(geometry.warp_by_flow(img, FlowField(5, 6, c)) * sel)

    return gradcheck(f, Tensor(coords0), h=1e-6)


def check_tps_offsets() -> float:
    r = _rng(6)
    clothes = Tensor(r.uniform(0.0, 1.0, size=(8, 8, 2)))
    target = Tensor(r.uniform(0.0, 1.0, size=(8, 8, 2)))
    cfg = WarpLossConfig()
    off0 = r.uniform(0.05, 0.35, size=(3, 3, 2))

    def f(off):
        return warpfit.tps_warp_loss(clothes, target, TpsParams(3, 3, off), cfg)

    return gradcheck(f, Tensor(off0), h=1e-6)


def check_lattice_regularity() -> float:
    off0 = _rng(7).uniform(-0.8, 0.8, size=(4, 4, 2))

    def f(off):
        return warpfit.sdc_loss(TpsParams(4, 4, off), 32, 32)

    return gradcheck(f, Tensor(off0))


def check_flow_smoothness() -> float:
    r = _rng(8)
    cfg = WarpLossConfig()
    c0 = geometry.identity_flow(4, 5).coords.data + r.uniform(-0.3, 0.3, (4, 5, 2))

    def f(c):
        return warpfit.sec_loss([FlowField(4, 5, c)], cfg)

    return gradcheck(f, Tensor(c0))


def check_attention_query() -> float:
    r = _rng(9)
    kp = Tensor(r.normal(size=(6, 4)))
    vp = Tensor(r.normal(size=(6, 4)))
    valid = np.array([True, False, True, True, False, True])
    sel = Tensor(r.normal(size=(6, 4)))
    q0 = r.normal(size=(6, 4))

    def f(q):
        out, _ = generator.masked_patch_attention(q, kp, vp, valid)
        return nc.reduce_sum(out * sel)

    return gradcheck(f, Tensor(q0))


def check_attention_keys_values() -> float:
    r = _rng(10)
    qp = Tensor(r.normal(size=(5, 3)))
    valid = np.array([True, True, False, True, True])
    sel = Tensor(r.normal(size=(5, 3)))
    kv0 = r.normal(size=(2, 5, 3))

    def f(kv):
        out, _ = generator.masked_patch_attention(qp, kv[0], kv[1], valid)
        return nc.reduce_sum(out * sel)

    return gradcheck(f, Tensor(kv0))


def check_conv2d() -> float:
    r = _rng(11)
    w = Tensor(r.normal(scale=0.5, size=(3, 3, 2, 3)))
    b = Tensor(r.normal(size=(3,)))
    sel = Tensor(r.normal(size=(1, 2, 2, 3)))
    x0 = r.normal(size=(1, 4, 4, 2))

    def f(x):
        return nc.reduce_sum(convnet.conv2d(x, w, b, stride=2, padding=1) * sel)

    err_x = gradcheck(f, Tensor(x0))
    xt = Tensor(x0)

    def fw(wv):
        return nc.reduce_sum(convnet.conv2d(xt, wv, b, stride=2, padding=1) * sel)

    return max(err_x, gradcheck(fw, Tensor(w.data.copy())))


def check_conv3d() -> float:
    r = _rng(12)
    w = Tensor(r.normal(scale=0.5, size=(3, 3, 3, 2, 2)))
    b = Tensor(r.normal(size=(2,)))
    sel = Tensor(r.normal(size=(2, 2, 2, 2)))
    x0 = r.normal(size=(2, 4, 4, 2))

    def f(x):
        return nc.reduce_sum(
            convnet.conv3d(x, w, b, stride=(1, 2, 2), padding=(1, 1, 1)) * sel
        )

    return gradcheck(f, Tensor(x0))


def check_fusion() -> float:
    r = _rng(13)
    i_r = Tensor(r.uniform(0, 1, size=(2, 3, 3, 3)))
    wc = Tensor(r.uniform(0, 1, size=(2, 3, 3, 3)))
    sel = Tensor(r.normal(size=(2, 3, 3, 3)))
    m0 = r.uniform(0.2, 0.8, size=(2, 3, 3, 1))

    def f(m):
        return nc.reduce_sum(generator.fuse_clothes(i_r, m, wc) * sel)

    err_m = gradcheck(f, Tensor(m0))
    m_a = r.integers(0, 2, size=(2, 3, 3)).astype(np.float64)
    agn = Tensor(r.uniform(0, 1, size=(2, 3, 3, 3)))

    def g(x):
        return nc.reduce_sum(generator.fuse_background(x, agn, m_a) * sel)

    return max(err_m, gradcheck(g, Tensor(r.uniform(0, 1, size=(2, 3, 3, 3)))))


def check_tryon_loss() -> float:
    r = _rng(14)
    target = Tensor(r.uniform(0, 1, size=(2, 4, 4, 3)))
    m_c = Tensor((r.uniform(0, 1, size=(2, 4, 4)) > 0.4).astype(np.float64))
    cfg = objectives.TryOnLossConfig(
        feature_extractor=objectives.RandomFeatureExtractor(widths=(4,), seed=3),
        discriminator=objectives.TemporalPatchDiscriminator(widths=(4, 1), seed=5),
    )
    pred0 = target.data + r.uniform(0.05, 0.2, size=target.shape)

    def f(pred):
        return objectives.tryon_loss(pred, target, m_c, cfg)

    return gradcheck(f, Tensor(pred0))


def check_generator_end_to_end() -> float:
    """Whole forward pass + loss, gradient wrt one projection weight."""
    r = _rng(15)
    cfg = generator.GeneratorConfig(channels=4, blocks=1, heads=2,
                                    patch_sizes=[(2, 2), (1, 1)], seed=2)
    params = generator.init_params(cfg)
    T, H, W = 2, 8, 8
    clothes = Tensor(r.uniform(0, 1, size=(T, H, W, 3)))
    shape = Tensor(r.uniform(0, 1, size=(T, H, W, 2)))
    agn = Tensor(r.uniform(0, 1, size=(T, H, W, 3)))
    maskC = (r.uniform(0, 1, size=(T, H, W)) > 0.5).astype(np.float64)
    m_a = (r.uniform(0, 1, size=(T, H, W)) > 0.5).astype(np.float64)
    sel = Tensor(r.normal(size=(T, H, W, 3)))

    worst = 0.0
    for name in ("enc_s.w0", "blk0.fuse.w", "dec.w1"):
        w0 = params[name].data.copy()

        def f(wv, name=name):
            p = dict(params)
            p[name] = wv
            out = generator.generator_forward(clothes, shape, agn, maskC, m_a,
                                              p, cfg)
            return nc.reduce_sum(out["i_final"] * sel)

        worst = max(worst, gradcheck(f, Tensor(w0), h=1e-5))
    return worst


ALL_CHECKS = [
    ("elementwise", check_elementwise),
    ("softmax-matmul", check_softmax_matmul),
    ("structural", check_structural),
    ("warp-image", check_warp_image),
    ("warp-coords", check_warp_coords),
    ("tps-offsets", check_tps_offsets),
    ("lattice-regularity", check_lattice_regularity),
    ("flow-smoothness", check_flow_smoothness),
    ("attention-query", check_attention_query),
    ("attention-keys-values", check_attention_keys_values),
    ("conv2d", check_conv2d),
    ("conv3d", check_conv3d),
    ("fusion", check_fusion),
    ("tryon-loss", check_tryon_loss),
    ("generator-end-to-end", check_generator_end_to_end),
]


def run_all() -> dict:
    return {name: fn() for name, fn in ALL_CHECKS}
