"""Dual-stream spatio-temporal patch-attention generator.

Three frame-level encoders feed a stack of attention blocks.  Each block
projects the evolving person-shape state to queries and the two static
streams (warped-clothes texture, clothing-agnostic context) to key/value
pairs, attends over every spatio-temporal patch, fuses the two streams with
a pointwise projection, and adds the result back to the state.  A frame-level
decoder renders the image sequence together with a soft composition mask;
two fusion steps paste in the warped clothes and the preserved background.

The clothes stream softmax runs over *valid* key patches only (patches
touching the visible-clothing mask); invalid patches get weight exactly 0,
and when no patch is valid the clothes attention is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import convnet, numcore as nc
from .numcore import ContractError, ShapeError, Tensor


class ConfigError(ValueError):
    pass


DEFAULT_PATCH_SIZES = [(8, 8), (4, 4), (2, 2), (1, 1)]


@dataclass
class GeneratorConfig:
    channels: int = 256
    blocks: int = 8
    heads: int = 4
    patch_sizes: list = field(default_factory=lambda: list(DEFAULT_PATCH_SIZES))
    downsample: int = 4  # two 2x encoder stages
    clothes_channels: int = 3
    shape_channels: int = 2
    agnostic_channels: int = 3
    valid_threshold: float = 0.0  # key patch valid if any covered mask px > this
    positional: bool = False  # learnable additive spatio-temporal encoding
    norm: bool = False  # RMS-normalize block inputs
    seed: int = 0

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigError("blocks must be >= 1")
        if self.channels % self.heads != 0:
            raise ConfigError(
                f"channels ({self.channels}) must divide evenly by heads "
                f"({self.heads})"
            )
        if self.downsample != 4:
            raise ConfigError("encoder downsample factor is fixed at 4 (two 2x stages)")


def tiny_config(**kw) -> GeneratorConfig:
    """The reduced variant: 96 channels, 6 blocks."""
    kw.setdefault("channels", 96)
    kw.setdefault("blocks", 6)
    return GeneratorConfig(**kw)


@dataclass
class StreamEmbeddings:
    q: Tensor
    kC: Tensor
    vC: Tensor
    kA: Tensor
    vA: Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.q, self.kC, self.vC, self.kA, self.vA)}
        if len(shapes) != 1:
            raise ShapeError(f"stream embeddings must share shape, got {shapes}")


def fit_patch(r: int, n: int) -> int:
    """Largest patch edge <= r that divides n."""
    r = max(1, min(int(r), int(n)))
    while n % r:
        r -= 1
    return r


def head_patch_sizes(cfg: GeneratorConfig, h: int, w: int):
    sizes = []
    for i in range(cfg.heads):
        r1, r2 = cfg.patch_sizes[i % len(cfg.patch_sizes)]
        sizes.append((fit_patch(r1, h), fit_patch(r2, w)))
    return sizes


# -- parameters ---------------------------------------------------------------


def init_params(cfg: GeneratorConfig, feat_hw=None) -> dict:
    """Deterministic parameter set for the given config.

    ``feat_hw`` (feature-map size) is only needed when the positional
    encoding is enabled; it then also fixes T via feat_hw = (T, h, w).
    """
    rng = np.random.default_rng(cfg.seed)
    c = cfg.channels
    c1, c2 = max(c // 4, 1), max(c // 2, 1)
    params: dict[str, Tensor] = {}

    def add(name, shape):
        # biases start at zero so no layer can be born saturated
        init = np.zeros(shape) if len(shape) == 1 else convnet.init_conv(rng, shape)
        params[name] = Tensor(init, requires_grad=True)

    for stream, cin in (
        ("enc_c", cfg.clothes_channels),
        ("enc_s", cfg.shape_channels),
        ("enc_a", cfg.agnostic_channels),
    ):
        widths = [(cin, c1, 1), (c1, c2, 2), (c2, c2, 1), (c2, c, 2)]
        for i, (ci, co, _) in enumerate(widths):
            add(f"{stream}.w{i}", (3, 3, ci, co))
            add(f"{stream}.b{i}", (co,))

    for b in range(cfg.blocks):
        for proj in ("q", "kC", "vC", "kA", "vA"):
            add(f"blk{b}.{proj}.w", (c, c))
            add(f"blk{b}.{proj}.b", (c,))
        add(f"blk{b}.fuse.w", (2 * c, c))
        add(f"blk{b}.fuse.b", (c,))

    dec_widths = [(c, c2), (c2, c1), (c1, c1), (c1, 4)]
    for i, (ci, co) in enumerate(dec_widths):
        add(f"dec.w{i}", (3, 3, ci, co))
        add(f"dec.b{i}", (co,))

    if cfg.positional:
        if feat_hw is None:
            raise ConfigError("positional encoding needs feat_hw=(T, h, w)")
        t, h, w = feat_hw
        add("pos", (t, h, w, c))
    return params


_ENC_STRIDES = (1, 2, 1, 2)


def encode(seq: Tensor, params: dict, stream: str) -> Tensor:
    """Frame-level convolutional encoder, 4 layers, two 2x downsamples."""
    seq = nc.as_tensor(seq)
    T, H, W, _ = seq.shape
    if H % 4 or W % 4:
        raise ShapeError(f"encoder input {H}x{W} must be divisible by 4")
    x = seq
    for i, s in enumerate(_ENC_STRIDES):
        x = convnet.conv2d(x, params[f"{stream}.w{i}"], params[f"{stream}.b{i}"],
                           stride=s, padding=1)
        if i < len(_ENC_STRIDES) - 1:
            x = nc.relu(x)
    return x


def decode(feat: Tensor, params: dict):
    """Frame-level decoder: renders RGB frames and a sigmoid mask channel."""
    x = feat
    T, h, w, _ = feat.shape
    for i in range(4):
        x = convnet.conv2d(x, params[f"dec.w{i}"], params[f"dec.b{i}"],
                           stride=1, padding=1)
        if i < 3:
            x = nc.relu(x)
        if i in (0, 1):
            x = convnet.upsample2x(x)
    imgs = x[:, :, :, 0:3]
    mask = nc.sigmoid(x[:, :, :, 3:4])
    return imgs, mask


def _pointwise(feat: Tensor, w: Tensor, b: Tensor) -> Tensor:
    T, h, ww, c = feat.shape
    flat = nc.reshape(feat, (T * h * ww, c))
    out = convnet.linear(flat, w, b)
    return nc.reshape(out, (T, h, ww, w.shape[1]))


def embed(state: Tensor, clothes_feat: Tensor, agn_feat: Tensor,
          params: dict, block: int) -> StreamEmbeddings:
    """Pointwise query / key / value projections for one block."""
    pre = f"blk{block}"
    return StreamEmbeddings(
        q=_pointwise(state, params[f"{pre}.q.w"], params[f"{pre}.q.b"]),
        kC=_pointwise(clothes_feat, params[f"{pre}.kC.w"], params[f"{pre}.kC.b"]),
        vC=_pointwise(clothes_feat, params[f"{pre}.vC.w"], params[f"{pre}.vC.b"]),
        kA=_pointwise(agn_feat, params[f"{pre}.kA.w"], params[f"{pre}.kA.b"]),
        vA=_pointwise(agn_feat, params[f"{pre}.vA.w"], params[f"{pre}.vA.b"]),
    )


def to_patches(feat: Tensor, r1: int, r2: int) -> Tensor:
    """(T, h, w, c) -> (N, r1*r2*c) spatio-temporal patch vectors."""
    T, h, w, c = feat.shape
    if h % r1 or w % r2:
        raise ShapeError(f"patch {r1}x{r2} does not divide features {h}x{w}")
    x = nc.reshape(feat, (T, h // r1, r1, w // r2, r2, c))
    x = nc.transpose(x, (0, 1, 3, 2, 4, 5))
    return nc.reshape(x, (T * (h // r1) * (w // r2), r1 * r2 * c))


def from_patches(patches: Tensor, T: int, h: int, w: int, r1: int, r2: int, c: int) -> Tensor:
    x = nc.reshape(patches, (T, h // r1, w // r2, r1, r2, c))
    x = nc.transpose(x, (0, 1, 3, 2, 4, 5))
    return nc.reshape(x, (T, h, w, c))


def patch_validity(mask: np.ndarray, r1: int, r2: int, threshold: float = 0.0) -> np.ndarray:
    """Key-patch validity: any covered mask pixel above the threshold."""
    T, h, w = mask.shape
    blocks = mask.reshape(T, h // r1, r1, w // r2, r2)
    return (blocks > threshold).any(axis=(2, 4)).reshape(-1)


def masked_patch_attention(qp: Tensor, kp: Tensor, vp: Tensor,
                           valid: np.ndarray | None = None):
    """Scaled dot-product attention over patch vectors.

    With ``valid`` given, softmax runs over valid key patches only; invalid
    patches contribute exactly zero weight.  Zero valid patches yield a zero
    output.  Returns (output, weights) where weights is the dense N x N
    numpy matrix (zeros in invalid columns).
    """
    n, d = qp.shape
    scale = 1.0 / np.sqrt(d)
    if valid is None:
        valid = np.ones(n, dtype=bool)
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return Tensor(np.zeros((n, d))), np.zeros((n, n))
    kv = kp[idx]
    vv = vp[idx]
    scores = nc.matmul(qp, nc.transpose(kv)) * scale
    w = nc.softmax(scores, axis=-1)
    out = nc.matmul(w, vv)
    dense = np.zeros((n, n))
    dense[:, idx] = w.data
    return out, dense


def dual_stream_attention(e: StreamEmbeddings, maskC: np.ndarray,
                          cfg: GeneratorConfig) -> Tensor:
    """One block's attention: per-head patch attention on both streams,
    concatenation, and the pointwise fusion are applied by the caller."""
    T, h, w, c = e.q.shape
    ch = c // cfg.heads
    sizes = head_patch_sizes(cfg, h, w)
    outC, outA = [], []
    for i, (r1, r2) in enumerate(sizes):
        lo, hi = i * ch, (i + 1) * ch
        qp = to_patches(e.q[:, :, :, lo:hi], r1, r2)
        kcp = to_patches(e.kC[:, :, :, lo:hi], r1, r2)
        vcp = to_patches(e.vC[:, :, :, lo:hi], r1, r2)
        kap = to_patches(e.kA[:, :, :, lo:hi], r1, r2)
        vap = to_patches(e.vA[:, :, :, lo:hi], r1, r2)
        valid = patch_validity(maskC, r1, r2, cfg.valid_threshold)
        attC, _ = masked_patch_attention(qp, kcp, vcp, valid)
        attA, _ = masked_patch_attention(qp, kap, vap, None)
        outC.append(from_patches(attC, T, h, w, r1, r2, ch))
        outA.append(from_patches(attA, T, h, w, r1, r2, ch))
    return nc.concat(outC + outA, axis=-1)  # (T, h, w, 2c)


def attention_block(state: Tensor, clothes_feat: Tensor, agn_feat: Tensor,
                    maskC: np.ndarray, params: dict, block: int,
                    cfg: GeneratorConfig) -> Tensor:
    if cfg.norm:
        state = convnet.channel_rmsnorm(state)
    e = embed(state, clothes_feat, agn_feat, params, block)
    both = dual_stream_attention(e, maskC, cfg)
    o = _pointwise(both, params[f"blk{block}.fuse.w"], params[f"blk{block}.fuse.b"])
    return o


def fuse_clothes(i_r: Tensor, m_c: Tensor, warped_clothes: Tensor) -> Tensor:
    """Soft composition of rendered frames with the warped clothes."""
    i_r, m_c = nc.as_tensor(i_r), nc.as_tensor(m_c)
    warped_clothes = nc.as_tensor(warped_clothes)
    if np.any(m_c.data < 0.0) or np.any(m_c.data > 1.0):
        raise ContractError("composition mask must lie in [0, 1]")
    m3 = nc.concat([m_c, m_c, m_c], axis=-1)
    return m3 * warped_clothes + (1.0 - m3) * i_r


def fuse_background(i_masked: Tensor, agn: Tensor, m_a) -> Tensor:
    """Paste the preserved (agnostic) content back: where the agnostic mask
    is 1 the output *is* the agnostic image, bit for bit."""
    i_masked, agn = nc.as_tensor(i_masked), nc.as_tensor(agn)
    m = np.asarray(m_a.data if isinstance(m_a, Tensor) else m_a, dtype=np.float64)
    if m.ndim == i_masked.ndim - 1:
        m = m[..., None]
    m = np.broadcast_to(m, i_masked.shape)
    mt = Tensor(m.copy())
    return (1.0 - mt) * i_masked + mt * agn


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool a (T, H, W) mask to feature resolution."""
    T, H, W = mask.shape
    return mask.reshape(T, H // factor, factor, W // factor, factor).max(axis=(2, 4))


def generator_forward(clothes_seq, shape_seq, agn_seq, maskC, m_a,
                      params: dict, cfg: GeneratorConfig) -> dict:
    """Full forward pass.  Inputs are (T, H, W, C) sequences; ``maskC`` is the
    full-resolution visible-clothing mask (T, H, W) and ``m_a`` the agnostic
    mask.  Returns rendered frames, composition mask and both fusions.
    """
    clothes_seq = nc.as_tensor(clothes_seq)
    shape_seq = nc.as_tensor(shape_seq)
    agn_seq = nc.as_tensor(agn_seq)
    T, H, W, _ = clothes_seq.shape
    if shape_seq.shape[:3] != (T, H, W) or agn_seq.shape[:3] != (T, H, W):
        raise ShapeError("generator streams must share T, H, W")
    maskC = np.asarray(maskC, dtype=np.float64)
    if maskC.shape != (T, H, W):
        raise ShapeError(f"maskC shape {maskC.shape} != {(T, H, W)}")

    cfeat = encode(clothes_seq, params, "enc_c")
    state = encode(shape_seq, params, "enc_s")
    afeat = encode(agn_seq, params, "enc_a")
    mask_lo = downsample_mask(maskC, cfg.downsample)

    if cfg.positional:
        state = state + params["pos"]

    for b in range(cfg.blocks):
        state = state + attention_block(state, cfeat, afeat, mask_lo, params, b, cfg)

    i_r, m_c = decode(state, params)
    i_masked = fuse_clothes(i_r, m_c, clothes_seq)
    i_final = fuse_background(i_masked, agn_seq, m_a)
    return {"i_r": i_r, "m_c": m_c, "i_masked": i_masked, "i_final": i_final}
