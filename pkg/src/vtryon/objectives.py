"""Try-on training losses, the Adam optimizer, and evaluation metrics.

The perceptual term accepts any extractor that maps an image sequence to a
list of feature tensors; a frozen random-convolution stack is provided for
desk-scale use.  The adversarial terms are the hinge pair of a temporal
patch discriminator (a small frozen 3-D conv stack ships as the default
scorer).  SSIM and the Gaussian Frechet distance cover evaluation; feature
vectors for the Frechet distance come from outside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from . import convnet, numcore as nc
from .numcore import ContractError, ShapeError, Tensor


class OptimizationError(RuntimeError):
    pass


# -- reconstruction losses -----------------------------------------------------


def l1_whole(pred: Tensor, target: Tensor) -> Tensor:
    pred, target = nc.as_tensor(pred), nc.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_whole: shapes {pred.shape} and {target.shape} differ")
    return nc.reduce_mean(nc.absolute(pred - target))


def l1_clothes(pred: Tensor, target: Tensor, m_c: Tensor) -> Tensor:
    """Masked absolute difference normalized by the mask mass."""
    pred, target, m_c = nc.as_tensor(pred), nc.as_tensor(target), nc.as_tensor(m_c)
    mask = m_c
    if m_c.ndim == pred.ndim - 1:
        mask = nc.reshape(m_c, m_c.shape + (1,))
    if mask.shape[-1] == 1 and pred.shape[-1] != 1:
        mask = nc.concat([mask] * pred.shape[-1], axis=-1)
    if mask.shape != pred.shape:
        raise ShapeError(f"l1_clothes: mask {m_c.shape} does not fit {pred.shape}")
    denom = float(np.sum(mask.data))
    if denom == 0.0:
        raise ContractError("l1_clothes: mask is identically zero")
    num = nc.reduce_sum(mask * nc.absolute(pred - target))
    return num * (1.0 / denom)


def perceptual_loss(pred: Tensor, target: Tensor, extractor) -> Tensor:
    """Sum over extractor layers of element-count-normalized L1 differences."""
    fp = extractor(nc.as_tensor(pred))
    ft = extractor(nc.as_tensor(target))
    if len(fp) != len(ft):
        raise ContractError(
            f"extractor layer counts differ: {len(fp)} vs {len(ft)}"
        )
    total = None
    for a, b in zip(fp, ft):
        if a.shape != b.shape:
            raise ContractError("extractor features have mismatched shapes")
        term = nc.reduce_sum(nc.absolute(a - b)) * (1.0 / a.size)
        total = term if total is None else total + term
    return total


def tpgan_g_loss(fake_scores: Tensor) -> Tensor:
    """Generator hinge term: negated mean discriminator score on fakes."""
    return -nc.reduce_mean(nc.as_tensor(fake_scores))


def tpgan_d_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """Discriminator hinge: RELU(1 - D(real)) + RELU(1 + D(fake)), in means."""
    real, fake = nc.as_tensor(real_scores), nc.as_tensor(fake_scores)
    return nc.reduce_mean(nc.relu(1.0 - real)) + nc.reduce_mean(nc.relu(1.0 + fake))


@dataclass
class TryOnLossConfig:
    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 1.0
    lambda4: float = 0.01
    feature_extractor: object = None  # None: perceptual term contributes 0
    discriminator: object = None  # None: adversarial term contributes 0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ContractError("loss weights must be >= 0")


def tryon_loss(pred: Tensor, target: Tensor, m_c: Tensor,
               cfg: TryOnLossConfig) -> Tensor:
    """Weighted sum of whole-image L1, clothes L1, perceptual and hinge terms."""
    total = cfg.lambda1 * l1_whole(pred, target)
    if cfg.lambda2 != 0.0:
        total = total + cfg.lambda2 * l1_clothes(pred, target, m_c)
    if cfg.lambda3 != 0.0 and cfg.feature_extractor is not None:
        total = total + cfg.lambda3 * perceptual_loss(pred, target, cfg.feature_extractor)
    if cfg.lambda4 != 0.0 and cfg.discriminator is not None:
        total = total + cfg.lambda4 * tpgan_g_loss(cfg.discriminator(pred))
    return total


# -- frozen desk-scale feature extractor and discriminator ----------------------


class RandomFeatureExtractor:
    """Frozen 3-layer strided random-conv stack; a fixed Lipschitz feature map."""

    def __init__(self, in_channels=3, widths=(8, 16, 32), seed=7):
        rng = np.random.default_rng(seed)
        self.layers = []
        ci = in_channels
        for co in widths:
            w = Tensor(convnet.init_conv(rng, (3, 3, ci, co)))
            b = Tensor(np.zeros(co))
            self.layers.append((w, b))
            ci = co

    def __call__(self, seq: Tensor):
        x = nc.as_tensor(seq)
        feats = []
        for w, b in self.layers:
            x = nc.relu(convnet.conv2d(x, w, b, stride=2, padding=1))
            feats.append(x)
        return feats


class IdentityExtractor:
    """Single layer returning the image itself; collapses Lperc to L1."""

    def __call__(self, seq: Tensor):
        return [nc.as_tensor(seq)]


class TemporalPatchDiscriminator:
    """Three strided 3x3x3 convolutions producing a spatio-temporal score map."""

    def __init__(self, in_channels=3, widths=(8, 16, 1), seed=11,
                 trainable=False):
        rng = np.random.default_rng(seed)
        self.params = {}
        ci = in_channels
        for i, co in enumerate(widths):
            self.params[f"w{i}"] = Tensor(
                convnet.init_conv(rng, (3, 3, 3, ci, co)), requires_grad=trainable
            )
            self.params[f"b{i}"] = Tensor(np.zeros(co), requires_grad=trainable)
            ci = co
        self.n_layers = len(widths)

    def __call__(self, seq: Tensor) -> Tensor:
        x = nc.as_tensor(seq)
        for i in range(self.n_layers):
            x = convnet.conv3d(x, self.params[f"w{i}"], self.params[f"b{i}"],
                               stride=(1, 2, 2), padding=(1, 1, 1))
            if i < self.n_layers - 1:
                x = nc.relu(x)
        return x


# -- Adam ------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update; deterministic, returns new arrays."""
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise OptimizationError(f"non-finite gradient for {name}")
        if g.shape != np.shape(p):
            raise ShapeError(f"grad shape {g.shape} != param shape {np.shape(p)}")
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - state.beta1**t)
        vhat = v / (1 - state.beta2**t)
        out[name] = np.asarray(p) - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return out


# -- metrics ----------------------------------------------------------------------


def _gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a: np.ndarray, b: np.ndarray, k1=0.01, k2=0.03, dynamic_range=1.0,
         window_size=11, sigma=1.5) -> float:
    """Mean local structural similarity with the original constants.

    Color inputs are reduced to grayscale by the channel mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    if min(a.shape) < window_size:
        raise ContractError(
            f"image {a.shape} smaller than {window_size}x{window_size} window"
        )
    win = _gaussian_window(window_size, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    mu_a = convolve2d(a, win, mode="valid")
    mu_b = convolve2d(b, win, mode="valid")
    var_a = convolve2d(a * a, win, mode="valid") - mu_a**2
    var_b = convolve2d(b * b, win, mode="valid") - mu_b**2
    cov = convolve2d(a * b, win, mode="valid") - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; negative eigenvalues clamp to 0."""
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mean1, cov1, mean2, cov2) -> float:
    """Frechet distance between two Gaussians.

    ||m1 - m2||^2 + tr(c1 + c2 - 2 (c1 c2)^{1/2}), the matrix square root
    taken by eigendecomposition with negative-eigenvalue clamping.
    """
    m1, m2 = np.asarray(mean1, dtype=np.float64), np.asarray(mean2, dtype=np.float64)
    c1, c2 = np.asarray(cov1, dtype=np.float64), np.asarray(cov2, dtype=np.float64)
    for c in (c1, c2):
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ShapeError(f"covariance must be square, got {c.shape}")
        if np.max(np.abs(c - c.T)) > 1e-8:
            raise ContractError("covariance is asymmetric beyond 1e-8")
    s1 = _sym_sqrt(c1)
    inner = s1 @ c2 @ s1
    inner = 0.5 * (inner + inner.T)
    vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_sqrt = float(np.sum(np.sqrt(vals)))
    fd = float(np.sum((m1 - m2) ** 2) + np.trace(c1) + np.trace(c2) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


def gaussian_fit(features: np.ndarray):
    """Mean and covariance of row-stacked feature vectors."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError("need at least 2 feature vectors")
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    return mean, np.atleast_2d(cov)
