"""End-to-end desk-scale orchestration.

Stage order: agnostic composition, per-frame anti-occlusion warp fitting
(TPS stage, occlusion masking, dense-flow stage), temporal flow tracking,
the final warp, the generator forward pass, then metrics.  Intermediates
are written as CFT tensors; metric tables are CSV with figures alongside.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import agnostic, flowtrack, generator, geometry, objectives, report, warpfit
from .bundle import SequenceBundle, save_named_tensors
from .cft import write_tensor
from .config import default_config
from .flowtrack import TrackConfig
from .numcore import Tensor, backward
from .warpfit import WarpLossConfig


class PipelineError(RuntimeError):
    def __init__(self, stage, frame, cause):
        self.stage, self.frame, self.cause = stage, frame, cause
        where = f"stage {stage}" + (f", frame {frame}" if frame is not None else "")
        super().__init__(f"{where}: {cause}")


def _run_stage(stage, frame, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except Exception as e:  # noqa: BLE001 - rewrapped with location info
        raise PipelineError(stage, frame, e) from e


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("CFT_THREADS", "1")))
    except ValueError:
        return 1


def _frame_map(fn, items):
    """Apply fn per frame, optionally in parallel (frames are independent)."""
    workers = max_workers()
    if workers == 1:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda it: fn(*it), items))


def _warp_cfg(cfg) -> WarpLossConfig:
    w = cfg["warp"]
    return WarpLossConfig(
        lambda_sdc=w["lambda_sdc"],
        lambda_sec=w["lambda_sec"],
        charbonnier_alpha=w["charbonnier_alpha"],
        charbonnier_eps=w["charbonnier_eps"],
    )


def _track_cfg(cfg) -> TrackConfig:
    t = cfg["track"]
    return TrackConfig(window_n=t["window_n"], mu=t["mu"], epsilon=t["epsilon"])


def toy_generator_config(cfg, t, h, w, seed=0) -> generator.GeneratorConfig:
    toy = cfg["toy"]
    return generator.GeneratorConfig(
        channels=toy["channels"],
        blocks=toy["blocks"],
        heads=toy["heads"],
        patch_sizes=[(p, p) for p in toy["patch_sizes"]],
        shape_channels=2,
        seed=seed,
    )


def shape_stream(bundle: SequenceBundle) -> np.ndarray:
    """Person-shape input: normalized body-surface labels plus pose heatmaps."""
    T, H, W = bundle.T, bundle.H, bundle.W
    dense = bundle["dense"]
    dmax = max(dense.max(), 1.0)
    pose = bundle["pose"]
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    heat = np.zeros((T, H, W))
    sigma2 = 2.0 * (0.03 * max(H, W)) ** 2
    for t in range(T):
        for kx, ky in pose[t]:
            heat[t] += np.exp(-((yy - ky) ** 2 + (xx - kx) ** 2) / sigma2)
    heat = np.clip(heat, 0.0, 1.0)
    return np.stack([dense / dmax, heat], axis=-1)


def garment_region(bundle: SequenceBundle, label_table=None) -> np.ndarray:
    table = label_table or agnostic.DEFAULT_LABEL_TABLE
    return np.isin(bundle["seg"], table["clothes"]).astype(np.float64)


@dataclass
class WarpFitResult:
    tps: list  # per-frame TpsParams
    masked_clothes: np.ndarray  # (T, H, W, 3)
    flows: list  # per-frame FlowField (raw, before tracking)


def run_warp_fit(bundle: SequenceBundle, cfg=None) -> WarpFitResult:
    """Stages: TPS fit, occlusion masking, dense-flow fit, per frame."""
    cfg = cfg or default_config()
    wl = _warp_cfg(cfg)
    w = cfg["warp"]
    T, H, W = bundle.T, bundle.H, bundle.W
    clothes = bundle["clothes"]
    clothes_mask = (
        bundle["clothes_mask"]
        if "clothes_mask" in bundle
        else np.any(clothes != 0, axis=-1).astype(np.float64)
    )
    region = garment_region(bundle)
    targets = bundle["frames"] * region[..., None]
    occl = bundle["occlusion"] if "occlusion" in bundle else np.zeros((T, H, W))

    def fit_one(t):
        tps = _run_stage(
            "tps-fit", t, warpfit.fit_tps, clothes, targets[t], wl,
            steps=w["tps_steps"], lr=w["tps_lr"],
            grid=(w["tps_grid"], w["tps_grid"]),
        )
        masked = _run_stage(
            "occlusion-mask", t, agnostic.mask_occluded_clothes,
            clothes, tps, occl[t], clothes_mask,
        )
        flow = _run_stage(
            "flow-fit", t, warpfit.fit_flow, Tensor(masked), Tensor(targets[t]),
            wl, steps=w["flow_steps"], lr=w["flow_lr"], scales=w["flow_scales"],
        )
        return tps, masked, flow

    results = _frame_map(fit_one, [(t,) for t in range(T)])
    return WarpFitResult(
        tps=[r[0] for r in results],
        masked_clothes=np.stack([r[1] for r in results]),
        flows=[r[2] for r in results],
    )


def _flows_from_array(arr: np.ndarray):
    return [geometry.FlowField(a.shape[0], a.shape[1], Tensor(a)) for a in arr]


def _flows_to_array(flows) -> np.ndarray:
    return np.stack([f.coords.data for f in flows])


def compute_omegas(bundle: SequenceBundle, flows, clothes_mask) -> np.ndarray:
    """Clothing region on the frame intersected with the warped support."""
    region = garment_region(bundle)
    omegas = []
    for t, flow in enumerate(flows):
        support = geometry.warp_by_flow(Tensor(clothes_mask), flow).data > 0.5
        omegas.append((region[t] > 0) & support)
    return np.stack(omegas)


def run_pipeline(bundle: SequenceBundle, cfg=None, outdir=None, seed=0) -> dict:
    """Full run: agnostic, warp fit, tracking, warp, generator, metrics."""
    cfg = cfg or default_config()
    bundle.validate()
    T, H, W = bundle.T, bundle.H, bundle.W
    ag = cfg["agnostic"]
    radius = max(1, round(ag["dilation_radius"] * max(H, W) / 256.0))

    agnostics, m_a, occl = [], [], []
    for t in range(T):
        maps = agnostic.LabelMaps(
            bundle["seg"][t], bundle["dense"][t], bundle["pose"][t],
            bundle["matte"][t],
        )
        res = _run_stage("agnostic", t, agnostic.compose_agnostic,
                         bundle["frames"][t], maps, radius, ag["fill_value"])
        agnostics.append(res.agnostic_img)
        m_a.append(res.agnostic_mask.astype(np.float64))
        occl.append(res.occlusion_mask.astype(np.float64))
    agnostics = np.stack(agnostics)
    m_a = np.stack(m_a)

    fit = run_warp_fit(bundle, cfg)
    clothes_mask = (
        bundle["clothes_mask"]
        if "clothes_mask" in bundle
        else np.any(bundle["clothes"] != 0, axis=-1).astype(np.float64)
    )
    omegas = compute_omegas(bundle, fit.flows, clothes_mask)
    tracked = _run_stage(
        "track", None, flowtrack.track_sequence,
        fit.flows, _flows_from_array(bundle["optical_flows"]), omegas,
        _track_cfg(cfg),
    )

    warped_raw = np.stack(
        [geometry.warp_by_flow(Tensor(fit.masked_clothes[t]), fit.flows[t]).data
         for t in range(T)]
    )
    warped = np.stack(
        [geometry.warp_by_flow(Tensor(fit.masked_clothes[t]), tracked[t]).data
         for t in range(T)]
    )
    mask_c_vis = np.stack(
        [geometry.warp_by_flow(Tensor(clothes_mask), f).data > 0.5 for f in tracked]
    ).astype(np.float64)

    gen_cfg = toy_generator_config(cfg, T, H, W, seed=seed)
    params = generator.init_params(gen_cfg)
    # the generator keeps agnostic content only where nothing was masked out
    out = _run_stage(
        "generator", None, generator.generator_forward,
        Tensor(warped), Tensor(shape_stream(bundle)), Tensor(agnostics),
        mask_c_vis, 1.0 - m_a, params, gen_cfg,
    )

    of = _flows_from_array(bundle["optical_flows"])
    region = garment_region(bundle)
    jitter_before = flowtrack.jitter_metric(list(warped_raw), of, list(region))
    jitter_after = flowtrack.jitter_metric(list(warped), of, list(region))
    ssim_frames = [
        objectives.ssim(out["i_final"].data[t], bundle["frames"][t])
        for t in range(T)
    ]

    results = {
        "agnostic": agnostics,
        "m_a": m_a,
        "occlusion": np.stack(occl),
        "masked_clothes": fit.masked_clothes,
        "flows_raw": _flows_to_array(fit.flows),
        "flows_tracked": _flows_to_array(tracked),
        "warped_clothes": warped,
        "output": out["i_final"].data,
        "m_c": out["m_c"].data,
        "jitter_before": jitter_before,
        "jitter_after": jitter_after,
        "ssim": ssim_frames,
    }
    if outdir:
        write_outputs(results, outdir)
    return results


def write_outputs(results: dict, outdir):
    os.makedirs(outdir, exist_ok=True)
    for name in ("agnostic", "m_a", "occlusion", "masked_clothes", "flows_raw",
                 "flows_tracked", "warped_clothes", "output", "m_c"):
        write_tensor(os.path.join(outdir, f"{name}.cft"), results[name])
    rows = [[t, f"{s:.6f}"] for t, s in enumerate(results["ssim"])]
    report.write_csv(os.path.join(outdir, "metrics.csv"),
                     ["frame", "ssim"], rows)
    report.write_csv(
        os.path.join(outdir, "jitter.csv"),
        ["measure", "value"],
        [["jitter_before", f"{results['jitter_before']:.8f}"],
         ["jitter_after", f"{results['jitter_after']:.8f}"]],
    )
    report.line_figure(os.path.join(outdir, "ssim.png"),
                       {"ssim": results["ssim"]},
                       "frame", "ssim", "per-frame SSIM vs reference")
    report.line_figure(
        os.path.join(outdir, "jitter.png"),
        {"before": [results["jitter_before"]] * 2,
         "after": [results["jitter_after"]] * 2},
        "", "jitter", "warped-clothes jitter before/after tracking",
    )
    report.image_grid(
        os.path.join(outdir, "frames.png"),
        [results["output"][t] for t in range(results["output"].shape[0])],
        titles=[f"t={t}" for t in range(results["output"].shape[0])],
    )


def train_toy(bundle: SequenceBundle, cfg=None, steps=500, lr=None, seed=0,
              outdir=None) -> dict:
    """Overfit the generator on one small scene; validates that gradients
    flow end to end.  The adversarial weight is zero and the discriminator
    stays frozen."""
    cfg = cfg or default_config()
    toy = cfg["toy"]
    lr = toy["train_lr"] if lr is None else lr
    T, H, W = bundle.T, bundle.H, bundle.W

    # ground-truth-driven inputs keep the loop focused on the generator
    flows = _flows_from_array(bundle["gt_flows"]) if "gt_flows" in bundle else None
    if flows is None:
        flows = run_warp_fit(bundle, cfg).flows
    warped = np.stack(
        [geometry.warp_by_flow(Tensor(bundle["clothes"]), f).data for f in flows]
    )
    region = garment_region(bundle)
    ag = cfg["agnostic"]
    agnostics, m_a = [], []
    for t in range(T):
        maps = agnostic.LabelMaps(bundle["seg"][t], bundle["dense"][t],
                                  bundle["pose"][t], bundle["matte"][t])
        res = agnostic.compose_agnostic(bundle["frames"][t], maps, 1,
                                        ag["fill_value"])
        agnostics.append(res.agnostic_img)
        m_a.append(res.agnostic_mask.astype(np.float64))
    agnostics, m_a = np.stack(agnostics), np.stack(m_a)

    gen_cfg = toy_generator_config(cfg, T, H, W, seed=seed)
    params = generator.init_params(gen_cfg)
    loss_cfg = objectives.TryOnLossConfig(
        lambda1=cfg["tryon"]["lambda1"], lambda2=cfg["tryon"]["lambda2"],
        lambda3=cfg["tryon"]["lambda3"], lambda4=0.0,
        feature_extractor=objectives.RandomFeatureExtractor(seed=seed + 1),
    )
    target = Tensor(bundle["frames"])
    shape_in = Tensor(shape_stream(bundle))
    clothes_in = Tensor(warped)
    agn_in = Tensor(agnostics)
    m_c_region = Tensor(region)
    state = objectives.AdamState(lr=lr, beta1=cfg["adam"]["beta1"],
                                 beta2=cfg["adam"]["beta2"])

    losses = []
    for step in range(steps):
        out = generator.generator_forward(clothes_in, shape_in, agn_in,
                                          region, 1.0 - m_a, params, gen_cfg)
        loss = objectives.tryon_loss(out["i_final"], target, m_c_region, loss_cfg)
        losses.append(float(loss.data))
        if not np.isfinite(losses[-1]):
            raise objectives.OptimizationError(f"loss diverged at step {step}")
        backward(loss)
        grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape))
                 for k, p in params.items()}
        new = objectives.adam_step({k: p.data for k, p in params.items()},
                                   grads, state)
        params = {k: Tensor(v, requires_grad=True) for k, v in new.items()}

    result = {"losses": losses, "params": params,
              "initial": losses[0], "final": losses[-1]}
    if outdir:
        os.makedirs(outdir, exist_ok=True)
        report.write_csv(os.path.join(outdir, "loss.csv"), ["step", "loss"],
                         [[i, f"{v:.8f}"] for i, v in enumerate(losses)])
        report.line_figure(os.path.join(outdir, "loss.png"),
                           {"loss": losses}, "step", "loss",
                           "toy overfit loss", logy=True)
        save_named_tensors(os.path.join(outdir, "checkpoint"),
                           {k: p.data for k, p in params.items()})
    return result
