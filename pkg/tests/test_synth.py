import numpy as np
import pytest

from vtryon.geometry import FlowField, warp_by_flow
from vtryon.numcore import Tensor
from vtryon.synth import SceneError, SynthScene, noisy_flows, synth_scene


def test_scene_is_seed_deterministic():
    a = synth_scene(SynthScene(seed=3, T=3, H=32, W=32, garment_size=(10, 8),
                               garment_pos=(8, 8), velocity=(1, 1)))
    b = synth_scene(SynthScene(seed=3, T=3, H=32, W=32, garment_size=(10, 8),
                               garment_pos=(8, 8), velocity=(1, 1)))
    for role in a.tensors:
        np.testing.assert_array_equal(a[role], b[role])
    c = synth_scene(SynthScene(seed=4, T=3, H=32, W=32, garment_size=(10, 8),
                               garment_pos=(8, 8), velocity=(1, 1)))
    assert not np.array_equal(a["frames"], c["frames"])


def test_scene_ground_truth_flow_reproduces_garment():
    # warping the static clothes image by the ground-truth appearance flow
    # must reproduce the garment pixels of every frame exactly
    spec = SynthScene(seed=0, T=4, H=32, W=32, garment_size=(10, 8),
                      garment_pos=(4, 4), velocity=(2, 3))
    b = synth_scene(spec)
    for t in range(b.T):
        flow = FlowField(b.H, b.W, Tensor(b["gt_flows"][t]))
        warped = warp_by_flow(Tensor(b["clothes"]), flow).data
        region = b["garment_mask"][t] > 0
        np.testing.assert_allclose(warped[region], b["frames"][t][region],
                                   atol=1e-12)


def test_scene_optical_flow_is_framewise_velocity():
    b = synth_scene(SynthScene(seed=1, T=3, H=24, W=24, garment_size=(6, 6),
                               garment_pos=(4, 4), velocity=(1, 2)))
    from vtryon.geometry import identity_flow

    ident = identity_flow(24, 24).coords.data
    np.testing.assert_array_equal(b["optical_flows"][0], ident)
    for t in (1, 2):
        np.testing.assert_array_equal(
            b["optical_flows"][t], ident - np.array([2.0, 1.0])
        )


def test_scene_occluder_footprint_and_labels():
    spec = SynthScene(seed=2, T=3, H=48, W=48, garment_size=(16, 12),
                      garment_pos=(12, 12), occluder_center=(20, 18),
                      occluder_radius=(5, 3), occluder_frames=(1,))
    b = synth_scene(spec)
    occ = b["occlusion"]
    assert occ[0].sum() == 0 and occ[2].sum() == 0
    assert occ[1].sum() > 0
    blob = occ[1] > 0
    # occluder pixels are painted the flat red color and parsed as "other"
    expected = np.broadcast_to([0.95, 0.1, 0.1], b["frames"][1][blob].shape)
    np.testing.assert_allclose(b["frames"][1][blob], expected)
    assert np.all(b["seg"][1][blob] == 0)
    assert np.all(b["matte"][1][blob] == 1.0)


def test_scene_hands_block_in_dense_map():
    b = synth_scene(SynthScene(seed=0, T=2, H=24, W=24, garment_size=(8, 8),
                               garment_pos=(8, 8), hands_block=(10, 10, 3)))
    assert np.all(b["dense"][0, 10:13, 10:13] > 0)
    assert b["dense"][0].sum() == b["dense"][0, 10:13, 10:13].sum()


def test_scene_out_of_frame_errors():
    with pytest.raises(SceneError, match="garment out of frame"):
        synth_scene(SynthScene(T=8, H=32, W=32, garment_size=(10, 8),
                               garment_pos=(20, 20), velocity=(2, 2)))
    with pytest.raises(SceneError, match="occluder out of frame"):
        synth_scene(SynthScene(T=2, H=32, W=32, garment_size=(8, 8),
                               garment_pos=(8, 8), occluder_center=(2, 2),
                               occluder_radius=(6, 4), occluder_frames=(0,)))


def test_noisy_flows_statistics():
    b = synth_scene(SynthScene(seed=0, T=3, H=32, W=32, garment_size=(8, 8),
                               garment_pos=(8, 8)))
    flows = noisy_flows(b, sigma=0.01, seed=9)
    again = noisy_flows(b, sigma=0.01, seed=9)
    np.testing.assert_array_equal(flows, again)  # seeded
    resid = flows - b["gt_flows"]
    # x residuals scale with W-1, y residuals with H-1
    assert abs(resid[..., 0].std() - 0.01 * 31) < 0.01 * 31 * 0.2
    assert np.all(noisy_flows(b, 0.0, 0) == b["gt_flows"])
