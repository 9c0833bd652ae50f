import numpy as np
import pytest

from vtryon import geometry, numcore as nc
from vtryon.geometry import (
    FlowField,
    TpsParams,
    identity_flow,
    lattice_points,
    tps_apply,
    tps_eval_matrix,
    tps_forward_points,
    tps_reverse_map,
    warp_by_flow,
)
from vtryon.numcore import ContractError, ShapeError, Tensor, backward, gradcheck


def bilinear_oracle(img, coords):
    """Per-pixel scalar-loop bilinear sampler with zero padding."""
    H, W, C = img.shape
    h, w = coords.shape[:2]
    out = np.zeros((h, w, C))
    for i in range(h):
        for j in range(w):
            x, y = coords[i, j]
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            fx, fy = x - x0, y - y0
            acc = np.zeros(C)
            for dy, dx, wgt in (
                (0, 0, (1 - fy) * (1 - fx)),
                (0, 1, (1 - fy) * fx),
                (1, 0, fy * (1 - fx)),
                (1, 1, fy * fx),
            ):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < H and 0 <= xx < W:
                    acc += wgt * img[yy, xx]
            out[i, j] = acc
    return out


def test_identity_flow_values():
    f = identity_flow(3, 4)
    np.testing.assert_array_equal(f.coords.data[1, 2], [2.0, 1.0])
    with pytest.raises(ContractError):
        identity_flow(0, 4)


def test_flowfield_shape_contract():
    with pytest.raises(ShapeError):
        FlowField(3, 4, Tensor(np.zeros((4, 3, 2))))


def test_identity_warp_is_noop():
    img = np.random.default_rng(0).uniform(size=(5, 6, 3))
    out = warp_by_flow(Tensor(img), identity_flow(5, 6))
    np.testing.assert_allclose(out.data, img, atol=1e-12)


def test_warp_matches_bilinear_oracle():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(6, 7, 2))
    coords = identity_flow(6, 7).coords.data + rng.uniform(-2.0, 2.0, (6, 7, 2))
    out = warp_by_flow(Tensor(img), FlowField(6, 7, Tensor(coords)))
    np.testing.assert_allclose(out.data, bilinear_oracle(img, coords), atol=1e-12)


def test_warp_zero_outside_image():
    img = np.ones((4, 4, 1))
    coords = np.full((4, 4, 2), -10.0)
    out = warp_by_flow(Tensor(img), FlowField(4, 4, Tensor(coords)))
    np.testing.assert_array_equal(out.data, np.zeros((4, 4, 1)))


def test_warp_2d_image_squeezes():
    img = np.random.default_rng(2).uniform(size=(4, 5))
    out = warp_by_flow(Tensor(img), identity_flow(4, 5))
    assert out.shape == (4, 5)
    np.testing.assert_allclose(out.data, img, atol=1e-12)


def test_warp_gradcheck_image_and_coords():
    rng = np.random.default_rng(3)
    base = identity_flow(4, 5).coords.data
    # test points offset >= 0.01 px from integer sampling breakpoints
    coords = base + rng.uniform(0.1, 0.4, (4, 5, 2))
    flow = FlowField(4, 5, Tensor(coords))
    sel = Tensor(rng.normal(size=(4, 5, 2)))
    img = rng.uniform(size=(4, 5, 2))

    def f_img(x):
        return nc.reduce_sum(warp_by_flow(x, flow) * sel)

    assert gradcheck(f_img, Tensor(img)) <= 1e-4

    imgt = Tensor(img)

    def f_coords(c):
        return nc.reduce_sum(warp_by_flow(imgt, FlowField(4, 5, c)) * sel)

    assert gradcheck(f_coords, Tensor(coords), h=1e-6) <= 1e-4


def test_lattice_points_cover_image():
    pts = lattice_points(3, 4, 10, 20)
    assert pts.shape == (12, 2)
    np.testing.assert_array_equal(pts[0], [0.0, 0.0])
    np.testing.assert_array_equal(pts[-1], [19.0, 9.0])


def test_tps_eval_matrix_interpolates_controls():
    # at the control points, the interpolant must reproduce the targets
    ctrl = lattice_points(3, 3, 8, 8)
    A = tps_eval_matrix(ctrl, ctrl)
    rng = np.random.default_rng(4)
    targets = ctrl + rng.normal(scale=0.5, size=ctrl.shape)
    np.testing.assert_allclose(A @ targets, targets, atol=1e-8)


def test_tps_eval_matrix_singular_lattice():
    ctrl = np.zeros((4, 2))  # all control points coincide
    with pytest.raises(ContractError):
        tps_eval_matrix(ctrl, ctrl)


def test_tps_zero_offsets_is_identity():
    flow = tps_apply(TpsParams.identity(3, 3), 6, 6)
    np.testing.assert_allclose(
        flow.coords.data, identity_flow(6, 6).coords.data, atol=1e-8
    )


def test_tps_uniform_offset_is_translation():
    off = np.zeros((3, 3, 2))
    off[..., 0] = 2.0  # every control moves +2 in x
    flow = tps_apply(TpsParams(3, 3, Tensor(off)), 6, 6)
    expected = identity_flow(6, 6).coords.data + np.array([2.0, 0.0])
    np.testing.assert_allclose(flow.coords.data, expected, atol=1e-8)


def test_tps_apply_matches_dense_solve_oracle():
    """Independent oracle: solve the full TPS linear system directly."""
    rng = np.random.default_rng(5)
    rows = cols = 4
    h = w = 9
    off = rng.normal(scale=0.7, size=(rows, cols, 2))
    ctrl = lattice_points(rows, cols, h, w)
    targets = ctrl + off.reshape(-1, 2)
    K = ctrl.shape[0]
    d2 = np.sum((ctrl[:, None] - ctrl[None]) ** 2, axis=-1)
    Kmat = np.where(d2 > 0, d2 * np.log(d2, where=d2 > 0), 0.0)
    P = np.concatenate([np.ones((K, 1)), ctrl], axis=1)
    L = np.block([[Kmat, P], [P.T, np.zeros((3, 3))]])
    sol = np.linalg.solve(L, np.concatenate([targets, np.zeros((3, 2))]))
    wts, aff = sol[:K], sol[K:]
    pix = identity_flow(h, w).coords.data.reshape(-1, 2)
    d2p = np.sum((pix[:, None] - ctrl[None]) ** 2, axis=-1)
    U = np.where(d2p > 0, d2p * np.log(d2p, where=d2p > 0), 0.0)
    expected = U @ wts + np.concatenate([np.ones((h * w, 1)), pix], axis=1) @ aff

    flow = tps_apply(TpsParams(rows, cols, Tensor(off)), h, w)
    np.testing.assert_allclose(
        flow.coords.data.reshape(-1, 2), expected, atol=1e-8
    )


def test_tps_apply_grid_too_small():
    with pytest.raises(ContractError):
        tps_apply(TpsParams.identity(2, 3), 6, 6)


def test_tps_apply_gradient_flows_to_offsets():
    off = Tensor(np.zeros((3, 3, 2)), requires_grad=True)
    flow = tps_apply(TpsParams(3, 3, off), 5, 5)
    backward(nc.reduce_sum(flow.coords))
    assert off.grad is not None
    # coordinates are affine in offsets; column sums of the eval matrix
    assert np.all(np.abs(off.grad) > 0)


def test_tps_forward_points_translation():
    off = np.zeros((3, 3, 2))
    off[..., 1] = -1.5
    pts = np.array([[2.0, 3.0], [0.0, 0.0]])
    mapped = tps_forward_points(TpsParams(3, 3, Tensor(off)), pts, 8, 8)
    np.testing.assert_allclose(mapped, pts + np.array([0.0, -1.5]), atol=1e-8)


def test_tps_reverse_map_identity_and_translation():
    region = np.zeros((8, 8))
    region[2:5, 3:6] = 1.0
    ident = tps_reverse_map(TpsParams.identity(3, 3), region)
    np.testing.assert_array_equal(ident, region > 0)

    off = np.zeros((3, 3, 2))
    off[..., 0] = 2.0  # forward map shifts +2 in x
    shifted = tps_reverse_map(TpsParams(3, 3, Tensor(off)), region)
    expected = np.zeros((8, 8), dtype=bool)
    expected[2:5, 1:4] = True  # preimage sits 2 px to the left
    np.testing.assert_array_equal(shifted, expected)


def test_tps_reverse_map_rejects_bad_region():
    with pytest.raises(ShapeError):
        tps_reverse_map(TpsParams.identity(3, 3), np.zeros((4, 4, 2)))
