import numpy as np
import pytest

from priorwarp.diffengine import Tape, add, backward, flat_grad, mse, reshape, take_rows
from priorwarp.diffengine.gradcheck import max_relative_error
from priorwarp.diffeo import (
    DISPLACEMENT,
    VELOCITY,
    DeformationField,
    GridMismatchError,
    VectorFieldGrid,
    compose,
    compose_fields,
    integrate_scaling_squaring,
    integrate_velocity,
    inverse_consistency,
    jacobian_analysis,
    load_field,
    save_field,
    warp_volume,
)
from priorwarp.inr import DefNet, RefNet, defnet_eval, refnet_eval
from priorwarp.trainer import render_refnet
from priorwarp.volume import Volume, grid_points

CHAIN_STEP = 1e-6


def _interior(dims, margin_vox):
    m = int(np.ceil(margin_vox)) + 1
    return tuple(slice(m, d - m) for d in dims)


def _affine(dims, A, p0):
    P = grid_points(dims)
    return (P - p0) @ np.asarray(A).T


def test_zero_velocity_is_exact_identity():
    u = integrate_velocity(np.zeros((6, 7, 8, 3)), 7)
    assert np.all(u == 0.0)


def test_constant_velocity_exact_interior():
    dims = (16, 16, 16)
    c = np.array([0.05, -0.03, 0.02])
    v = np.broadcast_to(c, dims + (3,)).copy()
    u = integrate_scaling_squaring(VectorFieldGrid(v, VELOCITY), steps=7)
    assert u.kind == DISPLACEMENT
    inner = _interior(dims, np.max(np.abs(c)) * 15)
    assert np.max(np.abs(u.data[inner] - c)) < 1e-9


def test_integration_requires_velocity():
    with pytest.raises(ValueError):
        integrate_scaling_squaring(VectorFieldGrid(np.zeros((3, 3, 3, 3))))
    with pytest.raises(ValueError):
        integrate_velocity(np.zeros((3, 3, 3, 3)), 0)


def test_compose_identity_element(rng):
    u = rng.normal(scale=0.01, size=(5, 6, 7, 3))
    zero = np.zeros_like(u)
    assert np.array_equal(compose_fields(u, zero), u)
    assert np.array_equal(compose_fields(zero, u), u)


def test_compose_constants_add():
    dims = (10, 10, 10)
    a = np.broadcast_to([0.02, 0.0, -0.01], dims + (3,))
    b = np.broadcast_to([-0.01, 0.03, 0.0], dims + (3,))
    out = compose(VectorFieldGrid(a), VectorFieldGrid(b)).data
    inner = _interior(dims, 1)
    assert np.allclose(out[inner], a[inner] + b[inner], rtol=0, atol=1e-15)


def test_compose_grid_mismatch():
    with pytest.raises(GridMismatchError):
        compose_fields(np.zeros((4, 4, 4, 3)), np.zeros((4, 4, 5, 3)))


def test_compose_affine_closed_form():
    dims = (17, 17, 17)
    A = np.array([[0.05, 0.01, 0.0], [-0.02, 0.03, 0.01], [0.0, 0.02, -0.04]])
    p0 = np.array([0.5, 0.5, 0.5])
    u = _affine(dims, A, p0)
    got = compose_fields(u, u)
    expected = _affine(dims, 2 * A + A @ A, p0)
    inner = _interior(dims, 2)
    assert np.max(np.abs(got[inner] - expected[inner])) < 1e-12


def _smooth_field(dims, amp, phase):
    P = grid_points(dims)
    return amp * np.stack([np.sin(np.pi * (P[..., (c + 1) % 3] + phase[c])) for c in range(3)], axis=-1)


def test_compose_associative_on_smooth_fields():
    errs = []
    for n in (17, 33):
        dims = (n, n, n)
        a, b, c = (_smooth_field(dims, 0.02, ph) for ph in ([0, 0.3, 0.6], [0.1, 0.5, 0.2], [0.7, 0.4, 0.9]))
        left = compose_fields(compose_fields(a, b), c)
        right = compose_fields(a, compose_fields(b, c))
        inner = _interior(dims, 0.05 * (n - 1))
        errs.append(np.max(np.abs(left[inner] - right[inner])))
    h = [1 / 16, 1 / 32]
    assert errs[0] < 0.05 * h[0] ** 2
    # interpolation error shrinks at the second-order rate
    assert errs[1] < errs[0] / 3


def test_warp_identity_trilinear_exact(rng):
    ref = Volume(rng.uniform(size=(6, 7, 8)))
    out = warp_volume(ref, np.zeros((6, 7, 8, 3)), backend="trilinear")
    assert np.array_equal(out.data, ref.data)


def test_warp_one_voxel_shift_on_ramp():
    dims = (10, 8, 8)
    ramp = Volume(np.indices(dims)[0] / 9.0)
    u = np.zeros(dims + (3,))
    u[..., 0] = 1.0 / 9.0
    out = warp_volume(ramp, u, backend="trilinear")
    assert np.allclose(out.data[:-1], ramp.data[1:], atol=1e-14)


def test_warp_identity_refnet_matches_render():
    net = RefNet.create(depth=2, width=16, n_features=16, seed=0)
    dims = (5, 5, 5)
    out = warp_volume(net, np.zeros(dims + (3,)), backend="refnet")
    assert np.array_equal(out.data, render_refnet(net, dims).data)


def test_warp_backend_requirements(rng):
    ref = Volume(rng.uniform(size=(4, 4, 4)))
    with pytest.raises(ValueError):
        warp_volume(ref, np.zeros((4, 4, 4, 3)), backend="refnet")
    with pytest.raises(GridMismatchError):
        warp_volume(ref, np.zeros((4, 4, 5, 3)), backend="trilinear")


def test_jacobian_identity():
    det, folds = jacobian_analysis(np.zeros((5, 6, 7, 3)))
    assert np.all(det == 1.0) and folds == 0


@pytest.mark.parametrize("a", [0.2, -0.3, -1.5])
def test_jacobian_uniform_scaling(a):
    dims = (9, 9, 9)
    u = _affine(dims, a * np.eye(3), np.array([0.5, 0.5, 0.5]))
    det, folds = jacobian_analysis(u)
    assert np.allclose(det, (1 + a) ** 3, atol=1e-12)
    if a == -1.5:
        assert det[4, 4, 4] == pytest.approx(-0.125) and folds == det.size
    else:
        assert folds == 0


def test_jacobian_needs_three_voxels():
    with pytest.raises(ValueError):
        jacobian_analysis(np.zeros((2, 5, 5, 3)))


def test_chain_gradient_defnet_to_loss(rng):
    dims = (8, 8, 8)
    P = grid_points(dims).reshape(-1, 3)
    defnet = DefNet.create("temporal", (1, 4), depth=2, width=16, n_features=16, seed=3)
    # move off the zero-initialized head so every factor of the chain is exercised
    defnet.params["l2.W"] = rng.normal(0, 0.02, (3, 16))
    defnet.params["l2.b"] = rng.normal(0, 0.01, 3)
    refnet = RefNet.create(depth=2, width=16, n_features=16, seed=2)
    rows = rng.choice(len(P), 100, replace=False)
    target = rng.uniform(size=100)

    def chain(leaves=None):
        v = reshape(defnet_eval(defnet, P, 2.0, leaves), dims + (3,))
        u = integrate_velocity(v, 7)
        return mse(refnet_eval(refnet, add(P[rows], take_rows(u, rows))), target)

    tape = Tape()
    leaves = tape.watch(defnet.params)
    backward(tape, chain(leaves))
    g = flat_grad(leaves, defnet.params)
    idx = rng.choice(len(defnet.params), 100, replace=False)
    # samples of the first squaring sit within ~1e-3 voxel of lattice nodes; a larger
    # step lets the central difference straddle a trilinear cell face
    assert max_relative_error(chain, defnet.params.flat, g, idx, step=CHAIN_STEP) < 1e-4


def test_inverse_consistency_smooth_velocity():
    v = _smooth_field((17, 17, 17), 0.03, [0.1, 0.5, 0.2])
    assert inverse_consistency(v, 7) < 0.05


def test_field_round_trip(tmp_path, rng):
    f = DeformationField(VectorFieldGrid(rng.normal(scale=0.01, size=(4, 5, 6, 3))), {"t": "3"})
    back = load_field(save_field(tmp_path / "u.hdr", f, {"config_digest": "abc"}))
    assert np.array_equal(back.data, f.data)
    assert back.provenance == {"t": "3", "config_digest": "abc"}


def test_non_finite_field_rejected():
    bad = np.zeros((3, 3, 3, 3))
    bad[1, 1, 1, 0] = np.nan
    with pytest.raises(FloatingPointError):
        VectorFieldGrid(bad)
