import numpy as np
import pytest

from priorwarp.diffeo import jacobian_analysis
from priorwarp.inr import PAIRWISE, RefNet
from priorwarp.phantom import PhantomSpec, generate_phantom
from priorwarp.trainer import (
    EpochSampler,
    TrainConfig,
    TrainingDiverged,
    predict_field,
    predict_image,
    register_pair,
    render_refnet,
    train_defnet,
    train_refnet,
    training_times,
)
from priorwarp.volume import ImageSequence, Volume

SMALL = TrainConfig(iterations_ref=150, iterations_def=60, depth=3, width=48, def_depth=2, def_width=32,
                    fourier_features=48, batch_size=2000, lr_ref=1e-4, lr_def=1e-4, log_every=0)


def _mean_disp_vox(field):
    return float(np.mean(field.displacement.magnitude_voxels()))


@pytest.fixture(scope="module")
def phantom():
    spec = PhantomSpec(dims=(16, 16, 16), amplitude=(0.08, 0.0, 0.0), period=8.0, frames=4,
                       tumor_radius_mm=3.0)
    return generate_phantom(spec, seed=0)


@pytest.fixture(scope="module")
def fitted(phantom):
    seq, _ = phantom
    return train_refnet(seq.reference, SMALL)


def test_config_validation():
    for kw in ({"lr_ref": 0.0}, {"lr_def": -1.0}, {"batch_size": 0}, {"iterations_ref": -1},
               {"mode": "spatial"}, {"warp_backend": "cubic"}, {"steps_scaling_squaring": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.iterations_ref, cfg.iterations_def, cfg.lr_ref, cfg.lr_def) == (2000, 2000, 1e-4, 1e-5)
    assert (cfg.batch_size, cfg.steps_scaling_squaring, cfg.depth, cfg.width) == (10000, 7, 8, 256)


def test_epoch_sampler_without_replacement():
    s = EpochSampler(10, np.random.default_rng(0))
    first = np.concatenate([s.next(5), s.next(5)])
    assert sorted(first.tolist()) == list(range(10))
    assert len(set(s.next(4).tolist())) == 4


def test_zero_iterations_returns_initialization():
    vol = Volume(np.full((8, 8, 8), 0.5))
    net, record = train_refnet(vol, SMALL.replace(iterations_ref=0))
    fresh = RefNet.create(SMALL.depth, SMALL.width, SMALL.fourier_features, SMALL.sigma, SMALL.omega0, seed=SMALL.seed)
    assert net.params.digest() == fresh.params.digest()
    assert record.losses == [] and record.initial_checkpoint == record.final_checkpoint


def test_constant_volume_fit():
    vol = Volume(np.full((12, 12, 12), 0.5))
    _, record = train_refnet(vol, SMALL.replace(iterations_ref=200))
    assert len(record.losses) == 200
    assert record.losses[-1] < 1e-4


def test_loss_moving_average_trend(fitted):
    _, record = fitted
    ma = record.moving_average(25)
    checkpoints = ma[::25]
    assert np.all(np.diff(checkpoints) <= 0)
    assert np.all(np.isfinite(record.losses))


def test_refnet_reproducible(phantom, fitted):
    seq, _ = phantom
    net, _ = fitted
    again, _ = train_refnet(seq.reference, SMALL)
    assert np.array_equal(net.params.flat, again.params.flat)


def test_chunked_reduction_matches_sequential(phantom):
    seq, _ = phantom
    cfg = SMALL.replace(iterations_ref=5, chunk_size=300)
    a, _ = train_refnet(seq.reference, cfg)
    b, _ = train_refnet(seq.reference, cfg.replace(threads=3))
    assert np.array_equal(a.params.flat, b.params.flat)


def test_divergence_keeps_last_finite():
    data = np.full((8, 8, 8), 0.5)
    data[3, 3, 3] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train_refnet(Volume(data), SMALL.replace(batch_size=512))
    assert info.value.net is not None and info.value.net.params.is_finite()


def test_identity_sequence_recovers_identity(fitted):
    net, _ = fitted
    ref = render_refnet(net, (16, 16, 16)).clamped()
    seq = ImageSequence([ref, ref, ref], [1, 2, 3])
    before = net.params.flat.copy()
    defnet, record = train_defnet(seq, net, SMALL)
    assert np.array_equal(net.params.flat, before)  # frozen prior
    assert record.times[:3] == [1, 2, 3]  # round-robin
    for t in (1, 2, 3):
        assert _mean_disp_vox(predict_field(defnet, t, seq.dims)) < 0.1
    pred, u = predict_image(net, defnet, 1, seq.reference)
    assert np.max(np.abs(pred.data - render_refnet(net, seq.dims).data)) < 0.05
    assert jacobian_analysis(u)[1] == 0


def test_defnet_reproducible(phantom, fitted):
    seq, _ = phantom
    net, _ = fitted
    a, _ = train_defnet(seq, net, SMALL.replace(iterations_def=10))
    b, _ = train_defnet(seq, net, SMALL.replace(iterations_def=10))
    assert np.array_equal(a.params.flat, b.params.flat)


def test_defnet_learns_motion(phantom, fitted):
    seq, _ = phantom
    net, _ = fitted
    defnet, record = train_defnet(seq, net, SMALL.replace(iterations_def=120))
    assert np.mean(record.losses[-20:]) < np.mean(record.losses[:20])


def test_time_continuity(phantom, fitted):
    seq, _ = phantom
    net, _ = fitted
    defnet, _ = train_defnet(seq, net, SMALL.replace(iterations_def=40))
    base, _ = predict_image(net, defnet, 2.5, seq.reference)
    gaps = [np.max(np.abs(predict_image(net, defnet, 2.5 + d, seq.reference)[0].data - base.data))
            for d in (0.4, 0.1, 0.025)]
    assert gaps[0] > gaps[1] > gaps[2]
    with pytest.raises(ValueError):
        predict_image(net, defnet, 4.5, seq.reference)


def test_pairwise_needs_one_target(phantom):
    seq, _ = phantom
    with pytest.raises(ValueError):
        training_times(seq, PAIRWISE)
    assert training_times(seq.without(3).without(4), PAIRWISE) == [2]


def test_register_identical_pair(fitted):
    net, _ = fitted
    ref = render_refnet(net, (16, 16, 16)).clamped()
    field = register_pair(ref, ref, SMALL.replace(iterations_ref=100, iterations_def=30))
    assert _mean_disp_vox(field) < 0.1


def test_trilinear_backend_needs_no_refnet(phantom):
    seq, _ = phantom
    defnet, _ = train_defnet(seq, None, SMALL.replace(iterations_def=5, warp_backend="trilinear"))
    pred, _ = predict_image(None, defnet, 2, seq.reference, backend="trilinear", ref_volume=seq.reference)
    assert pred.dims == seq.dims


def test_record_csv(fitted):
    _, record = fitted
    lines = record.to_csv().splitlines()
    assert lines[0] == "iteration,loss" and len(lines) == len(record.losses) + 1
