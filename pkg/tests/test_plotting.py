import numpy as np

from priorwarp import plotting
from priorwarp.trainer import TrainRecord
from priorwarp.volume import Volume


def test_figures_are_byte_reproducible(tmp_path, rng):
    rec = TrainRecord("refnet", losses=list(np.exp(-np.linspace(0, 3, 250)) + 1e-3))
    vol = Volume(rng.uniform(size=(9, 10, 11)))
    u = rng.normal(scale=0.01, size=(9, 10, 11, 3))
    for run in ("a", "b"):
        plotting.plot_loss(rec, tmp_path / run / "loss.png")
        plotting.plot_slices({"ref": vol, "other": vol}, tmp_path / run / "slices.png")
        plotting.plot_field(u, tmp_path / run / "field.png", det=np.ones((9, 10, 11)))
    for name in ("loss.png", "slices.png", "field.png"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a[:8] == b"\x89PNG\r\n\x1a\n"
        assert a == (tmp_path / "b" / name).read_bytes()


def test_loss_plot_tolerates_empty_record(tmp_path):
    path = plotting.plot_loss(TrainRecord("defnet"), tmp_path / "empty.png")
    assert path.stat().st_size > 0
