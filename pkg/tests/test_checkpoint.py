import numpy as np
import pytest
import torch

from treediff.checkpoint import (
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    restore_rng,
    rng_arrays,
    save_checkpoint,
)
from treediff.config import Rng
from treediff.errors import CompatibilityError, IntegrityError

from conftest import micro_config


def _manifest(**extra):
    base = {"stage": "tree", "config_hash": "abc", "step": 0}
    base.update(extra)
    return base


def test_round_trip_bit_exact(tmp_path):
    arrays = {
        "param/w": np.random.default_rng(0).normal(size=(7, 3)).astype(np.float32),
        "param/b": np.arange(5, dtype=np.float64),
    }
    path = save_checkpoint(tmp_path / "c.npz", arrays, _manifest())
    loaded, manifest = load_checkpoint(path)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        assert np.array_equal(loaded[name], arrays[name])
    assert manifest["stage"] == "tree"


def test_model_state_round_trip(tmp_path):
    from treediff.tree.model import init_root_tree

    cfg = micro_config()
    model = init_root_tree(cfg, Rng(3))
    path = save_checkpoint(tmp_path / "m.npz", module_arrays(model), _manifest(topology=model.topology.to_adjacency()))
    arrays, manifest = load_checkpoint(path)
    clone = init_root_tree(cfg, Rng(99))  # different init, then overwritten
    load_module_arrays(clone, arrays)
    for (name, a), (_, b) in zip(model.state_dict().items(), clone.state_dict().items()):
        assert torch.equal(a, b), name


def test_config_hash_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "c.npz", {"param/w": np.zeros(3)}, _manifest())
    with pytest.raises(CompatibilityError):
        load_checkpoint(path, expected_config_hash="different")
    arrays, _ = load_checkpoint(path, expected_config_hash="different", allow_mismatch=True)
    assert "param/w" in arrays


def test_truncated_file_is_integrity_error(tmp_path):
    path = save_checkpoint(tmp_path / "c.npz", {"param/w": np.ones((64, 64))}, _manifest())
    blob = path.read_bytes()
    rng = np.random.default_rng(0)
    for cut in rng.integers(1, len(blob) - 1, size=12):
        broken = tmp_path / f"cut{cut}.npz"
        broken.write_bytes(blob[: int(cut)])
        with pytest.raises(IntegrityError):
            load_checkpoint(broken)


def test_corrupt_bytes_detected(tmp_path):
    path = save_checkpoint(tmp_path / "c.npz", {"param/w": np.ones(128)}, _manifest())
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    broken = tmp_path / "flip.npz"
    broken.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        arrays, _ = load_checkpoint(broken)
        np.asarray(arrays["param/w"])  # force decompression if lazily read


def test_rng_state_round_trip(tmp_path):
    rng = Rng(11)
    torch.randn(5, generator=rng.torch)
    rng.numpy.normal(size=3)
    path = save_checkpoint(tmp_path / "r.npz", rng_arrays(rng), _manifest())
    expected_t = torch.randn(4, generator=rng.torch)
    expected_n = rng.numpy.normal(size=4)

    fresh = Rng(11)
    arrays, _ = load_checkpoint(path)
    restore_rng(fresh, arrays)
    assert torch.equal(torch.randn(4, generator=fresh.torch), expected_t)
    assert np.array_equal(fresh.numpy.normal(size=4), expected_n)


def test_missing_file(tmp_path):
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "nope.npz")


def test_bad_stage_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "c.npz", {}, {"stage": "bogus"})
