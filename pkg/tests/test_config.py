import pytest

from treediff.config import ExperimentConfig, Rng, load_config, seed_all
from treediff.errors import ConfigError, ValidationError


def test_empty_file_yields_desk_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    cfg = load_config(path)
    assert cfg.tree.max_depth == 3
    assert cfg.tree.max_leaves == 4
    assert cfg.diffusion.steps == 200
    assert cfg.eval.ddim_steps == 20


def test_beta_order_invariant(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("diffusion:\n  beta_start: 0.02\n  beta_end: 1.0e-4\n")
    with pytest.raises(ValidationError, match="beta_start < diffusion.beta_end violated"):
        load_config(path)


def test_paper_schedule_row(tmp_path):
    path = tmp_path / "paper.yaml"
    path.write_text(
        "data:\n  resolution: 32\ndiffusion:\n  steps: 1000\n  beta_start: 1.0e-4\n  beta_end: 0.02\n"
    )
    cfg = load_config(path)
    assert cfg.diffusion.steps == 1000
    assert cfg.diffusion.beta_start == pytest.approx(1e-4)
    assert cfg.diffusion.beta_end == pytest.approx(0.02)


def test_unknown_key_names_offender(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("tree:\n  max_depht: 3\n")
    with pytest.raises(ConfigError, match="tree.max_depht"):
        load_config(path)


def test_parse_failure_reported(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("tree: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_set_overrides(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    cfg = load_config(path, overrides=["diffusion.steps=1000", "tree.max_leaves=6", "seed=7"])
    assert cfg.diffusion.steps == 1000
    assert cfg.tree.max_leaves == 6
    assert cfg.seed == 7


def test_override_bad_value_type(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    with pytest.raises(ConfigError, match="diffusion.steps"):
        load_config(path, overrides=["diffusion.steps=soon"])


def test_invariants_rejected():
    cfg = ExperimentConfig()
    cfg.tree.max_leaves = 1
    with pytest.raises(ValidationError, match="max_leaves"):
        cfg.validate()
    cfg = ExperimentConfig()
    cfg.diffusion.ema_decay = 1.0
    with pytest.raises(ValidationError, match="ema_decay"):
        cfg.validate()
    cfg = ExperimentConfig()
    cfg.diffusion.steps = 1
    with pytest.raises(ValidationError, match="steps"):
        cfg.validate()


def test_hash_stability_and_sensitivity():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.hash() == b.hash()
    b.diffusion.steps = 400
    assert a.hash() != b.hash()


def test_seed_all_determinism():
    r1, r2 = seed_all(0), seed_all(0)
    import torch

    assert torch.equal(torch.randn(4, generator=r1.torch), torch.randn(4, generator=r2.torch))
    assert (r1.numpy.integers(0, 1 << 30, 8) == r2.numpy.integers(0, 1 << 30, 8)).all()


def test_different_seeds_differ():
    import torch

    r1, r2 = seed_all(0), seed_all(1)
    assert not torch.equal(torch.randn(8, generator=r1.torch), torch.randn(8, generator=r2.torch))


def test_spawn_is_stateless_and_tagged():
    base = Rng(5)
    a = base.spawn("data")
    base.numpy.integers(0, 10, 4)  # consume some parent state
    b = Rng(5).spawn("data")
    assert (a.numpy.integers(0, 1 << 30, 4) == b.numpy.integers(0, 1 << 30, 4)).all()
    assert Rng(5).spawn("x").seed != Rng(5).spawn("y").seed


def test_negative_seed_rejected():
    with pytest.raises(ValidationError):
        seed_all(-1)
