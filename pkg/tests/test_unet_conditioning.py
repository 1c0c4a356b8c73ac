import numpy as np
import pytest
import torch

from treediff.conditioning import (
    CondVariant,
    ConditioningSignal,
    build_signal,
    conditioning_from_inference,
    decode_for_assignments,
    parse_variant,
)
from treediff.config import Rng
from treediff.diffusion.schedule import make_linear_schedule
from treediff.diffusion.training import check_tree_compatibility, ddpm_loss, train_diffusion
from treediff.diffusion.unet import ConditionalUNet, build_denoiser
from treediff.errors import CompatibilityError, ValidationError
from treediff.tree.model import init_root_tree

from conftest import (
    finite_difference_max_rel_err,
    param_count,
    randomize_parameters,
    small_config,
    to_tensor,
)


def _micro_unet(variant=CondVariant(), dtype=torch.float64):
    model = ConditionalUNet(
        data_channels=1,
        resolution=4,
        base_channels=1,
        channel_multipliers=(1,),
        res_blocks=1,
        dropout=0.0,
        variant=variant,
        max_leaves=2,
        latent_channels=1,
        repr_size=2,
        max_depth=1,
    )
    return model.to(dtype)


# -- variant grammar ---------------------------------------------------------------


def test_parse_variant_tokens():
    assert parse_variant("recon+path") == CondVariant(recon=True, path=True)
    assert parse_variant("leaf") == CondVariant(leaf=True)
    assert parse_variant("recon+leaf+embed") == CondVariant(recon=True, leaf=True, embed=True)
    assert parse_variant("unconditional") == CondVariant()
    assert parse_variant("none").label == "unconditional"
    assert parse_variant("recon+path").label == "recon+path"


def test_parse_variant_rejects_unknown_and_duplicates():
    with pytest.raises(ValidationError, match="unknown conditioning token"):
        parse_variant("recon+bogus")
    with pytest.raises(ValidationError, match="duplicate"):
        parse_variant("recon+recon")


# -- conditioning builders ------------------------------------------------------------


def test_signal_shapes_for_full_variant(rng, small_batch):
    cfg = small_config()
    tree = init_root_tree(cfg, Rng(0))
    x = to_tensor(small_batch)[:6]
    variant = parse_variant("recon+leaf+embed+path")
    cond = conditioning_from_inference(tree, x, variant, rng)
    assert cond.leaf_ids.shape == (6,)
    assert set(cond.leaf_ids.tolist()) <= set(tree.topology.leaves())
    assert cond.leaf_index.max() < len(tree.topology.leaves())
    assert cond.leaf_embedding.shape == (6, cfg.tree.latent_channels, 2, 2)
    assert cond.path_embeddings.shape == (6, cfg.tree.max_depth + 1, cfg.tree.latent_channels, 2, 2)
    assert cond.recon.shape == (6, 1, 8, 8)
    assert bool(cond.path_mask[:, 0].all())  # root always on the path
    assert cond.path_mask[:, 1].sum() == 6  # two-leaf tree: every path has depth 1
    assert cond.path_mask[:, 2:].sum() == 0


def test_signal_requires_recon_when_variant_says_so():
    with pytest.raises(ValidationError, match="reconstruction"):
        ConditioningSignal(variant=parse_variant("recon"), leaf_ids=torch.zeros(2, dtype=torch.long))


def test_decode_for_assignments_groups_by_leaf(rng, small_batch):
    tree = init_root_tree(small_config(), Rng(0))
    x = to_tensor(small_batch)[:8]
    result = tree.infer(x, rng, mode="mean")
    leaf_draw = torch.tensor([1, 2, 1, 2, 1, 2, 1, 2])
    out = decode_for_assignments(tree, result.state.z, leaf_draw)
    per_leaf = tree.decode_leaves(result.state)
    for i, leaf in enumerate(leaf_draw.tolist()):
        assert torch.allclose(out[i], per_leaf[leaf][i])


def test_leaf_draw_is_fresh_each_call(small_batch):
    tree = init_root_tree(small_config(), Rng(0))
    x = to_tensor(small_batch)[:64]
    rng = Rng(5)
    a = conditioning_from_inference(tree, x, parse_variant("leaf"), rng)
    b = conditioning_from_inference(tree, x, parse_variant("leaf"), rng)
    assert not torch.equal(a.leaf_ids, b.leaf_ids)


# -- denoiser forward -------------------------------------------------------------------


@pytest.mark.parametrize("label", ["unconditional", "recon", "leaf", "embed", "path", "recon+path"])
def test_output_shape_per_variant(label, rng, small_batch):
    cfg = small_config()
    tree = init_root_tree(cfg, Rng(0))
    variant = parse_variant(label)
    unet = build_denoiser(cfg, variant)
    x = to_tensor(small_batch)[:5]
    cond = None
    if variant.recon or variant.any_embedding:
        cond = conditioning_from_inference(tree, x, variant, rng)
    out = unet(torch.randn(5, 1, 8, 8, generator=rng.torch), 3, cond)
    assert out.shape == (5, 1, 8, 8)


def test_zeroed_embeddings_match_unconditional_path(rng, small_batch):
    cfg = small_config()
    tree = init_root_tree(cfg, Rng(0))
    variant = parse_variant("path")
    unet = build_denoiser(cfg, variant)
    unet.eval()
    x = to_tensor(small_batch)[:4]
    cond = conditioning_from_inference(tree, x, variant, rng)
    x_t = torch.randn(4, 1, 8, 8, generator=rng.torch)
    with torch.no_grad():
        for proj in unet.path_projs:
            proj.weight.zero_()
            proj.bias.zero_()
        conditioned = unet(x_t, 7, cond)
        bare = unet(x_t, 7, None)  # embedding-free path on the same weights
    assert torch.equal(conditioned, bare)


def test_distinct_leaves_produce_distinct_outputs(rng):
    cfg = small_config()
    variant = parse_variant("leaf")
    unet = build_denoiser(cfg, variant)
    randomize_parameters(unet, rng, scale=0.1)  # zero-init output layer would mask the table
    unet.eval()
    x_t = torch.randn(2, 1, 8, 8, generator=rng.torch)
    x_t = torch.cat([x_t[:1], x_t[:1]])  # identical inputs
    cond = ConditioningSignal(
        variant=variant,
        leaf_ids=torch.tensor([1, 2]),
        leaf_index=torch.tensor([0, 1]),
    )
    with torch.no_grad():
        out = unet(x_t, 5, cond)
    assert not torch.allclose(out[0], out[1])


def test_variant_mismatch_rejected(rng, small_batch):
    cfg = small_config()
    tree = init_root_tree(cfg, Rng(0))
    unet = build_denoiser(cfg, parse_variant("path"))
    x = to_tensor(small_batch)[:3]
    wrong = conditioning_from_inference(tree, x, parse_variant("leaf"), rng)
    with pytest.raises(ValidationError, match="variant"):
        unet(torch.randn(3, 1, 8, 8), 2, wrong)


def test_recon_model_requires_signal():
    cfg = small_config()
    unet = build_denoiser(cfg, parse_variant("recon"))
    with pytest.raises(ValidationError, match="signal required"):
        unet(torch.randn(2, 1, 8, 8), 2, None)


def test_resolution_level_mismatch_rejected():
    with pytest.raises(ValidationError, match="halve"):
        ConditionalUNet(
            data_channels=1,
            resolution=5,
            base_channels=4,
            channel_multipliers=(1, 2),
            res_blocks=1,
        )


# -- loss gradient oracle ------------------------------------------------------------------


def test_ddpm_loss_gradient_matches_finite_differences(rng):
    unet = _micro_unet()
    randomize_parameters(unet, rng)
    unet.eval()
    assert param_count(unet) <= 500
    sched = make_linear_schedule(10, 1e-4, 0.02)
    x0 = (torch.rand(4, 1, 4, 4, generator=rng.torch, dtype=torch.float64) * 2) - 1
    t = torch.tensor([2, 5, 7, 10])
    eps = torch.randn(x0.shape, generator=rng.torch, dtype=torch.float64)

    def loss():
        return ddpm_loss(unet, x0, None, sched, rng, t=t, eps=eps)

    assert finite_difference_max_rel_err(unet, loss, h=1e-5) < 1e-3


# -- stage-2 training --------------------------------------------------------------------


def test_train_diffusion_smoke_and_noninterference(small_batch):
    cfg = small_config()
    cfg.diffusion.epochs = 4
    cfg.diffusion.anneal_steps = 4
    tree = init_root_tree(cfg, Rng(0))
    values = to_tensor(small_batch)
    tree_hash = tree.state_hash()
    assignments_before = _assign(tree, values)
    model, ema, history = train_diffusion(cfg, tree, values, Rng(1))
    assert tree.state_hash() == tree_hash
    assert np.array_equal(_assign(tree, values), assignments_before)
    losses = [h["loss"] for h in history]
    assert losses[-1] < losses[0]  # learns something even in a short run
    assert set(ema.shadow) == {name for name, _ in model.named_parameters()}


def _assign(tree, values):
    from treediff.tree_train import leaf_assignments

    return leaf_assignments(tree, values)


def test_train_diffusion_lr_warmup(small_batch):
    cfg = small_config()
    cfg.diffusion.epochs = 2
    cfg.diffusion.anneal_steps = 3
    tree = init_root_tree(cfg, Rng(0))
    _, _, history = train_diffusion(cfg, tree, to_tensor(small_batch), Rng(1))
    lrs = [h["lr"] for h in history]
    base = cfg.diffusion.learning_rate
    assert lrs[0] == pytest.approx(base / 3)
    assert lrs[1] == pytest.approx(2 * base / 3)
    assert all(lr == pytest.approx(base) for lr in lrs[3:])


def test_tree_compatibility_check():
    cfg = small_config()
    good = {"stage": "tree", "config_hash": cfg.hash()}
    check_tree_compatibility(good, cfg)
    with pytest.raises(CompatibilityError):
        check_tree_compatibility({"stage": "tree", "config_hash": "nope"}, cfg)
    with pytest.raises(CompatibilityError):
        check_tree_compatibility({"stage": "diffusion", "config_hash": cfg.hash()}, cfg)


def test_train_diffusion_rejects_incompatible_manifest(small_batch):
    cfg = small_config()
    tree = init_root_tree(cfg, Rng(0))
    with pytest.raises(CompatibilityError):
        train_diffusion(
            cfg, tree, to_tensor(small_batch), Rng(1), tree_manifest={"stage": "tree", "config_hash": "zzz"}
        )
