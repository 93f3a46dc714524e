from __future__ import annotations

import numpy as np
import pytest

import oracles
import pcmae.autodiff as ad
import pcmae.model as mdl
import pcmae.patchmask as pm
from pcmae.errors import ConfigError, UsageError

from conftest import cast_params_float64, random_cloud


def toy_model(seed=0, **overrides):
    return mdl.DualBranchMAE(mdl.ModelConfig.toy(**overrides), seed=seed)


def toy_patches(seed=0, cfg=None):
    cfg = cfg or mdl.ModelConfig.toy()
    pts = random_cloud(seed, 128)
    return pm.patchify(pts, cfg.patches, cfg.group_size)


def zero_params(module):
    for p in module.named_parameters().values():
        p.data = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# Variant table and configuration
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "name,flags",
    [
        ("A", (True, False, False, False)),
        ("B", (False, True, False, False)),
        ("C", (True, False, True, False)),
        ("D", (False, True, False, True)),
        ("E", (True, True, False, False)),
        ("F", (True, True, True, False)),
        ("G", (True, True, False, True)),
        ("H", (True, True, True, True)),
    ],
)
def test_variant_flags(name, flags):
    v = mdl.VARIANTS[name]
    assert (v.global_branch, v.local_branch, v.enhance_global, v.enhance_local) == flags


@pytest.mark.parametrize(
    "name,branch",
    [
        ("A", "global"),
        ("B", "local"),
        ("C", "global"),
        ("D", "local"),
        ("E", "local"),
        ("F", "global"),
        ("G", "local"),
        ("H", "local"),
    ],
)
def test_variant_finetune_branch(name, branch):
    assert mdl.VARIANTS[name].finetune_branch == branch


def test_config_defaults_match_standard_layout():
    cfg = mdl.ModelConfig.full()
    assert (cfg.n_layers, cfg.embed_dim, cfg.heads) == (12, 384, 6)
    assert (cfg.patches, cfg.group_size, cfg.mask_ratio) == (64, 32, 0.6)
    assert cfg.num_masked == 38


def test_config_derived_quantities():
    cfg = mdl.ModelConfig.toy()
    assert cfg.num_masked == 10
    assert cfg.enhance_hidden == 96
    assert mdl.ModelConfig.full(lem_scale=1 / 16).enhance_hidden == 24


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        mdl.ModelConfig.toy(heads=5).validate()  # 96 % 5 != 0
    with pytest.raises(ConfigError):
        mdl.ModelConfig.toy(variant="Z").validate()
    with pytest.raises(ConfigError):
        mdl.ModelConfig.toy(mask_ratio=0.0).validate()
    with pytest.raises(ConfigError):
        mdl.ModelConfig.toy(lem_k=7).validate()  # only 6 visible patches


def test_toy_override_passthrough():
    assert mdl.ModelConfig.toy(variant="A").variant == "A"


# ---------------------------------------------------------------------------
# Tokenization and embedding
# ---------------------------------------------------------------------------


def test_patch_embed_permutation_invariant_bitwise():
    embed = mdl.PatchEmbed(32, np.random.default_rng(0))
    groups = np.random.default_rng(1).standard_normal((5, 7, 3)).astype(np.float32)
    perm = np.random.default_rng(2).permutation(7)
    a = embed(ad.Tensor(groups)).data
    b = embed(ad.Tensor(groups[:, perm, :])).data
    assert np.array_equal(a, b)


def test_patch_embed_rejects_bad_rank():
    embed = mdl.PatchEmbed(16, np.random.default_rng(0))
    with pytest.raises(UsageError):
        embed(ad.Tensor(np.zeros((4, 3), dtype=np.float32)))


def test_tokenize_adds_positional_code():
    model = toy_model()
    ps = toy_patches()
    tb = model.tokenize(ps, "global")
    assert tb.tokens.shape == (16, 96)
    want = model.embed(ad.Tensor(ps.groups.astype(np.float32))).data + model.pos_enc(
        ad.Tensor(ps.centers.astype(np.float32))
    ).data
    assert np.array_equal(tb.tokens.data, want)


def test_token_batch_validation():
    t = ad.Tensor(np.zeros((3, 8), dtype=np.float32))
    with pytest.raises(UsageError):
        mdl.TokenBatch(tokens=t, centers=np.zeros((4, 3)), branch="global")
    with pytest.raises(UsageError):
        mdl.TokenBatch(tokens=t, centers=np.zeros((3, 3)), branch="both")


# ---------------------------------------------------------------------------
# Encoder stack, enhancement, variants
# ---------------------------------------------------------------------------


def test_variant_a_encode_is_plain_transformer_stack():
    model = toy_model(seed=1, variant="A")
    ps = toy_patches(1)
    tb = model.tokenize(ps, "global")
    x = tb.tokens
    for block in model.blocks:
        x = block(x)
    want = model.final_norm(x).data
    got = model.encode(model.tokenize(ps, "global")).tokens.data
    assert np.array_equal(got, want)


def test_zeroed_enhancement_makes_branches_identical():
    model = toy_model(seed=2)  # variant G: local branch enhanced
    for e in model.enhancers:
        zero_params(e)
    ps = toy_patches(2)
    out_g = model.encode(model.tokenize(ps, "global")).tokens.data
    out_l = model.encode(model.tokenize(ps, "local")).tokens.data
    assert np.array_equal(out_g, out_l)


def test_enhanced_branch_differs_from_plain_branch():
    model = toy_model(seed=3)
    ps = toy_patches(3)
    out_g = model.encode(model.tokenize(ps, "global")).tokens.data
    out_l = model.encode(model.tokenize(ps, "local")).tokens.data
    assert not np.allclose(out_g, out_l)


def test_edge_conv_identical_tokens_stay_identical():
    block = mdl.EdgeConvBlock(8, 8, np.random.default_rng(0))
    tokens = ad.Tensor(np.tile(np.random.default_rng(1).standard_normal((1, 8)), (5, 1)))
    idx = np.tile(np.arange(3), (5, 1))
    out = block(tokens, idx).data
    assert np.array_equal(out, np.tile(out[:1], (5, 1)))


def test_edge_conv_rejects_row_mismatch():
    block = mdl.EdgeConvBlock(8, 8, np.random.default_rng(0))
    with pytest.raises(UsageError):
        block(ad.Tensor(np.zeros((4, 8), dtype=np.float32)), np.zeros((3, 2), dtype=np.int64))


def test_encode_rejects_missing_branch_and_oversized_k():
    model = toy_model(variant="A")
    ps = toy_patches()
    with pytest.raises(ConfigError):
        model.encode(model.tokenize(ps, "local"))
    model_g = toy_model()  # enhancement active on local branch
    small = pm.patchify(random_cloud(0, 64), 3, 4)
    with pytest.raises(UsageError):
        model_g.encode(model_g.tokenize(small, "local"))


def test_encoder_forward_enforces_variant_inputs():
    model = toy_model(variant="E")
    ps = toy_patches()
    tb_g = model.tokenize(ps, "global")
    tb_l = model.tokenize(ps, "local")
    out_g, out_l = mdl.encoder_forward(model, tb_g, tb_l)
    assert out_g.tokens.shape == out_l.tokens.shape == (16, 96)
    with pytest.raises(ConfigError):
        mdl.encoder_forward(model, tb_g, None)
    model_a = toy_model(variant="A")
    with pytest.raises(ConfigError):
        mdl.encoder_forward(model_a, model_a.tokenize(ps, "global"), tb_l)


def test_standard_layout_token_and_prediction_shapes():
    cfg = mdl.ModelConfig.full(n_layers=1, decoder_depth=1)
    model = mdl.DualBranchMAE(cfg, seed=0)
    ps = pm.patchify(random_cloud(4, 1024), 64, 32)
    plan = pm.global_random_mask(64, 0.6, np.random.default_rng(0))
    visible, _ = pm.split(ps, plan)
    encoded = model.encode(model.tokenize(visible, "global"))
    assert encoded.tokens.shape == (26, 384)
    pred, target = model.reconstruct(ps, plan, "global")
    assert pred.shape == (38, 32, 3)
    assert target.shape == (38, 32, 3)


# ---------------------------------------------------------------------------
# Reconstruction and loss
# ---------------------------------------------------------------------------


def test_reconstruct_shapes_and_target_source():
    model = toy_model(seed=4)
    ps = toy_patches(4)
    plan = pm.global_random_mask(16, 0.6, np.random.default_rng(4))
    pred, target = model.reconstruct(ps, plan, "global")
    assert pred.shape == (10, 16, 3)
    assert np.array_equal(target, ps.groups[plan.mask].astype(np.float32))


def test_reconstruct_rejects_inconsistent_plan():
    model = toy_model()
    ps = toy_patches()
    plan = pm.global_random_mask(16, 0.3, np.random.default_rng(0))  # 5 masked, not 10
    with pytest.raises(UsageError):
        model.reconstruct(ps, plan, "global")


def test_chamfer_mean_zero_on_exact_match():
    target = np.random.default_rng(0).standard_normal((3, 5, 3)).astype(np.float32)
    pred = ad.Tensor(target.copy(), requires_grad=True)
    assert mdl.chamfer_mean(pred, target).item() == 0.0


def test_chamfer_mean_matches_per_patch_oracle():
    rng = np.random.default_rng(1)
    pred = rng.standard_normal((4, 6, 3))
    target = rng.standard_normal((4, 6, 3))
    got = mdl.chamfer_mean(ad.Tensor(pred), target).item()
    want = np.mean([oracles.chamfer_l2(pred[j], target[j]) for j in range(4)])
    assert abs(got - want) < 1e-6


def test_chamfer_mean_single_patch_equals_chamfer():
    rng = np.random.default_rng(2)
    pred = rng.standard_normal((1, 8, 3))
    target = rng.standard_normal((1, 8, 3))
    got = mdl.chamfer_mean(ad.Tensor(pred), target).item()
    assert abs(got - oracles.chamfer_l2(pred[0], target[0])) < 1e-9


def test_chamfer_mean_rejects_shape_mismatch():
    with pytest.raises(UsageError):
        mdl.chamfer_mean(ad.Tensor(np.zeros((2, 3, 3))), np.zeros((2, 4, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_chamfer_mean_gradient(seed):
    rng = np.random.default_rng(seed)
    target = rng.standard_normal((2, 4, 3))
    pred = ad.Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
    err = ad.grad_check(lambda ts: mdl.chamfer_mean(ts[0], target), [pred])
    assert err < 1e-4


def test_pretrain_loss_sums_active_branches():
    rng = np.random.default_rng(3)
    pg = ad.Tensor(rng.standard_normal((2, 4, 3)))
    tg = rng.standard_normal((2, 4, 3))
    pl = ad.Tensor(rng.standard_normal((3, 4, 3)))
    tl = rng.standard_normal((3, 4, 3))
    both = mdl.pretrain_loss(pg, tg, pl, tl).item()
    g_only = mdl.pretrain_loss(pg, tg, None, None).item()
    l_only = mdl.pretrain_loss(None, None, pl, tl).item()
    assert abs(both - (g_only + l_only)) < 1e-6
    assert abs(g_only - mdl.chamfer_mean(pg, tg).item()) == 0.0
    with pytest.raises(UsageError):
        mdl.pretrain_loss(None, None, None, None)


def test_mask_token_receives_gradient():
    model = toy_model(seed=5)
    ps = toy_patches(5)
    plan = pm.global_random_mask(16, 0.6, np.random.default_rng(5))
    pred, target = model.reconstruct(ps, plan, "local")
    ad.backward(mdl.chamfer_mean(pred, target))
    g = model.decoder_l.mask_token.grad
    assert g is not None and np.abs(g).max() > 0


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


def test_classify_shape_and_patch_order_invariance():
    model = toy_model(seed=6)
    ps = toy_patches(6)
    logits = model.classify(ps)
    assert logits.shape == (6,)
    perm = np.random.default_rng(7).permutation(ps.num_patches)
    shuffled = pm.PatchSet(
        centers=ps.centers[perm],
        groups=ps.groups[perm],
        source_indices=ps.source_indices[perm],
    )
    assert np.abs(model.classify(shuffled).data - logits.data).max() < 1e-5


def test_classify_uses_finetune_branch():
    # Variant A has no local branch; classification must still work (global).
    model = toy_model(seed=7, variant="A")
    assert model.classify(toy_patches(7)).shape == (6,)


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------


def _aff(i, o):
    return i * o + o


def _block_n(c):
    return 4 * c + _aff(c, 3 * c) + _aff(c, c) + _aff(c, 4 * c) + _aff(4 * c, c)


def _embed_n(c):
    return _aff(3, 128) + _aff(128, 256) + _aff(256, 512) + _aff(512, c)


def _pos_n(c):
    return _aff(3, 128) + _aff(128, c)


def _edge_n(c, h):
    return _aff(2 * c, h) + _aff(h, c)


def _decoder_n(c, depth, m):
    return c + _pos_n(c) + depth * _block_n(c) + 2 * c + _aff(c, 3 * m)


def _classifier_n(c, ncls):
    return _aff(2 * c, 256) + _aff(256, 256) + _aff(256, ncls)


def test_toy_param_counts_match_closed_form():
    c, layers, dd, m, ncls = 96, 3, 2, 16, 6
    trunk = _embed_n(c) + _pos_n(c) + layers * _block_n(c) + 2 * c
    edges = layers * _edge_n(c, 96)

    g = toy_model()
    assert g.count_params("pretrain") == trunk + edges + 2 * _decoder_n(c, dd, m)
    assert g.count_params("finetune") == trunk + edges + _classifier_n(c, ncls)

    a = toy_model(variant="A")
    assert a.count_params("pretrain") == trunk + _decoder_n(c, dd, m)
    assert a.count_params("finetune") == trunk + _classifier_n(c, ncls)

    e = toy_model(variant="E")
    assert e.count_params("pretrain") == trunk + 2 * _decoder_n(c, dd, m)
    assert e.count_params("finetune") == trunk + _classifier_n(c, ncls)

    f = toy_model(variant="F")  # global branch enhanced; fine-tunes on global
    assert f.count_params("finetune") == trunk + edges + _classifier_n(c, ncls)


def test_count_params_rejects_unknown_mode():
    with pytest.raises(UsageError):
        toy_model().count_params("inference")


# ---------------------------------------------------------------------------
# Fine-tune trainable selection
# ---------------------------------------------------------------------------


def test_finetune_trainable_full_mode():
    model = toy_model()
    names = set(model.finetune_trainable("full"))
    assert any(n.startswith("blocks.") for n in names)
    assert any(n.startswith("classifier.") for n in names)
    assert any(n.startswith("enhancers.") for n in names)
    assert not any(n.startswith("decoder_") for n in names)


def test_finetune_trainable_head_only_mode():
    model = toy_model()
    names = set(model.finetune_trainable("lem_and_head"))
    assert names
    assert all(n.startswith(("enhancers.", "classifier.")) for n in names)


def test_finetune_trainable_excludes_unused_enhancers():
    # Variant E carries no enhancement stack at all.
    names = set(toy_model(variant="E").finetune_trainable("full"))
    assert not any(n.startswith("enhancers.") for n in names)


def test_finetune_trainable_rejects_unknown_mode():
    with pytest.raises(ConfigError):
        toy_model().finetune_trainable("heads_only")


# ---------------------------------------------------------------------------
# Gradient checks through the network layers
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_patch_embed_gradients(seed):
    embed = mdl.PatchEmbed(8, np.random.default_rng(seed))
    cast_params_float64(embed)
    x = ad.Tensor(
        np.random.default_rng(seed).standard_normal((2, 3, 3)), requires_grad=True
    )
    err = ad.grad_check(
        lambda ts: ad.sum_all(embed(ts[0])), [x, embed.patch2.bias, embed.point1.bias]
    )
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_pos_encoder_gradients(seed):
    pe = mdl.PosEncoder(8, np.random.default_rng(seed))
    cast_params_float64(pe)
    x = ad.Tensor(np.random.default_rng(seed).standard_normal((4, 3)), requires_grad=True)
    err = ad.grad_check(lambda ts: ad.sum_all(pe(ts[0])), [x, pe.fc2.bias])
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_edge_conv_gradients(seed):
    block = mdl.EdgeConvBlock(8, 6, np.random.default_rng(seed))
    cast_params_float64(block)
    idx = np.random.default_rng(seed + 50).integers(0, 4, size=(4, 3))
    x = ad.Tensor(np.random.default_rng(seed).standard_normal((4, 8)), requires_grad=True)
    err = ad.grad_check(
        lambda ts: ad.sum_all(block(ts[0], idx)),
        [x, block.expand.bias, block.reduce.bias],
    )
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_patch_decoder_gradients(seed):
    dec = mdl.PatchDecoder(8, 1, 2, 2, np.random.default_rng(seed))
    cast_params_float64(dec)
    rng = np.random.default_rng(seed)
    centers_v = rng.standard_normal((3, 3))
    centers_m = rng.standard_normal((2, 3))
    x = ad.Tensor(rng.standard_normal((3, 8)), requires_grad=True)

    def f(ts):
        tb = mdl.TokenBatch(tokens=ts[0], centers=centers_v, branch="global")
        return ad.sum_all(dec(tb, centers_m))

    err = ad.grad_check(f, [x, dec.mask_token, dec.head.bias, dec.norm.gain])
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_classifier_head_gradients(seed):
    head = mdl.ClassifierHead(8, 4, np.random.default_rng(seed))
    cast_params_float64(head)
    x = ad.Tensor(np.random.default_rng(seed).standard_normal((5, 8)), requires_grad=True)
    err = ad.grad_check(lambda ts: ad.sum_all(head(ts[0])), [x, head.fc3.bias])
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_full_reconstruction_loss_gradients(seed):
    cfg = mdl.ModelConfig.toy(
        n_layers=1, embed_dim=8, heads=2, lem_k=2, decoder_depth=1,
        patches=4, group_size=4, mask_ratio=0.5,
    )
    model = mdl.DualBranchMAE(cfg, seed=seed)
    cast_params_float64(model)
    ps = pm.patchify(random_cloud(seed, 16), 4, 4)
    plan_g = pm.global_random_mask(4, 0.5, np.random.default_rng(seed))
    plan_l = pm.local_block_mask(ps.centers, 0.5, np.random.default_rng(seed))

    def f(ts):
        pg, tg = model.reconstruct(ps, plan_g, "global")
        pl, tl = model.reconstruct(ps, plan_l, "local")
        return mdl.pretrain_loss(pg, tg, pl, tl)

    params = model.named_parameters()
    leaves = [
        params["decoder_l.mask_token"],
        params["final_norm.gain"],
        params["pos_enc.fc2.bias"],
    ]
    assert ad.grad_check(f, leaves) < 1e-4
