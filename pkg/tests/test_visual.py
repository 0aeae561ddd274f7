import numpy as np
import pytest
import torch

from taskadapter.errors import ConfigError, ContractError
from taskadapter.visual import (
    TaskAdapters,
    TaskTokenBatch,
    VisionEncoder,
    VisualConfig,
    task_adapter_block,
)

from conftest import randomize_trainables
from oracles import dense_attention, gelu, layer_norm, linear

torch.set_default_dtype(torch.float64)


def tiny_config(**kw):
    base = dict(image_size=16, patch_size=8, width=8, depth=3, heads=2, frames=4, adapted_layers=2, joint_dim=4)
    base.update(kw)
    return VisualConfig(**base)


def make_encoder(seed=0, randomize=True, **kw):
    torch.manual_seed(seed)
    enc = VisionEncoder(tiny_config(**kw))
    enc.add_adapters()
    enc.double()
    if randomize:
        for p in enc.adapters.parameters():
            p.requires_grad_(True)
        randomize_trainables(enc.adapters, seed=seed)
    return enc


def np_adapter(x, ad, residual):
    core = linear(gelu(linear(x, ad.down)), ad.up) * ad.scale
    return x + core if residual else core


def np_ln(x, ln):
    return layer_norm(x, ln.weight.detach().numpy(), ln.bias.detach().numpy())


def np_attend(x, attn, axis):
    """Dense attention over ``axis`` of a [V, T, N, D] array, one slice at a time."""
    x = np.moveaxis(x, axis, -2)
    out = np.empty_like(x)
    for idx in np.ndindex(*x.shape[:-2]):
        out[idx] = dense_attention(x[idx], attn)
    return np.moveaxis(out, -2, axis)


def test_task_msa_matches_dense_oracle_per_location():
    enc = make_encoder()
    attn = enc.blocks[0].attn
    x = torch.randn(3, 4, 5, 8)
    from taskadapter.attention import attend_along

    out = attend_along(attn, x, axis=0).detach().numpy()
    for t in range(4):
        for n in range(5):
            np.testing.assert_allclose(out[:, t, n], dense_attention(x[:, t, n].numpy(), attn), atol=1e-10, rtol=0)


@pytest.mark.parametrize("position", ["after", "between", "before"])
def test_task_adapter_block_matches_numpy_composition(position):
    enc = make_encoder(seed=1)
    block, adapters = enc.blocks[2], enc.adapters["2"]
    x = torch.randn(2, 4, 5, 8)
    out = task_adapter_block(block, adapters, TaskTokenBatch(x, ("query", "query")), position).tokens

    h = x.numpy()
    steps = {
        "temporal": lambda h: h + np_adapter(np_attend(np_ln(h, block.ln_1), block.attn, 1), adapters.temporal, False),
        "spatial": lambda h: h + np_adapter(np_attend(np_ln(h, block.ln_1), block.attn, 2), adapters.spatial, True),
        "task": lambda h: h + np_adapter(np_attend(np_ln(h, block.ln_1), block.attn, 0), adapters.task, False),
    }
    order = {"after": "temporal spatial task", "between": "temporal task spatial", "before": "task temporal spatial"}
    for name in order[position].split():
        h = steps[name](h)
    m = np_ln(h, block.ln_2)
    h = h + linear(gelu(linear(m, block.mlp.fc1)), block.mlp.fc2) + np_adapter(m, adapters.mlp, False)
    np.testing.assert_allclose(out.detach().numpy(), h, atol=1e-10, rtol=0)


@pytest.mark.parametrize("position", ["after", "between", "before"])
def test_zero_init_matches_frozen_backbone(position):
    enc = make_encoder(randomize=False, task_msa_position=position)
    pixels = torch.rand(3, 4, 16, 16, 3)
    got = enc.encode_batch(pixels, "support")
    ref = enc.frozen_features(pixels)
    assert torch.allclose(got.features, ref.features, atol=1e-12, rtol=0)
    assert torch.allclose(got.joint, ref.joint, atol=1e-12, rtol=0)


def test_adapters_only_in_last_blocks():
    enc = make_encoder(randomize=False, depth=3, adapted_layers=2)
    assert sorted(enc.adapters) == ["1", "2"]
    assert isinstance(enc.adapters["1"], TaskAdapters)
    enc0 = make_encoder(randomize=False, adapted_layers=0)
    assert len(enc0.adapters) == 0


def test_mixed_roles_rejected():
    with pytest.raises(ContractError):
        TaskTokenBatch(torch.zeros(2, 4, 5, 8), ("support", "query"))


def test_support_features_ignore_query_videos():
    enc = make_encoder(seed=2)
    s, q = torch.rand(3, 4, 16, 16, 3), torch.rand(2, 4, 16, 16, 3)
    a, qa = enc.encode_episode_videos(s, q)
    q2 = q.clone()
    q2[1, 2, 3, 4, 0] += 0.5
    b, qb = enc.encode_episode_videos(s, q2)
    assert torch.equal(a.features, b.features)
    assert not torch.equal(qa.features, qb.features)


def test_independent_query_mode_is_per_video():
    enc = make_encoder(seed=3, query_mode="independent")
    s, q = torch.rand(3, 4, 16, 16, 3), torch.rand(3, 4, 16, 16, 3)
    _, full = enc.encode_episode_videos(s, q)
    _, alone = enc.encode_episode_videos(s, q[1:2])
    assert torch.allclose(full.features[1], alone.features[0], atol=1e-12, rtol=0)
    # joint mode lets the queries see each other
    joint = make_encoder(seed=3)
    _, full_j = joint.encode_episode_videos(s, q)
    _, alone_j = joint.encode_episode_videos(s, q[1:2])
    assert not torch.allclose(full_j.features[1], alone_j.features[0])


def test_frame_count_checked():
    enc = make_encoder(randomize=False)
    with pytest.raises(ContractError):
        enc.encode_episode_videos(torch.rand(1, 3, 16, 16, 3), torch.rand(1, 4, 16, 16, 3))


def test_patch_embed_shapes_and_errors():
    enc = make_encoder(randomize=False)
    assert enc.patch_embed(torch.rand(2, 4, 16, 16, 3)).shape == (2, 4, 5, 8)
    with pytest.raises(ConfigError):
        enc.patch_embed(torch.rand(1, 4, 24, 24, 3))
    with pytest.raises(ConfigError):
        enc.patch_embed(torch.rand(1, 4, 12, 12, 3))


@pytest.mark.parametrize(
    "kw",
    [dict(image_size=15), dict(adapted_layers=5), dict(heads=3), dict(task_msa_position="middle"), dict(query_mode="x")],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        tiny_config(**kw)


def test_paper_scale_geometry():
    cfg = VisualConfig.paper_scale(6)
    assert (cfg.num_patches, cfg.width, cfg.depth, cfg.adapted_layers) == (196, 768, 12, 6)
