import json
import math

import pytest
import torch

from taskadapter.errors import CheckpointError, ConfigError, NumericError
from taskadapter.model import ModelConfig
from taskadapter.semantic import TextConfig
from taskadapter.trainer import (
    EvalReport,
    TrainConfig,
    build_model,
    count_parameters,
    emit_report,
    evaluate,
    load_checkpoint,
    load_report,
    load_trainable,
    make_checkpoint,
    make_datasets,
    model_from_checkpoint,
    partition_parameters,
    reversal_pool,
    save_checkpoint,
    sweep_nway,
    train,
)
from taskadapter.visual import VisualConfig

from conftest import tiny_train_config

torch.set_default_dtype(torch.float64)


@pytest.fixture(scope="module")
def config():
    return tiny_train_config()


@pytest.fixture(scope="module")
def datasets(config):
    return make_datasets(config)


@pytest.fixture(scope="module")
def trained(config, corpus, datasets):
    return train(config, corpus, datasets[0])


def test_partition_is_disjoint_and_complete(config, corpus):
    model = build_model(config, corpus)
    part = partition_parameters(model)
    names = {n for n, _ in model.named_parameters()}
    assert not set(part.trainable) & set(part.frozen)
    assert set(part.trainable) | set(part.frozen) == names
    assert all(p.requires_grad for p in part.trainable.values())
    assert not any(p.requires_grad for p in part.frozen.values())


def test_no_adapters_leaves_only_alignment_trainable(config, corpus):
    cfg = config.replace(**{"model.visual.adapted_layers": 0, "model.text.adapted_layers": 0})
    part = partition_parameters(build_model(cfg, corpus))
    assert part.trainable and all(n.startswith("aligner.") for n in part.trainable)


def test_materialized_counts_match_analytic(config, corpus):
    model = build_model(config, corpus)
    part = partition_parameters(model)
    counts = count_parameters(config.replace(**{"model.text.vocab_size": len(model.vocab)}).model)
    assert sum(p.numel() for p in part.trainable.values()) == counts["trainable_total"]
    assert sum(p.numel() for p in part.frozen.values()) == counts["frozen_total"]
    vis = sum(p.numel() for n, p in part.trainable.items() if n.startswith("vision.adapters."))
    assert vis == counts["visual_adapters"]


@pytest.mark.parametrize(
    "L, expected",
    [(12, 14.1e6), (6, 7.2e6), (2, 2.4e6)],
)
def test_paper_scale_visual_adapter_counts(L, expected):
    cfg = ModelConfig(visual=VisualConfig.paper_scale(L), text=TextConfig.paper_scale(2), pretrain_steps=0)
    assert abs(count_parameters(cfg)["visual_adapters"] - expected) / expected < 0.02


@pytest.mark.parametrize("M, expected", [(2, 263e3), (6, 790e3)])
def test_paper_scale_text_adapter_counts(M, expected):
    cfg = ModelConfig(visual=VisualConfig.paper_scale(6), text=TextConfig.paper_scale(M), pretrain_steps=0)
    assert abs(count_parameters(cfg)["text_adapters"] - expected) / expected < 0.02


def test_count_needs_vocab_size():
    with pytest.raises(ConfigError):
        count_parameters(ModelConfig(pretrain_steps=0))


def test_one_step_freeze_contract(config, corpus, datasets):
    model = build_model(config, corpus)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    train(config.replace(train_episodes=1), corpus, datasets[0], model=model)
    part = partition_parameters(model)
    for n, p in part.frozen.items():
        assert torch.equal(p, before[n]), n
    assert any(not torch.equal(p, before[n]) for n, p in part.trainable.items())


def test_overfitting_one_episode_lowers_loss(config, corpus, datasets):
    res = train(config.replace(train_episodes=50, lr=0.05), corpus, datasets[0], episode_fn=lambda step: 0)
    assert res.loss_curve[-1] < res.loss_curve[0]


def test_training_is_deterministic(config, corpus, datasets, trained):
    again = train(config, corpus, datasets[0])
    assert again.loss_curve == trained.loss_curve
    for name, t in trained.checkpoint["trainable"].items():
        assert torch.equal(t, again.checkpoint["trainable"][name])


def test_non_finite_loss_reports_diagnostics(config, corpus, datasets):
    model = build_model(config, corpus)
    with torch.no_grad():
        model.aligner.layers[0].out_proj.bias.fill_(float("inf"))
    with pytest.raises(NumericError, match="parameter norms|non-finite"):
        train(config, corpus, datasets[0], model=model)


def test_checkpoint_roundtrip_reproduces_report(config, corpus, datasets, trained, tmp_path):
    before = evaluate(config, trained.model, corpus, datasets[1])
    path = tmp_path / "ckpt" / "model.pt"
    save_checkpoint(trained.checkpoint, path)
    assert path.with_name("model.pt.vocab.txt").exists()
    ckpt = load_checkpoint(path)
    assert ckpt["episode_counter"] == config.train_episodes
    assert all(not n.startswith(("vision.blocks", "text.blocks")) for n in ckpt["trainable"])
    after = evaluate(config, model_from_checkpoint(ckpt), corpus, datasets[1])
    assert after.numbers() == before.numbers()


def test_checkpoint_errors(config, corpus, trained, tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    ckpt = dict(trained.checkpoint, format_version=99)
    torch.save(ckpt, tmp_path / "v99.pt")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v99.pt")

    model = build_model(config, corpus)
    tensors = dict(trained.checkpoint["trainable"])
    name = next(iter(tensors))
    with pytest.raises(CheckpointError, match=name.replace(".", r"\.")):
        load_trainable(model, {**tensors, name: torch.zeros(1)})
    with pytest.raises(CheckpointError, match="frozen"):
        load_trainable(model, {**tensors, "vision.proj": torch.zeros(1)})
    tensors.pop(name)
    with pytest.raises(CheckpointError, match="missing"):
        load_trainable(model, tensors)


def test_evaluation_is_deterministic_and_read_only(config, corpus, datasets, trained):
    before = {n: p.detach().clone() for n, p in trained.model.named_parameters()}
    a = evaluate(config, trained.model, corpus, datasets[1])
    b = evaluate(config, trained.model, corpus, datasets[1], workers=2)
    assert a.numbers() == b.numbers()
    assert all(torch.equal(p, before[n]) for n, p in trained.model.named_parameters())
    assert 0 <= a.mean_accuracy <= 1 and a.ci95 >= 0 and a.episodes == config.eval_episodes


def test_ci_is_normal_approximation():
    r = EvalReport.from_accuracies([0.0, 1.0, 0.5, 0.5], "x")
    std = math.sqrt(((0.5**2) * 2) / 3)
    assert r.ci95 == pytest.approx(1.96 * std / 2)
    assert EvalReport.from_accuracies([1.0], "x").ci95 == 0.0


def test_report_roundtrip(tmp_path):
    r = EvalReport.from_accuracies([0.2, 0.6, 1.0], "abc", wall_time=1.5)
    path = emit_report(r, [2.0, 1.5, 1.25], tmp_path / "r.json")
    data = json.loads(path.read_text(encoding="utf-8"))
    assert {"version", "config_digest", "mean_accuracy", "ci95", "episodes", "per_episode_accuracy", "loss_curve"} <= set(data)
    loaded, curve = load_report(path)
    assert loaded.numbers() == r.numbers() and curve == [2.0, 1.5, 1.25]
    assert path.with_suffix(".png").stat().st_size > 0


def test_digest_changes_iff_config_changes(config):
    assert config.digest() == TrainConfig.from_dict(config.to_dict()).digest()
    assert config.replace(lr=0.01).digest() == config.digest()  # same value
    assert config.replace(lr=0.02).digest() != config.digest()
    assert config.replace(**{"model.visual.adapted_layers": 1}).digest() != config.digest()


def test_replace_rejects_unknown_keys(config):
    with pytest.raises(ConfigError):
        config.replace(**{"model.visual.nope": 1})


@pytest.mark.parametrize("kw", [dict(lr=0.0), dict(momentum=1.0), dict(eval_episodes=0), dict(videos_per_class=1)])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        tiny_train_config(**kw)


def test_sweep_has_one_row_per_way_count(config, corpus, datasets, trained):
    rows = sweep_nway(config, trained.model, range(5, 11), corpus, datasets[1], episodes=2)
    assert [r["ways"] for r in rows] == [5, 6, 7, 8, 9, 10]


def test_reversal_pool(datasets):
    assert reversal_pool(datasets[1]) == [0, 1, 2, 3]


def test_checkpoint_contents(config, trained):
    ckpt = make_checkpoint(trained.model, config, 7)
    assert ckpt["rng_state"] == {"episode_seed": config.seed, "next_episode_index": 7}
    assert TrainConfig.from_dict(ckpt["config"]) == config


def test_model_independent_of_global_default_dtype(corpus):
    cfg = tiny_train_config().replace(**{"model.pretrain_steps": 2, "model.backbone_seed": 31})
    previous = torch.get_default_dtype()
    try:
        torch.set_default_dtype(torch.float32)
        a = build_model(cfg, corpus).state_dict()
        torch.set_default_dtype(torch.float64)
        b = build_model(cfg, corpus).state_dict()
    finally:
        torch.set_default_dtype(previous)
    assert a.keys() == b.keys()
    assert all(torch.equal(a[k], b[k]) for k in a)
