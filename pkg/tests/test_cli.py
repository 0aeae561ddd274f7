import json

import pytest

from taskadapter.cli import build_parser, main, parse_config_file, resolve_config

TINY = """\
# tiny geometry so the CLI runs in seconds
model.visual.image_size = 16
model.visual.width = 8
model.visual.depth = 2
model.visual.heads = 2
model.visual.joint_dim = 8
model.text.width = 8
model.text.depth = 2
model.text.heads = 2
model.text.adapted_layers = 1
model.text.joint_dim = 8
model.pretrain_steps = 0
videos_per_class = 4
eval_episodes = 3
lr = 0.01
episode.ways = 3
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "tiny.cfg").write_text(TINY)
    return tmp_path


def test_config_file_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("lr = 0.5  # inline\n\nmodel.metric = bimhm\nmodel.fusion = 'raw'\n")
    assert parse_config_file(path) == {"lr": 0.5, "model.metric": "bimhm", "model.fusion": "raw"}
    path.write_text("just words\n")
    assert main(["eval", "--config", str(path)]) == 2


def test_flags_override_file(workdir):
    args = build_parser().parse_args(["train", "--config", "tiny.cfg", "--ways", "4", "--frames", "6", "--seed", "9"])
    cfg = resolve_config(args)
    assert cfg.episode.ways == 4 and cfg.episode.frames == cfg.model.visual.frames == 6
    assert cfg.seed == 9 and cfg.lr == 0.01
    args = build_parser().parse_args(["eval", "--config", "tiny.cfg", "--seed", "9", "--episodes", "7"])
    cfg = resolve_config(args)
    assert cfg.eval_seed == 9 and cfg.eval_episodes == 7 and cfg.seed == 0


def test_count_params_paper_scale(capsys):
    assert main(["count-params", "--paper-scale"]) == 0
    counts = json.loads(capsys.readouterr().out)
    assert abs(counts["full_model"] - 149.6e6) / 149.6e6 < 0.02


def test_train_then_eval_reproduces_report(workdir, capsys):
    code = main(["train", "--config", "tiny.cfg", "--episodes", "3", "--checkpoint", "ck/m.pt", "--report", "r/train.json"])
    assert code == 0
    trained = json.loads(capsys.readouterr().out)
    report = json.loads((workdir / "r" / "train.json").read_text(encoding="utf-8"))
    assert len(report["loss_curve"]) == 3 and report["episodes"] == 3
    assert (workdir / "r" / "train.png").exists()

    assert main(["eval", "--checkpoint", "ck/m.pt", "--report", "r/eval.json", "--no-plot"]) == 0
    evaluated = json.loads(capsys.readouterr().out)
    assert evaluated["mean_accuracy"] == trained["mean_accuracy"]
    again = json.loads((workdir / "r" / "eval.json").read_text(encoding="utf-8"))
    assert again["per_episode_accuracy"] == report["per_episode_accuracy"]
    assert again["config_digest"] == report["config_digest"]


def test_eval_shape_mismatch_names_tensor(workdir, capsys):
    assert main(["train", "--config", "tiny.cfg", "--episodes", "1", "--checkpoint", "m.pt", "--no-plot"]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", "m.pt", "--text-adapter-layers", "2", "--no-plot"]) == 3
    assert "text.order_adapters" in capsys.readouterr().err


def test_sweep_nway_rows(workdir, capsys):
    assert main(["sweep-nway", "--config", "tiny.cfg", "--episodes", "2"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["ways"] for r in rows] == [5, 6, 7, 8, 9, 10]


def test_ablate_runs(workdir, capsys):
    assert main(["ablate", "--config", "tiny.cfg", "--episodes", "2"]) == 0
    results = json.loads(capsys.readouterr().out)
    assert results["no_task_adapters"]["visual_adapted_layers"] == 0
    assert results["adapted"]["visual_adapted_layers"] == 2


@pytest.mark.parametrize(
    "argv, code",
    [
        (["eval", "--config", "tiny.cfg", "--ways", "1"], 2),
        (["eval", "--config", "tiny.cfg", "--visual-adapter-layers", "9"], 2),
        (["eval", "--config", "missing.cfg"], 2),
        (["eval", "--config", "tiny.cfg", "--corpus", "missing.json"], 3),
        (["eval", "--checkpoint", "missing.pt"], 3),
    ],
)
def test_exit_codes(workdir, argv, code):
    assert main(argv) == code


def test_corpus_without_class_is_data_error(workdir):
    (workdir / "c.json").write_text(json.dumps({"Long Jump": ["a", "b", "c"]}))
    assert main(["eval", "--config", "tiny.cfg", "--corpus", "c.json", "--no-plot"]) == 3


def test_diverging_training_is_numeric_failure(workdir, capsys):
    assert main(["train", "--config", "tiny.cfg", "--episodes", "20", "--no-plot"] + ["--seed", "1"]) == 0
    (workdir / "hot.cfg").write_text(TINY + "lr = 1e200\n")
    assert main(["train", "--config", "hot.cfg", "--episodes", "20", "--no-plot"]) == 4
    assert "non-finite" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--nope"])
    assert exc.value.code == 2
