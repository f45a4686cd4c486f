import numpy as np
import pytest

from relgraph.checkpoint import check_compatible, load_checkpoint, save_checkpoint
from relgraph.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, dispatch
from relgraph.config import ConfigError, RunConfig, apply, load_config, parse_text, write_config
from relgraph.kg import DataError
from relgraph.model import init_params
from relgraph.optim import BatchNormStats, RngStream
from relgraph.train import TrainedModel

from helpers import tiny_config, tiny_data

SMALL = ["--set", "gen.entities=12", "--set", "gen.triples=30", "--set", "gen.documents=15",
         "--set", "gen.train=8", "--set", "gen.valid=4", "--set", "gen.test=4",
         "--set", "model.d_kb=4", "--set", "model.d_w=4", "--set", "model.d_r=4",
         "--set", "model.d_v=4", "--set", "model.clusters=2", "--set", "model.layers=2",
         "--set", "train.max_epochs=2", "--set", "pretrain.transe_epochs=5",
         "--set", "retrieval.budget=10"]
PIPELINE = ["gen", "pretrain", "link", "subgraph", "train", "eval", "predict"]


def run_pipeline(out, extra=()):
    for cmd in PIPELINE:
        assert dispatch([cmd, "--seed", "3", "--out", str(out), "--threads", "1", *SMALL,
                         *extra]) == EXIT_OK, cmd


def snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    run_pipeline(a)
    run_pipeline(b)
    return a, b


def test_no_arguments_is_usage_error(capsys):
    assert dispatch([]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert dispatch(["fly"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    assert dispatch(["gen", "--out", str(tmp_path), "--set", "model.nope=1"]) == EXIT_DATA
    assert "model.nope" in capsys.readouterr().err


def test_bad_set_syntax(tmp_path):
    assert dispatch(["gen", "--out", str(tmp_path), "--set", "seed"]) == EXIT_USAGE


def test_train_missing_subgraphs_names_path(tmp_path, capsys):
    assert dispatch(["gen", "--out", str(tmp_path), *SMALL]) == EXIT_OK
    assert dispatch(["pretrain", "--out", str(tmp_path), *SMALL]) == EXIT_OK
    assert dispatch(["link", "--out", str(tmp_path), *SMALL]) == EXIT_OK
    capsys.readouterr()
    assert dispatch(["train", "--out", str(tmp_path), *SMALL]) == EXIT_DATA
    assert "subgraphs_train.tsv" in capsys.readouterr().err


def test_gen_twice_is_byte_identical(tmp_path):
    for name in ("d1", "d2"):
        assert dispatch(["gen", "--seed", "7", "--out", str(tmp_path / name)]) == EXIT_OK
    assert snapshot(tmp_path / "d1") == snapshot(tmp_path / "d2")


def test_pipeline_outputs_byte_identical(pipeline_dirs):
    a, b = pipeline_dirs
    assert snapshot(a) == snapshot(b)
    assert {"model.ckpt", "train_log.tsv", "predictions_test.tsv", "metrics_test.txt",
            "train.config"} <= set(snapshot(a))


def test_predict_lines_sorted_and_consistent_with_hits(pipeline_dirs):
    a, _ = pipeline_dirs
    rows: dict[str, list] = {}
    for line in (a / "predictions_test.tsv").read_text().splitlines():
        qid, ent, score = line.split("\t")
        rows.setdefault(qid, []).append((ent, float(score)))
    labels = {}
    for line in (a / "subgraphs_test.tsv").read_text().splitlines():
        parts = line.split("\t")
        names = parts[1].split(",")
        labels[parts[0]] = {n for n, y in zip(names, parts[4].split(",")) if y == "1"}
    hits = []
    for qid, ranked in rows.items():
        keys = [(-s, int(e[3:])) for e, s in ranked]
        assert keys == sorted(keys)
        hits.append(ranked[0][0] in labels[qid])
    report = (a / "metrics_test.txt").read_text().splitlines()[1].split()
    assert float(report[-1]) == pytest.approx(100 * np.mean(hits), abs=0.05)


def test_predict_all_below_threshold_keeps_ranking(pipeline_dirs, tmp_path):
    a, _ = pipeline_dirs
    assert dispatch(["predict", "--data", str(a), "--out", str(tmp_path),
                     "--threshold", "0.999999", *SMALL]) == EXIT_OK
    answers = (tmp_path / "answers_test.tsv").read_text().splitlines()
    assert all(line.split("\t")[1] == "" for line in answers)
    assert (tmp_path / "predictions_test.tsv").read_text() == \
        (a / "predictions_test.tsv").read_text()


def test_predict_shape_mismatch_is_data_error(pipeline_dirs, tmp_path):
    a, _ = pipeline_dirs
    model = load_checkpoint(a / "model.ckpt")
    model.params["W_final"] = np.zeros((3, 1))
    save_checkpoint(model, tmp_path / "bad.ckpt")
    assert dispatch(["predict", "--data", str(a), "--out", str(tmp_path),
                     "--model", str(tmp_path / "bad.ckpt")]) == EXIT_DATA


def test_train_log_schedule(pipeline_dirs):
    a, _ = pipeline_dirs
    lines = (a / "train_log.tsv").read_text().splitlines()
    fields = [line.split("\t") for line in lines]
    assert [int(f[0]) for f in fields] == list(range(len(lines)))
    assert all(float(f[1]) == 0.001 for f in fields)


def test_threads_env_fallback(pipeline_dirs, tmp_path, monkeypatch):
    a, _ = pipeline_dirs
    monkeypatch.setenv("RELGRAPH_THREADS", "2")
    assert dispatch(["eval", "--data", str(a), "--out", str(tmp_path), *SMALL]) == EXIT_OK
    assert "threads = 2" in (tmp_path / "eval.config").read_text()
    assert (tmp_path / "metrics_test.txt").read_text() == (a / "metrics_test.txt").read_text()


# -- configuration -----------------------------------------------------------------


def test_config_file_and_flags(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nmodel.layers = 2   # trailing\ntrain.lr = 0.01\nseed = 4\n")
    c = load_config(p)
    assert (c.model.layers, c.train.lr, c.seed) == (2, 0.01, 4)
    assert c.train_config().seed == 4 and c.synth_config().seed == 4
    flagged = apply(c, {"seed": "9"})
    assert flagged.seed == 9 and flagged.model.layers == 2


def test_config_roundtrip(tmp_path):
    c = apply(RunConfig(), {"model.coarsening": "false", "retrieval.damping": "0.7",
                            "train.threshold_policy": "fixed"})
    write_config(c, tmp_path / "eff.config")
    assert load_config(tmp_path / "eff.config") == c


def test_config_errors():
    with pytest.raises(ConfigError):
        apply(RunConfig(), {"nope": "1"})
    with pytest.raises(ConfigError):
        apply(RunConfig(), {"model.layers": "two"})
    with pytest.raises(ConfigError):
        apply(RunConfig(), {"model.d_w": "5"})  # odd widths cannot split across directions
    with pytest.raises(ConfigError):
        parse_text("just words")
    with pytest.raises(ConfigError):
        apply(RunConfig(), {"gen.seed": "1"})  # the seed lives at top level


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_roundtrip_exact(tmp_path):
    config = tiny_config()
    _, data = tiny_data(0)
    params = init_params(config, len(data.vocab.relation_names), data.entity_init,
                         data.relation_init, RngStream(0))
    rng = np.random.default_rng(0)
    stats = [BatchNormStats(rng.normal(size=4), rng.random(4) + 0.1) for _ in range(2)]
    model = TrainedModel(config, params, stats, threshold=0.35)
    save_checkpoint(model, tmp_path / "m.ckpt")
    again = load_checkpoint(tmp_path / "m.ckpt")
    assert again.config == config and again.threshold == 0.35
    assert again.params.keys() == params.keys()
    for k in params:
        np.testing.assert_array_equal(again.params[k], params[k])
    for s, t in zip(stats, again.bn_stats):
        np.testing.assert_array_equal(s.mean, t.mean)
        np.testing.assert_array_equal(s.var, t.var)
    check_compatible(again, params)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_text("hello\n")
    with pytest.raises(DataError):
        load_checkpoint(p)
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_metrics_report_header(pipeline_dirs):
    a, _ = pipeline_dirs
    header = (a / "metrics_test.txt").read_text().splitlines()[0].split()
    assert header[-4:] == ["F1_micro", "F1_macro", "F1_avg", "Hits@1"]
