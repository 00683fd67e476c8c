import csv
import json

import pytest

from pranet import cli, gradcheck
from pranet import tensor as tn
from pranet.exceptions import ConfigError, NumericError

TINY = {
    "task": "classify",
    "data": {"classes": ["sphere", "cube"], "points_per_cloud": 32, "train_per_class": 3, "test_per_class": 2},
    "train": {"epochs": 2, "batch_size": 4},
}


@pytest.fixture
def config(tmp_path):
    def write(overrides=None, name="cfg.json"):
        cfg = json.loads(json.dumps(TINY))
        for key, value in (overrides or {}).items():
            if isinstance(value, dict):
                cfg.setdefault(key, {}).update(value)
            else:
                cfg[key] = value
        path = tmp_path / name
        path.write_text(json.dumps(cfg))
        return str(path)
    return write


def test_train_then_eval(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", config(), "--out", str(out), "--seed", "4", "--quiet"]) == 0
    for name in ("metrics.csv", "checkpoint.prak", "network.json", "config.json", "summary.json"):
        assert (out / name).exists(), name
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 2 and rows[-1]["val_oa"] != ""
    saved = json.loads((out / "config.json").read_text())
    assert saved["seed"] == 4 and saved["train"]["seed"] == 4
    capsys.readouterr()
    assert cli.main(["eval", "--config", config(), "--out", str(out), "--seed", "4"]) == 0
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(result) == {"oa", "macc"}
    assert json.loads((out / "eval.json").read_text()) == result


def test_static_graph_flag_reaches_network(config, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", config({"train": {"epochs": 1}}), "--out", str(out), "--static-graph",
                     "--quiet"]) == 0
    assert json.loads((out / "network.json").read_text())["static_graph"] is True


def test_seed_controls_the_run(config, tmp_path):
    losses = []
    for i, seed in enumerate((1, 1, 2)):
        out = tmp_path / f"r{i}"
        cli.main(["train", "--config", config({"train": {"epochs": 1}}), "--out", str(out), "--seed", str(seed),
                  "--quiet"])
        losses.append(json.loads((out / "summary.json").read_text())["final"]["train_loss"])
    assert losses[0] == losses[1] != losses[2]
    assert (tmp_path / "r0" / "metrics.csv").read_bytes() == (tmp_path / "r1" / "metrics.csv").read_bytes()


def test_gen_data_then_train_from_directories(config, tmp_path):
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(data), "--classes", "sphere,torus", "--points", "32",
                     "--per-class", "2"]) == 0
    assert len(list((data / "train").glob("*.xyzl"))) == 4
    cfg = config({"data": {"train_dir": str(data / "train"), "test_dir": str(data / "test")},
                  "train": {"epochs": 1}})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "run"), "--quiet"]) == 0


@pytest.mark.parametrize("overrides", [
    {"task": "detect"}, {"train": {"lr": -1}}, {"train": {"warmup": 3}}, {"data": {"classes": ["blob"]}},
    {"network": "missing.json"}, {"data": {"train_dir": "nowhere", "test_dir": "nowhere"}}, {"extra": 1},
])
def test_invalid_configs_exit_2(overrides, config, tmp_path, capsys):
    assert cli.main(["train", "--config", config(overrides), "--out", str(tmp_path / "run")]) == 2
    assert "error:" in capsys.readouterr().err


def test_missing_or_malformed_config_exit_2(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "nope.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["train", "--config", str(bad)]) == 2


def test_divergence_exits_3(config, tmp_path, monkeypatch):
    def diverge(*args, **kwargs):
        raise NumericError("non-finite training loss at epoch 0")

    monkeypatch.setattr(cli, "fit_network", diverge)
    assert cli.main(["train", "--config", config(), "--out", str(tmp_path / "run")]) == 3


def test_eval_without_checkpoint_exits_2(config, tmp_path):
    assert cli.main(["eval", "--config", config(), "--out", str(tmp_path / "empty")]) == 2


def test_gradcheck_exit_codes(tmp_path, monkeypatch, capsys):
    assert cli.main(["gradcheck", "matmul", "add", "--out", str(tmp_path)]) == 0
    assert "matmul" in capsys.readouterr().out
    assert (tmp_path / "gradcheck.csv").read_text().startswith("op,max_rel_err")
    assert cli.main(["gradcheck", "nonexistent"]) == 2

    def broken(rng):
        x = tn.Tensor(rng.normal(size=4), requires_grad=True)
        return (lambda: tn.make_node(x.data ** 2, (x,), lambda g: (g,))), [x]

    monkeypatch.setitem(gradcheck.CHECKS, "broken", broken)
    assert cli.main(["gradcheck", "broken"]) == 1
    assert "FAILED: broken" in capsys.readouterr().err


def test_bench_flags_and_sweep_file(tmp_path, capsys):
    out = tmp_path / "b"
    assert cli.main(["bench", "--N", "64", "--S", "8,16", "--m", "1,2", "--repeats", "1", "--channels", "8",
                     "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "bench.csv")))
    assert [(r["S"], r["m"]) for r in rows] == [("8", "1"), ("8", "2"), ("16", "1"), ("16", "2")]
    sweep = tmp_path / "sweep.json"
    sweep.write_text(json.dumps({"rows": [[64, 8]], "k": [4], "m": 1, "repeats": 1}))
    assert cli.main(["bench", "--sweep", str(sweep), "--channels", "8", "--out", str(out)]) == 0
    assert "ratio" in capsys.readouterr().out
    assert cli.main(["bench", "--N", "64"]) == 2
    assert cli.main(["bench", "--N", "8", "--S", "16"]) == 2


def test_bench_grid_default_is_the_reference_table():
    grid = cli.bench_grid(cli.DEFAULT_SWEEP)
    assert len(grid) == 6 and (4096, 512, 6, 4) in grid
    with pytest.raises(ConfigError):
        cli.bench_grid({"k": 6})


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("PRA_THREADS", raising=False)
    assert cli.thread_cap(None) is None
    assert cli.thread_cap(4) == 4
    monkeypatch.setenv("PRA_THREADS", "2")
    assert cli.thread_cap(4) == 2 and cli.thread_cap(1) == 1 and cli.thread_cap(None) == 2
    monkeypatch.setenv("PRA_THREADS", "zero")
    with pytest.raises(ConfigError):
        cli.thread_cap(None)
    monkeypatch.setenv("PRA_THREADS", "0")
    with pytest.raises(ConfigError):
        cli.thread_cap(None)


def test_threads_flag_limits_blas(monkeypatch):
    from threadpoolctl import threadpool_info

    monkeypatch.setenv("PRA_THREADS", "1")
    seen = []
    monkeypatch.setattr(cli, "cmd_gen_data", lambda args: seen.append(
        max((i["num_threads"] for i in threadpool_info()), default=1)) or 0)
    assert cli.main(["gen-data", "--threads", "3"]) == 0
    assert seen == [1]


def test_usage_errors_exit_2(capsys):
    assert cli.main([]) == 2
    assert cli.main(["train", "--seed", "x"]) == 2
    assert cli.main(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_bench_sweep_with_m_list_emits_one_row_per_m(tmp_path):
    sweep = tmp_path / "sweep.json"
    sweep.write_text(json.dumps({"N": 1024, "S": 256, "m": [1, 4], "repeats": 1}))
    assert cli.main(["bench", "--sweep", str(sweep), "--channels", "16", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "bench.csv")))
    assert [r["m"] for r in rows] == ["1", "4"]
    for r in rows:
        S, k, m = int(r["S"]), int(r["k"]), int(r["m"])
        assert int(r["edges_naive"]) == S * (S - 1) * k * k and int(r["edges_rep"]) == S * (S - 1) * m


def test_default_sweep_is_faster_in_representative_mode(tmp_path):
    assert cli.main(["bench", "--repeats", "3", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "bench.csv")))
    assert len(rows) == 6
    assert all(float(r["ratio"]) > 1.0 for r in rows), [(r["N"], r["S"], r["m"], r["ratio"]) for r in rows]
