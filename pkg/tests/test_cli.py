import json

import numpy as np
import pytest

from flsim import checkpoint, cli, data

SMALL = {"classes": 3, "dim": 4, "n_clients": 6, "samples_per_client": 40,
         "clients_per_round": 3, "hidden": [8], "max_rounds": 4, "stop_at_target": False,
         "seed": 5}


def write_config(tmp_path, **overrides):
    cfg = {**SMALL, **overrides}
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture
def generated(tmp_path):
    path = write_config(tmp_path)
    assert cli.main(["gen-data", "--config", path]) == cli.EXIT_OK
    return tmp_path, path


def test_gen_data_is_byte_identical_and_loadable(tmp_path, capsys):
    path = write_config(tmp_path)
    assert cli.main(["gen-data", "--config", path]) == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "data").iterdir()}
    assert cli.main(["gen-data", "--config", path]) == 0
    second = {p.name: p.read_bytes() for p in (tmp_path / "data").iterdir()}
    assert first == second and "train.flds" in first
    task = data.load_task(tmp_path / "data")
    assert len(task.train) == 6 * 40 and task.shards.n_clients == 6
    out = capsys.readouterr().out
    assert "n=240" in out and "d=4" in out and "C=3" in out and "partition=bylabel" in out


def test_missing_classes_is_config_error(tmp_path, capsys):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"dim": 4}))
    assert cli.main(["gen-data", "--config", str(path)]) == cli.EXIT_CONFIG
    assert "classes" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    assert cli.main(["gen-data", "--config", write_config(tmp_path, colour="red")]) == 2
    assert "colour" in capsys.readouterr().err


@pytest.mark.parametrize("bad", [{"classes": "ten"}, {"lr_server": -1.0}, {"hidden": [4.5]},
                                 {"aggregator": "median"}, {"stop_at_target": 1}])
def test_bad_values_rejected(tmp_path, bad):
    assert cli.main(["gen-data", "--config", write_config(tmp_path, **bad)]) == 2


def test_malformed_json(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text("{not json")
    assert cli.main(["run", "--config", str(path)]) == 2


def test_unwritable_data_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["gen-data", "--config", write_config(tmp_path, data_dir="file/sub")]) == 2


def test_defaults_are_logged(tmp_path, caplog):
    caplog.set_level("INFO", logger="flsim")
    cli.load_experiment(write_config(tmp_path))
    assert "using defaults for" in caplog.text and "beta" in caplog.text


def test_run_without_data_is_config_error(tmp_path, capsys):
    assert cli.main(["run", "--config", write_config(tmp_path)]) == 2
    assert "gen-data" in capsys.readouterr().err


def test_single_round_csv(generated):
    tmp_path, path = generated
    assert cli.main(["run", "--config", write_config(tmp_path, max_rounds=1), "--out",
                     str(tmp_path / "o")]) == cli.EXIT_UNREACHED
    text = (tmp_path / "o" / "metrics.csv").read_bytes().decode("ascii")
    lines = text.split("\n")
    assert lines[0] == "round,aggregator,eval_loss,eval_error,weight_entropy,reward,wall_seconds"
    assert len(lines) == 3 and lines[2] == "" and "\r" not in text
    fields = lines[1].split(",")
    assert fields[0] == "1" and fields[1] == "hier_softmax"
    assert fields[5] == "" and fields[6] == ""
    spec, params = checkpoint.load_params(tmp_path / "o" / "model.flck")
    assert spec.layer_sizes == (4, 8, 3) and params.size == spec.n_params


def test_rerun_gives_identical_csv(generated):
    tmp_path, path = generated
    for name in ("a", "b"):
        cli.main(["run", "--config", path, "--out", str(tmp_path / name)])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_seed_override_changes_run(generated):
    tmp_path, path = generated
    cli.main(["run", "--config", path, "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", path, "--seed", "99", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_reward_column_only_for_rl(generated):
    tmp_path, _ = generated
    path = write_config(tmp_path, aggregator="hier_rl")
    cli.main(["run", "--config", path, "--out", str(tmp_path / "rl")])
    rows = (tmp_path / "rl" / "metrics.csv").read_text().splitlines()[1:]
    assert all(row.split(",")[5] != "" for row in rows)
    assert (tmp_path / "rl" / "policy.flrl").read_bytes()[:6] == b"FLRL1\n"


def test_timing_flag_fills_wall_seconds(generated):
    tmp_path, path = generated
    cli.main(["run", "--config", path, "--timing", "--out", str(tmp_path / "t")])
    row = (tmp_path / "t" / "metrics.csv").read_text().splitlines()[1].split(",")
    assert float(row[6]) >= 0.0


def test_target_reached_exit_code(generated):
    tmp_path, _ = generated
    path = write_config(tmp_path, target_error=1.0, stop_at_target=True)
    assert cli.main(["run", "--config", path]) == cli.EXIT_OK


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(generated):
    tmp_path, _ = generated
    path = write_config(tmp_path, lr_client=1e300, server_optimizer="sgd", lr_server=1e300)
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "n")]) == cli.EXIT_NUMERICAL
    assert (tmp_path / "n" / "metrics.csv").exists()


def test_compare_lists_requested_order(generated, capsys):
    tmp_path, path = generated
    out = tmp_path / "cmp"
    code = cli.main(["compare", "--config", path, "--aggregators",
                     "hier_uniform,fedavg,hier_uniform", "--out", str(out)])
    assert code == cli.EXIT_UNREACHED
    rows = (out / "comparison.csv").read_text().splitlines()
    assert rows[0] == "aggregator,rounds_to_target,final_error,speedup"
    assert [r.split(",")[0] for r in rows[1:]] == ["hier_uniform", "fedavg", "hier_uniform"]
    # same aggregator twice gives identical series
    assert (out / "metrics_0_hier_uniform.csv").read_bytes() == (out / "metrics_2_hier_uniform.csv").read_bytes()
    svg = (out / "convergence.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") == 3


def test_speedup_is_baseline_over_candidate():
    from flsim.orchestrator import Aggregator, TrainingResult
    res = [TrainingResult(np.zeros(1), rounds_to_target=40), TrainingResult(np.zeros(1), rounds_to_target=10),
           TrainingResult(np.zeros(1))]
    rows = cli.comparison_rows([Aggregator.FEDAVG, Aggregator.HIER_SOFTMAX, Aggregator.HIER_RL], res)
    assert rows[1].endswith(",1.0") and rows[2].split(",")[3] == "4.0"
    assert rows[3].split(",")[1] == "" and rows[3].split(",")[3] == ""


def test_unknown_aggregator_in_compare(generated):
    tmp_path, path = generated
    assert cli.main(["compare", "--config", path, "--aggregators", "fedavg,bogus"]) == 2


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        cli.main(["run"])
    assert exc.value.code == 2
