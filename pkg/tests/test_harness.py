"""CLI-level tests: config resolution, report emission, subcommand wiring.

Everything drives `main(argv)` in-process against miniature streams, so
the suite exercises the same code paths as the installed entry point
without subprocess overhead.
"""

import hashlib
import json
import os

import numpy as np
import pytest

from qkdcil.config import (
    CONFIG_KEYS,
    STREAM_KEYS,
    coerce_value,
    default_config,
    parse_config_file,
    parse_inline_overrides,
    resolve_config,
    stream_spec_from,
    train_config_from,
)
from qkdcil.datagen import StreamSpec
from qkdcil.errors import ConfigError
from qkdcil.harness import (
    ABLATION_TOGGLES,
    GATE_ORDER,
    ablation_rows,
    main,
    trainable_parameter_count,
)
from qkdcil.report import (
    ExperimentReport,
    csv_text,
    format_number,
    json_text,
    write_text_atomic,
)
from qkdcil.trainer import Metrics, TrainConfig

TINY = """
# miniature stream + short schedule, enough to exercise every code path
num_tasks = 2
classes_per_task = 2
train_per_class = 16
test_per_class = 8
input_dim = 16
subspace_dim = 4
epochs = 2
batch_size = 8
width = 12
q = 3
l_q = 2
r_adapter = 2
r_svd = 3
seed = 11
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def csv_rows(path):
    with open(path, "r", encoding="utf-8") as fh:
        header, *rest = fh.read().strip().split("\n")
    names = header.split(",")
    return [dict(zip(names, line.split(","))) for line in rest]


# ------------------------------------------------------------------ config


def test_default_config_covers_every_key():
    cfg = default_config()
    assert set(cfg) == set(CONFIG_KEYS)
    # one shared seed, not a stream seed plus a train seed
    assert sum(1 for k in cfg if k == "seed") == 1
    train_config_from(cfg)
    stream_spec_from(cfg)


def test_coerce_value_string_conversions():
    assert coerce_value("q", "8") == 8
    assert coerce_value("tau", "0.5") == 0.5
    assert coerce_value("gate_kind", " cosine ") == "cosine"
    assert coerce_value("lambda_kd", 2) == 2.0  # int promotes to float


@pytest.mark.parametrize(
    "key,value",
    [("q", "8.5"), ("tau", "warm"), ("q", True), ("gate_kind", 3)],
)
def test_coerce_value_rejects_wrong_types(key, value):
    with pytest.raises(ConfigError):
        coerce_value(key, value)


def test_unknown_key_error_lists_valid_keys():
    with pytest.raises(ConfigError) as err:
        coerce_value("learning_rate", "0.1")
    message = str(err.value)
    assert "learning_rate" in message
    assert "base_lr" in message and "num_tasks" in message


def test_parse_config_file_comments_and_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("q = 4  # inline comment\n\n# full comment\nq = 6\n")
    assert parse_config_file(str(path)) == {"q": 6}


def test_parse_config_file_reports_bad_line(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("epochs = 3\nnonsense line\n")
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_file(str(path))


def test_parse_config_file_missing():
    with pytest.raises(ConfigError):
        parse_config_file("/nonexistent/dir/x.cfg")


def test_inline_overrides_respect_allowed_set():
    got = parse_inline_overrides("num_tasks=3, noise_sigma=0.2", allowed=STREAM_KEYS)
    assert got == {"num_tasks": 3, "noise_sigma": 0.2}
    with pytest.raises(ConfigError, match="not allowed"):
        parse_inline_overrides("epochs=3", allowed=STREAM_KEYS)


def test_resolve_config_precedence(tmp_path, tiny_config):
    resolved = resolve_config(tiny_config, {"q": 5})
    assert resolved["q"] == 5  # flag beats file
    assert resolved["epochs"] == 2  # file beats default
    assert resolved["momentum"] == 0.9  # default fills the rest
    assert set(resolved) == set(CONFIG_KEYS)


# ------------------------------------------------------------------ report


def test_format_number_int_float_bool():
    assert format_number(7) == "7"
    text = format_number(1.0 / 3.0)
    assert float(text) == 1.0 / 3.0  # 17 significant digits round-trip
    with pytest.raises(TypeError):
        format_number(True)


def sample_report():
    metrics = Metrics(per_stage_accuracy=[1.0 / 3.0, 0.725], final=0.725)
    stages = [
        {"stage": 1, "accuracy": 1.0 / 3.0, "mean_max_weight": 1.0,
         "mean_weight_entropy": 0.0, "train_seconds": 0.5},
        {"stage": 2, "accuracy": 0.725, "mean_max_weight": 0.6,
         "mean_weight_entropy": 0.67, "train_seconds": 0.5},
    ]
    return ExperimentReport(
        config=default_config(), metrics=metrics, stages=stages,
        wall_seconds=1.25, seed=11, version="1", label="run",
    )


def test_json_and_csv_share_numeric_text():
    report = sample_report()
    acc_json = [
        line.split(":")[1].strip().rstrip(",")
        for line in report.to_json().splitlines()
        if '"accuracy"' in line
    ]
    rows = report.to_csv().strip().split("\n")
    names = rows[0].split(",")
    acc_csv = [dict(zip(names, line.split(",")))["accuracy"] for line in rows[1:]]
    assert acc_json == acc_csv
    assert acc_csv[0] == format_number(1.0 / 3.0)


def test_csv_quotes_awkward_strings():
    text = csv_text(["label", "v"], [{"label": 'a,"b"', "v": 1}])
    assert '"a,""b"""' in text


def test_json_text_rejects_unserializable():
    with pytest.raises(TypeError):
        json_text({"x": object()})


def test_write_text_atomic_keeps_previous_on_failure(tmp_path):
    path = tmp_path / "report.json"
    path.write_text("original")
    with pytest.raises(TypeError):
        write_text_atomic(str(path), 1234)  # not text
    assert path.read_text() == "original"
    assert not [p for p in os.listdir(tmp_path) if p.startswith(".report-")]


# ----------------------------------------------------------------- run


def test_run_writes_report_and_checkpoint(tmp_path, tiny_config, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", tiny_config, "--out", str(out)]) == 0
    report = read_json(out / "report.json")
    assert 0.0 <= report["metrics"]["average"] <= 1.0
    assert set(report["config"]) == set(CONFIG_KEYS)
    assert len(csv_rows(out / "report.csv")) == 2
    assert (out / "model.ckpt").exists()
    assert "average=" in capsys.readouterr().out


def test_run_missing_config_leaves_no_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "--config", str(tmp_path / "absent.cfg"), "--out", str(out)])
    assert code == 2
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


def test_run_unknown_config_key_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate = 0.1\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert "valid keys" in capsys.readouterr().err


def test_run_unknown_stream_key_exit_2(tmp_path, tiny_config):
    code = main(
        ["run", "--config", tiny_config, "--stream", "bogus=1",
         "--out", str(tmp_path / "o")]
    )
    assert code == 2


def test_run_impossible_stream_exit_2(tmp_path, tiny_config):
    # subspaces cannot supply this many independent directions
    code = main(
        ["run", "--config", tiny_config, "--stream", "num_tasks=9,subspace_dim=4",
         "--out", str(tmp_path / "o")]
    )
    assert code == 2
    assert not (tmp_path / "o").exists()


def test_run_twice_same_seed_identical_metrics(tmp_path, tiny_config):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", tiny_config, "--out", str(out_a)]) == 0
    assert main(["run", "--config", tiny_config, "--out", str(out_b)]) == 0
    a = read_json(out_a / "report.json")
    b = read_json(out_b / "report.json")
    assert a["metrics"] == b["metrics"]
    assert a["config"] == b["config"]


def test_flag_overrides_land_in_snapshot(tmp_path, tiny_config):
    out = tmp_path / "o"
    assert main(
        ["run", "--config", tiny_config, "--qubits", "4", "--seed", "7",
         "--gate", "cosine", "--out", str(out)]
    ) == 0
    cfg = read_json(out / "report.json")["config"]
    assert cfg["q"] == 4 and cfg["seed"] == 7 and cfg["gate_kind"] == "cosine"


# ----------------------------------------------------------------- ablate


def test_ablation_rows_cumulative_ladder():
    resolved = default_config()
    rows = ablation_rows(resolved, ABLATION_TOGGLES)
    assert [label for label, _ in rows] == ["none", "+gate", "+distill", "+sparsity"]
    assert rows[0][1] == {"gate_kind": "random", "lambda_kd": 0.0, "lambda_s": 0.0}
    assert rows[1][1]["gate_kind"] == "quantum" and rows[1][1]["lambda_kd"] == 0.0
    assert rows[2][1]["lambda_kd"] == resolved["lambda_kd"]
    assert rows[3][1]["lambda_s"] == resolved["lambda_s"]


def test_ablation_rows_unknown_toggle():
    with pytest.raises(ConfigError, match="unknown toggle"):
        ablation_rows(default_config(), ("qgtm", "dropout"))


def test_ablate_writes_four_rows(tmp_path, tiny_config):
    out = tmp_path / "out"
    assert main(["ablate", "--config", tiny_config, "--out", str(out)]) == 0
    rows = csv_rows(out / "ablation.csv")
    assert [r["label"] for r in rows] == ["none", "+gate", "+distill", "+sparsity"]
    docs = read_json(out / "ablation.json")
    assert len(docs) == 4
    assert docs[0]["config"]["gate_kind"] == "random"


def test_all_off_row_equals_random_gate_run(tmp_path, tiny_config):
    out_a = tmp_path / "ablate"
    assert main(
        ["ablate", "--config", tiny_config, "--toggles", "qgtm", "--out", str(out_a)]
    ) == 0
    out_b = tmp_path / "run"
    assert main(
        ["run", "--config", tiny_config, "--gate", "random",
         "--lambda-kd", "0", "--lambda-s", "0", "--out", str(out_b)]
    ) == 0
    ablate_none = read_json(out_a / "ablation.json")[0]
    run_doc = read_json(out_b / "report.json")
    assert ablate_none["metrics"] == run_doc["metrics"]


# ------------------------------------------------------------------ sweep


def test_single_value_sweep_equals_run(tmp_path, tiny_config):
    out_s = tmp_path / "sweep"
    assert main(
        ["sweep", "--config", tiny_config, "--axis", "qubits", "--values", "4",
         "--out", str(out_s)]
    ) == 0
    out_r = tmp_path / "run"
    assert main(
        ["run", "--config", tiny_config, "--qubits", "4", "--out", str(out_r)]
    ) == 0
    sweep_doc = read_json(out_s / "sweep.json")[0]
    run_doc = read_json(out_r / "report.json")
    assert sweep_doc["metrics"] == run_doc["metrics"]


def test_sweep_survives_bad_grid_point(tmp_path, tiny_config, capsys):
    out = tmp_path / "out"
    assert main(
        ["sweep", "--config", tiny_config, "--axis", "qubits", "--values", "0,4",
         "--out", str(out)]
    ) == 0
    assert "qubits=0: error" in capsys.readouterr().err
    rows = csv_rows(out / "sweep.csv")
    assert len(rows) == 2
    assert rows[0]["error"] != "" and rows[0]["average"] == ""
    assert rows[1]["error"] == "" and float(rows[1]["average"]) > 0
    docs = read_json(out / "sweep.json")
    assert "error" in docs[0] and "metrics" in docs[1]


def test_sweep_qubit_grid_five_reports(tmp_path, tiny_config):
    out = tmp_path / "out"
    assert main(
        ["sweep", "--config", tiny_config, "--axis", "qubits",
         "--values", "3,6,9,12,15", "--out", str(out)]
    ) == 0
    assert len(read_json(out / "sweep.json")) == 5


def test_sweep_empty_values_exit_2(tmp_path, tiny_config):
    code = main(
        ["sweep", "--config", tiny_config, "--axis", "qubits", "--values", " , ",
         "--out", str(tmp_path / "o")]
    )
    assert code == 2


# ---------------------------------------------------------- compare-gates


def test_compare_gates_rows_and_parameter_ordering(tmp_path, tiny_config):
    out = tmp_path / "out"
    assert main(["compare-gates", "--config", tiny_config, "--out", str(out)]) == 0
    rows = csv_rows(out / "gates.csv")
    assert [r["label"] for r in rows] == list(GATE_ORDER)
    params = {r["label"]: int(r["parameters"]) for r in rows}
    assert params["quantum"] < params["mlp"]
    assert params["cosine"] == params["random"]
    assert params["quantum"] > params["random"]  # circuit angles counted


# ------------------------------------------------- gen-data / checkpoints


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def test_gen_data_round_trips_into_run(tmp_path, tiny_config):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", tiny_config, "--out", str(data)]) == 0
    digests = {
        name: file_digest(data / name) for name in ("train.qkdfeat", "test.qkdfeat")
    }

    out_f = tmp_path / "from_files"
    assert main(
        ["run", "--config", tiny_config, "--features", str(data), "--out", str(out_f)]
    ) == 0
    out_s = tmp_path / "from_spec"
    assert main(["run", "--config", tiny_config, "--out", str(out_s)]) == 0

    assert (
        read_json(out_f / "report.json")["metrics"]
        == read_json(out_s / "report.json")["metrics"]
    )
    # inputs are read-only for the harness
    for name, digest in digests.items():
        assert file_digest(data / name) == digest


def test_run_missing_features_dir_exit_3(tmp_path, tiny_config):
    code = main(
        ["run", "--config", tiny_config, "--features", str(tmp_path / "nowhere"),
         "--out", str(tmp_path / "o")]
    )
    assert code == 3


def test_inspect_checkpoint_prints_summary(tmp_path, tiny_config, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", tiny_config, "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["inspect-checkpoint", str(out / "model.ckpt")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["num_tasks"] == 2


def test_inspect_checkpoint_missing_exit_3(tmp_path, capsys):
    assert main(["inspect-checkpoint", str(tmp_path / "no.ckpt")]) == 3


# ------------------------------------------------------------- misc CLI


def test_stream_and_features_flags_conflict(tmp_path, tiny_config):
    code = main(
        ["run", "--config", tiny_config, "--stream", "num_tasks=2",
         "--features", str(tmp_path)]
    )
    assert code == 2


def test_trainable_parameter_count_by_hand(tmp_path, tiny_config):
    out = tmp_path / "out"
    assert main(["run", "--config", tiny_config, "--out", str(out)]) == 0
    from qkdcil.checkpoint import load_checkpoint

    model = load_checkpoint(str(out / "model.ckpt"))
    per_block = 12 * 2 + 2 * 12  # w_down (width x r) + w_up (r x width)
    blocks = len(model.adapter_pool[0].blocks)
    expected = 2 * blocks * per_block  # two tasks
    expected += 2 * (2 * 12 + 2)  # two heads: weight (C x width) + bias
    expected += model.gate.projection.size + model.gate.circuit.layer_angles.size
    assert trainable_parameter_count(model) == expected
