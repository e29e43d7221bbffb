import math

import yaml

from onestepvc.logs import MetricsLogger, RunDirectory, dump_jsonl_line, read_jsonl


def test_run_directory_layout(tmp_path):
    run_dir = RunDirectory(tmp_path / "run").create({"seed": 3, "mel_scales": [1, 2]})
    assert run_dir.checkpoint_dir.is_dir()
    assert yaml.safe_load(run_dir.config_path.read_text()) == {
        "mel_scales": [1, 2],
        "seed": 3,
    }
    assert run_dir.checkpoint_path("student", 7).name == "student-7.pt"
    assert run_dir.eval_dir == run_dir.path / "eval"


def test_latest_checkpoint_orders_numerically(tmp_path):
    run_dir = RunDirectory(tmp_path).create({})
    assert run_dir.latest_checkpoint("teacher") is None
    for step in (2, 10, 9):
        run_dir.checkpoint_path("teacher", step).touch()
    run_dir.checkpoint_path("student", 50).touch()
    assert run_dir.latest_checkpoint("teacher").name == "teacher-10.pt"


def test_metrics_and_timing_are_separate(tmp_path):
    with MetricsLogger(tmp_path) as metrics:
        metrics.log(0, {"loss": 1.5}, elapsed=0.25)
        metrics.log(1, {"loss": 1.0}, phase="eval")
    records = read_jsonl(tmp_path / "metrics.jsonl")
    assert records == [
        {"step": 0, "phase": "train", "loss": 1.5},
        {"step": 1, "phase": "eval", "loss": 1.0},
    ]
    [timing] = read_jsonl(tmp_path / "timing.jsonl")
    assert timing == {"step": 0, "phase": "train", "seconds": 0.25}
    assert all("seconds" not in r for r in records)


def test_append_keeps_records(tmp_path):
    with MetricsLogger(tmp_path) as metrics:
        metrics.log(0, {"loss": 1.0})
    with MetricsLogger(tmp_path, append=True) as metrics:
        metrics.log(1, {"loss": 0.5})
    assert [r["step"] for r in read_jsonl(tmp_path / "metrics.jsonl")] == [0, 1]


def test_jsonl_lines_are_sorted_and_finite():
    line = dump_jsonl_line({"b": math.inf, "a": [math.nan, 1.0], "c": {2: -math.inf}})
    assert line == '{"a": ["nan", 1.0], "b": "inf", "c": {"2": "-inf"}}\n'
