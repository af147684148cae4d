"""JSONL result records: determinism contract and lossless round trips."""

import json
import math
from dataclasses import asdict, replace

import numpy as np

from polymerlab.records import ResultRecord, read_records, strip_volatile, write_records


def _sample_records():
    return [
        ResultRecord(
            experiment="demo",
            task_index=1,
            metric="beta",
            value=0.25,
            stderr=0.01,
            seed=7,
            params={"n": 100, "d": 3},
            extra={"target": 0.3, "tol": 0.1},
            wall_clock=1.23,
        ),
        ResultRecord(
            experiment="demo",
            task_index=0,
            metric="alpha",
            value=float(np.float64(2.0)),
            seed=7,
            params={"n": np.int64(10)},
            wall_clock=4.56,
        ),
    ]


def test_round_trip_preserves_payload(tmp_path):
    path = tmp_path / "out.jsonl"
    write_records(path, _sample_records())
    rows = read_records(path)
    assert [r["metric"] for r in rows] == ["alpha", "beta"]  # sorted by task, metric
    assert rows[1]["value"] == 0.25
    assert rows[1]["params"] == {"n": 100, "d": 3}
    assert rows[0]["params"] == {"n": 10}  # numpy ints become plain ints


def test_non_finite_values_survive_the_round_trip(tmp_path):
    recs = [
        ResultRecord("demo", 0, "a", value=math.nan, stderr=math.inf),
        ResultRecord("demo", 1, "b", value=-math.inf, stderr=0.0),
    ]
    path = tmp_path / "out.jsonl"
    write_records(path, recs)
    rows = read_records(path)
    assert math.isnan(rows[0]["value"]) and rows[0]["stderr"] == math.inf
    assert rows[1]["value"] == -math.inf


def test_files_are_valid_sorted_key_jsonl(tmp_path):
    path = tmp_path / "out.jsonl"
    write_records(path, _sample_records())
    for line in path.read_text().splitlines():
        row = json.loads(line)
        assert list(row) == sorted(row)


def test_byte_identical_up_to_wall_clock(tmp_path):
    recs = _sample_records()
    jittered = [replace(r, wall_clock=(r.wall_clock or 0) + 99.0) for r in recs]
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_records(a, recs)
    write_records(b, jittered)
    rows_a = [strip_volatile(r) for r in read_records(a)]
    rows_b = [strip_volatile(r) for r in read_records(b)]
    assert rows_a == rows_b
    assert a.read_bytes() != b.read_bytes()  # only wall_clock differs


def test_strip_volatile_drops_only_wall_clock():
    row = strip_volatile(asdict(_sample_records()[0]))
    assert "wall_clock" not in row
    assert set(row) == {"experiment", "task_index", "metric", "value", "stderr", "seed", "params", "extra"}


def test_write_creates_parent_directories(tmp_path):
    path = tmp_path / "deep" / "nest" / "out.jsonl"
    write_records(path, _sample_records())
    assert path.exists()
