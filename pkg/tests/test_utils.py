from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evoail import utils


@pytest.mark.parametrize(
    "text,expected",
    [
        ("0:1:0.5", [0.0, 0.5, 1.0]),
        ("-1:1:1", [-1.0, 0.0, 1.0]),
        ("2:2:0.1", [2.0]),
        ("0:0.3:0.1", [0.0, 0.1, 0.2, 0.3]),
    ],
)
def test_parse_grid(text: str, expected: list):
    np.testing.assert_allclose(utils.parse_grid(text), expected)


def test_parse_grid_default_size():
    grid = utils.parse_grid("-5:5:0.1")
    assert len(grid) == 101
    assert grid[0] == -5.0
    assert grid[-1] == pytest.approx(5.0)


@pytest.mark.parametrize("text", ["", "1:2", "a:b:c", "0:1:0", "0:1:-1", "1:0:0.1"])
def test_parse_grid_invalid(text: str):
    with pytest.raises(ValueError):
        utils.parse_grid(text)


def test_write_file_creates_parents(tmp_path: Path):
    path = tmp_path / "a" / "b" / "out.txt"
    utils.write_file(path, "hello")
    assert path.read_text() == "hello\n"
    utils.write_file(path, "done\n")
    assert path.read_text() == "done\n"


def test_jsonl_roundtrip(tmp_path: Path):
    path = tmp_path / "lines.jsonl"
    rows = [{"a": 1}, {"b": [1.5, 2.5]}, {"c": None}]
    utils.write_jsonl(path, (json.dumps(r) for r in rows))
    assert list(utils.read_jsonl(path)) == rows


def test_read_jsonl_skips_blank_lines(tmp_path: Path):
    path = tmp_path / "lines.jsonl"
    path.write_text('{"a": 1}\n\n   \n{"a": 2}\n')
    assert [r["a"] for r in utils.read_jsonl(path)] == [1, 2]


def test_read_jsonl_invalid(tmp_path: Path):
    path = tmp_path / "lines.jsonl"
    path.write_text('{"a": 1}\nnot json\n')
    with pytest.raises(ValueError) as exc_info:
        list(utils.read_jsonl(path))
    assert "line 2" in str(exc_info.value)


def test_spawn_rngs_independent_and_reproducible():
    a = [rng.random() for rng in utils.spawn_rngs(42, 3)]
    b = [rng.random() for rng in utils.spawn_rngs(42, 3)]
    assert a == b
    assert len(set(a)) == 3


def test_expand_env_vars(monkeypatch: pytest.MonkeyPatch):
    monkeypatch.setenv("EVOAIL_TEST_HOST", "example.org")
    data = {
        "llm": {"base_url": "http://${EVOAIL_TEST_HOST}/v1", "retries": 3},
        "list": ["$EVOAIL_TEST_HOST", 1],
    }
    expanded = utils.expand_env_vars(data)
    assert expanded["llm"]["base_url"] == "http://example.org/v1"
    assert expanded["llm"]["retries"] == 3
    assert expanded["list"] == ["example.org", 1]


def test_deep_merge():
    base = {"ppo": {"lr": 0.1, "epochs": 4}, "ra": "dail"}
    override = {"ppo": {"lr": 0.2}, "env": {"id": "chain"}}
    merged = utils.deep_merge(base, override)
    assert merged == {
        "ppo": {"lr": 0.2, "epochs": 4},
        "ra": "dail",
        "env": {"id": "chain"},
    }
    # Inputs are not modified
    assert base["ppo"]["lr"] == 0.1
    assert "env" not in base


@given(st.text())
def test_sha256_hex(text: str):
    digest = utils.sha256_hex(text)
    assert len(digest) == 64
    assert digest == utils.sha256_hex(text)
