from __future__ import annotations

from pathlib import Path
from typing import Any
from typing import Dict
from typing import List

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from evoail import analysis
from evoail import envs
from evoail.ail import RunRecord
from evoail.analysis import MetricsFrame
from evoail.discriminator import init_disc
from evoail.exceptions import DegenerateSamplesError


def _metrics(n: int, entropy: float = 1.0) -> List[Dict[str, Any]]:
    rows = []
    for i in range(n):
        row: Dict[str, Any] = {c: 0.125 * i for c in analysis.METRIC_COLUMNS}
        row["iteration"] = i
        row["env_steps"] = 64 * (i + 1)
        row["entropy"] = entropy - 0.1 * i
        rows.append(row)
    return rows


def _write_run(
    directory: Path, ra: str, seed: int, wasserstein: float, log_ratios: List[float]
) -> Path:
    record = RunRecord(
        env_id="grid5",
        ra=ra,
        dsl=ra,
        optimizer="ppo",
        seed=seed,
        iterations=3,
        wasserstein=wasserstein,
        eval_return=0.5,
        eval_returns=[0.5],
        normalized_return=0.75,
        elapsed=1.0,
        metrics=_metrics(3, entropy=1.0 + seed),
        log_ratios=log_ratios,
    )
    path = directory / f"{ra}-{seed}.json"
    path.write_text(record.model_dump_json())
    return path


@pytest.fixture
def run_files(tmp_path: Path) -> List[Path]:
    rng = np.random.default_rng(0)
    runs = tmp_path / "runs"
    runs.mkdir()
    return [
        _write_run(runs, "gail", 0, 0.4, list(rng.normal(-1.0, 0.5, 50))),
        _write_run(runs, "gail", 1, 0.5, list(rng.normal(-1.0, 0.5, 50))),
        _write_run(runs, "dail", 0, 0.1, list(rng.normal(0.0, 1.0, 50))),
        _write_run(runs, "dail", 1, 0.2, list(rng.normal(0.0, 1.0, 50))),
    ]


def test_kde_gaussian_integrates_to_one():
    samples = np.random.default_rng(0).normal(size=500)
    grid = np.linspace(-10.0, 10.0, 4001)
    density = analysis.kde_gaussian(samples, grid)
    assert np.all(density >= 0.0)
    assert trapezoid(density, grid) == pytest.approx(1.0, abs=1e-3)
    assert grid[np.argmax(density)] == pytest.approx(0.0, abs=0.5)


@pytest.mark.parametrize(
    "samples",
    [
        np.array([1.0]),
        np.array([]),
        np.array([2.0, 2.0, 2.0]),
        np.array([0.0, np.inf]),
    ],
)
def test_kde_gaussian_degenerate(samples: np.ndarray):
    with pytest.raises(DegenerateSamplesError):
        analysis.kde_gaussian(samples, np.linspace(-1, 1, 5))


@pytest.mark.parametrize(
    "a,b,expected",
    [
        ([2.0, 3.0], [0.0, 1.0], 1.0),
        ([0.0, 1.0], [2.0, 3.0], 0.0),
        ([1.0], [1.0], 0.5),
        ([1.0, 3.0], [2.0], 0.5),
        ([1.0, 2.0, 3.0], [2.0], 0.5),
        ([3.0, 3.0, 1.0], [2.0, 2.0], 2.0 / 3.0),
    ],
)
def test_prob_improvement(a: List[float], b: List[float], expected: float):
    assert analysis.prob_improvement(a, b) == pytest.approx(expected)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.integers(min_value=-5, max_value=5), min_size=1, max_size=20),
    st.lists(st.integers(min_value=-5, max_value=5), min_size=1, max_size=20),
)
def test_prob_improvement_symmetric(a: List[int], b: List[int]):
    assert analysis.prob_improvement(a, b) + analysis.prob_improvement(b, a) == 1.0


def test_prob_improvement_empty():
    with pytest.raises(ValueError):
        analysis.prob_improvement([], [1.0])


def test_mass_in():
    samples = np.array([-3.0, -2.0, -1.0, 0.0, 1.0])
    assert analysis.mass_in(samples, -2.0, 0.0) == pytest.approx(0.6)
    assert np.isnan(analysis.mass_in(np.array([]), -2.0, 0.0))


def test_log_ratio_snapshot(grid_env: envs.GridWorld):
    disc = init_disc(grid_env.obs_dim + grid_env.n_actions, hidden=(8,), seed=0)
    batch = envs.rollout(
        grid_env, envs.UniformPolicy(grid_env.n_actions), 20, None, np.random.default_rng(0)
    )
    snapshot = analysis.log_ratio_snapshot(disc, batch)
    assert snapshot.shape == (20,)
    assert np.all(np.isfinite(snapshot))


def test_metrics_frame():
    frame = MetricsFrame.from_records(_metrics(4), run_id="r0")
    assert len(frame) == 4
    assert list(frame.df.columns) == analysis.KEY_COLUMNS + analysis.METRIC_COLUMNS
    assert not frame.has_nan

    both = MetricsFrame.concat([frame, MetricsFrame.from_records(_metrics(4, 2.0), run_id="r1")])
    curve = both.curve("entropy")
    assert list(curve["iteration"]) == [0, 1, 2, 3]
    assert curve["mean"].iloc[0] == pytest.approx(1.5)
    assert list(curve["count"]) == [2, 2, 2, 2]


def test_metrics_frame_empty():
    assert len(MetricsFrame.empty()) == 0
    assert len(MetricsFrame.from_records([])) == 0
    assert len(MetricsFrame.concat([])) == 0


def test_metrics_frame_invalid():
    rows = _metrics(3)
    rows[1], rows[2] = rows[2], rows[1]
    with pytest.raises(ValueError) as exc_info:
        MetricsFrame.from_records(rows, run_id="r0")
    assert "not increasing" in str(exc_info.value)

    df = pd.DataFrame(_metrics(2)).drop(columns=["entropy"])
    df["run_id"] = "r0"
    with pytest.raises(ValueError) as exc_info:
        MetricsFrame(df)
    assert "entropy" in str(exc_info.value)


def test_metrics_frame_nan():
    rows = _metrics(2)
    rows[0]["disc_loss"] = float("nan")
    assert MetricsFrame.from_records(rows, run_id="r0").has_nan


@pytest.mark.parametrize("format,suffix", [("csv", ".csv"), ("jsonl", ".jsonl")])
def test_emit_and_load(tmp_path: Path, format: str, suffix: str):
    rows = _metrics(3)
    rows[1]["logit_mean"] = 0.1 + 0.2  # needs all 17 digits
    frame = MetricsFrame.from_records(rows, run_id="007")
    path = analysis.emit(frame, tmp_path / "out" / f"metrics{suffix}", format=format)
    loaded = analysis.load_frame(path)
    pd.testing.assert_frame_equal(loaded.df, frame.df, check_dtype=False)
    assert loaded.df["logit_mean"].iloc[1] == 0.1 + 0.2
    assert loaded.df["run_id"].iloc[0] == "007"


def test_emit_unknown_format(tmp_path: Path):
    with pytest.raises(ValueError):
        analysis.emit(MetricsFrame.empty(), tmp_path / "metrics.parquet", format="parquet")


def test_load_frame_header_only(tmp_path: Path):
    path = analysis.emit(MetricsFrame.empty(), tmp_path / "empty.csv")
    assert path.read_text().startswith("run_id,iteration,")
    assert len(analysis.load_frame(path)) == 0


def test_load_frame_unknown_suffix(tmp_path: Path):
    path = tmp_path / "metrics.txt"
    path.write_text("")
    with pytest.raises(ValueError):
        analysis.load_frame(path)


def test_summarize_runs(run_files: List[Path]):
    summary = analysis.summarize_runs(run_files)
    assert list(summary["run_id"]) == [
        "grid5-gail-ppo-s0",
        "grid5-gail-ppo-s1",
        "grid5-dail-ppo-s0",
        "grid5-dail-ppo-s1",
    ]
    assert list(summary["final_entropy"]) == pytest.approx([0.8, 1.8, 0.8, 1.8])
    gail_mass = summary.loc[summary["ra"] == "gail", "log_ratio_mass_m2_0"]
    assert all(gail_mass > 0.8)


def test_pi_table(run_files: List[Path]):
    table = analysis.pi_table(analysis.summarize_runs(run_files))
    assert len(table) == 2
    lookup = {(r.ra_a, r.ra_b): r.prob_improvement for r in table.itertuples()}
    assert lookup[("dail", "gail")] == 1.0
    assert lookup[("gail", "dail")] == 0.0

    by_return = analysis.pi_table(
        analysis.summarize_runs(run_files), metric="eval_return", lower_is_better=False
    )
    assert set(by_return["prob_improvement"]) == {0.5}


def test_kde_table(run_files: List[Path], tmp_path: Path, caplog: pytest.LogCaptureFixture):
    grid = np.linspace(-5.0, 5.0, 101)
    table = analysis.kde_table(run_files, grid)
    assert list(table.columns) == ["logit", "dail", "gail"]
    assert len(table) == 101

    flat = _write_run(tmp_path, "airl", 0, 0.3, [0.0, 0.0])
    table = analysis.kde_table([flat], grid)
    assert list(table.columns) == ["logit"]
    assert "Skipping KDE of airl" in caplog.text


def test_entropy_curves(run_files: List[Path]):
    curves = analysis.entropy_curves(run_files)
    assert list(curves.columns) == ["ra", "iteration", "mean", "std", "count"]
    gail = curves[curves["ra"] == "gail"]
    assert list(gail["mean"]) == pytest.approx([1.5, 1.4, 1.3])
    assert list(gail["count"]) == [2, 2, 2]
    assert analysis.entropy_curves([]).empty


def test_analyze(run_files: List[Path], tmp_path: Path):
    outputs = analysis.analyze(run_files, tmp_path / "analysis", np.linspace(-3.0, 3.0, 61))
    assert set(outputs) == {"summary", "pi", "kde", "entropy"}
    for path in outputs.values():
        assert path.exists()
    summary = pd.read_csv(outputs["summary"])
    assert len(summary) == 4
    pi = pd.read_csv(outputs["pi"])
    assert set(pi["ra_a"]) == {"dail", "gail"}
