"""Analysis of stored runs: log-ratio densities, entropy curves and
probability of improvement. Everything is emitted as plot-ready tables."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from dataclasses import fields
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np
import pandas as pd
from scipy.stats import gaussian_kde

from .ail import IterationMetrics
from .ail import RunRecord
from .discriminator import DiscState
from .discriminator import logits
from .envs import Transitions
from .envs import sa_features
from .exceptions import DegenerateSamplesError
from .utils import make_parent_dirs
from .utils import read_jsonl
from .utils import write_jsonl

FLOAT_FORMAT = "%.17g"
KEY_COLUMNS = ["run_id", "iteration"]
METRIC_COLUMNS = [f.name for f in fields(IterationMetrics) if f.name != "iteration"]


def kde_gaussian(samples: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Gaussian KDE with Scott's bandwidth evaluated on `grid`."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if len(samples) < 2:
        raise DegenerateSamplesError(f"KDE needs at least 2 samples, got {len(samples)}")
    if not np.all(np.isfinite(samples)):
        raise DegenerateSamplesError("KDE samples must be finite")
    if np.std(samples) == 0.0:
        raise DegenerateSamplesError("KDE samples have zero variance")
    kde = gaussian_kde(samples, bw_method="scott")
    return np.maximum(kde(np.asarray(grid, dtype=np.float64)), 0.0)


def prob_improvement(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """P(A > B) + 0.5 P(A = B) over all pairs of scores (Mann-Whitney)."""
    a = np.asarray(scores_a, dtype=np.float64).ravel()
    b = np.asarray(scores_b, dtype=np.float64).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ValueError("prob_improvement needs nonempty score lists")
    wins = int(np.sum(a[:, None] > b[None, :]))
    ties = int(np.sum(a[:, None] == b[None, :]))
    num = 2 * wins + ties
    den = 2 * len(a) * len(b)
    # Derive the smaller side from the larger one so both directions sum to 1
    if 2 * num >= den:
        return num / den
    return 1.0 - (den - num) / den


def log_ratio_snapshot(disc: DiscState, rollout: Transitions) -> np.ndarray:
    """Discriminator logits, one per visited (s, a) pair."""
    n_actions = disc.input_dim - rollout.obs.shape[1]
    return logits(disc, sa_features(rollout.obs, rollout.actions, n_actions))


def mass_in(samples: np.ndarray, low: float, high: float) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        return float("nan")
    return float(np.mean((samples >= low) & (samples <= high)))


@dataclass
class MetricsFrame:
    """Per-iteration training metrics of one or more runs."""

    df: pd.DataFrame

    def __post_init__(self) -> None:
        missing = [c for c in KEY_COLUMNS + METRIC_COLUMNS if c not in self.df.columns]
        if missing:
            raise ValueError(f"MetricsFrame is missing columns: {', '.join(missing)}")
        self.df = self.df[KEY_COLUMNS + METRIC_COLUMNS].reset_index(drop=True)
        for run_id, group in self.df.groupby("run_id", sort=False):
            if not group["iteration"].is_monotonic_increasing:
                raise ValueError(f"Iterations of run {run_id!r} are not increasing")

    def __len__(self) -> int:
        return len(self.df)

    @classmethod
    def empty(cls) -> MetricsFrame:
        return cls(pd.DataFrame(columns=KEY_COLUMNS + METRIC_COLUMNS))

    @classmethod
    def from_records(
        cls, records: Iterable[Dict[str, Any]], run_id: Optional[str] = None
    ) -> MetricsFrame:
        rows = [dict(r) for r in records]
        if run_id is not None:
            for row in rows:
                row["run_id"] = run_id
        if not rows:
            return cls.empty()
        return cls(pd.DataFrame(rows))

    @classmethod
    def concat(cls, frames: Sequence[MetricsFrame]) -> MetricsFrame:
        if not frames:
            return cls.empty()
        return cls(pd.concat([f.df for f in frames], ignore_index=True))

    @property
    def has_nan(self) -> bool:
        return bool(self.df[METRIC_COLUMNS].isna().any().any())

    def curve(self, column: str) -> pd.DataFrame:
        """Mean and std of `column` per iteration across runs."""
        return (
            self.df.groupby("iteration")[column]
            .agg(["mean", "std", "count"])
            .reset_index()
        )


def emit(frame: Union[MetricsFrame, pd.DataFrame], path: Union[str, Path], format: str = "csv") -> Path:
    """Writes `frame` as CSV or JSON lines with full float64 precision."""
    df = frame.df if isinstance(frame, MetricsFrame) else frame
    path = make_parent_dirs(path)
    if format == "csv":
        df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    elif format == "jsonl":
        records = (
            json.dumps({k: (v.item() if hasattr(v, "item") else v) for k, v in row.items()})
            for row in df.to_dict(orient="records")
        )
        write_jsonl(path, records)
    else:
        raise ValueError(f"Unknown format {format!r}, expected csv or jsonl")
    logging.debug("Wrote %d rows to %s", len(df), path)
    return path


def load_frame(path: Union[str, Path]) -> MetricsFrame:
    path = Path(path)
    if path.suffix == ".csv":
        df = pd.read_csv(path, float_precision="round_trip", dtype={"run_id": str})
    elif path.suffix in (".jsonl", ".json"):
        df = pd.DataFrame(list(read_jsonl(path)))
    else:
        raise ValueError(f"Unknown metrics file type: {path}")
    if df.empty:
        return MetricsFrame.empty()
    return MetricsFrame(df)


def load_run(path: Union[str, Path]) -> RunRecord:
    return RunRecord.model_validate_json(Path(path).read_text())


def run_id(record: RunRecord) -> str:
    return f"{record.env_id}-{record.ra}-{record.optimizer}-s{record.seed}"


def summarize_runs(paths: Sequence[Union[str, Path]]) -> pd.DataFrame:
    """One row per stored run with its final scores and log-ratio statistics."""
    rows = []
    for path in paths:
        record = load_run(path)
        final = record.metrics[-1] if record.metrics else {}
        rows.append(
            {
                "run_id": run_id(record),
                "env_id": record.env_id,
                "ra": record.ra,
                "optimizer": record.optimizer,
                "seed": record.seed,
                "wasserstein": record.wasserstein,
                "eval_return": record.eval_return,
                "normalized_return": record.normalized_return,
                "final_entropy": final.get("entropy", float("nan")),
                "log_ratio_mean": float(np.mean(record.log_ratios)) if record.log_ratios else float("nan"),
                "log_ratio_mass_m2_0": mass_in(np.asarray(record.log_ratios), -2.0, 0.0),
            }
        )
    return pd.DataFrame(rows)


def pi_table(summary: pd.DataFrame, metric: str = "wasserstein", lower_is_better: bool = True) -> pd.DataFrame:
    """Pairwise probability of improvement of each RA over each other."""
    groups = {
        ra: group[metric].dropna().to_numpy(dtype=np.float64)
        for ra, group in summary.groupby("ra", sort=True)
    }
    sign = -1.0 if lower_is_better else 1.0
    rows = []
    for a, scores_a in groups.items():
        for b, scores_b in groups.items():
            if a == b or len(scores_a) == 0 or len(scores_b) == 0:
                continue
            rows.append(
                {
                    "ra_a": a,
                    "ra_b": b,
                    "metric": metric,
                    "prob_improvement": prob_improvement(sign * scores_a, sign * scores_b),
                }
            )
    return pd.DataFrame(rows, columns=["ra_a", "ra_b", "metric", "prob_improvement"])


def kde_table(paths: Sequence[Union[str, Path]], grid: np.ndarray) -> pd.DataFrame:
    """KDE of the pooled final log ratios per RA function on `grid`."""
    pooled: Dict[str, List[float]] = {}
    for path in paths:
        record = load_run(path)
        pooled.setdefault(record.ra, []).extend(record.log_ratios)
    columns = {"logit": np.asarray(grid, dtype=np.float64)}
    for ra, samples in sorted(pooled.items()):
        try:
            columns[ra] = kde_gaussian(np.asarray(samples), grid)
        except DegenerateSamplesError as e:
            logging.warning("Skipping KDE of %s: %s", ra, e)
    return pd.DataFrame(columns)


def entropy_curves(paths: Sequence[Union[str, Path]]) -> pd.DataFrame:
    """Mean policy entropy per iteration for every RA function."""
    frames = []
    for path in paths:
        record = load_run(path)
        frame = MetricsFrame.from_records(record.metrics, run_id=run_id(record))
        curve = frame.curve("entropy")
        curve.insert(0, "ra", record.ra)
        frames.append(curve)
    if not frames:
        return pd.DataFrame(columns=["ra", "iteration", "mean", "std", "count"])
    df = pd.concat(frames, ignore_index=True)
    return (
        df.groupby(["ra", "iteration"])["mean"]
        .agg(["mean", "std", "count"])
        .reset_index()
    )


def analyze(
    paths: Sequence[Union[str, Path]], out_dir: Union[str, Path], grid: np.ndarray
) -> Dict[str, Path]:
    """Writes summary, probability-of-improvement, KDE and entropy tables."""
    out_dir = Path(out_dir)
    summary = summarize_runs(paths)
    outputs = {
        "summary": emit(summary, out_dir / "summary.csv"),
        "pi": emit(pi_table(summary), out_dir / "prob_improvement.csv"),
        "kde": emit(kde_table(paths, grid), out_dir / "log_ratio_kde.csv"),
        "entropy": emit(entropy_curves(paths), out_dir / "entropy.csv"),
    }
    logging.info("Analyzed %d runs into %s", len(summary), out_dir)
    return outputs
