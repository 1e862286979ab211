"""Focusing-quality metrics and cross-method comparison reports.

`evaluate` scores one phase pattern against a target region: mean
intensity on the target, on the background, enhancement over a seeded
random-phase baseline, Pearson correlation with the target weights, and
the intensity profiles through the brightest pixel.  `compare` collects
several such reports (different optimizers, ablation modes, ...) into a
CSV table plus overlaid profile figures.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .classical import TargetSpec
from .core_sim import PhasePattern, ShapeError, SpecklePattern, TransmissionMatrix, fields_from_phases
from .rng import make_rng

# keys that must agree for reports to be comparable
_SHARED_KEYS = ("tm_seed", "target_checksum", "grid_side")


@dataclass(frozen=True)
class FocusReport:
    """Focusing metrics for one method on one (matrix, target) pair."""

    method: str
    tm_seed: int
    target_checksum: str
    grid_side: int
    target_mean_intensity: float
    background_mean_intensity: float
    baseline_mean_intensity: float
    enhancement: float
    pearson_correlation: float
    peak_row: int
    peak_col: int
    row_profile: np.ndarray
    col_profile: np.ndarray
    baseline_draws: int
    seed: int

    def scalar_row(self) -> dict:
        return {
            "method": self.method,
            "tm_seed": self.tm_seed,
            "target_checksum": self.target_checksum,
            "grid_side": self.grid_side,
            "target_mean_intensity": self.target_mean_intensity,
            "background_mean_intensity": self.background_mean_intensity,
            "baseline_mean_intensity": self.baseline_mean_intensity,
            "enhancement": self.enhancement,
            "pearson_correlation": self.pearson_correlation,
            "peak_row": self.peak_row,
            "peak_col": self.peak_col,
            "baseline_draws": self.baseline_draws,
            "seed": self.seed,
        }


CSV_COLUMNS = [
    "method",
    "tm_seed",
    "target_checksum",
    "grid_side",
    "target_mean_intensity",
    "background_mean_intensity",
    "baseline_mean_intensity",
    "enhancement",
    "pearson_correlation",
    "peak_row",
    "peak_col",
    "baseline_draws",
    "seed",
]


def target_checksum(target: TargetSpec) -> str:
    return hashlib.sha1(np.ascontiguousarray(target.flat).tobytes()).hexdigest()[:12]


def profiles(speckle, peak: tuple[int, int] | None = None):
    """Row and column intensity profiles through the peak.

    The peak defaults to the grid argmax; ties resolve to the smallest
    row, then the smallest column.
    """
    grid = speckle.values if isinstance(speckle, (SpecklePattern, PhasePattern)) else np.asarray(speckle)
    if grid.ndim == 1:
        side = math.isqrt(grid.size)
        if side * side != grid.size:
            raise ShapeError(f"cannot view {grid.size} modes as a square grid")
        grid = grid.reshape(side, side)
    if peak is None:
        flat_idx = int(np.argmax(grid))
        peak = (flat_idx // grid.shape[1], flat_idx % grid.shape[1])
    r, c = peak
    return grid[r, :].copy(), grid[:, c].copy()


def evaluate(
    tm: TransmissionMatrix,
    phase: PhasePattern,
    target: TargetSpec,
    n_random_baseline: int = 200,
    seed: int = 0,
    method: str = "unnamed",
) -> FocusReport:
    """Score a phase pattern: target/background means, enhancement over
    the random-phase baseline, correlation with the target weights, and
    profiles through the speckle peak.  Deterministic for a fixed seed."""
    if n_random_baseline < 10:
        raise ValueError(f"n_random_baseline must be >= 10, got {n_random_baseline}")
    if target.n_modes != tm.n_outputs:
        raise ShapeError(
            f"target has {target.n_modes} modes, matrix produces {tm.n_outputs}"
        )
    side = math.isqrt(tm.n_outputs)
    if side * side != tm.n_outputs:
        raise ShapeError(f"output mode count {tm.n_outputs} is not a square grid")

    field = fields_from_phases(tm.entries, phase.flat)
    inten = np.abs(field) ** 2
    w = target.flat
    target_mean = float(w @ inten)
    bg = np.setdiff1d(np.arange(tm.n_outputs), target.support)
    background_mean = float(inten[bg].mean()) if bg.size else 0.0

    rng = make_rng(seed)
    draws = rng.uniform(0.0, 1.0, size=(n_random_baseline, tm.n_inputs))
    baseline_fields = fields_from_phases(tm.entries, draws)
    baseline_mean = float(np.mean((np.abs(baseline_fields) ** 2) @ w))

    grid = inten.reshape(side, side)
    if np.std(inten) > 0.0 and np.std(w) > 0.0:
        pearson = float(np.corrcoef(inten, w)[0, 1])
    else:
        pearson = 0.0  # undefined for constant inputs
    flat_idx = int(np.argmax(grid))
    peak = (flat_idx // side, flat_idx % side)
    row_p, col_p = profiles(grid, peak)

    return FocusReport(
        method=method,
        tm_seed=tm.seed if tm.seed is not None else -1,
        target_checksum=target_checksum(target),
        grid_side=side,
        target_mean_intensity=target_mean,
        background_mean_intensity=background_mean,
        baseline_mean_intensity=baseline_mean,
        enhancement=target_mean / baseline_mean,
        pearson_correlation=pearson,
        peak_row=peak[0],
        peak_col=peak[1],
        row_profile=row_p,
        col_profile=col_p,
        baseline_draws=n_random_baseline,
        seed=seed,
    )


def _profile_figure(reports, attr, axis_label):
    fig = Figure(figsize=(7, 4.5), dpi=110)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    for rep in reports:
        ax.plot(getattr(rep, attr), label=rep.method, linewidth=1.4)
    ax.set_xlabel(axis_label)
    ax.set_ylabel("intensity")
    ax.set_title(f"intensity {attr.replace('_', ' ')} through focus peak")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def compare(reports: list[FocusReport], out_dir) -> dict[str, str]:
    """Write a comparison CSV plus overlaid profile figures.

    All reports must come from the same matrix and target; mismatched
    metadata raises with the offending field names.  Returns the paths
    of everything written.
    """
    if not reports:
        raise ValueError("no reports to compare")
    first = reports[0]
    mismatched = [
        key
        for key in _SHARED_KEYS
        if any(getattr(r, key) != getattr(first, key) for r in reports[1:])
    ]
    if mismatched:
        raise ValueError(f"reports disagree on {', '.join(mismatched)}")

    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    table = out_dir / "comparison.csv"
    with open(table, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for rep in reports:
            writer.writerow(rep.scalar_row())
    paths["table"] = str(table)

    prof = out_dir / "profiles.csv"
    with open(prof, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "axis", "index", "intensity"])
        for rep in reports:
            for axis, vec in (("row", rep.row_profile), ("col", rep.col_profile)):
                for i, v in enumerate(vec):
                    writer.writerow([rep.method, axis, i, repr(float(v))])
    paths["profiles"] = str(prof)

    for attr, fname in (("row_profile", "profiles_row.png"), ("col_profile", "profiles_col.png")):
        fig = _profile_figure(reports, attr, "column" if attr == "row_profile" else "row")
        fig_path = out_dir / fname
        fig.savefig(fig_path, metadata={"Software": "loft"})
        paths[fname] = str(fig_path)
    return paths
