"""Delete/insert decomposition of spectral change, measured on linear mel magnitudes."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import dsp

CSV_COLUMNS = ("stage", "condition", "step", "D", "I", "d_pct", "i_pct", "n_items")
STAGES = (
    ("Mixture", "Masked"),
    ("Masked", "Refined"),
    ("Mixture", "Refined"),
    ("Mixture", "Target"),
)


@dataclass
class DIReport:
    """Deletion energy ``D``, insertion energy ``I`` and their shares in percent.

    Shares are ``None`` when nothing changed (``D + I == 0``).
    """

    D: float
    I: float  # noqa: E741
    d_pct: float | None
    i_pct: float | None
    step: int | None = None
    stage: str = ""
    condition: str = ""
    n_items: int = 1

    def to_row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


def di_delta(reference, output) -> np.ndarray:
    a, b = np.asarray(reference, dtype=np.float64), np.asarray(output, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"di_delta: shape mismatch {a.shape} vs {b.shape}")
    return b - a


def _shares(D: float, I: float) -> tuple[float | None, float | None]:  # noqa: E741
    total = D + I
    if total == 0:
        return None, None
    # dividing first makes a one-sided change exactly 100 / 0
    return 100.0 * (D / total), 100.0 * (I / total)


def di_proportion(delta, **labels) -> DIReport:
    delta = np.asarray(delta, dtype=np.float64)
    if not np.isfinite(delta).all():
        raise ValueError("di_proportion: delta contains non-finite values")
    D = float(-delta[delta < 0].sum()) + 0.0  # no -0.0 in exports
    I = float(delta[delta > 0].sum())  # noqa: E741
    d_pct, i_pct = _shares(D, I)
    return DIReport(D, I, d_pct, i_pct, **labels)


def di_between(reference_logmel, output_logmel, **labels) -> DIReport:
    """D/I of ``output`` relative to ``reference``, both given as log-mel."""
    ref = dsp.to_linear_mel(reference_logmel)
    out = dsp.to_linear_mel(output_logmel)
    return di_proportion(di_delta(ref, out), **labels)


def di_per_step(trajectory, mixture_reference, condition: str = "") -> list[DIReport]:
    """Cumulative report for every state ``k`` against the original mixture (log-mel inputs).

    State 0 is the integration start, so a K-step trajectory yields K + 1 reports.
    """
    if len(trajectory) == 0:
        raise ValueError("di_per_step: empty trajectory")
    ref = dsp.as_frames(mixture_reference)
    return [di_between(ref, dsp.as_frames(s), step=k, stage="Mixture->Step", condition=condition)
            for k, s in enumerate(trajectory)]


def mean_report(reports: list[DIReport], **labels) -> DIReport:
    """Average energies and per-item shares; items with null shares are skipped for the shares."""
    if not reports:
        raise ValueError("mean_report: no reports")
    D = math.fsum(r.D for r in reports) / len(reports)
    I = math.fsum(r.I for r in reports) / len(reports)  # noqa: E741
    live = [r for r in reports if r.d_pct is not None]
    if live:
        # fsum keeps an all-100 column at exactly 100
        d_pct = math.fsum(r.d_pct for r in live) / len(live)
        i_pct = math.fsum(r.i_pct for r in live) / len(live)
    else:
        d_pct = i_pct = None
    return DIReport(D, I, d_pct, i_pct, n_items=len(reports), **labels)


def di_stage_table(items, condition: str = "") -> list[DIReport]:
    """Dataset-level stage table.

    ``items`` yields dicts with log-mel matrices under ``Mixture``, ``Masked``,
    ``Refined`` and ``Target``. One row per stage pair, averaged over items.
    """
    per_stage: dict[tuple[str, str], list[DIReport]] = {s: [] for s in STAGES}
    for item in items:
        for a, b in STAGES:
            per_stage[(a, b)].append(di_between(item[a], item[b]))
    return [mean_report(per_stage[(a, b)], stage=f"{a}->{b}", condition=condition)
            for a, b in STAGES]


def write_csv(reports: list[DIReport], path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in reports:
            row = r.to_row()
            w.writerow({k: "" if v is None else v for k, v in row.items()})


def write_json(reports: list[DIReport], path) -> None:
    Path(path).write_text(json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True) + "\n")
