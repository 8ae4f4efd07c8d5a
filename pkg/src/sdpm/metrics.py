"""Dice, volume correlation and volume difference percentage, plus reports."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DataError, UndefinedCorrelationError


def dice(pred, truth) -> float:
    """``2|P & G| / (|P| + |G|)``; two empty masks score 1."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(truth).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def volume_correlation(pred_vols, true_vols) -> float:
    """Pearson correlation of paired volumes."""
    a = np.asarray(pred_vols, dtype=np.float64)
    b = np.asarray(true_vols, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("volume lists must be 1-D and of equal length")
    if a.size < 2:
        raise ValueError("need at least two cases for a correlation")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant volume list")
    # one square root keeps identical inputs at exactly 1
    return float(np.clip((da @ db) / math.sqrt(saa * sbb), -1.0, 1.0))


def vdp(vol_pred: float, vol_true: float) -> float:
    if vol_true <= 0:
        raise ValueError("vdp is undefined for an empty reference volume")
    return abs(vol_pred - vol_true) / vol_true


@dataclass
class CaseResult:
    id: str
    dice: float
    vol_pred: int
    vol_true: int

    @property
    def vdp(self) -> float | None:
        return vdp(self.vol_pred, self.vol_true) if self.vol_true > 0 else None

    def to_dict(self) -> dict:
        return {**asdict(self), "vdp": self.vdp}


@dataclass
class EvalReport:
    cases: list[CaseResult]
    config: dict = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([c.dice for c in self.cases]))

    @property
    def vc(self) -> float | None:
        try:
            return volume_correlation([c.vol_pred for c in self.cases], [c.vol_true for c in self.cases])
        except (UndefinedCorrelationError, ValueError):
            return None

    @property
    def n_empty_truth(self) -> int:
        return sum(c.vol_true == 0 for c in self.cases)

    @property
    def mean_vdp(self) -> float | None:
        vals = [c.vdp for c in self.cases if c.vol_true > 0]
        return float(np.mean(vals)) if vals else None

    def aggregates(self) -> dict:
        return {
            "mean_dice": self.mean_dice,
            "vc": self.vc,
            "mean_vdp": self.mean_vdp,
            "n_empty_truth": self.n_empty_truth,
        }

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "cases": [c.to_dict() for c in self.cases],
            "aggregates": self.aggregates(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def table(self) -> str:
        lines = [f"{'id':<12} {'dice':>8} {'vol_pred':>9} {'vol_true':>9} {'vdp':>8}"]
        for c in self.cases:
            v = "-" if c.vdp is None else f"{c.vdp:.4f}"
            lines.append(f"{c.id:<12} {c.dice:>8.4f} {c.vol_pred:>9d} {c.vol_true:>9d} {v:>8}")
        agg = self.aggregates()
        fmt = lambda x: "n/a" if x is None else f"{x:.4f}"  # noqa: E731
        lines.append(
            f"mean dice {fmt(agg['mean_dice'])}  VC {fmt(agg['vc'])}  "
            f"mean VDP {fmt(agg['mean_vdp'])}  empty-truth cases {agg['n_empty_truth']}"
        )
        return "\n".join(lines)

    def write(self, path) -> Path:
        """Write the JSON report and a ``.txt`` table next to it."""
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.to_json())
        p.with_suffix(".txt").write_text(self.table() + "\n")
        return p

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        cases = [CaseResult(c["id"], c["dice"], c["vol_pred"], c["vol_true"]) for c in d["cases"]]
        return cls(cases=cases, config=d.get("config", {}))


def case_result(sample_id: str, pred_mask, true_mask) -> CaseResult:
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(true_mask).astype(bool)
    return CaseResult(id=sample_id, dice=dice(p, g), vol_pred=int(p.sum()), vol_true=int(g.sum()))


def evaluate(predictor: Callable, dataset, config: dict | None = None, workers: int = 1) -> EvalReport:
    """Run ``predictor(index, sample) -> binary mask`` on every case and aggregate.

    Cases are independent; results are collected in dataset order regardless
    of ``workers``.
    """
    samples = list(dataset)
    if not samples:
        raise DataError("cannot evaluate an empty dataset")

    def run(i):
        s = samples[i]
        return case_result(s.id, predictor(i, s), s.mask)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            cases = list(ex.map(run, range(len(samples))))
    else:
        cases = [run(i) for i in range(len(samples))]
    return EvalReport(cases=cases, config=dict(config or {}))
