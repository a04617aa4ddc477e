"""Per-patient Dice over modality subsets, forgetting curves and paired t-tests."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .chsnet import CHSNet
from .data import MODALITIES, REGIONS, SegmentationDataset, zero_modalities


def dsc(pred_mask, true_mask) -> float:
    """2|P∩T| / (|P| + |T|), defined as 1 when both masks are empty."""
    p = np.asarray(pred_mask).astype(bool)
    t = np.asarray(true_mask).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"dsc: shape mismatch {p.shape} vs {t.shape}")
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / denom)


def all_subsets(num_modalities: int = 4) -> list[int]:
    """Non-empty availability bitmasks (bit i = modality i), ordered by size then value."""
    masks = range(1, 2 ** num_modalities)
    return sorted(masks, key=lambda m: (bin(m).count("1"), m))


def subset_members(mask: int, modalities: Sequence[str] = MODALITIES) -> list[str]:
    return [m for i, m in enumerate(modalities) if mask >> i & 1]


def subset_name(mask: int, modalities: Sequence[str] = MODALITIES) -> str:
    return "+".join(subset_members(mask, modalities))


@dataclass
class DscReport:
    """DSC per (patient, region, subset); aggregates are patient means."""

    modalities: tuple[str, ...]
    regions: tuple[str, ...]
    patients: list[str]
    subsets: list[int]
    values: dict[tuple[str, str, int], float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.values)

    def patient_scores(self, region: str, subset: int) -> np.ndarray:
        return np.array([self.values[(p, region, subset)] for p in self.patients])

    def mean(self, region: str, subset: int) -> float:
        return float(self.patient_scores(region, subset).mean())

    def table(self) -> list[dict]:
        rows = []
        for s in self.subsets:
            row = {"subset": subset_name(s, self.modalities), "mask": s}
            for i, m in enumerate(self.modalities):
                row[m] = int(s >> i & 1)
            for r in self.regions:
                row[r] = round(100.0 * self.mean(r, s), 4)
            rows.append(row)
        means = {"subset": "mean", "mask": 0, **{m: "" for m in self.modalities}}
        for r in self.regions:
            means[r] = round(100.0 * float(np.mean([self.mean(r, s) for s in self.subsets])), 4)
        rows.append(means)
        return rows

    def to_csv(self) -> str:
        return _csv(self.table())

    def patients_csv(self) -> str:
        rows = [{"patient": p, "region": r, "subset": subset_name(s, self.modalities), "mask": s,
                 "dsc": repr(self.values[(p, r, s)])}
                for s in self.subsets for r in self.regions for p in self.patients]
        return _csv(rows)


def _csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def pooled_patient_dsc(pred: np.ndarray, truth: np.ndarray, patients: Sequence[str],
                       threshold: float = 0.5) -> dict[tuple[str, int], float]:
    """Pool every slice of a patient into one mask per region before the Dice ratio."""
    binary = pred > threshold
    truth = truth > 0.5
    patients = np.asarray(patients)
    out = {}
    for pid in dict.fromkeys(patients.tolist()):
        sel = patients == pid
        for r in range(truth.shape[1]):
            out[(pid, r)] = dsc(binary[sel, r], truth[sel, r])
    return out


def evaluate_subsets(model: CHSNet, dataset: SegmentationDataset, split: str = "test",
                     subsets: Sequence[int] | None = None, threshold: float = 0.5,
                     batch_size: int = 8) -> DscReport:
    """Zero the unavailable channels, predict every slice, pool per patient."""
    x_all, y_all, pids = dataset.multimodal_slices(split)
    mods = tuple(dataset.modalities)
    subsets = list(subsets) if subsets is not None else all_subsets(len(mods))
    patients = list(dict.fromkeys(pids))
    report = DscReport(mods, REGIONS, patients, subsets)
    for s in subsets:
        x = zero_modalities(x_all, subset_members(s, mods), mods)
        pred = model.predict(x, batch_size)
        for (pid, r), v in pooled_patient_dsc(pred, y_all, pids, threshold).items():
            report.values[(pid, REGIONS[r], s)] = v
    return report


@dataclass
class ForgettingReport:
    """``dsc[(stage, modality)]`` = per-region mean DSC on that modality after that stage."""

    modality_order: tuple[str, ...]
    regions: tuple[str, ...]
    dsc: dict[tuple[int, str], dict[str, float]]

    def forgetting(self, modality: str, region: str) -> float:
        j = self.modality_order.index(modality)
        curve = [self.dsc[(i, modality)][region] for i in range(j, len(self.modality_order))]
        return max(curve) - curve[-1]

    def table(self) -> list[dict]:
        rows = []
        last = len(self.modality_order) - 1
        for j, m in enumerate(self.modality_order):
            for r in self.regions:
                row = {"modality": m, "region": r}
                for i in range(len(self.modality_order)):
                    v = self.dsc.get((i, m))
                    row[f"after_stage{i + 1}"] = "" if v is None else round(100.0 * v[r], 4)
                row["final"] = round(100.0 * self.dsc[(last, m)][r], 4)
                row["forgetting"] = round(100.0 * self.forgetting(m, r), 4)
                rows.append(row)
        return rows

    def to_csv(self) -> str:
        return _csv(self.table())


def evaluate_forgetting(stage_models: Sequence[CHSNet], dataset: SegmentationDataset,
                        modality_order: Sequence[str], split: str = "test",
                        threshold: float = 0.5, batch_size: int = 8) -> ForgettingReport:
    """DSC on each earlier modality (alone) after every stage that follows it."""
    mods = list(dataset.modalities)
    out: dict[tuple[int, str], dict[str, float]] = {}
    for i, model in enumerate(stage_models):
        for m in modality_order[: i + 1]:
            mask = 1 << mods.index(m)
            rep = evaluate_subsets(model, dataset, split, [mask], threshold, batch_size)
            out[(i, m)] = {r: rep.mean(r, mask) for r in REGIONS}
    return ForgettingReport(tuple(modality_order), REGIONS, out)


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-tailed paired t-test on per-patient scores."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    md = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if md == 0.0:
            return TTestResult(0.0, 1.0, n - 1, True)
        return TTestResult(math.copysign(math.inf, md), 0.0, n - 1, True)
    t = md / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), n - 1)
    return TTestResult(float(t), float(p), n - 1, False)


def region_summary(report: DscReport) -> dict[str, dict[str, float]]:
    return {subset_name(s, report.modalities): {r: report.mean(r, s) for r in report.regions}
            for s in report.subsets}
