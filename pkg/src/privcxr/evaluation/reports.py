"""Per-label metric reports, subgroup fairness reports and their file forms."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from privcxr.data.labels import AGE_BIN_NAMES, LABELS, SEXES, age_bin
from privcxr.evaluation.metrics import (
    UndefinedMetricError,
    auroc,
    bootstrap,
    confusion_metrics,
    statistical_parity_difference,
    youden_threshold,
)

METRICS = ("auroc", "accuracy", "specificity", "sensitivity")


@dataclass
class PredictionSet:
    scores: np.ndarray  # (B, L)
    targets: np.ndarray  # (B, L) bool
    ages: np.ndarray
    sexes: np.ndarray
    patient_ids: np.ndarray | None = None
    labels: tuple[str, ...] = LABELS

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.targets = np.asarray(self.targets).astype(bool)
        self.ages = np.asarray(self.ages, dtype=int)
        self.sexes = np.asarray(self.sexes).astype(str)
        if self.scores.ndim != 2 or self.scores.shape != self.targets.shape:
            raise ValueError(f"scores {self.scores.shape} and targets {self.targets.shape} must be equal (B, L)")
        b = self.scores.shape[0]
        if self.ages.shape != (b,) or self.sexes.shape != (b,):
            raise ValueError("ages and sexes need one entry per prediction row")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")
        bad = set(np.unique(self.sexes)) - set(SEXES)
        if bad:
            raise ValueError(f"unknown sex values: {sorted(bad)}")
        if len(self.labels) != self.scores.shape[1]:
            raise ValueError("label names do not match the score columns")

    def __len__(self) -> int:
        return self.scores.shape[0]

    @property
    def age_bins(self) -> np.ndarray:
        return np.array([age_bin(int(a)) for a in self.ages], dtype=int)

    @property
    def comorbidity(self) -> np.ndarray:
        return self.targets.sum(axis=1)

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "age", "sex", *(f"score_{l}" for l in self.labels), *(f"target_{l}" for l in self.labels)])
            pids = self.patient_ids if self.patient_ids is not None else [""] * len(self)
            for i in range(len(self)):
                w.writerow([pids[i], int(self.ages[i]), self.sexes[i], *(repr(float(v)) for v in self.scores[i]), *(int(v) for v in self.targets[i])])

    @classmethod
    def from_csv(cls, path: Path) -> PredictionSet:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty predictions file")
        header = rows[0]
        for col in ("age", "sex"):
            if col not in header:
                raise ValueError(f"{path}: missing subgroup column {col!r}")
        labels = tuple(h[len("score_"):] for h in header if h.startswith("score_"))
        si = [header.index(f"score_{l}") for l in labels]
        ti = [header.index(f"target_{l}") for l in labels]
        body = rows[1:]
        return cls(
            np.array([[float(r[i]) for i in si] for r in body]).reshape(len(body), len(labels)),
            np.array([[int(r[i]) for i in ti] for r in body], dtype=bool).reshape(len(body), len(labels)),
            np.array([int(r[header.index("age")]) for r in body], dtype=int),
            np.array([r[header.index("sex")] for r in body]),
            np.array([r[header.index("patient_id")] for r in body]) if "patient_id" in header else None,
            labels,
        )


# -- per-label metrics -----------------------------------------------------------


@dataclass
class MetricReport:
    labels: tuple[str, ...]
    thresholds: dict[str, float]
    degenerate: dict[str, bool]
    point: dict[str, dict[str, float]]  # metric -> label/"average" -> value
    mean: dict[str, dict[str, float]]
    spread: dict[str, dict[str, float]]
    redraws: int
    rejected: int

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "thresholds": self.thresholds,
            "degenerate_thresholds": self.degenerate,
            "point": self.point,
            "bootstrap_mean": self.mean,
            "bootstrap_spread": self.spread,
            "redraws": self.redraws,
            "rejected_redraws": self.rejected,
        }


def fit_thresholds(preds: PredictionSet) -> tuple[dict[str, float], dict[str, bool]]:
    thr, deg = {}, {}
    for k, l in enumerate(preds.labels):
        r = youden_threshold(preds.scores[:, k], preds.targets[:, k])
        thr[l], deg[l] = r.threshold, r.degenerate
    return thr, deg


def _label_metrics(scores: np.ndarray, targets: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """(4, L + 1) array: metric x (labels..., average)."""
    n_lab = scores.shape[1]
    out = np.empty((len(METRICS), n_lab + 1))
    for k in range(n_lab):
        c = confusion_metrics(scores[:, k], targets[:, k], thresholds[k])
        out[:, k] = (auroc(scores[:, k], targets[:, k]), c.accuracy, c.specificity, c.sensitivity)
    out[:, -1] = out[:, :-1].mean(axis=1)
    return out


def evaluate_predictions(
    preds: PredictionSet,
    *,
    redraws: int = 1000,
    seed: int = 0,
    thresholds: dict[str, float] | None = None,
) -> MetricReport:
    """AUROC and Youden-threshold accuracy/specificity/sensitivity per label.

    Thresholds are fit once on ``preds`` unless given; bootstrap redraws
    resample prediction rows jointly across labels.
    """
    deg = {l: False for l in preds.labels}
    if thresholds is None:
        thresholds, deg = fit_thresholds(preds)
    thr = np.array([thresholds[l] for l in preds.labels])
    point = _label_metrics(preds.scores, preds.targets, thr)
    boot = bootstrap(lambda s, t: _label_metrics(s, t, thr), (preds.scores, preds.targets), redraws, seed)
    keys = (*preds.labels, "average")

    def table(a: np.ndarray) -> dict[str, dict[str, float]]:
        return {m: {k: float(a[i, j]) for j, k in enumerate(keys)} for i, m in enumerate(METRICS)}

    return MetricReport(
        tuple(preds.labels), {l: float(v) for l, v in thresholds.items()}, deg,
        table(point), table(boot.mean), table(boot.spread), boot.redraws, boot.rejected,
    )


# -- fairness ----------------------------------------------------------------------------


@dataclass
class SubgroupStats:
    name: str
    size: int
    mean_auroc: float | None = None
    std_auroc: float | None = None
    ptd: float | None = None
    labels_used: int = 0


@dataclass
class FairnessReport:
    grouping: str
    groups: list[SubgroupStats]
    missing: list[str] = field(default_factory=list)
    thresholds: dict[str, float] = field(default_factory=dict)

    def by_name(self) -> dict[str, SubgroupStats]:
        return {g.name: g for g in self.groups}

    def to_dict(self) -> dict:
        return {
            "grouping": self.grouping,
            "groups": [g.__dict__ for g in self.groups],
            "missing": self.missing,
            "thresholds": self.thresholds,
        }


def _grouping(preds: PredictionSet, grouping: str) -> list[tuple[str, np.ndarray]]:
    if grouping == "age":
        bins = preds.age_bins
        return [(name, bins == k) for k, name in enumerate(AGE_BIN_NAMES)]
    if grouping == "sex":
        return [(s.capitalize(), preds.sexes == s) for s in SEXES]
    raise ValueError(f"grouping must be 'age' or 'sex', got {grouping!r}")


def correctness(preds: PredictionSet, thresholds: dict[str, float]) -> np.ndarray:
    thr = np.array([thresholds[l] for l in preds.labels])
    return (preds.scores >= thr[None, :]) == preds.targets


def subgroup_report(
    preds: PredictionSet, grouping: str, thresholds: dict[str, float] | None = None
) -> FairnessReport:
    """Mean/StD over labels of per-subgroup AUROC, and PtD of each group vs all others.

    Correctness is judged per label cell at the label's Youden threshold on
    the full prediction set; PtD pools the cells of all labels.
    """
    if thresholds is None:
        thresholds, _ = fit_thresholds(preds)
    correct = correctness(preds, thresholds)
    groups = _grouping(preds, grouping)
    present = [(n, m) for n, m in groups if m.any()]
    if len(present) < 2:
        raise UndefinedMetricError(
            f"grouping {grouping!r} has {len(present)} nonempty subgroup(s); PtD needs a complement"
        )
    out, missing = [], []
    for name, mask in groups:
        if not mask.any():
            missing.append(name)
            out.append(SubgroupStats(name, 0))
            continue
        aucs = []
        for k in range(len(preds.labels)):
            try:
                aucs.append(auroc(preds.scores[mask, k], preds.targets[mask, k]))
            except UndefinedMetricError:
                pass
        cell_mask = np.repeat(mask[:, None], len(preds.labels), axis=1)
        ptd = statistical_parity_difference(correct.ravel(), cell_mask.ravel())
        out.append(SubgroupStats(
            name, int(mask.sum()),
            float(np.mean(aucs)) if aucs else None,
            float(np.std(aucs)) if aucs else None,
            ptd, len(aucs),
        ))
    return FairnessReport(grouping, out, missing, dict(thresholds))


# -- file emission ---------------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _write_json(path: Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def write_metric_table(path_stem: Path, report: MetricReport, manifest_hash: str, *, title: str = "") -> list[Path]:
    """Per-label grid (labels + Average) x (AUROC, Accuracy, Specificity, Sensitivity)."""
    header = ["manifest_sha256", "label"] + [f"{m}_{x}" for m in METRICS for x in ("mean", "spread")] + ["threshold"]
    rows = []
    for key in (*report.labels, "average"):
        row = [manifest_hash, key]
        for m in METRICS:
            row += [_fmt(report.mean[m][key]), _fmt(report.spread[m][key])]
        row.append(_fmt(report.thresholds.get(key)) if key != "average" else "")
        rows.append(row)
    csv_path, json_path = Path(f"{path_stem}.csv"), Path(f"{path_stem}.json")
    _write_csv(csv_path, header, rows)
    _write_json(json_path, {"manifest_sha256": manifest_hash, "title": title, **report.to_dict()})
    return [csv_path, json_path]


def write_table2(path_stem: Path, runs: list[tuple[str, MetricReport]], manifest_hash: str) -> list[Path]:
    """AUROC per label (rows) for each run (columns, e.g. one per epsilon)."""
    header = ["manifest_sha256", "label"] + [name for name, _ in runs]
    labels = runs[0][1].labels if runs else LABELS
    rows = []
    for key in (*labels, "average"):
        rows.append([manifest_hash, key] + [
            f"{r.mean['auroc'][key]:.4f} +/- {r.spread['auroc'][key]:.4f}" for _, r in runs
        ])
    csv_path, json_path = Path(f"{path_stem}.csv"), Path(f"{path_stem}.json")
    _write_csv(csv_path, header, rows)
    _write_json(json_path, {
        "manifest_sha256": manifest_hash,
        "columns": [name for name, _ in runs],
        "auroc": {name: {"mean": r.mean["auroc"], "spread": r.spread["auroc"]} for name, r in runs},
    })
    return [csv_path, json_path]


def write_table3(
    path_stem: Path, blocks: list[tuple[str, FairnessReport, FairnessReport]], manifest_hash: str
) -> list[Path]:
    """One block per run: Mean / StD / PtD rows over age bins and sex.

    The sex PtD is reported once, for the female group against the male group.
    """
    cols = list(AGE_BIN_NAMES) + ["Female", "Male"]
    header = ["manifest_sha256", "epsilon", "statistic"] + cols
    rows, js = [], []
    for eps, age_rep, sex_rep in blocks:
        a, s = age_rep.by_name(), sex_rep.by_name()
        stats = {**a, **s}
        mean = [_fmt(stats[c].mean_auroc) for c in cols]
        std = [_fmt(stats[c].std_auroc) for c in cols]
        ptd = [_fmt(a[c].ptd) for c in AGE_BIN_NAMES] + [_fmt(s["Female"].ptd), ""]
        rows += [[manifest_hash, eps, "Mean", *mean], [manifest_hash, eps, "StD", *std], [manifest_hash, eps, "PtD", *ptd]]
        js.append({"epsilon": eps, "age": age_rep.to_dict(), "sex": sex_rep.to_dict()})
    csv_path, json_path = Path(f"{path_stem}.csv"), Path(f"{path_stem}.json")
    _write_csv(csv_path, header, rows)
    _write_json(json_path, {"manifest_sha256": manifest_hash, "blocks": js})
    return [csv_path, json_path]
