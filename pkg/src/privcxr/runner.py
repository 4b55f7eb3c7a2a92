"""End-to-end experiments: data, calibration, training, evaluation, reports.

Every run directory holds ``manifest.json``. Its ``manifest_sha256`` is the
hash of the run's identity (resolved config minus execution-only keys, seed
lineage, dataset and weight checksums, privacy outcome, code version); wall
time and file listings are kept outside the identity so that repeated runs
give byte-identical reports, and every report file carries that hash.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from privcxr import __version__, kernels
from privcxr.accountant import DpSgdConfig, calibrate_sigma
from privcxr.config import ExperimentConfig, resolve
from privcxr.data.cohort import Cohort, generate_cohort, split_patientwise
from privcxr.data.io import read_dataset
from privcxr.data.labels import LABELS, SEXES
from privcxr.data.preprocess import to_model_input
from privcxr.evaluation.metrics import (
    UndefinedMetricError,
    auroc,
    confusion_metrics,
    pearson_r,
    spearman_rho,
)
from privcxr.evaluation.reports import (
    METRICS,
    FairnessReport,
    MetricReport,
    PredictionSet,
    SubgroupStats,
    evaluate_predictions,
    fit_thresholds,
    subgroup_report,
    write_metric_table,
    write_table2,
    write_table3,
)
from privcxr.nn.checkpoint import load_checkpoint, save_checkpoint
from privcxr.nn.loss import inverse_frequency_weights
from privcxr.nn.model import build_model
from privcxr.rng import STREAMS, derive_seed
from privcxr.training import predict_scores, train_non_private, train_private

log = logging.getLogger(__name__)

EXECUTION_KEYS = ("workers", "output_dir", "run_name")
MANIFEST = "manifest.json"
SWEEP_MANIFEST = "sweep_manifest.json"


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def dataset_digest(cohort: Cohort) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(cohort.raw).tobytes())
    h.update(cohort.labels.astype(np.uint8).tobytes())
    h.update(_canonical([list(map(str, cohort.patient_ids)), [int(a) for a in cohort.ages], list(map(str, cohort.sexes))]))
    return h.hexdigest()


@dataclass
class PreparedData:
    cohort: Cohort
    train: np.ndarray
    test: np.ndarray
    images: np.ndarray  # (N, S, S) preprocessed


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    if cfg.dataset_path:
        cohort = read_dataset(Path(cfg.dataset_path))
        split_seed = cfg.seed if cfg.cohort_seed is None else cfg.cohort_seed
    else:
        spec = cfg.cohort_spec()
        cohort = generate_cohort(spec)
        split_seed = spec.seed
    train, test = split_patientwise(cohort, (cfg.train_fraction, 1 - cfg.train_fraction), split_seed)
    return PreparedData(cohort, train, test, cohort.images(cfg.image_size))


@dataclass
class RunResult:
    out_dir: Path
    manifest: dict
    manifest_hash: str
    metrics: MetricReport
    fairness_age: FairnessReport
    fairness_sex: FairnessReport
    predictions: PredictionSet


def _write_text(path: Path, text: str) -> None:
    path.write_text(text)


def _train_log_csv(losses: list[float], sizes: list[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "batch_size", "loss"])
    for i, (l, b) in enumerate(zip(losses, sizes)):
        w.writerow([i, b, "" if l != l else repr(float(l))])
    return buf.getvalue()


def identity_config(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    for k in EXECUTION_KEYS:
        d.pop(k, None)
    return d


def run_experiment(cfg: ExperimentConfig, data: PreparedData | None = None) -> RunResult:
    """Train, evaluate on the held-out split and write reports plus manifest.

    Raises ``BudgetExceededError`` if the accountant's epsilon crosses the
    target mid-run, ``NumericalError`` on non-finite values.
    """
    cfg = resolve(cfg)
    t0 = time.perf_counter()
    data = data if data is not None else prepare_data(cfg)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)

    cohort, tr, te = data.cohort, data.train, data.test
    y = cohort.labels.astype(np.float64)
    x_train = to_model_input(data.images[tr])
    pos_w = inverse_frequency_weights(y[tr])
    init_seed = derive_seed(cfg.seed, "init")
    model = build_model(cfg.model_config(), init_seed)
    lineage = {
        "master_seed": cfg.seed,
        "init_seed": init_seed,
        "cohort_seed": cfg.cohort_spec().seed if not cfg.dataset_path else None,
        "streams": dict(STREAMS),
        "scheme": "SeedSequence(master_seed, spawn_key=(stream_id, step[, index]))",
    }

    privacy: dict = {"mode": cfg.mode}
    if cfg.private:
        n_train = len(tr)
        q = cfg.sampling_rate if cfg.sampling_rate is not None else min(1.0, cfg.expected_batch_size / n_train)
        steps = max(1, int(round(cfg.epochs / q)))
        sigma = cfg.noise_multiplier
        if sigma is None:
            sigma = calibrate_sigma(cfg.target_epsilon, q, steps, cfg.delta)
        dp = DpSgdConfig(q, sigma, cfg.clip_norm, steps, cfg.delta)
        tlog, acc = train_private(
            model, x_train, y[tr], pos_w, dp, lr=cfg.lr, seed=cfg.seed,
            target_epsilon=cfg.target_epsilon, workers=cfg.workers,
        )
        spent = acc.get_privacy_spent(cfg.delta) if sigma > 0 else None
        privacy.update({
            "sampling_rate": q,
            "expected_batch_size": q * n_train,
            "steps": steps,
            "noise_multiplier": sigma,
            "clip_norm": cfg.clip_norm,
            "delta": cfg.delta,
            "target_epsilon": cfg.target_epsilon,
            "achieved_epsilon": spent.epsilon if spent else float("inf"),
            "optimal_order": spent.order if spent else None,
            "accountant_steps": acc.steps,
        })
    else:
        tlog = train_non_private(
            model, data.images[tr], y[tr], pos_w, epochs=cfg.epochs, batch_size=cfg.batch_size,
            lr=cfg.lr, seed=cfg.seed, augmentation=cfg.augmentation, to_input=to_model_input,
            workers=cfg.workers,
        )
        privacy.update({"achieved_epsilon": None, "steps": tlog.steps})

    # evaluate the weights exactly as stored in the checkpoint
    model.lineage = lineage
    ckpt = save_checkpoint(model, out / "checkpoint", lineage)
    model = load_checkpoint(ckpt)
    scores = predict_scores(model, to_model_input(data.images[te]))
    preds = PredictionSet(scores, cohort.labels[te], cohort.ages[te], cohort.sexes[te], cohort.patient_ids[te])
    thresholds = None
    if cfg.threshold_split == "train":
        tr_preds = PredictionSet(predict_scores(model, x_train), cohort.labels[tr], cohort.ages[tr], cohort.sexes[tr])
        thresholds, _ = fit_thresholds(tr_preds)

    identity = {
        "config": identity_config(cfg),
        "seed_lineage": lineage,
        "dataset_sha256": dataset_digest(cohort),
        "split": {"train": len(tr), "test": len(te)},
        "train_label_counts": {l: int(c) for l, c in zip(LABELS, cohort.labels[tr].sum(axis=0))},
        "weights_sha256": json.loads((ckpt / "manifest.json").read_text())["weights_sha256"],
        "privacy": privacy,
        "code_version": __version__,
        "kernel_backend": kernels.BACKEND,
    }
    mhash = sha256_hex(_canonical(identity))

    metrics = evaluate_predictions(preds, redraws=cfg.bootstrap_redraws, seed=cfg.seed, thresholds=thresholds)
    age_rep = subgroup_report(preds, "age", metrics.thresholds)
    sex_rep = subgroup_report(preds, "sex", metrics.thresholds)
    eps_label = _eps_label(privacy)
    reports: list[Path] = []
    preds.to_csv(out / "predictions.csv")
    reports += write_metric_table(out / "metrics", metrics, mhash, title=f"per-label metrics, epsilon={eps_label}")
    reports += write_table3(out / "fairness", [(eps_label, age_rep, sex_rep)], mhash)
    _write_text(out / "train_log.csv", _train_log_csv(tlog.losses, tlog.batch_sizes))

    manifest = {
        "manifest_sha256": mhash,
        "identity": identity,
        "checkpoint": str(ckpt.relative_to(out)),
        "files": {p.name: sha256_hex(p.read_bytes()) for p in sorted(reports + [out / "predictions.csv", out / "train_log.csv"])},
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("run %s done: avg AUROC %.4f, epsilon %s", out, metrics.mean["auroc"]["average"], eps_label)
    return RunResult(out, manifest, mhash, metrics, age_rep, sex_rep, preds)


def _eps_label(privacy: dict) -> str:
    e = privacy.get("achieved_epsilon")
    return "inf" if e is None or e == float("inf") else f"{e:.4g}"


def evaluate_run(run_dir: Path, *, redraws: int | None = None) -> MetricReport:
    """Rebuild the test split from a run manifest, reload the checkpoint and re-emit metrics."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / MANIFEST).read_text())
    cfg = resolve(ExperimentConfig(**{**manifest["identity"]["config"], "output_dir": str(run_dir)}))
    data = prepare_data(cfg)
    model = load_checkpoint(run_dir / manifest["checkpoint"])
    te = data.test
    scores = predict_scores(model, to_model_input(data.images[te]))
    c = data.cohort
    preds = PredictionSet(scores, c.labels[te], c.ages[te], c.sexes[te], c.patient_ids[te])
    rep = evaluate_predictions(preds, redraws=redraws or cfg.bootstrap_redraws, seed=cfg.seed)
    write_metric_table(run_dir / "evaluation", rep, manifest["manifest_sha256"], title="re-evaluation from checkpoint")
    return rep


# -- sweep -------------------------------------------------------------------------------------


def _run_job(cfg: ExperimentConfig) -> tuple[str, bool, str]:
    """(run dir, succeeded, manifest hash or error text)."""
    try:
        res = run_experiment(cfg)
    except Exception as exc:  # recorded, sweep continues
        log.warning("run %s failed: %s", cfg.output_path(), exc)
        return str(cfg.output_path()), False, f"{type(exc).__name__}: {exc}"
    return str(res.out_dir), True, res.manifest_hash


def _load_run(out_dir: Path) -> tuple[dict, MetricReport, FairnessReport, FairnessReport]:
    manifest = json.loads((out_dir / MANIFEST).read_text())
    m = json.loads((out_dir / "metrics.json").read_text())
    rep = MetricReport(
        tuple(m["labels"]), m["thresholds"], m["degenerate_thresholds"], m["point"],
        m["bootstrap_mean"], m["bootstrap_spread"], m["redraws"], m["rejected_redraws"],
    )
    f = json.loads((out_dir / "fairness.json").read_text())["blocks"][0]

    def fr(d: dict) -> FairnessReport:
        return FairnessReport(d["grouping"], [SubgroupStats(**g) for g in d["groups"]], d["missing"], d["thresholds"])

    return manifest, rep, fr(f["age"]), fr(f["sex"])


def _mean_report(reports: list[MetricReport]) -> MetricReport:
    r0 = reports[0]

    def avg(attr: str) -> dict:
        return {m: {k: float(np.mean([getattr(r, attr)[m][k] for r in reports])) for k in r0.mean[m]} for m in METRICS}

    return MetricReport(r0.labels, r0.thresholds, r0.degenerate, avg("point"), avg("mean"), avg("spread"), r0.redraws, sum(r.rejected for r in reports))


def _mean_fairness(reps: list[FairnessReport]) -> FairnessReport:
    groups = []
    for i, g in enumerate(reps[0].groups):
        vals = [r.groups[i] for r in reps]

        def m(attr: str):
            xs = [getattr(v, attr) for v in vals if getattr(v, attr) is not None]
            return float(np.mean(xs)) if xs else None

        groups.append(SubgroupStats(g.name, int(sum(v.size for v in vals)), m("mean_auroc"), m("std_auroc"), m("ptd"), min(v.labels_used for v in vals)))
    return FairnessReport(reps[0].grouping, groups, sorted({x for r in reps for x in r.missing}), {})


@dataclass
class SweepResult:
    out_dir: Path
    rows: list[dict]
    baseline: dict | None
    spearman: float | None
    manifest_hash: str
    failures: dict[str, str]


def sweep_epsilon(
    cfg: ExperimentConfig,
    targets: list[float],
    seeds: list[int] | None = None,
    *,
    include_non_private: bool = True,
    jobs: int = 1,
    out_dir: Path | None = None,
) -> SweepResult:
    """One private run per (target, seed), plus a non-private baseline per seed.

    All targets of one replicate share its seed, so the epsilon comparison
    is made under common random numbers. Failed runs are recorded and the
    sweep continues.
    """
    if not targets or any(not t > 0 for t in targets):
        raise ValueError("targets must be positive")
    if list(targets) != sorted(targets) or len(set(targets)) != len(targets):
        raise ValueError("targets must be strictly ascending")
    seeds = list(seeds) if seeds else [cfg.seed]
    base = resolve(cfg)
    out = Path(out_dir) if out_dir else base.output_path().parent / (base.run_name or "sweep")
    out.mkdir(parents=True, exist_ok=True)

    jobs_cfg: list[tuple[str, int, ExperimentConfig]] = []
    for s in seeds:
        for e in targets:
            c = dataclasses.replace(base, mode="private", target_epsilon=e, noise_multiplier=None, seed=s,
                                    activation=None, augmentation=None, output_dir=str(out / f"eps{e:g}_seed{s}"))
            jobs_cfg.append((f"{e:g}", s, resolve(c)))
        if include_non_private:
            c = dataclasses.replace(base, mode="non-private", seed=s, activation=None, augmentation=None,
                                    output_dir=str(out / f"nonprivate_seed{s}"))
            jobs_cfg.append(("inf", s, resolve(c)))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, [c for _, _, c in jobs_cfg]))
    else:
        results = [_run_job(c) for _, _, c in jobs_cfg]

    failures: dict[str, str] = {}
    loaded: dict[str, list] = {}
    run_hashes = []
    for (tag, s, _), (path, ok, value) in zip(jobs_cfg, results):
        name = Path(path).name
        run_hashes.append({"target": tag, "seed": s, "run": name, "manifest_sha256": value if ok else None})
        if not ok:
            failures[name] = value
            continue
        loaded.setdefault(tag, []).append(_load_run(Path(path)))

    identity = {"config": identity_config(base), "targets": list(targets), "seeds": seeds, "runs": run_hashes}
    mhash = sha256_hex(_canonical(identity))

    rows = []
    for e in targets:
        tag = f"{e:g}"
        runs = loaded.get(tag, [])
        row = {"epsilon": e, "runs_ok": len(runs)}
        if runs:
            row["achieved_epsilon"] = float(np.mean([r[0]["identity"]["privacy"]["achieved_epsilon"] for r in runs]))
            for m in METRICS:
                vals = [r[1].mean[m]["average"] for r in runs]
                row[m] = float(np.mean(vals))
                row[f"{m}_sd_over_seeds"] = float(np.std(vals))
        rows.append(row)
    baseline = None
    if loaded.get("inf"):
        runs = loaded["inf"]
        baseline = {"epsilon": "inf", "runs_ok": len(runs)}
        for m in METRICS:
            vals = [r[1].mean[m]["average"] for r in runs]
            baseline[m] = float(np.mean(vals))
            baseline[f"{m}_sd_over_seeds"] = float(np.std(vals))

    ok = [r for r in rows if r["runs_ok"]]
    rho = None
    if len(ok) >= 2:
        try:
            rho = spearman_rho([r["epsilon"] for r in ok], [r["auroc"] for r in ok])
        except UndefinedMetricError:
            rho = None

    _write_trend(out / "trend.csv", rows, mhash)
    if baseline:
        _write_trend(out / "baseline.csv", [baseline], mhash)
    cols = [(f"eps={t}", _mean_report([r[1] for r in loaded[t]])) for t in ["inf"] + [f"{e:g}" for e in reversed(targets)] if loaded.get(t)]
    if cols:
        write_table2(out / "table2", cols, mhash)
        write_table3(out / "table3", [
            (t.split("=")[1], _mean_fairness([r[2] for r in loaded[t.split("=")[1]]]), _mean_fairness([r[3] for r in loaded[t.split("=")[1]]]))
            for t, _ in cols
        ], mhash)
    summary = {
        "manifest_sha256": mhash,
        "spearman_epsilon_vs_auroc": rho,
        "baseline_auroc": baseline["auroc"] if baseline else None,
        "baseline_at_least_every_private_run": (
            bool(all(baseline["auroc"] >= r[1].mean["auroc"]["average"] for t, rs in loaded.items() if t != "inf" for r in rs))
            if baseline else None
        ),
        "failures": failures,
        "note": "AUROC is the optimised metric; accuracy/sensitivity/specificity at Youden thresholds fluctuate more.",
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / SWEEP_MANIFEST).write_text(json.dumps({"manifest_sha256": mhash, "identity": identity}, indent=2, sort_keys=True) + "\n")
    return SweepResult(out, rows, baseline, rho, mhash, failures)


def _write_trend(path: Path, rows: list[dict], mhash: str) -> None:
    header = ["manifest_sha256", "epsilon", "achieved_epsilon", "runs_ok"] + [c for m in METRICS for c in (m, f"{m}_sd_over_seeds")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([mhash] + [("" if r.get(k) is None else (f"{r[k]:.6f}" if isinstance(r.get(k), float) else r[k])) for k in header[1:]])
    path.write_text(buf.getvalue())


# -- audit -----------------------------------------------------------------------------------------


def _label_means(preds: PredictionSet, mask: np.ndarray, thresholds: dict[str, float]) -> dict[str, float | None]:
    vals: dict[str, list[float]] = {m: [] for m in METRICS}
    for k, l in enumerate(preds.labels):
        s, t = preds.scores[mask, k], preds.targets[mask, k]
        try:
            c = confusion_metrics(s, t, thresholds[l])
            vals["auroc"].append(auroc(s, t))
        except UndefinedMetricError:
            continue
        vals["accuracy"].append(c.accuracy)
        vals["specificity"].append(c.specificity)
        vals["sensitivity"].append(c.sensitivity)
    return {m: (float(np.mean(v)) if v else None) for m, v in vals.items()}


def audit(
    source: Path, groupings: tuple[str, ...] = ("age", "sex"), out_dir: Path | None = None
) -> dict:
    """Fairness audit of a run directory, a sweep directory or a predictions CSV.

    Writes a Table-3-shaped report, per-sex metric curves (``figure3.csv``)
    and per-label training size vs AUROC with Pearson's r (``figure4.csv``).
    """
    source = Path(source)
    entries: list[tuple[str, PredictionSet, dict | None]] = []
    if source.is_file():
        preds = PredictionSet.from_csv(source)
        entries.append(("inf", preds, None))
        identity = {"predictions_sha256": sha256_hex(source.read_bytes())}
    elif (source / SWEEP_MANIFEST).exists():
        sm = json.loads((source / SWEEP_MANIFEST).read_text())
        identity = {"sweep_manifest_sha256": sm["manifest_sha256"]}
        for run in sm["identity"]["runs"]:
            d = source / run["run"]
            if (d / MANIFEST).exists():
                mf = json.loads((d / MANIFEST).read_text())
                entries.append((_eps_label(mf["identity"]["privacy"]), PredictionSet.from_csv(d / "predictions.csv"), mf))
    elif (source / MANIFEST).exists():
        mf = json.loads((source / MANIFEST).read_text())
        identity = {"run_manifest_sha256": mf["manifest_sha256"]}
        entries.append((_eps_label(mf["identity"]["privacy"]), PredictionSet.from_csv(source / "predictions.csv"), mf))
    else:
        raise FileNotFoundError(f"{source}: not a predictions file, run directory or sweep directory")
    if not entries:
        raise ValueError(f"{source}: no runs to audit")
    for g in groupings:
        if g not in ("age", "sex"):
            raise ValueError(f"unknown grouping {g!r}")

    out = Path(out_dir) if out_dir else (source.parent if source.is_file() else source) / "audit"
    out.mkdir(parents=True, exist_ok=True)
    mhash = sha256_hex(_canonical({"audit_of": identity, "groupings": list(groupings)}))

    blocks, fig3, fig4, pearson = [], [], [], {}
    for eps, preds, mf in entries:
        thr, _ = fit_thresholds(preds)
        age_rep = subgroup_report(preds, "age", thr) if "age" in groupings else None
        sex_rep = subgroup_report(preds, "sex", thr) if "sex" in groupings else None
        blocks.append((eps, age_rep, sex_rep))
        for sx in SEXES:
            mask = preds.sexes == sx
            if mask.any():
                fig3.append([eps, sx, *(_label_means(preds, mask, thr)[m] for m in METRICS)])
        counts = mf["identity"]["train_label_counts"] if mf else {l: int(c) for l, c in zip(preds.labels, preds.targets.sum(axis=0))}
        aucs = [auroc(preds.scores[:, k], preds.targets[:, k]) for k in range(len(preds.labels))]
        try:
            r = pearson_r([counts[l] for l in preds.labels], aucs)
        except UndefinedMetricError:
            r = None
        pearson[eps] = r
        for k, l in enumerate(preds.labels):
            fig4.append([eps, l, counts[l], aucs[k], r])

    written = []
    if "age" in groupings and "sex" in groupings:
        written += write_table3(out / "table3", [(e, a, s) for e, a, s in blocks], mhash)
    else:
        g = groupings[0]
        payload = {"manifest_sha256": mhash, "blocks": [{"epsilon": e, g: (a or s).to_dict()} for e, a, s in blocks]}
        p = out / f"fairness_{g}.json"
        p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        written.append(p)

    def emit(path: Path, header: list[str], rows: list[list]) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["manifest_sha256", *header])
        for row in rows:
            w.writerow([mhash, *("" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for v in row)])
        path.write_text(buf.getvalue())
        written.append(path)

    emit(out / "figure3.csv", ["epsilon", "sex", *METRICS], fig3)
    emit(out / "figure4.csv", ["epsilon", "label", "train_positives", "auroc", "pearson_r"], fig4)
    manifest = {"manifest_sha256": mhash, "identity": {"audit_of": identity, "groupings": list(groupings)},
                "files": {p.name: sha256_hex(p.read_bytes()) for p in written}}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return {"out_dir": out, "manifest_sha256": mhash, "pearson_r": pearson, "blocks": blocks}
