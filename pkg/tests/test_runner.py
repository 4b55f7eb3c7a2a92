import csv
import json
from pathlib import Path

import numpy as np
import pytest

from privcxr.config import load_config
from privcxr.runner import audit, evaluate_run, run_experiment, sweep_epsilon

TINY = {"n": "150", "image_size": "16", "epochs": "2", "bootstrap_redraws": "20", "expected_batch_size": "16"}


def tiny(tmp_path: Path, name: str, **kw) -> object:
    return load_config(overrides={**TINY, "output_dir": str(tmp_path / name), **kw})


def report_files(d: Path) -> list[Path]:
    return [p for p in d.rglob("*") if p.suffix in (".csv", ".json") and p.name != "predictions.csv"
            and p.parent.name != "checkpoint" and p.name not in ("cohort_spec.json",)]


def assert_no_orphans(d: Path, mhash: str) -> None:
    for p in report_files(d):
        if p.name == "train_log.csv":
            continue
        assert mhash in p.read_text(), p


@pytest.fixture(scope="module")
def private_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("priv")
    return run_experiment(tiny(tmp, "run", target_epsilon="4"))


def test_private_run_outputs(private_run):
    d = private_run.out_dir
    m = json.loads((d / "manifest.json").read_text())
    priv = m["identity"]["privacy"]
    assert priv["achieved_epsilon"] <= 4.0
    assert priv["accountant_steps"] == priv["steps"]
    for name in ("metrics.csv", "metrics.json", "fairness.csv", "fairness.json", "predictions.csv", "train_log.csv"):
        assert (d / name).exists()
        assert m["files"][name]
    assert_no_orphans(d, private_run.manifest_hash)
    assert (d / "checkpoint" / "weights.f32").exists()


def test_evaluate_reproduces_metrics(private_run):
    evaluate_run(private_run.out_dir)
    a = json.loads((private_run.out_dir / "metrics.json").read_text())
    b = json.loads((private_run.out_dir / "evaluation.json").read_text())
    assert a["bootstrap_mean"] == b["bootstrap_mean"]


def test_rerun_is_byte_identical(tmp_path):
    a = run_experiment(tiny(tmp_path, "a", mode="non-private"))
    b = run_experiment(tiny(tmp_path, "b", mode="non-private", workers="2"))
    assert a.manifest_hash == b.manifest_hash
    for name in ("metrics.csv", "fairness.csv", "predictions.csv", "checkpoint/weights.f32"):
        assert (a.out_dir / name).read_bytes() == (b.out_dir / name).read_bytes()


def test_audit_run_and_predictions(private_run, tmp_path):
    res = audit(private_run.out_dir, out_dir=tmp_path / "audit")
    out = Path(res["out_dir"])
    for name in ("table3.csv", "table3.json", "figure3.csv", "figure4.csv", "manifest.json"):
        assert (out / name).exists()
    assert_no_orphans(out, res["manifest_sha256"])
    rows = list(csv.DictReader(open(out / "figure4.csv")))
    assert len(rows) == 8
    res2 = audit(private_run.out_dir / "predictions.csv", ("sex",), tmp_path / "a2")
    assert (Path(res2["out_dir"]) / "fairness_sex.json").exists()
    with pytest.raises(FileNotFoundError):
        audit(tmp_path / "nothing")


def test_sweep_rows_and_order(tmp_path):
    cfg = tiny(tmp_path, "unused", epochs="1")
    res = sweep_epsilon(cfg, [1.0, 4.0], [0], out_dir=tmp_path / "sw")
    rows = list(csv.DictReader(open(tmp_path / "sw" / "trend.csv")))
    assert [float(r["epsilon"]) for r in rows] == [1.0, 4.0]
    assert all(r["manifest_sha256"] == res.manifest_hash for r in rows)
    assert res.baseline is not None and not res.failures
    for r in rows:
        assert float(r["achieved_epsilon"]) <= float(r["epsilon"])
    summary = json.loads((tmp_path / "sw" / "summary.json").read_text())
    assert summary["manifest_sha256"] == res.manifest_hash
    for name in ("table2.csv", "table3.csv", "baseline.csv"):
        assert res.manifest_hash in (tmp_path / "sw" / name).read_text()
    aud = audit(tmp_path / "sw")
    assert len({r["epsilon"] for r in csv.DictReader(open(Path(aud["out_dir"]) / "figure4.csv"))}) == 3
    with pytest.raises(ValueError, match="ascending"):
        sweep_epsilon(cfg, [4.0, 1.0], [0], out_dir=tmp_path / "sw2")


def test_dataset_path_run(tmp_path):
    from privcxr.data.cohort import CohortSpec, generate_cohort
    from privcxr.data.io import write_dataset

    write_dataset(generate_cohort(CohortSpec(n=300, raw_size=16, seed=3)), tmp_path / "ds")
    res = run_experiment(tiny(tmp_path, "r", mode="non-private", dataset_path=str(tmp_path / "ds"), n="300", epochs="1"))
    assert np.isfinite(res.metrics.mean["auroc"]["average"])
