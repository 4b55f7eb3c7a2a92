"""Dataset-on-disk: a directory of PGM images plus ``metadata.csv``."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from privcxr.data.cohort import Cohort, CohortSpec
from privcxr.data.labels import LABELS, SEXES, binarize_labels

METADATA_HEADER = ["patient_id", "filename", "age", "sex", *LABELS]
METADATA = "metadata.csv"
REFERENCE = "reference_scores.csv"
SPEC = "cohort_spec.json"


class DatasetFormatError(ValueError):
    pass


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary PGM; 8-bit for uint8 input, 16-bit big-endian otherwise (maxval 4095 or 65535)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-d")
    if img.dtype == np.uint8:
        maxval, body = 255, img.tobytes()
    else:
        if img.min() < 0 or img.max() > 65535:
            raise ValueError("16-bit PGM values must lie in [0, 65535]")
        maxval = 4095 if img.max() <= 4095 else 65535
        body = img.astype(">u2").tobytes()
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + body)


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise DatasetFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * (1 if maxval < 256 else 2)
    if len(data) - pos < n:
        raise DatasetFormatError(f"{path}: truncated pixel data")
    img = np.frombuffer(data[pos : pos + n], dtype=dtype).reshape(h, w)
    return img.astype(np.uint8 if maxval < 256 else np.uint16)


def write_dataset(cohort: Cohort, directory: Path) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with open(directory / METADATA, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METADATA_HEADER)
        for i in range(len(cohort)):
            write_pgm(directory / "images" / cohort.filenames[i], cohort.raw[i])
            w.writerow([cohort.patient_ids[i], cohort.filenames[i], int(cohort.ages[i]), cohort.sexes[i], *cohort.grades[i]])
    if cohort.reference_scores is not None:
        with open(directory / REFERENCE, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["filename", *LABELS])
            for fname, row in zip(cohort.filenames, cohort.reference_scores):
                w.writerow([fname, *(repr(float(v)) for v in row)])
    if cohort.spec is not None:
        (directory / SPEC).write_text(json.dumps(cohort.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return directory


def read_dataset(directory: Path) -> Cohort:
    directory = Path(directory)
    meta = directory / METADATA
    if not meta.exists():
        raise DatasetFormatError(f"{directory}: missing {METADATA}")
    with open(meta, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != METADATA_HEADER:
        got = rows[0] if rows else []
        raise DatasetFormatError(f"{meta}: header must be exactly {','.join(METADATA_HEADER)}; got {','.join(got)}")
    body = rows[1:]
    for line, r in enumerate(body, start=2):
        if len(r) != len(METADATA_HEADER):
            raise DatasetFormatError(f"{meta}:{line}: expected {len(METADATA_HEADER)} fields, got {len(r)}")
        if r[3] not in SEXES:
            raise DatasetFormatError(f"{meta}:{line}: sex must be one of {SEXES}, got {r[3]!r}")
    grades = np.array([r[4:] for r in body], dtype=object).reshape(len(body), len(LABELS))
    labels = np.array([binarize_labels(g) for g in grades], dtype=bool).reshape(len(body), len(LABELS))
    raw = [read_pgm(directory / "images" / r[1]) for r in body]
    raw_arr = np.stack(raw) if raw else np.zeros((0, 1, 1), dtype=np.uint16)
    ref = None
    if (directory / REFERENCE).exists():
        with open(directory / REFERENCE, newline="") as fh:
            rr = list(csv.reader(fh))[1:]
        lookup = {r[0]: [float(v) for v in r[1:]] for r in rr}
        ref = np.array([lookup[r[1]] for r in body]).reshape(len(body), len(LABELS))
    spec = None
    if (directory / SPEC).exists():
        spec = CohortSpec.from_dict(json.loads((directory / SPEC).read_text()))
    return Cohort(
        np.array([r[0] for r in body], dtype=object),
        np.array([int(r[2]) for r in body], dtype=int),
        np.array([r[3] for r in body], dtype=object),
        grades, labels, raw_arr,
        np.array([r[1] for r in body], dtype=object), ref, spec,
    )
