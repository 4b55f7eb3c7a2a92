"""Finding labels, grade schemes and subgroup keys."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LABELS = ("cdm", "cng", "per", "pel", "pir", "pil", "alr", "all")
LABEL_NAMES = {
    "cdm": "cardiomegaly",
    "cng": "congestion",
    "per": "pleural effusion right",
    "pel": "pleural effusion left",
    "pir": "pneumonic infiltration right",
    "pil": "pneumonic infiltration left",
    "alr": "atelectasis right",
    "all": "atelectasis left",
}

CARDIO_GRADES = ("normal", "uncertain", "borderline", "enlarged", "massively enlarged")
SEVERITY_GRADES = ("negative", "uncertain", "mild", "moderate", "severe")
# first two classes of each scheme are negative
_POSITIVE = {g: i >= 2 for i, g in enumerate(CARDIO_GRADES)}
_POSITIVE_SEV = {g: i >= 2 for i, g in enumerate(SEVERITY_GRADES)}

AGE_BINS = ((0, 30), (30, 60), (60, 70), (70, 80), (80, 100))
AGE_BIN_NAMES = tuple(f"[{lo}, {hi})" for lo, hi in AGE_BINS)
SEXES = ("female", "male")


def grade_scheme(label: str) -> tuple[str, ...]:
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}")
    return CARDIO_GRADES if label == "cdm" else SEVERITY_GRADES


def binarize_labels(grades) -> np.ndarray:
    """Map 8 ordinal grade strings (label order ``LABELS``) to a boolean vector."""
    grades = list(grades)
    if len(grades) != len(LABELS):
        raise ValueError(f"expected {len(LABELS)} grades, got {len(grades)}")
    out = np.zeros(len(LABELS), dtype=bool)
    for k, (label, grade) in enumerate(zip(LABELS, grades)):
        table = _POSITIVE if label == "cdm" else _POSITIVE_SEV
        if grade not in table:
            raise ValueError(
                f"label {label!r}: unknown grade {grade!r}; expected one of {grade_scheme(label)}"
            )
        out[k] = table[grade]
    return out


def age_bin(age: int) -> int:
    """Index into ``AGE_BINS``. Ages of 100 or more fall into the last bin."""
    if age < 0:
        raise ValueError(f"age must be >= 0, got {age}")
    for k, (lo, hi) in enumerate(AGE_BINS):
        if lo <= age < hi:
            return k
    return len(AGE_BINS) - 1


@dataclass(frozen=True)
class SubgroupKey:
    age_bin: int
    sex: str
    comorbidity_count: int

    def __post_init__(self) -> None:
        if not 0 <= self.age_bin < len(AGE_BINS):
            raise ValueError(f"age_bin out of range: {self.age_bin}")
        if self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if self.comorbidity_count < 0:
            raise ValueError("comorbidity_count must be >= 0")

    @classmethod
    def from_study(cls, age: int, sex: str, labels: np.ndarray) -> SubgroupKey:
        return cls(age_bin(int(age)), sex, int(np.count_nonzero(labels)))

    @property
    def age_bin_name(self) -> str:
        return AGE_BIN_NAMES[self.age_bin]
