"""Synthetic subgroup-annotated chest-radiograph-like cohort.

Each study is a small grayscale image built from a fixed thorax-like layout,
per-study clutter and pixel noise, plus one spatial template per finding.
The template amplitude of finding ``l`` in a study is its *evidence*

    a = s_l * y + z,   z ~ N(0, 1),   s_l = separability * label_weight_l * age_factor

so ``separability`` is the class separation of the evidence in noise units;
``reference_scores`` holds ``a`` itself, an upper bound on what any model
can read off the image. Two of the eight templates carry a random-phase
texture, so part of the signal is only visible to nonlinear features.

Older patients get weaker evidence and more clutter (``age_difficulty``).
A planted accuracy gap reflects ``a -> s_l - a`` for a fixed number of
cells of one subgroup that sit on the correct side of the midpoint ``s_l / 2``,
so a midpoint classifier loses exactly that fraction of correct cells there.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats

from privcxr.data.labels import (
    AGE_BINS,
    CARDIO_GRADES,
    LABELS,
    SEVERITY_GRADES,
    SEXES,
    SubgroupKey,
    age_bin,
)
from privcxr.data.preprocess import preprocess, to_model_input
from privcxr.rng import stream

# reference cohort statistics (study counts out of 193,311)
_TOTAL = 193_311
FEMALE_FRACTION = 67_292 / _TOTAL
AGE_BIN_FRACTIONS = tuple(n / _TOTAL for n in (5_444, 52_631, 46_907, 61_822, 26_507))
AGE_BIN_MOMENTS = ((21.0, 8.0), (51.0, 8.0), (65.0, 3.0), (75.0, 3.0), (84.0, 3.0))
PREVALENCES = tuple(
    n / _TOTAL for n in (90_348, 16_371, 15_609, 12_571, 22_513, 15_993, 18_761, 15_082)
)
TRAIN_FRACTION = 153_502 / _TOTAL

LABEL_WEIGHTS = (1.0, 0.8, 1.0, 1.0, 0.85, 0.85, 0.9, 0.9)
# shift of the label latent by age bin; younger studies carry fewer findings
AGE_LABEL_SHIFT = (-0.35, -0.1, 0.0, 0.05, 0.05)

GRADE_PROBS_NEG = (0.8, 0.2)
GRADE_PROBS_POS = (0.5, 0.35, 0.15)


@dataclass(frozen=True)
class CohortSpec:
    n: int = 2000
    female_fraction: float = FEMALE_FRACTION
    age_bin_fractions: tuple[float, ...] = AGE_BIN_FRACTIONS
    prevalences: tuple[float, ...] = PREVALENCES
    separability: float = 3.0
    age_difficulty: float = 0.25
    label_correlation: float = 0.3
    split_fractions: tuple[float, float] = (TRAIN_FRACTION, 1 - TRAIN_FRACTION)
    raw_size: int = 32
    mean_studies_per_patient: float = 1.6
    planted_gap: float = 0.0
    gap_group: str = "age:4"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "age_bin_fractions", tuple(float(v) for v in self.age_bin_fractions))
        object.__setattr__(self, "prevalences", tuple(float(v) for v in self.prevalences))
        object.__setattr__(self, "split_fractions", tuple(float(v) for v in self.split_fractions))
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not 0 <= self.female_fraction <= 1:
            raise ValueError(f"female_fraction must lie in [0, 1], got {self.female_fraction}")
        if len(self.age_bin_fractions) != len(AGE_BINS):
            raise ValueError(f"need {len(AGE_BINS)} age-bin fractions")
        if any(f < 0 for f in self.age_bin_fractions) or abs(sum(self.age_bin_fractions) - 1) > 1e-9:
            raise ValueError(f"age-bin fractions must be >= 0 and sum to 1, got {self.age_bin_fractions}")
        if len(self.prevalences) != len(LABELS) or not all(0 < p < 1 for p in self.prevalences):
            raise ValueError(f"need {len(LABELS)} prevalences in (0, 1)")
        if len(self.split_fractions) != 2 or min(self.split_fractions) < 0 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ValueError(f"split fractions must be two values summing to 1, got {self.split_fractions}")
        if self.separability < 0:
            raise ValueError("separability must be >= 0")
        if not 0 <= self.age_difficulty < 1:
            raise ValueError("age_difficulty must lie in [0, 1)")
        if not 0 <= self.label_correlation < 1:
            raise ValueError("label_correlation must lie in [0, 1)")
        if not 0 <= self.planted_gap <= 0.5:
            raise ValueError("planted_gap must lie in [0, 0.5]")
        if self.raw_size < 8:
            raise ValueError("raw_size must be >= 8")
        if self.mean_studies_per_patient < 1:
            raise ValueError("mean_studies_per_patient must be >= 1")
        parse_group(self.gap_group)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CohortSpec:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def parse_group(text: str) -> tuple[str, object]:
    """'age:K' (bin index) or 'sex:female' / 'sex:male'."""
    kind, _, value = text.partition(":")
    if kind == "age" and value.isdigit() and int(value) < len(AGE_BINS):
        return "age", int(value)
    if kind == "sex" and value in SEXES:
        return "sex", value
    raise ValueError(f"invalid group {text!r}; use 'age:<0-{len(AGE_BINS) - 1}>' or 'sex:female|male'")


@dataclass
class Cohort:
    """Per-study arrays; row i of every field describes study i."""

    patient_ids: np.ndarray
    ages: np.ndarray
    sexes: np.ndarray
    grades: np.ndarray  # (N, 8) grade strings
    labels: np.ndarray  # (N, 8) bool
    raw: np.ndarray  # (N, R, R) uint16, 12-bit
    filenames: np.ndarray
    reference_scores: np.ndarray | None = None
    spec: CohortSpec | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.patient_ids)

    def subset(self, idx: np.ndarray) -> Cohort:
        idx = np.asarray(idx, dtype=int)
        ref = None if self.reference_scores is None else self.reference_scores[idx]
        return Cohort(
            self.patient_ids[idx], self.ages[idx], self.sexes[idx], self.grades[idx],
            self.labels[idx], self.raw[idx], self.filenames[idx], ref, self.spec, dict(self.meta),
        )

    @property
    def age_bins(self) -> np.ndarray:
        return np.array([age_bin(int(a)) for a in self.ages], dtype=int)

    @property
    def comorbidity(self) -> np.ndarray:
        return self.labels.sum(axis=1).astype(int)

    def subgroup_keys(self) -> list[SubgroupKey]:
        return [SubgroupKey.from_study(a, s, y) for a, s, y in zip(self.ages, self.sexes, self.labels)]

    def images(self, size: int) -> np.ndarray:
        """Preprocessed images (N, size, size) in [0, 255]."""
        if len(self) == 0:
            return np.zeros((0, size, size))
        return np.stack([preprocess(r, size) for r in self.raw])

    def model_inputs(self, size: int) -> np.ndarray:
        return to_model_input(self.images(size))


# -- image layout -------------------------------------------------------------


def _grid(r: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(r) + 0.5) / r * 2 - 1
    return np.meshgrid(c, c, indexing="xy")  # u: left-right, v: top-bottom


def _ellipse(u, v, cu, cv, ru, rv, soft=0.08):
    d = np.sqrt(((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2)
    return 1.0 / (1.0 + np.exp((d - 1.0) / soft))


def _blob(u, v, cu, cv, su, sv):
    return np.exp(-0.5 * (((u - cu) / su) ** 2 + ((v - cv) / sv) ** 2))


def _layout(r: int) -> tuple[np.ndarray, np.ndarray]:
    """Anatomy base image and the 8 finding templates (unit peak)."""
    u, v = _grid(r)
    base = 0.55 * _ellipse(u, v, 0, 0.05, 0.95, 1.0)
    lungs = _ellipse(u, v, -0.45, -0.1, 0.3, 0.62) + _ellipse(u, v, 0.45, -0.1, 0.3, 0.62)
    heart = _ellipse(u, v, 0.08, 0.28, 0.26, 0.3)
    base = base - 0.35 * lungs + 0.25 * heart
    enlarged = _ellipse(u, v, 0.1, 0.3, 0.44, 0.4)
    # image left is the patient's right side
    t = np.stack([
        np.clip(enlarged - heart, 0, None),                       # cdm
        _blob(u, v, 0.0, 0.0, 0.45, 0.35),                        # cng (textured)
        _blob(u, v, -0.45, 0.5, 0.25, 0.14),                      # per
        _blob(u, v, 0.45, 0.5, 0.25, 0.14),                       # pel
        _blob(u, v, -0.45, -0.05, 0.14, 0.16),                    # pir (textured)
        _blob(u, v, 0.45, -0.05, 0.14, 0.16),                     # pil (textured)
        _blob(u, v, -0.45, -0.4, 0.22, 0.06),                     # alr
        _blob(u, v, 0.45, -0.4, 0.22, 0.06),                      # all
    ])
    t /= t.reshape(len(t), -1).max(axis=1)[:, None, None]
    return base, t


_TEXTURED = (1, 4, 5)


def _study_image(
    base: np.ndarray, templates: np.ndarray, evidence: np.ndarray, clutter: float, rng: np.random.Generator
) -> np.ndarray:
    r = base.shape[0]
    u, v = _grid(r)
    img = base.copy()
    for _ in range(3):
        cu, cv = rng.uniform(-0.8, 0.8, size=2)
        img += clutter * rng.normal() * _blob(u, v, cu, cv, *rng.uniform(0.15, 0.4, size=2))
    for k in range(len(templates)):
        pattern = templates[k]
        if k in _TEXTURED:
            phase = rng.uniform(0, 2 * np.pi, size=2)
            pattern = pattern * np.cos(5 * np.pi * u + phase[0]) * np.cos(5 * np.pi * v + phase[1]) * 2.0
        img += 0.12 * evidence[k] * pattern
    shift = rng.integers(-1, 2, size=2)
    img = np.roll(img, tuple(shift), axis=(0, 1))
    img += rng.normal(0, 0.03, size=img.shape)
    # detector response: random offset and gain into 12 bits
    lo = img.min()
    gain = rng.uniform(2400, 3600) / max(img.max() - lo, 1e-9)
    raw = np.rint(rng.uniform(50, 400) + (img - lo) * gain)
    return np.clip(raw, 0, 4095).astype(np.uint16)


# -- generator ------------------------------------------------------------------


def _label_thresholds(spec: CohortSpec) -> np.ndarray:
    """Latent thresholds so the marginal prevalence over age bins equals the spec."""
    w = np.asarray(spec.age_bin_fractions)
    shift = np.asarray(AGE_LABEL_SHIFT)
    out = []
    for p in spec.prevalences:
        f = lambda t: float(np.dot(w, stats.norm.sf(t - shift))) - p  # noqa: E731
        out.append(optimize.brentq(f, -10, 10, xtol=1e-12))
    return np.asarray(out)


def _sample_grades(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = labels.shape[0]
    grades = np.empty(labels.shape, dtype=object)
    neg = rng.choice(2, size=labels.shape, p=GRADE_PROBS_NEG)
    pos = rng.choice(3, size=labels.shape, p=GRADE_PROBS_POS) + 2
    idx = np.where(labels, pos, neg)
    for k, label in enumerate(LABELS):
        scheme = CARDIO_GRADES if label == "cdm" else SEVERITY_GRADES
        grades[:, k] = [scheme[i] for i in idx[:, k]]
    assert grades.shape == (n, len(LABELS))
    return grades


def _group_mask(group: str, bins: np.ndarray, sexes: np.ndarray) -> np.ndarray:
    kind, value = parse_group(group)
    return bins == value if kind == "age" else sexes == value


def generate_cohort(spec: CohortSpec) -> Cohort:
    """Deterministic for a given spec (including its seed)."""
    seed = spec.seed
    demo = stream(seed, "cohort", 0)
    n = spec.n

    # patients: sex and age bin per patient, 1 + Poisson extra studies each
    sizes: list[int] = []
    while sum(sizes) < n:
        sizes.append(1 + int(demo.poisson(spec.mean_studies_per_patient - 1)))
    sizes[-1] -= sum(sizes) - n
    n_pat = len(sizes)
    pat_sex = np.where(demo.random(n_pat) < spec.female_fraction, "female", "male")
    pat_bin = demo.choice(len(AGE_BINS), size=n_pat, p=np.asarray(spec.age_bin_fractions))
    pat_age = np.empty(n_pat, dtype=int)
    for i, b in enumerate(pat_bin):
        lo, hi = AGE_BINS[b]
        mu, sd = AGE_BIN_MOMENTS[b]
        a, z = (lo - mu) / sd, (hi - 1e-9 - mu) / sd
        pat_age[i] = int(stats.truncnorm.rvs(a, z, loc=mu, scale=sd, random_state=demo))
    study_pat = np.repeat(np.arange(n_pat), sizes)
    patient_ids = np.array([f"P{p:06d}" for p in study_pat], dtype=object)
    sexes = pat_sex[study_pat].astype(object)
    ages = pat_age[study_pat].copy()
    bins = pat_bin[study_pat]

    # labels: equicorrelated Gaussian copula, thresholds shifted by age bin
    lab_rng = stream(seed, "cohort", 1)
    rho = spec.label_correlation
    shared = lab_rng.normal(size=(n, 1))
    latent = np.sqrt(rho) * shared + np.sqrt(1 - rho) * lab_rng.normal(size=(n, len(LABELS)))
    latent += np.asarray(AGE_LABEL_SHIFT)[bins][:, None]
    labels = latent > _label_thresholds(spec)[None, :]
    grades = _sample_grades(labels, lab_rng)

    # evidence per cell
    age_factor = 1.0 - spec.age_difficulty * np.arange(len(AGE_BINS)) / (len(AGE_BINS) - 1)
    strength = spec.separability * np.asarray(LABEL_WEIGHTS)[None, :] * age_factor[bins][:, None]
    ev_rng = stream(seed, "cohort", 2)
    evidence = strength * labels + ev_rng.normal(size=labels.shape)
    planted = np.zeros(labels.shape, dtype=bool)
    if spec.planted_gap > 0:
        mask = _group_mask(spec.gap_group, bins, sexes)
        cells = np.argwhere(mask[:, None] & np.ones((1, len(LABELS)), dtype=bool))
        correct = (evidence >= strength / 2) == labels
        pool = np.array([c for c in cells if correct[c[0], c[1]]])
        count = int(round(spec.planted_gap * len(cells)))
        if count > len(pool):
            raise ValueError(f"planted gap {spec.planted_gap} infeasible for group {spec.gap_group}")
        if count:
            pick = pool[ev_rng.choice(len(pool), size=count, replace=False)]
            r, c = pick[:, 0], pick[:, 1]
            evidence[r, c] = strength[r, c] - evidence[r, c]
            planted[r, c] = True

    base, templates = _layout(spec.raw_size)
    clutter = 0.05 + 0.1 * spec.age_difficulty * np.arange(len(AGE_BINS)) / (len(AGE_BINS) - 1)
    raw = np.empty((n, spec.raw_size, spec.raw_size), dtype=np.uint16)
    for i in range(n):
        # per-study substream: independent of generation order
        raw[i] = _study_image(base, templates, evidence[i], clutter[bins[i]], stream(seed, "cohort", 3, i))
    filenames = np.array([f"{pid}_{i:06d}.pgm" for i, pid in enumerate(patient_ids)], dtype=object)
    return Cohort(
        patient_ids, ages, sexes, grades, labels, raw, filenames, evidence, spec,
        {"planted_cells": int(planted.sum())},
    )


def split_patientwise(
    cohort: Cohort, fractions: tuple[float, float] = (TRAIN_FRACTION, 1 - TRAIN_FRACTION), seed: int = 0,
    *, candidates: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Train/test study indices with no shared patient.

    Patients are allocated at random; among ``candidates`` random allocations
    the one whose per-label prevalences deviate least from the full set is
    kept (patient-wise stratification).
    """
    if len(fractions) != 2 or abs(sum(fractions) - 1) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be two values summing to 1, got {fractions}")
    n = len(cohort)
    patients, inverse = np.unique(cohort.patient_ids.astype(str), return_inverse=True)
    counts = np.bincount(inverse, minlength=len(patients))
    target = fractions[0] * n
    overall = cohort.labels.mean(axis=0) if n else np.zeros(len(LABELS))
    best, best_dev = None, np.inf
    for c in range(candidates):
        order = stream(seed, "split", c).permutation(len(patients))
        cum = np.cumsum(counts[order])
        k = int(np.searchsorted(cum, target, side="left"))
        # take the cut closest to the target size
        if k < len(cum) and k > 0 and abs(cum[k - 1] - target) <= abs(cum[k] - target):
            k -= 1
        train_pat = np.zeros(len(patients), dtype=bool)
        train_pat[order[: k + 1] if k < len(order) else order] = True
        if fractions[0] == 0:
            train_pat[:] = False
        elif fractions[1] == 0:
            train_pat[:] = True
        train_mask = train_pat[inverse]
        dev = 0.0
        for part in (train_mask, ~train_mask):
            if part.any():
                dev = max(dev, float(np.abs(cohort.labels[part].mean(axis=0) - overall).max()))
        if dev < best_dev:
            best, best_dev = train_mask, dev
    return np.flatnonzero(best), np.flatnonzero(~best)
