import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from imagegen import ks_to_uniform, random_raw
from privcxr.data.cohort import PREVALENCES, CohortSpec, generate_cohort, parse_group, split_patientwise
from privcxr.data.io import DatasetFormatError, read_dataset, read_pgm, write_dataset, write_pgm
from privcxr.data.labels import (
    AGE_BIN_NAMES,
    CARDIO_GRADES,
    LABELS,
    SEVERITY_GRADES,
    SubgroupKey,
    age_bin,
    binarize_labels,
    grade_scheme,
)
from privcxr.data.preprocess import (
    augment,
    equalize_histogram,
    flip,
    normalize_image,
    preprocess,
    resize,
    rotate,
    to_model_input,
)

POSITIVE = {"borderline", "enlarged", "massively enlarged", "mild", "moderate", "severe"}


def grade_grid():
    for k, label in enumerate(LABELS):
        for grade in grade_scheme(label):
            yield k, label, grade


@pytest.mark.parametrize("k,label,grade", list(grade_grid()))
def test_binarization_grid(k, label, grade):
    grades = [grade_scheme(l)[0] for l in LABELS]
    grades[k] = grade
    out = binarize_labels(grades)
    assert out[k] == (grade in POSITIVE)
    assert out.sum() == int(grade in POSITIVE)


def test_binarization_errors():
    with pytest.raises(ValueError, match="'cdm'.*'mild'"):
        binarize_labels(["mild"] + ["negative"] * 7)
    with pytest.raises(ValueError):
        binarize_labels(["normal"] * 3)
    assert len(CARDIO_GRADES) == len(SEVERITY_GRADES) == 5


def test_age_bins():
    assert [age_bin(a) for a in (0, 29, 30, 59, 60, 69, 70, 79, 80, 99, 100, 104)] == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 4, 4]
    assert AGE_BIN_NAMES[0] == "[0, 30)"
    with pytest.raises(ValueError):
        age_bin(-1)
    key = SubgroupKey.from_study(65, "female", np.array([1, 0, 1, 0, 0, 0, 0, 1]))
    assert (key.age_bin, key.comorbidity_count, key.age_bin_name) == (2, 3, "[60, 70)")
    with pytest.raises(ValueError):
        SubgroupKey(0, "other", 0)


def test_normalize_hand_case():
    out = normalize_image(np.array([[50, 100], [150, 250]]))
    np.testing.assert_array_equal(out, [[0, 63], [127, 255]])
    assert out.dtype == np.uint8
    np.testing.assert_array_equal(normalize_image(np.full((3, 3), 7)), np.zeros((3, 3)))
    span = np.array([[0, 10], [200, 255]])
    np.testing.assert_array_equal(normalize_image(span), span)


def test_equalize_two_level():
    img = np.array([[0, 0], [255, 255]], dtype=np.uint8)
    out = equalize_histogram(img)
    # round(127.5) is 128 under round-half-to-even
    np.testing.assert_array_equal(out, [[128, 128], [255, 255]])
    with pytest.raises(TypeError):
        equalize_histogram(img.astype(np.uint16))


def test_equalize_uniform_is_near_identity():
    img = np.arange(256, dtype=np.uint8).reshape(16, 16)
    assert np.abs(equalize_histogram(img).astype(int) - img).max() <= 1


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20))))
def test_equalize_monotone(img):
    out = equalize_histogram(img)
    order = np.argsort(img.ravel(), kind="stable")
    assert (np.diff(out.ravel()[order].astype(int)) >= 0).all()


def test_equalize_never_increases_ks():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        img = normalize_image(random_raw(rng))
        assert ks_to_uniform(equalize_histogram(img)) <= ks_to_uniform(img) + 1e-12


def test_resize_checkerboard():
    board = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    np.testing.assert_allclose(resize(board, 2), np.full((2, 2), 0.5))


def test_resize_identity_and_constant():
    img = np.random.default_rng(0).random((5, 7))
    np.testing.assert_array_equal(resize(img, (5, 7)), img)
    np.testing.assert_allclose(resize(np.full((6, 6), 3.0), 11), 3.0)
    with pytest.raises(ValueError):
        resize(img, 0)


def test_preprocess_chain():
    raw = np.random.default_rng(1).integers(0, 4096, (20, 20))
    out = preprocess(raw, 10)
    assert out.shape == (10, 10)
    assert 0 <= out.min() and out.max() <= 255
    x = to_model_input(np.stack([out, out]))
    assert x.shape == (2, 1, 10, 10)


def test_rotation_and_flip():
    img = np.random.default_rng(3).random((9, 9))
    np.testing.assert_array_equal(rotate(img, 0), img)
    np.testing.assert_allclose(rotate(img, 90), np.rot90(img, -1), atol=1e-12)
    np.testing.assert_array_equal(flip(img), img[:, ::-1])
    assert augment(img, None, False) is img
    np.testing.assert_allclose(augment(img, None, True, angle=0.0, do_flip=True), img[:, ::-1])
    a = augment(img, np.random.default_rng(5), True)
    b = augment(img, np.random.default_rng(5), True)
    np.testing.assert_array_equal(a, b)


@pytest.fixture(scope="module")
def small_cohort():
    return generate_cohort(CohortSpec(n=300, raw_size=16, seed=7))


def test_cohort_deterministic(small_cohort):
    again = generate_cohort(CohortSpec(n=300, raw_size=16, seed=7))
    np.testing.assert_array_equal(again.raw, small_cohort.raw)
    np.testing.assert_array_equal(again.labels, small_cohort.labels)
    assert small_cohort.raw.shape == (300, 16, 16)
    assert small_cohort.raw.max() <= 4095
    assert set(small_cohort.sexes) <= {"female", "male"}


def test_cohort_prevalence():
    # large cohort, tiny images; all labels within 2 points of the target
    c = generate_cohort(CohortSpec(n=6000, raw_size=8, seed=1))
    np.testing.assert_allclose(c.labels.mean(axis=0), PREVALENCES, atol=0.02)


def test_planted_gap_flips_exact_count():
    spec = CohortSpec(n=400, raw_size=8, planted_gap=0.05, gap_group="sex:female", seed=2)
    c = generate_cohort(spec)
    n_cells = int((c.sexes == "female").sum()) * len(LABELS)
    assert c.meta["planted_cells"] == round(0.05 * n_cells)


def test_spec_validation():
    with pytest.raises(ValueError):
        CohortSpec(n=0)
    with pytest.raises(ValueError):
        CohortSpec(age_bin_fractions=(0.5, 0.5, 0, 0, 0.1))
    with pytest.raises(ValueError):
        parse_group("age:9")
    assert parse_group("sex:male") == ("sex", "male")
    assert CohortSpec.from_dict(CohortSpec().to_dict()) == CohortSpec()


def test_split_never_shares_patients(small_cohort):
    for seed in range(100):
        tr, te = split_patientwise(small_cohort, (0.8, 0.2), seed, candidates=4)
        assert not set(small_cohort.patient_ids[tr]) & set(small_cohort.patient_ids[te])
        assert len(tr) + len(te) == len(small_cohort)
    tr, te = split_patientwise(small_cohort, (0.8, 0.2), 0)
    assert abs(len(tr) / len(small_cohort) - 0.8) < 0.02


def test_dataset_round_trip(tmp_path, small_cohort):
    sub = small_cohort.subset(np.arange(20))
    write_dataset(sub, tmp_path / "ds")
    back = read_dataset(tmp_path / "ds")
    np.testing.assert_array_equal(back.raw, sub.raw)
    np.testing.assert_array_equal(back.labels, sub.labels)
    np.testing.assert_array_equal(back.ages, sub.ages)
    np.testing.assert_array_equal(back.reference_scores, sub.reference_scores)
    assert back.spec == sub.spec


def test_dataset_header_checked(tmp_path, small_cohort):
    write_dataset(small_cohort.subset(np.arange(3)), tmp_path / "ds")
    meta = tmp_path / "ds" / "metadata.csv"
    meta.write_text(meta.read_text().replace("patient_id", "pid", 1))
    with pytest.raises(DatasetFormatError, match="header"):
        read_dataset(tmp_path / "ds")


def test_pgm_round_trip(tmp_path):
    for img in (np.arange(12, dtype=np.uint8).reshape(3, 4), np.array([[0, 4095], [17, 300]], dtype=np.uint16)):
        write_pgm(tmp_path / "a.pgm", img)
        back = read_pgm(tmp_path / "a.pgm")
        np.testing.assert_array_equal(back, img)
        assert back.dtype == img.dtype
