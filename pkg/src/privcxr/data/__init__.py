from privcxr.data.cohort import Cohort, CohortSpec, generate_cohort, split_patientwise
from privcxr.data.labels import LABELS, SubgroupKey, age_bin, binarize_labels
from privcxr.data.preprocess import augment, equalize_histogram, normalize_image, preprocess, resize

__all__ = [
    "LABELS",
    "Cohort",
    "CohortSpec",
    "SubgroupKey",
    "age_bin",
    "augment",
    "binarize_labels",
    "equalize_histogram",
    "generate_cohort",
    "normalize_image",
    "preprocess",
    "resize",
    "split_patientwise",
]
