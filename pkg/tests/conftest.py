"""Shared fixtures: small seeded cohorts and fast training configs."""

import numpy as np
import pytest

from trimodal.synthdata import CohortConfig, generate_cohort, load_cohort
from trimodal.trainer import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_cohort_dir(tmp_path_factory):
    """16 subjects, 8x8x8 volumes, written to disk once per session."""
    out = tmp_path_factory.mktemp("cohort")
    cfg = CohortConfig(n_subjects=16, volume_shape=(8, 8, 8),
                       missing_pet_rate=0.25, seed=11)
    generate_cohort(cfg, str(out))
    return out


@pytest.fixture(scope="session")
def small_subjects(small_cohort_dir):
    return load_cohort(str(small_cohort_dir))


def fast_train_config(**overrides):
    """Stage epochs and fold counts cut to smoke-test size."""
    base = dict(epochs_stage1=2, epochs_stage2=2, batch_size=4,
                k_folds=2, average_last=2, seed=5)
    base.update(overrides)
    return TrainConfig(**base)
