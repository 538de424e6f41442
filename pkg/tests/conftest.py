"""Shared fixtures.

``default_run`` trains the default pipeline once per session (48 training
patients, 50 epochs) and attaches strict one-sample-per-patient
calibration and test sets, so the coverage, efficacy, and trend tests
share a single training run.
"""

from dataclasses import dataclass

import pytest

import carmnav as cn
from carmnav import experiments as ex
from carmnav.utils import named_seed


@dataclass
class PipelineRun:
    config: dict
    train_patients: list
    train_ds: cn.Dataset
    cal_ds: cn.Dataset
    test_ds: cn.Dataset
    model: cn.DisplacementRegressor
    untrained: cn.DisplacementRegressor
    table: cn.CalibrationTable
    cal_estimate: object
    report: cn.MetricsReport


def build_run(n_train_patients, n_holdout, epochs, seed=0, mcd_passes=20):
    config = ex.merge_config(ex.DEFAULT_CONFIG, {
        "seed": seed,
        "anatomy": {"n_patients": n_train_patients},
        "train": {"epochs": epochs},
        "model": {"mcd_passes": mcd_passes},
    })
    train_patients = ex.make_patients(config)
    train_ds = cn.build_dataset(
        train_patients, config["sampler"]["samples_per_patient"],
        aug=cn.AugmentationConfig.from_level(config["sampler"]["augmentation"]),
        noise_sigma=config["sampler"]["noise_sigma"],
        seed=named_seed(seed, "dataset", "train"),
    )
    # Strict mode: every calibration/test sample is its own patient episode.
    cal_patients = cn.generate_patients(n_holdout, named_seed(seed, "strict-cal-patients"))
    test_patients = cn.generate_patients(n_holdout, named_seed(seed, "strict-test-patients"))
    cal_ds = cn.build_dataset(cal_patients, 1,
                              noise_sigma=config["sampler"]["noise_sigma"],
                              seed=named_seed(seed, "dataset", "strict-cal"))
    test_ds = cn.build_dataset(test_patients, 1,
                               noise_sigma=config["sampler"]["noise_sigma"],
                               seed=named_seed(seed, "dataset", "strict-test"))

    untrained = ex.make_model(config).initialize(train_ds.features().shape[1])
    model = ex.make_model(config).fit(train_ds.features(), train_ds.targets)
    table, cal_estimate = ex.calibrate_model(model, cal_ds, config)
    report = ex.evaluate_model(model, table, test_ds, config,
                               cal_dataset=cal_ds, cal_estimate=cal_estimate)
    return PipelineRun(
        config=config, train_patients=train_patients, train_ds=train_ds,
        cal_ds=cal_ds, test_ds=test_ds, model=model, untrained=untrained,
        table=table, cal_estimate=cal_estimate, report=report,
    )


@pytest.fixture(scope="session")
def default_run():
    return build_run(n_train_patients=48, n_holdout=4000, epochs=50)
