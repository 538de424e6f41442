"""Pipeline orchestration: dataset builds, training, calibration,
evaluation, and the ablation harness.

Every stage derives its randomness from the root seed through named
substreams, so the whole generate -> train -> calibrate -> evaluate ->
navigate chain is reproducible bit-for-bit from (config, seed), and any
stage can be rerun in isolation.
"""

import copy

import numpy as np

from .anatomy import generate_patients, split_patients
from .conformal import ConformalCalibrator
from .metrics import (MetricsReport, eval_nll, mean_euclidean_distance,
                      per_landmark_nll, prcp)
from .model import DisplacementRegressor, McdEstimate
from .navigation import compare_paths
from .sampling import AugmentationConfig, build_dataset
from .utils import named_rng, named_seed

DEFAULT_CONFIG = {
    "seed": 0,
    "anatomy": {
        "n_patients": 60,
    },
    "sampler": {
        "samples_per_patient": 64,
        "noise_sigma": 0.05,
        "augmentation": "weak",
        "obs_dim": 64,
        "strict_calibration": False,
    },
    "model": {
        "hidden_width": 128,
        "pose_embed_dim": 16,
        "dropout": 0.3,
        "mcd_passes": 20,
    },
    "train": {
        "epochs": 50,
        "batch_size": 128,
        "learning_rate": 1e-3,
        "weight_decay": 1e-2,
        "beta": 1.0,
        "skeleton_weight": 1.0,
        "rebuild_each_epoch": False,
    },
    "conformal": {
        "alphas": [0.1, 0.05, 0.03],
    },
    "navigation": {
        "paths": ["1", "10-1", "11-1", "11-10-1"],
        "episodes_per_patient": 4,
        "noise_sigma": 0.05,
    },
}

# Ablation grids mirroring the result-table layouts.
LAMBDA_GRID = (0.0, 0.5, 1.0, 5.0, 10.0)
AUGMENTATION_GRID = ("none", "weak", "mid", "strong")


def merge_config(base, override):
    """Recursive dict merge; override wins, base is not modified."""
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_config(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def make_patients(config):
    return generate_patients(config["anatomy"]["n_patients"],
                             named_seed(config["seed"], "patients"))


def make_splits(patients, config):
    return split_patients(patients, named_seed(config["seed"], "split"))


def build_split_datasets(train_patients, cal_patients, test_patients, config):
    """Datasets for the three splits.

    Position augmentation applies to training only; in strict mode the
    calibration and test splits take one sample per patient so the
    exchangeability assumption holds at the sample level.
    """
    sampler = config["sampler"]
    seed = config["seed"]
    aug = AugmentationConfig.from_level(sampler["augmentation"])
    spp = sampler["samples_per_patient"]
    holdout_spp = 1 if sampler["strict_calibration"] else spp
    common = dict(noise_sigma=sampler["noise_sigma"], obs_dim=sampler["obs_dim"])
    train = build_dataset(train_patients, spp, aug=aug,
                          seed=named_seed(seed, "dataset", "train"), **common)
    cal = build_dataset(cal_patients, holdout_spp,
                        seed=named_seed(seed, "dataset", "calibration"), **common)
    test = build_dataset(test_patients, holdout_spp,
                         seed=named_seed(seed, "dataset", "test"), **common)
    return train, cal, test


def make_model(config):
    return DisplacementRegressor(
        hidden_width=config["model"]["hidden_width"],
        pose_embed_dim=config["model"]["pose_embed_dim"],
        dropout=config["model"]["dropout"],
        mcd_passes=config["model"]["mcd_passes"],
        epochs=config["train"]["epochs"],
        batch_size=config["train"]["batch_size"],
        learning_rate=config["train"]["learning_rate"],
        weight_decay=config["train"]["weight_decay"],
        beta=config["train"]["beta"],
        skeleton_weight=config["train"]["skeleton_weight"],
        seed=named_seed(config["seed"], "train"),
    )


def train_model(train_dataset, config, train_patients=None):
    """Fit the regressor; optionally rebuild the dataset every epoch so
    each epoch sees a fresh patient placement (off by default)."""
    model = make_model(config)
    if config["train"]["rebuild_each_epoch"]:
        if train_patients is None:
            raise ValueError("rebuild_each_epoch requires the training patients")
        sampler = config["sampler"]
        aug = AugmentationConfig.from_level(sampler["augmentation"])
        for epoch in range(config["train"]["epochs"]):
            ds = build_dataset(
                train_patients, sampler["samples_per_patient"], aug=aug,
                noise_sigma=sampler["noise_sigma"], obs_dim=sampler["obs_dim"],
                seed=named_seed(config["seed"], "dataset", "train", epoch),
            )
            model.partial_fit(ds.features(), ds.targets)
        return model
    return model.fit(train_dataset.features(), train_dataset.targets)


def predict_dataset_mcd(model, dataset, seed, stream, T=None, chunk_size=2048):
    """MC-dropout estimates over a whole dataset, chunked for memory."""
    rng = named_rng(seed, "mcd", stream)
    X = dataset.features()
    parts = [model.predict_mcd(X[i:i + chunk_size], T=T, rng=rng)
             for i in range(0, X.shape[0], chunk_size)]
    if len(parts) == 1:
        return parts[0]
    stacked_means = np.concatenate([p.mean for p in parts])
    # Totals are recomputed from the concatenated moments so the
    # epistemic + aleatoric identity stays exact across chunks.
    epistemic = np.concatenate([p.epistemic for p in parts])
    aleatoric = np.concatenate([p.aleatoric for p in parts])
    total = epistemic + aleatoric
    return McdEstimate(mean=stacked_means, epistemic=epistemic, aleatoric=aleatoric,
                       total=total, scalar_total=total.mean(axis=-1))


def calibrate_model(model, cal_dataset, config):
    """Score the calibration split and build the quantile table."""
    estimate = predict_dataset_mcd(model, cal_dataset, config["seed"], "calibration")
    calibrator = ConformalCalibrator(alphas=tuple(config["conformal"]["alphas"]))
    calibrator.fit(estimate.mean, estimate.scalar_total, cal_dataset.targets)
    return calibrator.table_, estimate


def evaluate_model(model, table, test_dataset, config, cal_dataset=None,
                   cal_estimate=None):
    """MetricsReport over the test split.

    Predictive NLL uses the MC-dropout mean with the total variance, so
    it scores the full predictive distribution, not just the aleatoric
    head. Coverage is measured per alpha against the table's regions.
    """
    estimate = predict_dataset_mcd(model, test_dataset, config["seed"], "test")
    overall, per_landmark = mean_euclidean_distance(estimate.mean, test_dataset.targets)
    nll_test = eval_nll(estimate.mean, estimate.total, test_dataset.targets)
    nll_cal = float("nan")
    if cal_estimate is None and cal_dataset is not None:
        cal_estimate = predict_dataset_mcd(model, cal_dataset, config["seed"], "calibration")
    if cal_estimate is not None and cal_dataset is not None:
        nll_cal = eval_nll(cal_estimate.mean, cal_estimate.total, cal_dataset.targets)

    coverage = {}
    for alpha in table.alphas:
        col = table.alphas.index(alpha)
        radii = estimate.scalar_total * table.quantiles[None, :, col]
        cov_overall, cov_landmark = prcp(estimate.mean, radii, test_dataset.targets)
        coverage[alpha] = {"overall": cov_overall, "per_landmark": cov_landmark}

    return MetricsReport(
        n_samples=len(test_dataset),
        mean_distance_units=overall,
        per_landmark_distance_units=per_landmark,
        nll_calibration=nll_cal,
        nll_test=nll_test,
        per_landmark_nll=per_landmark_nll(estimate.mean, estimate.total,
                                          test_dataset.targets),
        coverage=coverage,
    )


def navigate(model, table, patients, config, oracle=False):
    nav = config["navigation"]
    paths = [tuple(int(p) for p in str(spec).split("-")) for spec in nav["paths"]]
    return compare_paths(
        model, table, patients, paths,
        episodes_per_patient=nav["episodes_per_patient"],
        seed=named_seed(config["seed"], "navigation"),
        noise_sigma=nav["noise_sigma"],
        oracle=oracle,
    )


def run_variant(splits, config):
    """Train, calibrate, and evaluate one configuration on fixed splits."""
    train_p, cal_p, test_p = splits
    train_ds, cal_ds, test_ds = build_split_datasets(train_p, cal_p, test_p, config)
    model = train_model(train_ds, config, train_patients=train_p)
    table, cal_estimate = calibrate_model(model, cal_ds, config)
    report = evaluate_model(model, table, test_ds, config,
                            cal_dataset=cal_ds, cal_estimate=cal_estimate)
    return model, table, report


def ablate(splits, base_config, variants):
    """Run each config variant on identical splits and seeds.

    ``variants`` maps row labels to config overrides; rows come back in
    input order as (label, effective_config, MetricsReport).
    """
    if not variants:
        raise ValueError("ablation grid is empty")
    rows = []
    for label, override in variants:
        config = merge_config(base_config, override)
        _, _, report = run_variant(splits, config)
        rows.append((label, config, report))
    return rows


def lambda_ablation_grid():
    return [(f"lambda={lam:g}", {"train": {"skeleton_weight": lam}})
            for lam in LAMBDA_GRID]


def augmentation_ablation_grid():
    return [(f"augmentation={level}", {"sampler": {"augmentation": level}})
            for level in AUGMENTATION_GRID]
