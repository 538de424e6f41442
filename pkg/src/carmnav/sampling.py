"""Isocenter sampling, synthetic observations, and dataset assembly.

The observation model stands in for rendered projections: each landmark
owns a small block of channels carrying multi-scale radial-basis
responses of its offset from the current isocenter.  Landmarks beyond
the field-of-view radius contribute exact zeros, and every channel gets
additive Gaussian noise, so nearby landmarks are easy to localize and
distant ones are genuinely uncertain.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .anatomy import N_LANDMARKS, Patient, mm_to_units, snap_to_grid
from .validation import DataError, as_float_array, check_pose, check_probability

# Isocenter sampling distributions (normalized units).
HORIZONTAL_SIGMA = mm_to_units(47.5)
DEPTH_SIGMA = mm_to_units(100.0)
VERTICAL_FRACTION = 0.70

# Observation encoding.
DEFAULT_OBS_DIM = 64
FOV_RADIUS = 0.35
RBF_WIDTHS = (0.06, 0.12, 0.22, 0.35)
DEFAULT_NOISE_SIGMA = 0.05

# Patient-position augmentation strengths (normalized units).
AUGMENTATION_LEVELS = {"none": 0.0, "weak": 0.02, "mid": 0.05, "strong": 0.10}
DEFAULT_SHIFT_PROBABILITY = 0.5


@dataclass(frozen=True)
class AugmentationConfig:
    """Random patient-position shift: with probability ``probability`` the
    whole patient is translated in (x, y) by one shift ~ U(-strength, strength)
    per axis."""

    probability: float = DEFAULT_SHIFT_PROBABILITY
    strength: float = 0.0
    level: str = "none"

    def __post_init__(self):
        check_probability(self.probability, "probability")
        if self.strength < 0:
            raise ValueError("strength must be nonnegative")

    @classmethod
    def from_level(cls, level, probability=DEFAULT_SHIFT_PROBABILITY):
        if level not in AUGMENTATION_LEVELS:
            raise ValueError(f"unknown augmentation level {level!r}; "
                             f"expected one of {sorted(AUGMENTATION_LEVELS)}")
        return cls(probability=probability, strength=AUGMENTATION_LEVELS[level], level=level)


@dataclass(frozen=True)
class Sample:
    """One record: where the isocenter was, what was observed, and the true
    displacement to every landmark."""

    patient_id: int
    pose: np.ndarray             # (3,)
    observation: np.ndarray      # (D,)
    targets: np.ndarray          # (14, 3), landmark - pose


@dataclass
class Dataset:
    """Column-oriented sample store (vectorized access for training)."""

    patient_ids: np.ndarray      # (n,) int64
    poses: np.ndarray            # (n, 3)
    observations: np.ndarray     # (n, D)
    targets: np.ndarray          # (n, 14, 3)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.poses.shape[0]

    def __getitem__(self, i):
        return Sample(
            patient_id=int(self.patient_ids[i]),
            pose=self.poses[i],
            observation=self.observations[i],
            targets=self.targets[i],
        )

    @property
    def obs_dim(self):
        return self.observations.shape[1]

    def features(self):
        """Model inputs: pose columns then observation columns, (n, 3 + D)."""
        return np.hstack([self.poses, self.observations])


def sample_isocenter(patient, rng):
    """Draw one isocenter pose for a patient.

    Vertical position is uniform over the central 70% of the patient's
    vertical extent; horizontal and depth positions are Gaussian around
    the mean landmark coordinate. All coordinates are clamped to [0, 1].
    """
    lo, hi = patient.vertical_interval
    margin = (1.0 - VERTICAL_FRACTION) / 2.0 * (hi - lo)
    y = rng.uniform(lo + margin, hi - margin)
    center_x = patient.landmark_positions[:, 0].mean()
    center_z = patient.landmark_positions[:, 2].mean()
    x = rng.normal(center_x, HORIZONTAL_SIGMA)
    z = rng.normal(center_z, DEPTH_SIGMA)
    return snap_to_grid(np.clip(np.array([x, y, z]), 0.0, 1.0))


def _slots_per_landmark(obs_dim):
    if obs_dim < N_LANDMARKS:
        raise ValueError(f"observation dim must be >= {N_LANDMARKS}, got {obs_dim}")
    return min(len(RBF_WIDTHS), obs_dim // N_LANDMARKS)


def _rbf_block(patient, poses, obs_dim):
    """Noise-free observation rows for a (n, 3) pose batch."""
    n = poses.shape[0]
    slots = _slots_per_landmark(obs_dim)
    widths = np.asarray(RBF_WIDTHS[:slots])
    offsets = patient.landmark_positions[None, :, :] - poses[:, None, :]   # (n, 14, 3)
    dist2 = np.sum(offsets**2, axis=2)                                     # (n, 14)
    responses = np.exp(-dist2[:, :, None] / (2.0 * widths[None, None, :] ** 2))
    responses[dist2 > FOV_RADIUS**2] = 0.0
    out = np.zeros((n, obs_dim))
    out[:, : N_LANDMARKS * slots] = responses.reshape(n, N_LANDMARKS * slots)
    return out


def synthesize_observation(patient, pose, noise_sigma, rng):
    """Observation vector at one pose.

    Landmark k owns channels [k*s, (k+1)*s) where s is the per-landmark
    slot count; each slot is a zero-centered Gaussian RBF of the offset
    magnitude at one length scale, hard-masked beyond the field of view.
    Channels past the landmark blocks are pure-noise distractors.
    """
    pose = check_pose(pose)
    obs = _rbf_block(patient, pose[None, :], DEFAULT_OBS_DIM)[0]
    if noise_sigma > 0:
        obs = obs + rng.normal(0.0, noise_sigma, size=obs.shape)
    return obs


def observation_matrix(patient, poses, noise_sigma, rng, obs_dim=DEFAULT_OBS_DIM):
    """Batched observation synthesis with one rng draw for the noise."""
    obs = _rbf_block(patient, poses, obs_dim)
    if noise_sigma > 0:
        obs += rng.normal(0.0, noise_sigma, size=obs.shape)
    return obs


def apply_position_augmentation(patient, cfg, rng):
    """Apply one shared (x, y) shift to the whole patient, or leave it alone.

    The shift branch is taken with probability ``cfg.probability``; the
    depth axis is never touched and results are clamped to the cube.
    """
    take = rng.random() < cfg.probability
    shift = rng.uniform(-cfg.strength, cfg.strength, size=2)
    if not take or cfg.strength == 0.0:
        return patient
    positions = patient.landmark_positions.copy()
    positions[:, 0] += shift[0]
    positions[:, 1] += shift[1]
    positions = snap_to_grid(np.clip(positions, 0.0, 1.0))
    return Patient(id=patient.id, landmark_positions=positions,
                   height_extent=patient.height_extent)


def build_dataset(patients, n_per_patient, aug=None, noise_sigma=DEFAULT_NOISE_SIGMA,
                  seed=0, obs_dim=DEFAULT_OBS_DIM):
    """Assemble a dataset: per patient, optionally shift the patient once,
    then draw isocenters, observations, and exact displacement targets.

    Per-patient RNG streams are derived from (seed, patient id), so the
    result is independent of iteration order.
    """
    if not patients:
        raise ValueError("patient list is empty")
    if n_per_patient < 1:
        raise ValueError("n_per_patient must be >= 1")
    if aug is None:
        aug = AugmentationConfig.from_level("none")

    ids, poses, observations, targets = [], [], [], []
    for patient in patients:
        rng = np.random.default_rng(
            np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, patient.id])
        )
        placed = apply_position_augmentation(patient, aug, rng)
        pose_block = np.stack([sample_isocenter(placed, rng) for _ in range(n_per_patient)])
        obs_block = observation_matrix(placed, pose_block, noise_sigma, rng, obs_dim)
        target_block = placed.landmark_positions[None, :, :] - pose_block[:, None, :]
        ids.append(np.full(n_per_patient, patient.id, dtype=np.int64))
        poses.append(pose_block)
        observations.append(obs_block)
        targets.append(target_block)

    return Dataset(
        patient_ids=np.concatenate(ids),
        poses=np.concatenate(poses),
        observations=np.concatenate(observations),
        targets=np.concatenate(targets),
        meta={
            "n_samples": len(patients) * n_per_patient,
            "D": int(obs_dim),
            "seed": int(seed),
            "augmentation": aug.level,
            "noise_sigma": float(noise_sigma),
        },
    )


# --- persistence ------------------------------------------------------------
#
# One flat float64 matrix per dataset, column order:
#   patient_id, pose (3), observation (D), targets (42, landmark-major xyz)
# with a JSON sidecar manifest carrying the generation parameters.

def save_dataset(dataset, path):
    n = len(dataset)
    flat = np.hstack([
        dataset.patient_ids[:, None].astype(np.float64),
        dataset.poses,
        dataset.observations,
        dataset.targets.reshape(n, N_LANDMARKS * 3),
    ])
    np.save(path, flat)
    manifest = dict(dataset.meta)
    manifest["n_samples"] = n
    manifest["D"] = dataset.obs_dim
    with open(str(path) + ".json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(path):
    try:
        with open(str(path) + ".json") as fh:
            manifest = json.load(fh)
        flat = np.load(path)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load dataset {path}: {exc}") from exc
    obs_dim = int(manifest["D"])
    expected_cols = 1 + 3 + obs_dim + N_LANDMARKS * 3
    if flat.ndim != 2 or flat.shape[1] != expected_cols or flat.shape[0] != manifest["n_samples"]:
        raise DataError(
            f"dataset {path} does not match its manifest "
            f"(shape {flat.shape}, expected ({manifest['n_samples']}, {expected_cols}))"
        )
    flat = as_float_array(flat, f"dataset {path}")
    return Dataset(
        patient_ids=flat[:, 0].astype(np.int64),
        poses=flat[:, 1:4],
        observations=flat[:, 4:4 + obs_dim],
        targets=flat[:, 4 + obs_dim:].reshape(-1, N_LANDMARKS, 3),
        meta=manifest,
    )
