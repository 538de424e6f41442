"""Synthetic skeletal anatomy.

Patients are generated procedurally: 14 named landmarks on a fixed
skeletal graph, each jittered around a hand-placed canonical position
inside the unit cube.  All geometry lives in normalized units; one unit
corresponds to a nominal body extent of 1800 mm, which is the conversion
used whenever a quantity is reported in millimetres.
"""

from dataclasses import dataclass

import numpy as np

from .validation import check_unit_interval

# Nominal body extent represented by one normalized unit.
BODY_EXTENT_MM = 1800.0

# All simulator coordinates (landmarks, shifts, isocenters) live on a
# fixed-point grid of 2^-32 units. On this grid pose + (target - pose)
# reproduces the target bit-exactly, so displacement targets reconstruct
# landmark positions with no rounding and the navigation pose update has
# an exact fixed point. The quantization (~2.3e-10) is far below every
# geometric scale in the simulator.
COORD_GRID = 2.0**32


def snap_to_grid(x):
    """Round coordinates to the simulator's fixed-point grid."""
    return np.round(np.asarray(x, dtype=np.float64) * COORD_GRID) / COORD_GRID

# Landmark indices are 1-based and fixed; the order is part of the
# public contract (report rows, calibration tables, path specs).
LANDMARK_NAMES = (
    "Skull",
    "R Humeral Head",
    "L Humeral Head",
    "R Scapula",
    "L Scapula",
    "R Elbow",
    "L Elbow",
    "R Wrist",
    "L Wrist",
    "T1",
    "Carina",
    "R Hemidiaphragm",
    "L Hemidiaphragm",
    "T12",
)
N_LANDMARKS = len(LANDMARK_NAMES)

# Canonical supine pose. Axes: x left-right, y superior-inferior
# (head at low y), z anterior-posterior. The body occupies the central
# 80% of the vertical axis. Coordinates are versioned constants: tests
# freeze against them, so changing them is a breaking change.
CANONICAL_POSITIONS = snap_to_grid(
    [
        [0.50, 0.10, 0.50],  # 1  Skull
        [0.42, 0.26, 0.48],  # 2  R Humeral Head
        [0.58, 0.26, 0.48],  # 3  L Humeral Head
        [0.40, 0.30, 0.56],  # 4  R Scapula
        [0.60, 0.30, 0.56],  # 5  L Scapula
        [0.36, 0.44, 0.46],  # 6  R Elbow
        [0.64, 0.44, 0.46],  # 7  L Elbow
        [0.34, 0.60, 0.44],  # 8  R Wrist
        [0.66, 0.60, 0.44],  # 9  L Wrist
        [0.50, 0.24, 0.54],  # 10 T1
        [0.50, 0.32, 0.50],  # 11 Carina
        [0.44, 0.42, 0.50],  # 12 R Hemidiaphragm
        [0.56, 0.42, 0.50],  # 13 L Hemidiaphragm
        [0.50, 0.46, 0.53],  # 14 T12
    ]
)

# Jitter scale per landmark (normalized units). Axial landmarks barely
# move between patients; distal limb landmarks move the most.
CANONICAL_SIGMAS = np.array(
    [0.01, 0.02, 0.02, 0.02, 0.02, 0.035, 0.035, 0.05, 0.05, 0.01, 0.01, 0.02, 0.02, 0.01]
)

# Skeletal graph, 1-based landmark indices. Central chain plus arms,
# scapulae and hemidiaphragms: 13 edges, connected, humanoid.
SKELETON_EDGES = (
    (1, 10),    # Skull - T1
    (10, 11),   # T1 - Carina
    (11, 14),   # Carina - T12
    (10, 2),    # T1 - R Humeral Head
    (10, 3),    # T1 - L Humeral Head
    (2, 4),     # R Humeral Head - R Scapula
    (3, 5),     # L Humeral Head - L Scapula
    (2, 6),     # R Humeral Head - R Elbow
    (6, 8),     # R Elbow - R Wrist
    (3, 7),     # L Humeral Head - L Elbow
    (7, 9),     # L Elbow - L Wrist
    (11, 12),   # Carina - R Hemidiaphragm
    (11, 13),   # Carina - L Hemidiaphragm
)

CANONICAL_HEIGHT_EXTENT = 0.8

# Indices (1-based) of landmarks on the central axis, used by the
# vertical-ordering invariant.
CENTRAL_AXIS = (1, 10, 11, 14)


def mm_to_units(mm):
    return float(mm) / BODY_EXTENT_MM


def units_to_mm(units):
    return np.asarray(units, dtype=np.float64) * BODY_EXTENT_MM


def landmark_index(name):
    """1-based index of a landmark name."""
    return LANDMARK_NAMES.index(name) + 1


@dataclass(frozen=True)
class SkeletonTemplate:
    """Canonical landmark layout plus the skeletal graph."""

    canonical_positions: np.ndarray     # (14, 3) in [0, 1]^3
    edges: tuple                        # unordered 1-based index pairs
    per_landmark_sigma: np.ndarray      # (14,) nonnegative

    def __post_init__(self):
        pos = np.asarray(self.canonical_positions, dtype=np.float64)
        sig = np.asarray(self.per_landmark_sigma, dtype=np.float64)
        if pos.shape != (N_LANDMARKS, 3):
            raise ValueError(f"canonical_positions must be ({N_LANDMARKS}, 3)")
        if sig.shape != (N_LANDMARKS,) or np.any(sig < 0):
            raise ValueError("per_landmark_sigma must be 14 nonnegative scalars")
        check_unit_interval(pos, "canonical_positions")
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-loop edge ({a}, {b})")
            if not (1 <= a <= N_LANDMARKS and 1 <= b <= N_LANDMARKS):
                raise ValueError(f"edge ({a}, {b}) outside 1..{N_LANDMARKS}")
        object.__setattr__(self, "canonical_positions", pos)
        object.__setattr__(self, "per_landmark_sigma", sig)

    def is_connected(self):
        """Reachability of every landmark from landmark 1 over the edges."""
        adjacency = {i: set() for i in range(1, N_LANDMARKS + 1)}
        for a, b in self.edges:
            adjacency[a].add(b)
            adjacency[b].add(a)
        seen = {1}
        frontier = [1]
        while frontier:
            node = frontier.pop()
            for nxt in adjacency[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        return len(seen) == N_LANDMARKS


@dataclass(frozen=True)
class Patient:
    """One synthetic patient: jittered landmark geometry in the unit cube."""

    id: int
    landmark_positions: np.ndarray      # (14, 3) in [0, 1]^3
    height_extent: float = CANONICAL_HEIGHT_EXTENT

    def __post_init__(self):
        pos = np.asarray(self.landmark_positions, dtype=np.float64)
        if pos.shape != (N_LANDMARKS, 3):
            raise ValueError(f"landmark_positions must be ({N_LANDMARKS}, 3)")
        check_unit_interval(pos, "landmark_positions")
        if not (0.0 < self.height_extent <= 1.0):
            raise ValueError("height_extent must be in (0, 1]")
        object.__setattr__(self, "landmark_positions", pos)

    @property
    def vertical_interval(self):
        """Body's occupied vertical interval, centered on the cube."""
        half = self.height_extent / 2.0
        return 0.5 - half, 0.5 + half

    def landmark(self, index):
        """Position of a 1-based landmark index."""
        return self.landmark_positions[index - 1]


def canonical_skeleton():
    """The fixed skeleton template all patients are sampled from."""
    return SkeletonTemplate(
        canonical_positions=CANONICAL_POSITIONS.copy(),
        edges=SKELETON_EDGES,
        per_landmark_sigma=CANONICAL_SIGMAS.copy(),
    )


def sample_patient(template, seed, patient_id=None):
    """Draw one patient: canonical positions plus isotropic Gaussian jitter.

    Deterministic in ``seed``; positions are clamped to the unit cube.
    """
    rng = np.random.default_rng(seed)
    jitter = rng.normal(0.0, 1.0, size=(N_LANDMARKS, 3))
    positions = template.canonical_positions + jitter * template.per_landmark_sigma[:, None]
    positions = snap_to_grid(np.clip(positions, 0.0, 1.0))
    return Patient(
        id=int(seed) if patient_id is None else int(patient_id),
        landmark_positions=positions,
        height_extent=CANONICAL_HEIGHT_EXTENT,
    )


def generate_patients(n, seed, template=None):
    """Generate ``n`` patients with ids 0..n-1 from one root seed."""
    if template is None:
        template = canonical_skeleton()
    seeds = np.random.SeedSequence(seed).spawn(n)
    return [sample_patient(template, s, patient_id=i) for i, s in enumerate(seeds)]


def split_patients(patients, seed):
    """Disjoint 70/15/15 split on the patient level.

    Calibration and test sizes are the nearest integer to 15% each;
    the remainder goes to training. Deterministic in ``seed``.
    """
    n = len(patients)
    if n < 10:
        raise ValueError(f"need at least 10 patients to split, got {n}")
    ordered = sorted(patients, key=lambda p: p.id)
    perm = np.random.default_rng(seed).permutation(n)
    n_cal = int(round(0.15 * n))
    n_test = int(round(0.15 * n))
    n_train = n - n_cal - n_test
    shuffled = [ordered[i] for i in perm]
    train = shuffled[:n_train]
    calibration = shuffled[n_train:n_train + n_cal]
    test = shuffled[n_train + n_cal:]
    return train, calibration, test


def patients_to_json(patients):
    return {
        "patients": [
            {
                "id": p.id,
                "positions": [[float(c) for c in row] for row in p.landmark_positions],
                "height_extent": p.height_extent,
            }
            for p in patients
        ]
    }


def patients_from_json(doc):
    return [
        Patient(
            id=int(rec["id"]),
            landmark_positions=np.array(rec["positions"], dtype=np.float64),
            height_extent=float(rec.get("height_extent", CANONICAL_HEIGHT_EXTENT)),
        )
        for rec in doc["patients"]
    ]
