"""Synthetic retrieval dataset generator: identity clusters on the unit
sphere with camera-dependent shifts, split into train/query/gallery sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, Sample, l2_normalize

QUERY_CAMERAS = 2  # queries drawn from this many cameras per identity
GALLERY_PER_CAMERA = 2


@dataclass
class SynthSpec:
    """Parameters of the synthetic dataset.

    ``sigma_cam`` larger than ``sigma_within`` makes instances cluster by
    (identity, camera) rather than by identity alone, which is what gives
    hard positives (same identity, different camera) their bite.
    """

    num_identities: int = 50
    instances_per_identity: int = 20
    dims: int = 32
    num_cameras: int = 3
    sigma_within: float = 0.02
    sigma_cam: float = 0.08
    min_angle_deg: float = 45.0
    seed: int = 0

    def validate(self):
        problems = []
        for name in ("num_identities", "instances_per_identity", "dims"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.num_cameras < 2:
            problems.append(
                "num_cameras must be >= 2 so each identity spans several "
                "cameras in the query/gallery split"
            )
        for name in ("sigma_within", "sigma_cam"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not 0.0 <= self.min_angle_deg < 180.0:
            problems.append("min_angle_deg must be in [0, 180)")
        if problems:
            raise ConfigError("; ".join(problems))


def _sample_prototypes(spec: SynthSpec, rng) -> np.ndarray:
    """Identity prototypes on the sphere with a minimum pairwise angle,
    found by rejection sampling with bounded retries."""
    cos_limit = np.cos(np.deg2rad(spec.min_angle_deg))
    protos = np.zeros((spec.num_identities, spec.dims))
    accepted = 0
    attempts = 0
    max_attempts = 1000 * spec.num_identities
    while accepted < spec.num_identities:
        if attempts >= max_attempts:
            raise ConfigError(
                f"could not place {spec.num_identities} prototypes with "
                f"min_angle_deg={spec.min_angle_deg} in {spec.dims} dims "
                f"after {max_attempts} attempts"
            )
        attempts += 1
        cand = l2_normalize(rng.standard_normal(spec.dims))
        if accepted == 0 or np.max(protos[:accepted] @ cand) <= cos_limit:
            protos[accepted] = cand
            accepted += 1
    return protos


def generate(spec: SynthSpec):
    """Build (train, query, gallery) sample lists from a SynthSpec.

    Deterministic given the seed. Queries come from two cameras and the
    gallery covers every camera per identity, so junk filtering always
    leaves cross-camera matches.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    protos = _sample_prototypes(spec, rng)
    offsets = rng.standard_normal(
        (spec.num_identities, spec.num_cameras, spec.dims)
    ) * spec.sigma_cam

    def make(identity, camera):
        noise = rng.standard_normal(spec.dims) * spec.sigma_within
        vec = l2_normalize(protos[identity] + offsets[identity, camera] + noise)
        return Sample(
            feature=vec.astype(np.float32), identity=identity, camera=camera
        )

    train = [
        make(i, j % spec.num_cameras)
        for i in range(spec.num_identities)
        for j in range(spec.instances_per_identity)
    ]
    query = [
        make(i, cam)
        for i in range(spec.num_identities)
        for cam in range(QUERY_CAMERAS)
    ]
    gallery = [
        make(i, cam)
        for i in range(spec.num_identities)
        for cam in range(spec.num_cameras)
        for _ in range(GALLERY_PER_CAMERA)
    ]
    return train, query, gallery
