"""Deterministic synthetic CT-like cohorts: noisy ellipsoidal organs in HU.

Stands in for clinical archives that cannot ship with the harness. Organs
are rasterized in list order, later organs carving earlier ones where they
overlap. Hard cases pull the gallbladder mean toward the liver mean so the
two become difficult to separate by intensity, mirroring the failure mode
the improvement loop is built around. Everything is derived from the
documented counter RNG, so a (seed, params) pair is bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

from . import rng
from .ledger import CohortManifest, ManifestEntry
from .nifti import DT_FLOAT32, DT_UINT8, write_nifti_file
from .volume import LabelMap, VoxelVolume

import numpy as np

SPLEEN, LIVER, GALLBLADDER = 1, 2, 3
ORGAN_NAMES = {SPLEEN: "spleen", LIVER: "liver", GALLBLADDER: "gallbladder"}


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class OrganSpec:
    code: int
    center: tuple[float, float, float]  # fractional coords in (0,1)^3
    radii: tuple[float, float, float]  # fractional semi-axes
    mean_hu: float
    presence_prob: float = 1.0

    def __post_init__(self):
        if any(not (r > 0) for r in self.radii):
            raise PhantomError(f"organ {self.code} radii must be positive")
        if not (0.0 <= self.presence_prob <= 1.0):
            raise PhantomError("presence_prob must lie in [0, 1]")


# Plausible-CT defaults: liver 55 HU, spleen 50 HU, gallbladder 10 HU over a
# -200 HU body-like background; the gallbladder is missing from roughly half
# of studies (24/51 in the annotation protocol this mirrors).
DEFAULT_ORGANS = (
    OrganSpec(LIVER, center=(0.40, 0.48, 0.50), radii=(0.29, 0.25, 0.27), mean_hu=55.0),
    OrganSpec(SPLEEN, center=(0.74, 0.32, 0.46), radii=(0.13, 0.11, 0.13), mean_hu=50.0),
    OrganSpec(
        GALLBLADDER,
        center=(0.55, 0.70, 0.44),
        radii=(0.10, 0.09, 0.11),
        mean_hu=10.0,
        presence_prob=24.0 / 51.0,
    ),
)


@dataclass(frozen=True)
class PhantomParams:
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    noise_sigma: float = 20.0
    background_hu: float = -200.0
    organs: tuple[OrganSpec, ...] = DEFAULT_ORGANS
    hard_case: bool = False
    hard_gallbladder_hu: float = 45.0  # easy cases keep the organ's own mean
    jitter: float = 0.10  # relative wobble applied per study

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise PhantomError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def with_gallbladder_presence(self, p: float) -> "PhantomParams":
        organs = tuple(
            replace(o, presence_prob=p) if o.code == GALLBLADDER else o
            for o in self.organs
        )
        return replace(self, organs=organs)


def _effective_hu(params: PhantomParams, organ: OrganSpec) -> float:
    if params.hard_case and organ.code == GALLBLADDER:
        return params.hard_gallbladder_hu
    return organ.mean_hu


def generate_phantom(seed: int, params: PhantomParams) -> tuple[VoxelVolume, LabelMap]:
    """One study: exact ellipsoid label rasterization plus noisy HU image."""
    nx, ny, nz = params.dims
    label = np.zeros(params.dims, dtype=np.int32)
    coords = [np.arange(n) + 0.5 for n in params.dims]

    present: list[OrganSpec] = []
    for i, organ in enumerate(params.organs):
        u = rng.uniforms(rng.derive_seed(seed, 10 + i), 7)
        if u[0] >= organ.presence_prob:
            continue
        center = [
            (c + (u[1 + ax] - 0.5) * 2.0 * params.jitter * r) * n
            for ax, (c, r, n) in enumerate(zip(organ.center, organ.radii, params.dims))
        ]
        radii = [
            max(r * (1.0 + (u[4 + ax] - 0.5) * params.jitter) * n, 1e-6)
            for ax, (r, n) in enumerate(zip(organ.radii, params.dims))
        ]
        dist = (
            ((coords[0] - center[0]) / radii[0])[:, None, None] ** 2
            + ((coords[1] - center[1]) / radii[1])[None, :, None] ** 2
            + ((coords[2] - center[2]) / radii[2])[None, None, :] ** 2
        )
        mask = dist <= 1.0
        label[mask] = organ.code  # later organs carve earlier ones
        present.append(organ)

    for organ in present:
        if not (label == organ.code).any():
            raise PhantomError(
                f"organ {ORGAN_NAMES.get(organ.code, organ.code)} was fully "
                f"carved away; phantom spec is degenerate"
            )

    image = np.full(params.dims, params.background_hu, dtype=np.float64)
    for organ in present:
        image[label == organ.code] = _effective_hu(params, organ)
    if params.noise_sigma > 0:
        noise = rng.gaussians(rng.derive_seed(seed, 999), nx * ny * nz)
        image += params.noise_sigma * noise.reshape(params.dims)

    return (
        VoxelVolume(image, params.spacing),
        LabelMap(label, params.spacing),
    )


def generate_cohort(
    seed: int,
    n: int,
    hard_fraction: float,
    params: PhantomParams,
    out_dir,
    cohort_id: str,
    role: str = "eval",
) -> CohortManifest:
    """Write n studies (image.nii + label.nii each) and the cohort manifest.

    ceil(hard_fraction * n) studies are generated as hard cases; which ones
    is a seeded shuffle. The manifest records the hard flag for acceptance
    checks only.
    """
    if not (0.0 <= hard_fraction <= 1.0):
        raise PhantomError(f"hard_fraction must lie in [0, 1], got {hard_fraction}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_hard = math.ceil(hard_fraction * n)
    hard_idx = set(int(i) for i in rng.shuffled(n, rng.derive_seed(seed, 1))[:n_hard])

    entries = []
    for i in range(n):
        study_id = f"{cohort_id}-{i:04d}"
        study_params = replace(params, hard_case=i in hard_idx)
        vol, lbl = generate_phantom(rng.derive_seed(seed, 2, i), study_params)
        study_dir = out / study_id
        study_dir.mkdir(parents=True, exist_ok=True)
        image_path = study_dir / "image.nii"
        label_path = study_dir / "label.nii"
        write_nifti_file(image_path, vol, DT_FLOAT32)
        write_nifti_file(label_path, lbl, DT_UINT8)
        entries.append(
            ManifestEntry(
                study_id=study_id,
                image_path=str(image_path),
                label_path=str(label_path),
                role=role,
                hard=i in hard_idx,
            )
        )
    manifest = CohortManifest(cohort_id=cohort_id, entries=entries)
    manifest.save(out / "manifest.json")
    return manifest
