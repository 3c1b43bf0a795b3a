"""3D volume / label-map types and the preprocessing operations.

Conventions used throughout the harness:

* volume arrays are indexed ``[x, y, z]`` and stored as float32 (HU before
  normalization, dimensionless in [0, 1] after); label arrays are int32;
* resampling maps output sample i to input position i * (n_in-1) / (n_out-1)
  (sample grids share endpoints, so identity shapes resample exactly) and
  rescales spacing to keep the physical extent (n-1) * spacing;
* the cubic resampler is separable Catmull-Rom; the one ghost sample needed
  past each edge is linearly extrapolated from the two edge samples, which
  keeps degree-1 fields exact all the way to the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_TARGET_SHAPE = (168, 168, 64)
DEFAULT_NORMALIZE_LO = -1024.0
DEFAULT_NORMALIZE_HI = 1024.0


class VolumeError(ValueError):
    """Invalid volume data or operation parameters."""


def _validate_grid(shape, spacing) -> None:
    if len(shape) != 3 or any(int(s) < 1 for s in shape):
        raise VolumeError(f"volume shape must be 3 positive dims, got {tuple(shape)}")
    if len(spacing) != 3 or any(not (s > 0) for s in spacing):
        raise VolumeError(f"voxel spacing must be positive, got {tuple(spacing)}")


class VoxelVolume:
    """A 3D scalar grid with voxel spacing and origin in mm."""

    __slots__ = ("data", "spacing", "origin")

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 3:
            raise VolumeError(f"expected a 3D array, got ndim={arr.ndim}")
        bad = ~np.isfinite(arr)
        if bad.any():
            x, y, z = (int(v[0]) for v in np.nonzero(bad))
            raise VolumeError(f"non-finite voxel value at ({x}, {y}, {z})")
        _validate_grid(arr.shape, spacing)
        arr = arr.copy() if arr is data else arr
        arr.flags.writeable = False
        self.data = arr
        self.spacing = tuple(float(s) for s in spacing)
        self.origin = tuple(float(o) for o in origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data) -> "VoxelVolume":
        return VoxelVolume(data, self.spacing, self.origin)

    def __repr__(self):
        return f"VoxelVolume(shape={self.shape}, spacing={self.spacing})"


class LabelMap:
    """A 3D grid of small non-negative integer organ codes."""

    __slots__ = ("data", "spacing", "origin")

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        arr = np.asarray(data)
        if arr.ndim != 3:
            raise VolumeError(f"expected a 3D array, got ndim={arr.ndim}")
        if arr.dtype.kind not in "iu":
            raise VolumeError(f"label data must be integer, got dtype {arr.dtype}")
        if arr.size and int(arr.min()) < 0:
            raise VolumeError("label codes must be non-negative")
        _validate_grid(arr.shape, spacing)
        arr = np.ascontiguousarray(arr, dtype=np.int32)
        arr.flags.writeable = False
        self.data = arr
        self.spacing = tuple(float(s) for s in spacing)
        self.origin = tuple(float(o) for o in origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def codes(self) -> set[int]:
        return {int(c) for c in np.unique(self.data)}

    def __repr__(self):
        return f"LabelMap(shape={self.shape}, codes={sorted(self.codes())})"


@dataclass(frozen=True)
class WindowSpec:
    """Display window: HU width and center."""

    window: float
    level: float

    def __post_init__(self):
        if not (self.window > 0):
            raise VolumeError(f"window width must be > 0, got {self.window}")


# Both readings of the soft-tissue window shipped in the CT protocol docs;
# width=190 / center=35 is the default because a 35 HU-wide window centered
# at 190 would show almost no soft tissue.
SOFT_TISSUE_WINDOW = WindowSpec(window=190.0, level=35.0)
ALT_SOFT_TISSUE_WINDOW = WindowSpec(window=35.0, level=190.0)


def apply_window(vol: VoxelVolume, spec: WindowSpec) -> VoxelVolume:
    """Map HU interval [level - window/2, level + window/2] onto [0, 1], clamped."""
    if not (spec.window > 0):
        raise VolumeError(f"window width must be > 0, got {spec.window}")
    lo = spec.level - spec.window / 2.0
    out = np.clip((vol.data.astype(np.float64) - lo) / spec.window, 0.0, 1.0)
    return vol.with_data(out)


def normalize_intensity(
    vol: VoxelVolume, lo: float = DEFAULT_NORMALIZE_LO, hi: float = DEFAULT_NORMALIZE_HI
) -> VoxelVolume:
    """Linear map of [lo, hi] onto [0, 1] with clamping outside."""
    if not (lo < hi):
        raise VolumeError(f"normalization range is empty: lo={lo} >= hi={hi}")
    out = np.clip((vol.data.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return vol.with_data(out)


def _check_target(target_shape, minimum: int) -> tuple[int, int, int]:
    target = tuple(int(t) for t in target_shape)
    if len(target) != 3 or any(t < minimum for t in target):
        raise VolumeError(f"target shape dims must be >= {minimum}, got {target}")
    return target


def _source_positions(n_in: int, n_out: int) -> np.ndarray:
    if n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def _rescaled_spacing(spacing, in_shape, out_shape) -> tuple[float, ...]:
    out = []
    for s, n_in, n_out in zip(spacing, in_shape, out_shape):
        out.append(s * (n_in - 1) / (n_out - 1) if n_in > 1 and n_out > 1 else s)
    return tuple(out)


def _catmull_rom_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    """Resample one axis with Catmull-Rom; linear-extrapolated ghost samples."""
    n_in = arr.shape[axis]
    if n_in == 1:
        reps = [1, 1, 1]
        reps[axis] = n_out
        return np.tile(arr, reps)
    pos = _source_positions(n_in, n_out)
    base = np.minimum(np.floor(pos).astype(np.intp), n_in - 2)
    t = pos - base

    # weights of samples base-1 .. base+2
    t2, t3 = t * t, t * t * t
    w = np.stack(
        [
            0.5 * (-t3 + 2.0 * t2 - t),
            0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
            0.5 * (-3.0 * t3 + 4.0 * t2 + t),
            0.5 * (t3 - t2),
        ]
    )

    moved = np.moveaxis(arr, axis, 0).astype(np.float64)
    ghost_lo = 2.0 * moved[0] - moved[1]
    ghost_hi = 2.0 * moved[-1] - moved[-2]
    padded = np.concatenate([ghost_lo[None], moved, ghost_hi[None]], axis=0)

    out = np.zeros((n_out,) + moved.shape[1:])
    for j in range(4):
        idx = base + j  # base-1+j shifted by the one-sample pad
        out += w[j].reshape((-1,) + (1,) * (moved.ndim - 1)) * padded[idx]
    return np.moveaxis(out, 0, axis)


def resample_spline(vol: VoxelVolume, target_shape) -> VoxelVolume:
    """Separable Catmull-Rom resample to target_shape, preserving extent."""
    target = _check_target(target_shape, minimum=2)
    out = vol.data
    for axis in range(3):
        if out.shape[axis] != target[axis]:
            out = _catmull_rom_axis(out, axis, target[axis])
    spacing = _rescaled_spacing(vol.spacing, vol.shape, target)
    return VoxelVolume(out, spacing, vol.origin)


def resample_labels_nearest(lbl: LabelMap, target_shape) -> LabelMap:
    """Nearest-neighbor resample; never invents codes."""
    target = _check_target(target_shape, minimum=2)
    idx = []
    for axis in range(3):
        pos = _source_positions(lbl.shape[axis], target[axis])
        idx.append(np.floor(pos + 0.5).astype(np.intp))  # round half up
    out = lbl.data[np.ix_(idx[0], idx[1], idx[2])]
    spacing = _rescaled_spacing(lbl.spacing, lbl.shape, target)
    return LabelMap(out, spacing, lbl.origin)


def crop_or_pad(vol, target_shape, fill=0.0):
    """Center-aligned crop/pad per axis; works on volumes and label maps."""
    target = _check_target(target_shape, minimum=1)
    src = vol.data
    is_label = isinstance(vol, LabelMap)
    out = np.full(target, fill, dtype=src.dtype)
    src_start, dst_start, span = [], [], []
    for axis in range(3):
        n_in, n_out = src.shape[axis], target[axis]
        if n_in >= n_out:
            off = (n_in - n_out) // 2
            src_start.append(off)
            dst_start.append(0)
            span.append(n_out)
        else:
            off = (n_out - n_in) // 2
            src_start.append(0)
            dst_start.append(off)
            span.append(n_in)
    src_sl = tuple(slice(s, s + n) for s, n in zip(src_start, span))
    dst_sl = tuple(slice(d, d + n) for d, n in zip(dst_start, span))
    out[dst_sl] = src[src_sl]
    origin = tuple(
        o + (ss - ds) * sp
        for o, ss, ds, sp in zip(vol.origin, src_start, dst_start, vol.spacing)
    )
    if is_label:
        return LabelMap(out, vol.spacing, origin)
    return VoxelVolume(out, vol.spacing, origin)


@dataclass(frozen=True)
class PreprocessConfig:
    window: WindowSpec = SOFT_TISSUE_WINDOW
    normalize_lo: float = DEFAULT_NORMALIZE_LO
    normalize_hi: float = DEFAULT_NORMALIZE_HI
    # shape the spline resample targets; crop/pad then takes it to target_shape
    resample_shape: tuple[int, int, int] | None = None
    target_shape: tuple[int, int, int] = DEFAULT_TARGET_SHAPE
    fill: float = 0.0


@dataclass
class PreprocessedStudy:
    image: VoxelVolume
    soft: VoxelVolume
    label: LabelMap | None = None


def preprocess_study(
    image: VoxelVolume,
    label: LabelMap | None = None,
    cfg: PreprocessConfig | None = None,
) -> PreprocessedStudy:
    """Window, normalize + resample, then crop/pad to the target shape.

    Interpolation overshoot is clipped back into [0, 1] so downstream
    consumers can rely on normalized intensities.
    """
    cfg = cfg or PreprocessConfig()
    if label is not None and label.shape != image.shape:
        raise VolumeError(
            f"label shape {label.shape} does not match image shape {image.shape}"
        )
    resample_shape = cfg.resample_shape or cfg.target_shape

    soft = apply_window(image, cfg.window)
    norm = normalize_intensity(image, cfg.normalize_lo, cfg.normalize_hi)

    norm = resample_spline(norm, resample_shape)
    soft = resample_spline(soft, resample_shape)
    norm = norm.with_data(np.clip(norm.data, 0.0, 1.0))
    soft = soft.with_data(np.clip(soft.data, 0.0, 1.0))

    norm = crop_or_pad(norm, cfg.target_shape, cfg.fill)
    soft = crop_or_pad(soft, cfg.target_shape, cfg.fill)

    out_label = None
    if label is not None:
        out_label = resample_labels_nearest(label, resample_shape)
        out_label = crop_or_pad(out_label, cfg.target_shape, fill=0)
    return PreprocessedStudy(image=norm, soft=soft, label=out_label)
