"""SITS containers, preprocessing (gapfilling, NDVI, min-max normalization),
patch extraction, object-exclusive splits, synthetic benchmark generation,
and the binary cube / label-raster file formats."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

DEFAULT_BANDS = ["B2", "B3", "B4", "B8"]
NDVI_BAND = "NDVI"
PATCH = 5
PATCH_HALF = PATCH // 2

SPLIT_NAMES = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.30, 0.20, 0.50)


class DataError(ValueError):
    pass


class FormatError(ValueError):
    """Raised for malformed cube/label/split files; message carries the cause."""


@dataclass
class SitsCube:
    timestamps: np.ndarray          # (T,) int64 days since epoch, strictly increasing
    bands: list[str]                # length B
    data: np.ndarray                # (T, B, H, W) float32
    validity: np.ndarray | None = None  # (T, H, W) bool, False = cloudy/invalid

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.data = np.asarray(self.data, dtype=np.float32)
        t, b, h, w = self.data.shape
        if len(self.timestamps) != t or len(self.bands) != b:
            raise DataError("cube header inconsistent with data shape")
        if t > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise DataError("timestamps must be strictly increasing")
        if self.validity is not None:
            self.validity = np.asarray(self.validity, dtype=bool)
            if self.validity.shape != (t, h, w):
                raise DataError("validity mask shape mismatch")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class LabelRaster:
    labels: np.ndarray   # (H, W) int32, 0 = unlabeled
    objects: np.ndarray  # (H, W) int32, 0 = none

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        self.objects = np.asarray(self.objects, dtype=np.int32)
        if self.labels.shape != self.objects.shape:
            raise DataError("label and object rasters must have equal shape")
        if np.any((self.labels > 0) & (self.objects == 0)):
            raise DataError("labeled pixel without an object id")

    def num_classes(self) -> int:
        return int(self.labels.max())


@dataclass
class PatchSample:
    cube: np.ndarray     # (T, B, 5, 5) float32
    label: int           # class index, 0-based
    object_id: int
    center: tuple[int, int]


@dataclass
class NormalizationStats:
    band_min: np.ndarray  # (B,)
    band_max: np.ndarray  # (B,)

    @classmethod
    def from_cube(cls, cube: SitsCube) -> "NormalizationStats":
        lo = cube.data.min(axis=(0, 2, 3))
        hi = cube.data.max(axis=(0, 2, 3))
        flat = np.nonzero(hi <= lo)[0]
        if flat.size:
            raise DataError(f"constant band(s) {[cube.bands[i] for i in flat]}: "
                            "min-max normalization undefined")
        return cls(lo.astype(np.float32), hi.astype(np.float32))


# -- preprocessing ------------------------------------------------------------


def gapfill_linear(cube: SitsCube) -> SitsCube:
    """Fill invalid observations by linear interpolation in time.

    Outside the valid range, the nearest valid value is extended as a
    constant. Valid observations are never rewritten.
    """
    if cube.validity is None or cube.validity.all():
        return SitsCube(cube.timestamps, list(cube.bands), cube.data.copy(),
                        np.ones(cube.data.shape[:1] + cube.data.shape[2:], dtype=bool))
    t_len, b_len, h, w = cube.data.shape
    valid = cube.validity  # (T, H, W)
    counts = valid.sum(axis=0)
    if np.any(counts == 0):
        r, c = np.argwhere(counts == 0)[0]
        raise DataError(f"pixel ({r}, {c}) has no valid observation in any timestamp")

    out = cube.data.copy()
    ts = cube.timestamps.astype(np.float64)
    flat_valid = valid.reshape(t_len, h * w)
    flat = out.reshape(t_len, b_len, h * w)
    need = np.nonzero(~flat_valid.all(axis=0))[0]
    for p in need:
        vmask = flat_valid[:, p]
        vt = np.nonzero(vmask)[0]
        for b in range(b_len):
            series = flat[:, b, p]
            filled = np.interp(ts, ts[vt], series[vt])
            series[~vmask] = filled[~vmask].astype(np.float32)
    return SitsCube(cube.timestamps, list(cube.bands), out,
                    np.ones((t_len, h, w), dtype=bool))


def compute_ndvi(cube: SitsCube, red_band: str = "B4", nir_band: str = "B8") -> SitsCube:
    """Append (NIR - Red) / (NIR + Red) as a band; zero where the sum is zero."""
    for name in (red_band, nir_band):
        if name not in cube.bands:
            raise DataError(f"band {name!r} required for NDVI is missing")
    red = cube.data[:, cube.bands.index(red_band)]
    nir = cube.data[:, cube.bands.index(nir_band)]
    denom = nir + red
    with np.errstate(divide="ignore", invalid="ignore"):
        ndvi = np.where(denom != 0, (nir - red) / denom, 0.0).astype(np.float32)
    data = np.concatenate([cube.data, ndvi[:, None]], axis=1)
    return SitsCube(cube.timestamps, list(cube.bands) + [NDVI_BAND], data, cube.validity)


def normalize_minmax(cube: SitsCube, stats: NormalizationStats) -> SitsCube:
    """Per-band (x - min) / (max - min), clamped to [0, 1]."""
    if len(stats.band_min) != len(cube.bands):
        raise DataError("normalization stats band count mismatch")
    lo = stats.band_min[None, :, None, None]
    hi = stats.band_max[None, :, None, None]
    data = np.clip((cube.data - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)
    return SitsCube(cube.timestamps, list(cube.bands), data, cube.validity)


def preprocess(cube: SitsCube, gapfill: bool = True, ndvi: bool = True,
               normalize: bool = True,
               stats: NormalizationStats | None = None) -> tuple[SitsCube, NormalizationStats | None]:
    """Fixed pipeline order: gapfill -> NDVI -> normalize."""
    if gapfill:
        cube = gapfill_linear(cube)
    if ndvi and NDVI_BAND not in cube.bands:
        cube = compute_ndvi(cube)
    if normalize:
        if stats is None:
            stats = NormalizationStats.from_cube(cube)
        cube = normalize_minmax(cube, stats)
    return cube, stats


# -- patch extraction ---------------------------------------------------------


def _mirror_index(i: int, n: int) -> int:
    # Reflect without repeating the border pixel; n >= 2 in practice.
    if i < 0:
        return -i
    if i >= n:
        return 2 * n - 2 - i
    return i


def extract_patch(cube_data: np.ndarray, row: int, col: int) -> np.ndarray:
    """(T, B, 5, 5) window centered at (row, col) with mirror padding."""
    t_len, b_len, h, w = cube_data.shape
    rows = [_mirror_index(row + dr, h) for dr in range(-PATCH_HALF, PATCH_HALF + 1)]
    cols = [_mirror_index(col + dc, w) for dc in range(-PATCH_HALF, PATCH_HALF + 1)]
    return np.ascontiguousarray(cube_data[:, :, rows][:, :, :, cols])


def extract_patches(cube: SitsCube, labels: LabelRaster) -> list[PatchSample]:
    """One sample per labeled pixel, row-major by center; labels become 0-based."""
    if cube.data.shape[2:] != labels.labels.shape:
        raise DataError("cube and label raster spatial sizes differ")
    samples = []
    for row, col in np.argwhere(labels.labels > 0):
        samples.append(PatchSample(
            cube=extract_patch(cube.data, int(row), int(col)),
            label=int(labels.labels[row, col]) - 1,
            object_id=int(labels.objects[row, col]),
            center=(int(row), int(col))))
    return samples


# -- object-exclusive splits --------------------------------------------------


@dataclass
class SplitAssignment:
    mapping: dict[int, str]   # object_id -> train/val/test
    seed: int
    fractions: tuple[float, float, float]

    def part(self, name: str) -> set[int]:
        return {o for o, s in self.mapping.items() if s == name}


def object_split(labels: LabelRaster, fractions=DEFAULT_FRACTIONS, seed: int = 0) -> SplitAssignment:
    """Stratified per-class object assignment; deterministic per seed."""
    from .rng import SeededRng
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions {fractions} do not sum to 1")
    rng = SeededRng(seed)
    mapping: dict[int, str] = {}
    lab = labels.labels
    obj = labels.objects
    classes = sorted(int(c) for c in np.unique(lab[lab > 0]))
    for cls in classes:
        objects = sorted(int(o) for o in np.unique(obj[lab == cls]))
        rng.shuffle(objects)
        n = len(objects)
        n_train = round(fractions[0] * n)
        n_val = round(fractions[1] * n)
        if n < 3:
            # Too few objects to stratify; fill train first.
            import warnings
            warnings.warn(f"class {cls} has only {n} objects; assigning train-first")
            n_train, n_val = min(n, 1), min(max(n - 1, 0), 1)
        for i, o in enumerate(objects):
            if i < n_train:
                mapping[o] = "train"
            elif i < n_train + n_val:
                mapping[o] = "val"
            else:
                mapping[o] = "test"
    return SplitAssignment(mapping, seed, tuple(fractions))


def split_samples(samples: list[PatchSample], assignment: SplitAssignment) -> dict[str, list[PatchSample]]:
    parts: dict[str, list[PatchSample]] = {name: [] for name in SPLIT_NAMES}
    for s in samples:
        parts[assignment.mapping[s.object_id]].append(s)
    return parts


# -- synthetic benchmark ------------------------------------------------------


@dataclass
class SyntheticSpec:
    num_classes: int = 3
    height: int = 64
    width: int = 64
    num_timestamps: int = 8
    objects_per_class: int = 10
    object_size: int = 5          # square object edge, pixels
    noise_sigma: float = 0.02
    cloud_prob: float = 0.1
    seed: int = 0
    bands: list[str] = field(default_factory=lambda: list(DEFAULT_BANDS))
    min_profile_separation: float = 0.0  # 0 = require > 10 * noise_sigma


def class_profiles(spec: SyntheticSpec) -> np.ndarray:
    """(C, B, T) per-class sinusoid time profiles, pairwise well separated."""
    c_len, b_len, t_len = spec.num_classes, len(spec.bands), spec.num_timestamps
    t = np.arange(t_len) / max(t_len, 1)
    prof = np.empty((c_len, b_len, t_len), dtype=np.float64)
    for c in range(c_len):
        phase = 2.0 * math.pi * c / max(c_len, 1)
        for b in range(b_len):
            amp = 0.18 + 0.04 * b
            offset = 0.45 + 0.05 * c + 0.03 * b
            prof[c, b] = offset + amp * np.sin(2.0 * math.pi * t + phase)
    return prof


def generate_synthetic(spec: SyntheticSpec) -> tuple[SitsCube, LabelRaster]:
    """Rectangular class objects on a grid; per-pixel series = class profile +
    Gaussian noise; i.i.d. cloud mask. Fully deterministic per seed."""
    from .rng import SeededRng
    rng = SeededRng(spec.seed)
    prof = class_profiles(spec)
    min_sep = spec.min_profile_separation or 10.0 * spec.noise_sigma
    for a in range(spec.num_classes):
        for b in range(a + 1, spec.num_classes):
            sep = float(np.linalg.norm(prof[a] - prof[b]))
            if sep <= min_sep:
                raise DataError(
                    f"classes {a + 1} and {b + 1} profiles separated by {sep:.4f} <= {min_sep:.4f}")

    # Non-overlapping placement on a block grid with a 1-pixel gap.
    step = spec.object_size + 1
    slots = [(r, c) for r in range(0, spec.height - spec.object_size + 1, step)
             for c in range(0, spec.width - spec.object_size + 1, step)]
    total_objects = spec.num_classes * spec.objects_per_class
    if total_objects > len(slots):
        raise DataError(f"{total_objects} objects do not fit a "
                        f"{spec.height}x{spec.width} grid (max {len(slots)})")
    rng.shuffle(slots)

    labels = np.zeros((spec.height, spec.width), dtype=np.int32)
    objects = np.zeros((spec.height, spec.width), dtype=np.int32)
    oid = 0
    for cls in range(1, spec.num_classes + 1):
        for _ in range(spec.objects_per_class):
            r, c = slots[oid]
            oid += 1
            labels[r:r + spec.object_size, c:c + spec.object_size] = cls
            objects[r:r + spec.object_size, c:c + spec.object_size] = oid

    t_len, b_len = spec.num_timestamps, len(spec.bands)
    data = np.zeros((t_len, b_len, spec.height, spec.width), dtype=np.float32)
    for row in range(spec.height):
        for col in range(spec.width):
            cls = labels[row, col]
            base = prof[cls - 1] if cls > 0 else np.full((b_len, t_len), 0.3)
            for b in range(b_len):
                for t in range(t_len):
                    val = base[b, t]
                    if spec.noise_sigma > 0:
                        val += rng.normal(0.0, spec.noise_sigma)
                    data[t, b, row, col] = val

    validity = np.ones((t_len, spec.height, spec.width), dtype=bool)
    if spec.cloud_prob > 0:
        for row in range(spec.height):
            for col in range(spec.width):
                for t in range(t_len):
                    if rng.random() < spec.cloud_prob:
                        validity[t, row, col] = False
                if not validity[:, row, col].any():
                    validity[0, row, col] = True  # keep gapfill well-posed

    timestamps = np.arange(t_len, dtype=np.int64) * 10 + 17000
    cube = SitsCube(timestamps, list(spec.bands), data, validity)
    return cube, LabelRaster(labels, objects)


# -- binary file formats ------------------------------------------------------

CUBE_MAGIC = b"SITC"
LABEL_MAGIC = b"SITL"
FORMAT_VERSION = 1


def write_cube(path: str, cube: SitsCube) -> None:
    t_len, b_len, h, w = cube.data.shape
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<IIIII", FORMAT_VERSION, t_len, b_len, h, w))
        fh.write(cube.timestamps.astype("<i8").tobytes())
        for name in cube.bands:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
        fh.write(struct.pack("<B", 1 if cube.validity is not None else 0))
        fh.write(cube.data.astype("<f4").tobytes())
        if cube.validity is not None:
            fh.write(cube.validity.astype(np.uint8).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise FormatError(f"truncated payload: short read of {what}")
    return b


def read_cube(path: str) -> SitsCube:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CUBE_MAGIC:
            raise FormatError("bad magic: not a cube file")
        version, t_len, b_len, h, w = struct.unpack("<IIIII", _read_exact(fh, 20, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported cube version {version}")
        if max(t_len, b_len, h, w) > 10 ** 6 or min(t_len, b_len, h, w) == 0:
            raise FormatError("dim overflow: implausible cube dimensions")
        ts = np.frombuffer(_read_exact(fh, 8 * t_len, "timestamps"), dtype="<i8")
        bands = []
        for _ in range(b_len):
            nlen, = struct.unpack("<H", _read_exact(fh, 2, "band name length"))
            bands.append(_read_exact(fh, nlen, "band name").decode("utf-8"))
        has_mask, = struct.unpack("<B", _read_exact(fh, 1, "mask flag"))
        n_vals = t_len * b_len * h * w
        data = np.frombuffer(_read_exact(fh, 4 * n_vals, "data"), dtype="<f4")
        data = data.reshape(t_len, b_len, h, w).copy()
        validity = None
        if has_mask:
            mask = np.frombuffer(_read_exact(fh, t_len * h * w, "mask"), dtype=np.uint8)
            validity = mask.reshape(t_len, h, w).astype(bool)
        return SitsCube(ts.copy(), bands, data, validity)


def write_labels(path: str, raster: LabelRaster) -> None:
    h, w = raster.labels.shape
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, h, w, raster.num_classes()))
        fh.write(raster.labels.astype("<i4").tobytes())
        fh.write(raster.objects.astype("<i4").tobytes())


def read_labels(path: str) -> LabelRaster:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != LABEL_MAGIC:
            raise FormatError("bad magic: not a label raster file")
        version, h, w, _c = struct.unpack("<IIII", _read_exact(fh, 16, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported label raster version {version}")
        labels = np.frombuffer(_read_exact(fh, 4 * h * w, "labels"), dtype="<i4")
        objects = np.frombuffer(_read_exact(fh, 4 * h * w, "objects"), dtype="<i4")
        return LabelRaster(labels.reshape(h, w).copy(), objects.reshape(h, w).copy())


def write_split(path: str, assignment: SplitAssignment) -> None:
    with open(path, "w") as fh:
        for oid in sorted(assignment.mapping):
            fh.write(f"{oid},{assignment.mapping[oid]}\n")


def read_split(path: str) -> SplitAssignment:
    mapping: dict[int, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2 or parts[1] not in SPLIT_NAMES:
                raise FormatError(f"bad split line {lineno}: {line!r}")
            mapping[int(parts[0])] = parts[1]
    return SplitAssignment(mapping, seed=-1, fractions=DEFAULT_FRACTIONS)
