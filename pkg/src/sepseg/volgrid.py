"""Volume and label containers, the raw+JSON on-disk format, a minimal NIfTI-1
reader, synthetic ellipsoid phantoms, crops and PGM slice export."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HU_MIN, HU_MAX = -1000, 3000

_DTYPES = {"i16": "<i2", "f32": "<f4", "u8": "u1"}
_KINDS = ("HU", "Normalized", "Label", "Uncertainty")


class VolumeFormatError(ValueError):
    pass


class UnsupportedFeatureError(VolumeFormatError):
    pass


def _check_geometry(dims, spacing):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ValueError(f"dims must be three positive extents, got {dims}")
    if len(spacing) != 3 or any(float(s) <= 0 for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")


@dataclass(frozen=True)
class Volume:
    """Scalar grid indexed (z, y, x) with physical spacing in mm."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_kind: str = "HU"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-d, got shape {self.data.shape}")
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        _check_geometry(self.data.shape, self.spacing_mm)
        if self.intensity_kind not in ("HU", "Normalized"):
            raise ValueError(f"unknown intensity kind {self.intensity_kind!r}")
        if self.intensity_kind == "Normalized" and self.data.size:
            lo, hi = float(self.data.min()), float(self.data.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"normalized volume has values outside [0, 1]: [{lo}, {hi}]")
        self.data.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray
    num_classes: int
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise ValueError(f"label data must be 3-d, got shape {self.labels.shape}")
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        _check_geometry(self.labels.shape, self.spacing_mm)
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        self.labels.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def one_hot(self, dtype=np.float64) -> np.ndarray:
        """(C, D, H, W) indicator view of the labels."""
        return (np.arange(self.num_classes)[:, None, None, None] == self.labels[None]).astype(dtype)


@dataclass(frozen=True)
class ProbMap:
    probs: np.ndarray  # (C, D, H, W)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.probs.shape[1:])

    def argmax(self) -> LabelMap:
        # np.argmax returns the first maximum, i.e. ties go to the lower class
        return LabelMap(self.probs.argmax(axis=0).astype(np.uint8), self.num_classes, self.spacing_mm)


@dataclass(frozen=True)
class UncertaintyMap:
    """Voxel-wise entropy (nats) of the labels predicted by ``num_members`` models."""

    entropy: np.ndarray
    num_members: int
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.entropy.shape)


@dataclass(frozen=True)
class Structure:
    class_id: int
    center_mm: tuple[float, float, float]
    radii_mm: tuple[float, float, float]
    mean_hu: float
    noise_hu: float = 0.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float] = (3.0, 1.0, 1.0)
    structures: tuple[Structure, ...] = ()
    background_hu: float = 0.0
    background_noise_hu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        _check_geometry(self.dims, self.spacing_mm)
        ids = sorted({s.class_id for s in self.structures})
        if ids and ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"structure class ids must be dense in 1..C-1, got {ids}")
        for s in self.structures:
            if any(r <= 0 for r in s.radii_mm):
                raise ValueError(f"ellipsoid radii must be positive, got {s.radii_mm}")

    @property
    def num_classes(self) -> int:
        return 1 + len({s.class_id for s in self.structures})


# --- native format ---------------------------------------------------------

def _raw_path(meta_path: Path) -> Path:
    name = meta_path.name
    if name.endswith(".json"):
        return meta_path.with_name(name[: -len(".json")])
    return meta_path.with_name(name + ".raw")


def _write_pair(meta_path, array: np.ndarray, spacing, kind: str, dtype: str, extra=None) -> None:
    meta_path = Path(meta_path)
    meta = {
        "dims": [int(d) for d in array.shape],
        "spacing_mm": [float(s) for s in spacing],
        "dtype": dtype,
        "intensity_kind": kind,
    }
    if extra:
        meta.update(extra)
    _raw_path(meta_path).write_bytes(np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes())
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")


def _read_pair(meta_path) -> tuple[np.ndarray, dict]:
    meta_path = Path(meta_path)
    if not meta_path.is_file():
        raise FileNotFoundError(f"sidecar not found: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{meta_path}: invalid JSON sidecar ({exc})") from None
    for key in ("dims", "spacing_mm", "dtype", "intensity_kind"):
        if key not in meta:
            raise VolumeFormatError(f"{meta_path}: sidecar is missing key {key!r}")
    if meta["dtype"] not in _DTYPES:
        raise VolumeFormatError(f"{meta_path}: unknown dtype {meta['dtype']!r}")
    if meta["intensity_kind"] not in _KINDS:
        raise VolumeFormatError(f"{meta_path}: unknown intensity_kind {meta['intensity_kind']!r}")
    dims = tuple(int(d) for d in meta["dims"])
    _check_geometry(dims, meta["spacing_mm"])
    raw = _raw_path(meta_path)
    if not raw.is_file():
        raise FileNotFoundError(f"raw data file not found: {raw}")
    dt = np.dtype(_DTYPES[meta["dtype"]])
    expected = int(np.prod(dims)) * dt.itemsize
    actual = raw.stat().st_size
    if actual != expected:
        raise VolumeFormatError(
            f"{raw}: size mismatch, dims {list(dims)} of {meta['dtype']} need {expected} bytes, file has {actual}")
    data = np.frombuffer(raw.read_bytes(), dtype=dt).reshape(dims)
    return data.astype(dt.newbyteorder("="), copy=True), meta


def save_volume(v: Volume, meta_path) -> None:
    """Write ``<name>.vol.json`` plus the raw little-endian ``<name>.vol``."""
    if v.intensity_kind == "HU" and np.issubdtype(v.data.dtype, np.integer):
        dtype = "i16"
    else:
        dtype = "f32"
    _write_pair(meta_path, v.data, v.spacing_mm, v.intensity_kind, dtype)


def load_volume(meta_path) -> Volume:
    data, meta = _read_pair(meta_path)
    if meta["intensity_kind"] not in ("HU", "Normalized"):
        raise VolumeFormatError(f"{meta_path}: holds {meta['intensity_kind']} data, not an intensity volume")
    return Volume(data, tuple(meta["spacing_mm"]), meta["intensity_kind"])


def save_labels(g: LabelMap, meta_path) -> None:
    _write_pair(meta_path, g.labels, g.spacing_mm, "Label", "u8", {"num_classes": int(g.num_classes)})


def load_labels(meta_path) -> LabelMap:
    data, meta = _read_pair(meta_path)
    if meta["intensity_kind"] != "Label":
        raise VolumeFormatError(f"{meta_path}: not a label map")
    return LabelMap(data, int(meta["num_classes"]), tuple(meta["spacing_mm"]))


def save_uncertainty(u: UncertaintyMap, meta_path) -> None:
    _write_pair(meta_path, u.entropy, u.spacing_mm, "Uncertainty", "f32", {"num_members": int(u.num_members)})


def load_uncertainty(meta_path) -> UncertaintyMap:
    data, meta = _read_pair(meta_path)
    if meta["intensity_kind"] != "Uncertainty":
        raise VolumeFormatError(f"{meta_path}: not an uncertainty map")
    return UncertaintyMap(data, int(meta["num_members"]), tuple(meta["spacing_mm"]))


# --- NIfTI-1 subset --------------------------------------------------------

_NIFTI_TYPES = {4: ("i2", "int16"), 16: ("f4", "float32")}


def import_nifti(path) -> Volume:
    """Read an uncompressed single-file NIfTI-1 image of int16 or float32.

    Orientation matrices are ignored; voxels are returned in stored order as
    (z, y, x).  Anything outside that subset raises UnsupportedFeatureError.
    """
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise UnsupportedFeatureError(f"{path}: unsupported feature: gzip compression")
    if len(raw) < 348:
        raise VolumeFormatError(f"{path}: file shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == 348:
            break
    else:
        raise VolumeFormatError(f"{path}: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise UnsupportedFeatureError(f"{path}: unsupported feature: two-file (.hdr/.img) NIfTI")
    if magic != b"n+1\x00":
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    scl_slope, scl_inter = struct.unpack(endian + "2f", raw[112:120])
    ndim = dim[0]
    if ndim < 3 or any(d != 1 for d in dim[4:ndim + 1]):
        raise UnsupportedFeatureError(f"{path}: unsupported feature: {ndim}-d image (only 3-d supported)")
    if datatype not in _NIFTI_TYPES:
        raise UnsupportedFeatureError(f"{path}: unsupported feature: datatype code {datatype}")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        raise UnsupportedFeatureError(f"{path}: unsupported feature: intensity scaling (scl_slope/scl_inter)")
    nx, ny, nz = dim[1:4]
    code, _ = _NIFTI_TYPES[datatype]
    dt = np.dtype(endian + code)
    count = nx * ny * nz
    if vox_offset < 348 or vox_offset + count * dt.itemsize > len(raw):
        raise VolumeFormatError(f"{path}: voxel data truncated or vox_offset invalid")
    data = np.frombuffer(raw, dtype=dt, count=count, offset=vox_offset).reshape(nz, ny, nx)
    data = data.astype(dt.newbyteorder("="))
    spacing = (abs(pixdim[3]), abs(pixdim[2]), abs(pixdim[1]))
    return Volume(data, spacing, "HU")


# --- phantoms ----------------------------------------------------------------

def structure_rng(seed: int, index: int) -> np.random.Generator:
    """Independent PCG64 stream for structure ``index`` of a phantom seeded by ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def voxel_centers_mm(dims, spacing) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return tuple(np.arange(n, dtype=np.float64) * s for n, s in zip(dims, spacing))


def ellipsoid_mask(dims, spacing, center_mm, radii_mm) -> np.ndarray:
    z, y, x = voxel_centers_mm(dims, spacing)
    r = ((z - center_mm[0]) / radii_mm[0])[:, None, None] ** 2 \
        + ((y - center_mm[1]) / radii_mm[1])[None, :, None] ** 2 \
        + ((x - center_mm[2]) / radii_mm[2])[None, None, :] ** 2
    return r <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    dims = tuple(int(d) for d in spec.dims)
    labels = np.zeros(dims, dtype=np.uint8)
    hu = np.full(dims, float(spec.background_hu))
    if spec.background_noise_hu > 0:
        hu += structure_rng(spec.seed, 0).normal(0.0, spec.background_noise_hu, dims)
    for i, s in enumerate(spec.structures, start=1):
        inside = ellipsoid_mask(dims, spec.spacing_mm, s.center_mm, s.radii_mm)
        labels[inside] = s.class_id
        noise = structure_rng(spec.seed, i).normal(0.0, s.noise_hu, int(inside.sum())) if s.noise_hu > 0 else 0.0
        hu[inside] = s.mean_hu + noise
    data = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
    return Volume(data, spec.spacing_mm, "HU"), LabelMap(labels, max(spec.num_classes, 2), spec.spacing_mm)


def desk_phantom_spec(seed: int, dims=(16, 48, 48), spacing=(3.0, 1.0, 1.0)) -> PhantomSpec:
    """A head-like phantom with three structures of very different sizes.

    Class 1 is a large soft-tissue ellipsoid, class 2 a bright bony shell
    segment and class 3 a small dense nodule that spans only a few slices.
    Positions and radii are jittered by ``seed``.
    """
    rng = structure_rng(seed, 10_000)
    ext = [n * s for n, s in zip(dims, spacing)]

    def jitter(frac, amp):
        return tuple(e * (f + rng.uniform(-amp, amp)) for e, f in zip(ext, frac))

    big = Structure(1, jitter((0.5, 0.42, 0.38), 0.05),
                    tuple(r * rng.uniform(0.9, 1.1) for r in (ext[0] * 0.3, ext[1] * 0.22, ext[2] * 0.2)),
                    mean_hu=70.0, noise_hu=15.0)
    bone = Structure(2, jitter((0.5, 0.72, 0.68), 0.04),
                     tuple(r * rng.uniform(0.9, 1.1) for r in (ext[0] * 0.25, ext[1] * 0.1, ext[2] * 0.12)),
                     mean_hu=700.0, noise_hu=60.0)
    small = Structure(3, jitter((0.5, 0.3, 0.75), 0.04),
                      tuple(r * rng.uniform(0.9, 1.1) for r in (4.5, 3.5, 3.5)),
                      mean_hu=-150.0, noise_hu=15.0)
    return PhantomSpec(tuple(dims), tuple(spacing), (big, bone, small),
                       background_hu=10.0, background_noise_hu=15.0, seed=seed)


# --- crops -------------------------------------------------------------------

def _check_crop(dims, size):
    if len(size) != 3 or any(int(s) < 1 or int(s) > d for s, d in zip(size, dims)):
        raise ValueError(f"crop size {tuple(size)} exceeds volume dims {tuple(dims)}")


def center_offsets(dims, size) -> tuple[int, int, int]:
    _check_crop(dims, size)
    return tuple((d - s) // 2 for d, s in zip(dims, size))


def _slices(offsets, size):
    return tuple(slice(o, o + s) for o, s in zip(offsets, size))


def center_crop(v: Volume, size) -> Volume:
    sl = _slices(center_offsets(v.dims, size), size)
    return Volume(v.data[sl].copy(), v.spacing_mm, v.intensity_kind)


def center_crop_labels(g: LabelMap, size) -> LabelMap:
    sl = _slices(center_offsets(g.dims, size), size)
    return LabelMap(g.labels[sl].copy(), g.num_classes, g.spacing_mm)


def random_offsets(dims, size, rng: np.random.Generator) -> tuple[int, int, int]:
    _check_crop(dims, size)
    return tuple(int(rng.integers(0, d - s + 1)) for d, s in zip(dims, size))


def random_crop(v: Volume, g: LabelMap, size, rng: np.random.Generator) -> tuple[Volume, LabelMap]:
    if v.dims != g.dims:
        raise ValueError(f"volume {v.dims} and labels {g.dims} differ in shape")
    sl = _slices(random_offsets(v.dims, size, rng), size)
    return (Volume(v.data[sl].copy(), v.spacing_mm, v.intensity_kind),
            LabelMap(g.labels[sl].copy(), g.num_classes, g.spacing_mm))


# --- slice export ------------------------------------------------------------

def _take_slice(array: np.ndarray, axis: int, index: int) -> np.ndarray:
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < array.shape[axis]:
        raise IndexError(f"slice index {index} out of range for extent {array.shape[axis]} on axis {axis}")
    return np.take(array, index, axis=axis)


def slice_to_gray(src, axis: int, index: int) -> np.ndarray:
    """8-bit image of one slice.

    Intensity volumes are min-max scaled (constant slices give 128); label
    maps get one gray level per class and uncertainty maps are scaled against
    the maximal entropy ln(num_members).
    """
    if isinstance(src, LabelMap):
        sl = _take_slice(src.labels, axis, index).astype(np.float64)
        return np.rint(sl * 255.0 / (src.num_classes - 1)).astype(np.uint8)
    if isinstance(src, UncertaintyMap):
        sl = _take_slice(src.entropy, axis, index).astype(np.float64)
        top = np.log(src.num_members) if src.num_members > 1 else 1.0
        return np.rint(np.clip(sl / top, 0.0, 1.0) * 255.0).astype(np.uint8)
    sl = _take_slice(src.data, axis, index).astype(np.float64)
    lo, hi = sl.min(), sl.max()
    if hi == lo:
        return np.full(sl.shape, 128, dtype=np.uint8)
    return np.rint((sl - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(image: np.ndarray, path) -> None:
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image, np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise VolumeFormatError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def export_slice_image(src, axis: int, index: int, path) -> None:
    write_pgm(slice_to_gray(src, axis, index), path)
