"""Synthetic domain-shifted volumes, per-volume preprocessing, slicing and dataset files.

Every synthetic volume is a ``(D, H, W)`` ellipsoidal "head" containing two
ellipsoidal structures (label 1 on the left half, label 2 on the right) plus
unlabelled distractor blobs. Target volumes are rendered from the same
geometry process, then degraded by a :class:`DomainShiftSpec` before the
usual preprocessing (percentile clip, standardize, rescale, slice, pad).
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

FORMAT_VERSION = 1
# synthetic anatomy (clean intensities in [0, 1])
PV_BLUR = 1.0  # partial-volume blur, pixels
BASE_NOISE = 0.03  # scanner noise present in both domains
TISSUE = 0.45
STRUCT = 0.85
DISTRACT = (0.9, 0.9, 0.2, 0.2)  # unlabelled bright and dark blobs
CLASS_NAMES = ("background", "left", "right")


class DataError(ValueError):
    pass


class InvalidSpecError(DataError):
    pass


class ZeroVarianceError(DataError):
    pass


class ConstantVolumeError(DataError):
    pass


class SliceTooLargeError(DataError):
    pass


class MissingSliceError(DataError):
    pass


class DuplicateSliceError(DataError):
    pass


class CorruptHeaderError(DataError):
    pass


class DatasetShapeError(DataError):
    pass


class VersionMismatchError(DataError):
    pass


class MissingLabelsError(DataError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple | None = None
    orientation: str = "RAS"

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or self.voxels.shape[0] < 1:
            raise DataError(f"volume must be (D, H, W) with D >= 1, got {self.voxels.shape}")


@dataclass
class SliceSample:
    image: np.ndarray
    label: np.ndarray | None
    volume_id: str
    slice_index: int
    crop: tuple[int, int, int, int] = (0, 0, 0, 0)  # top, bottom, left, right padding


@dataclass
class DomainShiftSpec:
    intensity_gain: float = 1.0
    intensity_offset: float = 0.0
    bias_field_amplitude: float = 0.0
    bias_field_smoothness: float = 16.0
    noise_sigma: float = 0.0
    contrast_gamma: float = 1.0
    seed: int = 0

    def validate(self):
        if not self.contrast_gamma > 0:
            raise InvalidSpecError("contrast_gamma must be > 0")
        if self.noise_sigma < 0:
            raise InvalidSpecError("noise_sigma must be >= 0")
        if self.bias_field_amplitude < 0:
            raise InvalidSpecError("bias_field_amplitude must be >= 0")
        if not self.bias_field_smoothness > 0:
            raise InvalidSpecError("bias_field_smoothness must be > 0")

    @property
    def is_identity(self):
        return (self.intensity_gain == 1 and self.intensity_offset == 0
                and self.bias_field_amplitude == 0 and self.noise_sigma == 0
                and self.contrast_gamma == 1)

    @classmethod
    def identity(cls, seed=0):
        return cls(seed=seed)

    @classmethod
    def desk(cls, seed=0):
        """The pinned shift of the desk benchmark."""
        return cls(intensity_gain=0.6, intensity_offset=0.0, bias_field_amplitude=0.4,
                   bias_field_smoothness=32.0, noise_sigma=0.05, contrast_gamma=1.8,
                   seed=seed)


# -- preprocessing ---------------------------------------------------------

def percentile(values, p):
    """Percentile by linear interpolation between the closest order statistics.

    With ``n`` sorted values ``v[0..n-1]`` the rank is ``(n - 1) * p / 100``.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    rank = (v.size - 1) * p / 100.0
    lo = int(np.floor(rank))
    hi = min(lo + 1, v.size - 1)
    return v[lo] + (rank - lo) * (v[hi] - v[lo])


def clip_percentile(volume: Volume, p: float = 99.0) -> Volume:
    if not 0 < p <= 100:
        raise DataError(f"percentile must be in (0, 100], got {p}")
    cap = percentile(volume.voxels, p)
    vox = np.minimum(volume.voxels, cap).astype(volume.voxels.dtype, copy=False)
    return Volume(vox, volume.spacing, volume.orientation)


def standardize(volume: Volume) -> Volume:
    v = volume.voxels.astype(np.float64)
    sd = v.std()
    if not sd > 0 or np.ptp(v) == 0:
        raise ZeroVarianceError("cannot standardize a constant volume")
    return Volume((v - v.mean()) / sd, volume.spacing, volume.orientation)


def rescale(volume: Volume, lo: float = -1.0, hi: float = 1.0) -> Volume:
    if not lo < hi:
        raise DataError(f"need lo < hi, got [{lo}, {hi}]")
    v = volume.voxels.astype(np.float64)
    vmin, vmax = v.min(), v.max()
    if vmax == vmin:
        raise ConstantVolumeError("cannot rescale a constant volume")
    out = lo + (v - vmin) * ((hi - lo) / (vmax - vmin))
    # pin the endpoints exactly; the affine map can be off by an ulp
    out[v == vmin] = lo
    out[v == vmax] = hi
    return Volume(out, volume.spacing, volume.orientation)


def preprocess(volume: Volume, p: float = 99.0) -> Volume:
    """Clip at the ``p``-th percentile, standardize, then rescale to [-1, 1]."""
    return rescale(standardize(clip_percentile(volume, p)), -1.0, 1.0)


def _pad_amounts(size, target):
    extra = target - size
    return extra // 2, extra - extra // 2


def slice_and_pad(volume: Volume, labels: Volume | np.ndarray | None = None, axis: int = 0,
                  out_size=(256, 256), volume_id: str = "vol") -> list[SliceSample]:
    """Cut ``volume`` into 2D slices along ``axis`` and zero-pad each to ``out_size``.

    Padding is centred; when the difference is odd the extra pixel goes to
    the trailing side. Labels are padded with background (0).
    """
    vox = np.moveaxis(np.asarray(volume.voxels), axis, 0)
    lab = None
    if labels is not None:
        lab = np.moveaxis(np.asarray(getattr(labels, "voxels", labels)), axis, 0)
        if lab.shape != vox.shape:
            raise DatasetShapeError(f"label shape {lab.shape} != volume shape {vox.shape}")
    h, w = vox.shape[1:]
    oh, ow = out_size
    if h > oh or w > ow:
        raise SliceTooLargeError(f"slice {h}x{w} larger than target {oh}x{ow}")
    top, bottom = _pad_amounts(h, oh)
    left, right = _pad_amounts(w, ow)
    pads = ((top, bottom), (left, right))
    out = []
    for i in range(vox.shape[0]):
        img = np.pad(vox[i].astype(np.float32), pads, constant_values=0.0)
        lbl = None if lab is None else np.pad(lab[i].astype(np.uint8), pads, constant_values=0)
        out.append(SliceSample(img, lbl, volume_id, i, (top, bottom, left, right)))
    return out


def reassemble(slices, masks=None, volume_id=None, axis: int = 0) -> np.ndarray:
    """Stack per-slice label masks back into a volume, cropping the padding.

    ``masks`` defaults to each sample's own ``label``; when given it must be
    parallel to ``slices`` (e.g. model predictions).
    """
    slices = list(slices)
    if masks is None:
        masks = [s.label for s in slices]
    masks = list(masks)
    if volume_id is not None:
        keep = [i for i, s in enumerate(slices) if s.volume_id == volume_id]
        slices = [slices[i] for i in keep]
        masks = [masks[i] for i in keep]
    if not slices:
        raise MissingSliceError("no slices to reassemble")
    ids = {s.volume_id for s in slices}
    if len(ids) != 1:
        raise DataError(f"slices from several volumes: {sorted(ids)}")
    by_index = {}
    for s, m in zip(slices, masks):
        if s.slice_index in by_index:
            raise DuplicateSliceError(f"slice {s.slice_index} given twice")
        by_index[s.slice_index] = (s, m)
    n = max(by_index) + 1
    missing = sorted(set(range(n)) - set(by_index))
    if missing:
        raise MissingSliceError(f"missing slices {missing}")
    planes = []
    for i in range(n):
        s, m = by_index[i]
        top, bottom, left, right = s.crop
        m = np.asarray(m)
        planes.append(m[top:m.shape[0] - bottom, left:m.shape[1] - right])
    return np.moveaxis(np.stack(planes), 0, axis)


def load_volume(path) -> Volume:
    """Read a single-file volume (``.npy``, or NIfTI when nibabel is installed)."""
    path = Path(path)
    if path.suffix == ".npy":
        return Volume(np.load(path))
    if path.name.endswith((".nii", ".nii.gz")):
        try:
            import nibabel
        except ImportError as exc:
            raise DataError("reading NIfTI volumes requires nibabel") from exc
        img = nibabel.load(str(path))
        return Volume(np.asarray(img.dataobj, dtype=np.float32),
                      spacing=tuple(float(z) for z in img.header.get_zooms()[:3]))
    raise DataError(f"unsupported volume format: {path.name}")


# -- synthetic generation ----------------------------------------------------

def _ellipsoid(grid, center, axes, angle):
    z, y, x = grid
    cz, cy, cx = center
    az, ay, ax = axes
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = y - cy, x - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return ((z - cz) / az) ** 2 + (v / ay) ** 2 + (u / ax) ** 2 <= 1.0


def _smooth_field(rng, shape, scale):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=scale, mode="wrap")
    f -= f.mean()
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def render_geometry(rng, shape):
    """Draw one anatomy: returns ``(clean intensities in [0, 1], labels)``."""
    d, h, w = shape
    grid = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    grid = [g.astype(np.float64) for g in grid]
    cz, cy, cx = (d - 1) / 2, (h - 1) / 2, (w - 1) / 2

    head_axes = (d * rng.uniform(0.7, 0.9), h * rng.uniform(0.38, 0.45),
                 w * rng.uniform(0.38, 0.45))
    head = _ellipsoid(grid, (cz, cy + rng.uniform(-2, 2), cx + rng.uniform(-2, 2)),
                      head_axes, rng.uniform(-0.2, 0.2))

    img = np.zeros(shape)
    tissue = TISSUE + 0.06 * _smooth_field(rng, shape, 3.0)
    img[head] = tissue[head]

    # bright and dark distractor blobs, unlabelled
    for level in DISTRACT:
        c = (cz + rng.uniform(-0.2, 0.2) * d, cy + rng.uniform(-0.25, 0.25) * h,
             cx + rng.uniform(-0.25, 0.25) * w)
        ax = (d * rng.uniform(0.15, 0.3), h * rng.uniform(0.05, 0.1), w * rng.uniform(0.05, 0.1))
        blob = _ellipsoid(grid, c, ax, rng.uniform(0, np.pi)) & head
        img[blob] = level

    labels = np.zeros(shape, dtype=np.uint8)
    base_y = cy + rng.uniform(-0.1, 0.15) * h
    for cls, side in ((1, -1), (2, 1)):
        c = (cz + rng.uniform(-0.1, 0.1) * d, base_y + rng.uniform(-0.04, 0.04) * h,
             cx + side * w * rng.uniform(0.15, 0.22))
        ax = (d * rng.uniform(0.25, 0.4), h * rng.uniform(0.05, 0.08), w * rng.uniform(0.08, 0.13))
        mask = _ellipsoid(grid, c, ax, side * rng.uniform(0.1, 0.6)) & head
        labels[mask] = cls
        img[mask] = STRUCT + 0.04 * rng.standard_normal()
    return img, labels


def apply_shift(img, head_mask, spec: DomainShiftSpec, rng):
    """Apply a domain shift to clean intensities (inside the head only).

    Order: gain and offset, multiplicative bias field, gamma contrast, noise.
    """
    out = spec.intensity_gain * img + spec.intensity_offset
    if spec.bias_field_amplitude > 0:
        field_ = _smooth_field(rng, img.shape, spec.bias_field_smoothness)
        out = out * (1.0 + spec.bias_field_amplitude * field_)
    out = np.clip(out, 0.0, None) ** spec.contrast_gamma
    if spec.noise_sigma > 0:
        out = out + spec.noise_sigma * rng.standard_normal(img.shape)
    return np.where(head_mask, out, 0.0)


@dataclass
class SliceDataset:
    """Preprocessed 2D slices with their volume bookkeeping.

    ``labels`` is None for unlabelled (target training) splits;
    ``eval_labels`` carries held-out labels that training code never reads.
    """
    images: np.ndarray  # float32 (N, H, W)
    labels: np.ndarray | None  # uint8 (N, H, W)
    volumes: list[dict]  # {volume_id, start, stop, axis, crop}
    domain: str = "source"
    meta: dict = field(default_factory=dict)
    eval_labels: np.ndarray | None = None

    def __len__(self):
        return len(self.images)

    @property
    def has_labels(self):
        return self.labels is not None

    def unlabeled(self):
        """A view with labels moved to the evaluation-only slot."""
        held = self.labels if self.labels is not None else self.eval_labels
        return SliceDataset(self.images, None, self.volumes, self.domain, dict(self.meta), held)

    def samples(self, use_eval_labels=False):
        lab = self.labels if not use_eval_labels else (
            self.labels if self.labels is not None else self.eval_labels)
        out = []
        for v in self.volumes:
            for k, i in enumerate(range(v["start"], v["stop"])):
                out.append(SliceSample(self.images[i], None if lab is None else lab[i],
                                       v["volume_id"], k, tuple(v.get("crop", (0, 0, 0, 0)))))
        return out

    @classmethod
    def from_samples(cls, samples, domain="source", meta=None, labeled=True, axis=0):
        images = np.stack([s.image for s in samples]).astype(np.float32)
        labels = None
        if labeled and all(s.label is not None for s in samples):
            labels = np.stack([s.label for s in samples]).astype(np.uint8)
        volumes, start = [], 0
        for i, s in enumerate(samples + [None]):
            if s is None or (i > start and s.volume_id != samples[start].volume_id):
                volumes.append({"volume_id": samples[start].volume_id, "start": start,
                                "stop": i, "axis": axis, "crop": list(samples[start].crop)})
                start = i
        return cls(images, labels, volumes, domain, dict(meta or {}))


@dataclass
class DomainDatasetPair:
    source: SliceDataset
    target: SliceDataset  # unlabelled; eval labels kept separately

    @property
    def target_eval_labels(self):
        return self.target.eval_labels


def generate_volumes(n, shift: DomainShiftSpec, geometry_seed, size=(64, 64), depth=12,
                     p=99.0, domain="source"):
    """Render ``n`` preprocessed volumes from one domain as a labelled SliceDataset."""
    shift.validate()
    if n < 1:
        raise InvalidSpecError("need at least one volume")
    # geometry and appearance use separate streams so the two domains share anatomy statistics
    geo_rng = np.random.default_rng([int(geometry_seed), 0 if domain == "source" else 1])
    shift_rng = np.random.default_rng([int(shift.seed), int(geometry_seed), 7])
    base_rng = np.random.default_rng([int(geometry_seed), 0 if domain == "source" else 1, 3])
    samples = []
    for v in range(n):
        img, lab = render_geometry(geo_rng, (depth, *size))
        head = img > 0
        # partial-volume blur keeps structure boundaries ambiguous
        img = ndimage.gaussian_filter(img, sigma=PV_BLUR) * head
        img = img + BASE_NOISE * base_rng.standard_normal(img.shape) * head
        if not shift.is_identity:
            img = apply_shift(img, head, shift, shift_rng)
        vol = preprocess(Volume(img), p)
        samples += slice_and_pad(vol, lab, axis=0, out_size=size, volume_id=f"{domain}{v:04d}")
    meta = {"shift": asdict(shift), "geometry_seed": int(geometry_seed), "depth": depth,
            "percentile": p}
    return SliceDataset.from_samples(samples, domain=domain, meta=meta)


def generate_synthetic_pair(n_source, n_target, shift: DomainShiftSpec, geometry_seed=0,
                            size=(64, 64), depth=12) -> DomainDatasetPair:
    """Labelled source volumes and unlabelled, shifted target volumes.

    ``n_source`` and ``n_target`` count volumes; each volume contributes
    ``depth`` slices.
    """
    if n_source < 1 or n_target < 1:
        raise InvalidSpecError("n_source and n_target must be >= 1")
    src = generate_volumes(n_source, DomainShiftSpec.identity(shift.seed), geometry_seed,
                           size, depth, domain="source")
    tgt = generate_volumes(n_target, shift, geometry_seed, size, depth, domain="target")
    return DomainDatasetPair(src, tgt.unlabeled())


# -- dataset files -------------------------------------------------------------

def save_dataset(ds: SliceDataset, path):
    """Write ``ds`` to directory ``path`` atomically (temp dir, then rename)."""
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"parent directory {path.parent} does not exist")
    n, h, w = ds.images.shape
    meta = {
        "version": FORMAT_VERSION,
        "count": int(n),
        "shape": [int(h), int(w)],
        "domain": ds.domain,
        "class_names": list(CLASS_NAMES),
        "has_labels": ds.labels is not None,
        "has_eval_labels": ds.eval_labels is not None,
        **{k: v for k, v in ds.meta.items() if k not in ("version", "count", "shape")},
    }
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        (tmp / "volumes.json").write_text(json.dumps(ds.volumes, indent=2))
        (tmp / "images.bin").write_bytes(ds.images.astype("<f4").tobytes())
        if ds.labels is not None:
            (tmp / "labels.bin").write_bytes(ds.labels.astype(np.uint8).tobytes())
        if ds.eval_labels is not None:
            (tmp / "labels.eval.bin").write_bytes(ds.eval_labels.astype(np.uint8).tobytes())
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _read_array(path, dtype, shape):
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise DatasetShapeError(f"{path.name}: {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def load_dataset(path, with_eval_labels=False) -> SliceDataset:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"no dataset directory at {path}")
    try:
        meta = json.loads((path / "meta.json").read_text())
        volumes = json.loads((path / "volumes.json").read_text())
        n, (h, w) = int(meta["count"]), meta["shape"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable header ({exc})") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"dataset version {meta.get('version')} != {FORMAT_VERSION}")
    shape = (n, int(h), int(w))
    images = _read_array(path / "images.bin", "<f4", shape).astype(np.float32)
    labels = None
    if (path / "labels.bin").exists():
        labels = _read_array(path / "labels.bin", np.uint8, shape)
    eval_labels = None
    if with_eval_labels and (path / "labels.eval.bin").exists():
        eval_labels = _read_array(path / "labels.eval.bin", np.uint8, shape)
    extra = {k: v for k, v in meta.items()
             if k not in ("version", "count", "shape", "domain", "class_names", "has_labels",
                          "has_eval_labels")}
    return SliceDataset(images, labels, volumes, meta.get("domain", "source"), extra,
                        eval_labels)
