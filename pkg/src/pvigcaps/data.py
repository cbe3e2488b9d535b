"""Dataset manifests, image preprocessing, augmentation, splits and synthetic data."""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import (ContractError, DataError, DecodeError, MissingImageError,
                         StratificationError, UnknownLabelError)

HAM_CLASSES = ("AKIEC", "BCC", "BKL", "DF", "MEL", "NV", "VASC")
MEAN = 0.5
STD = 0.5
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp", ".ppm", ".pgm", ".tif", ".tiff")
_ID_COLUMNS = ("image_id", "image-id", "image", "id")
_LABEL_COLUMNS = ("dx", "diagnosis", "label")


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    path: Path | None
    label: int


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    classes: tuple[str, ...] = HAM_CLASSES

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(self.classes))
        return {name: int(n) for name, n in zip(self.classes, counts)}

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices], self.classes)


@dataclass
class Sample:
    image: np.ndarray
    label: int
    id: str


def _index_images(image_dir: Path) -> dict[str, Path]:
    found: dict[str, Path] = {}
    for p in sorted(image_dir.rglob("*")):
        if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file():
            found.setdefault(p.stem, p)
    return found


def load_manifest(metadata_path, image_dir=None, require_images: bool = True) -> DatasetManifest:
    """Read a HAM10000-style delimited metadata file.

    The header must name an image-id column (``image_id``) and a diagnosis
    column (``dx``).  Records keep file order.
    """
    metadata_path = Path(metadata_path)
    if not metadata_path.is_file():
        raise DataError(f"metadata file not found: {metadata_path}")
    text = metadata_path.read_text(encoding="utf-8-sig")
    try:
        dialect = csv.Sniffer().sniff(text.splitlines()[0] if text else "", delimiters=",\t;")
    except csv.Error:
        dialect = csv.excel
    reader = csv.DictReader(io.StringIO(text), dialect=dialect)
    header = {h.strip().lower(): h for h in (reader.fieldnames or [])}
    id_col = next((header[c] for c in _ID_COLUMNS if c in header), None)
    label_col = next((header[c] for c in _LABEL_COLUMNS if c in header), None)
    if id_col is None or label_col is None:
        raise DataError(f"{metadata_path}: header must name image-id and diagnosis columns, got {reader.fieldnames}")

    lookup = {name.lower(): i for i, name in enumerate(HAM_CLASSES)}
    images = _index_images(Path(image_dir)) if image_dir is not None else {}
    records, seen, missing = [], set(), []
    for row in reader:
        line = reader.line_num
        image_id = (row.get(id_col) or "").strip()
        label = (row.get(label_col) or "").strip()
        if label.lower() not in lookup:
            raise UnknownLabelError(f"{metadata_path}:{line}: unknown label {label!r}")
        if not image_id:
            raise DataError(f"{metadata_path}:{line}: empty image id")
        if image_id in seen:
            raise DataError(f"{metadata_path}:{line}: duplicate image id {image_id!r}")
        seen.add(image_id)
        path = images.get(image_id)
        if path is None and require_images:
            missing.append(image_id)
        records.append(ManifestRecord(image_id, path, lookup[label.lower()]))
    if missing:
        raise MissingImageError(missing)
    return DatasetManifest(records)


# ---------------------------------------------------------------- pixels


def decode(raw) -> np.ndarray:
    """Decode bytes, a path, a PIL image or an array into H×W×3 floats in [0, 1]."""
    if isinstance(raw, np.ndarray):
        arr = raw.astype(np.float64)
        if raw.dtype == np.uint8:
            arr /= 255.0
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DecodeError(f"expected an H×W×3 array, got {raw.shape}")
        return arr
    try:
        if isinstance(raw, Image.Image):
            img = raw
        elif isinstance(raw, (bytes, bytearray)):
            img = Image.open(io.BytesIO(raw))
        else:
            img = Image.open(raw)
        img.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from exc
    return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of H×W×C with half-pixel centres (align_corners=False)."""
    in_h, in_w = img.shape[:2]

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(out_h, in_h)
    x0, x1, wx = axis(out_w, in_w)
    wy, wx = wy[:, None, None], wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def preprocess(raw, size: int = 256) -> np.ndarray:
    """Decode, resize to size×size, and normalise to (x - 0.5) / 0.5 as 3×S×S."""
    img = resize_bilinear(decode(raw), size, size)
    return np.ascontiguousarray(((img - MEAN) / STD).transpose(2, 0, 1))


def sample_rng(seed: int, epoch: int, sample_id: str) -> np.random.Generator:
    """Per-sample stream determined only by (seed, epoch, id)."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode("utf-8"))])


def augment(sample: Sample, rng: np.random.Generator, flip_h: bool | None = None,
            flip_v: bool | None = None) -> Sample:
    """Edge-padded random crop (pad S/8 per side) plus independent 50% flips.

    ``flip_h`` / ``flip_v`` force a flip decision; the rng draws happen
    either way so forced and free calls consume the stream identically.
    """
    img = sample.image
    _, H, W = img.shape
    ph, pw = H // 8, W // 8
    padded = np.pad(img, ((0, 0), (ph, ph), (pw, pw)), mode="edge")
    oy = int(rng.integers(0, 2 * ph + 1))
    ox = int(rng.integers(0, 2 * pw + 1))
    h_draw, v_draw = rng.random() < 0.5, rng.random() < 0.5
    out = padded[:, oy:oy + H, ox:ox + W]
    if h_draw if flip_h is None else flip_h:
        out = out[:, :, ::-1]
    if v_draw if flip_v is None else flip_v:
        out = out[:, ::-1, :]
    return Sample(np.ascontiguousarray(out), sample.label, sample.id)


# ---------------------------------------------------------------- datasets


class ArrayDataset:
    """In-memory normalised images with integer labels."""

    def __init__(self, images, labels, ids=None, class_names=None):
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ContractError(f"images {self.images.shape} and labels {self.labels.shape} do not align")
        self.ids = list(ids) if ids is not None else [f"sample-{i}" for i in range(len(self.labels))]
        n = int(self.labels.max()) + 1 if len(self.labels) else 0
        self.class_names = tuple(class_names) if class_names is not None else tuple(f"class_{i}" for i in range(n))

    def __len__(self) -> int:
        return len(self.labels)

    def image(self, i: int) -> np.ndarray:
        return self.images[i]

    def sample(self, i: int) -> Sample:
        return Sample(self.image(i), int(self.labels[i]), self.ids[i])

    def subset(self, indices) -> "ArrayDataset":
        indices = np.asarray(indices, dtype=np.intp)
        return ArrayDataset(self.images[indices], self.labels[indices], [self.ids[i] for i in indices], self.class_names)

    def batch(self, indices, augment_seed: int | None = None, epoch: int = 0):
        """Images and labels for ``indices``, assembled in index order."""
        out = []
        for i in indices:
            s = self.sample(int(i))
            if augment_seed is not None:
                s = augment(s, sample_rng(augment_seed, epoch, s.id))
            out.append(s.image)
        return np.stack(out), self.labels[np.asarray(indices, dtype=np.intp)]


class ManifestDataset(ArrayDataset):
    """Images decoded lazily from a manifest and cached after preprocessing."""

    def __init__(self, manifest: DatasetManifest, size: int = 256):
        self.manifest, self.size = manifest, size
        self.labels = manifest.labels
        self.ids = [r.image_id for r in manifest.records]
        self.class_names = manifest.classes
        self._cache: dict[int, np.ndarray] = {}

    def image(self, i: int) -> np.ndarray:
        if i not in self._cache:
            rec = self.manifest.records[i]
            if rec.path is None:
                raise DataError(f"no image file for {rec.image_id}")
            self._cache[i] = preprocess(rec.path, self.size)
        return self._cache[i]

    def subset(self, indices) -> "ManifestDataset":
        return ManifestDataset(self.manifest.subset(indices), self.size)


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ContractError(f"split fractions must be three positive numbers, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ContractError(f"split fractions must sum to 1, got {sum(self.fractions)}")


def largest_remainder(n: int, fractions) -> list[int]:
    """Integer allocation of ``n`` proportional to ``fractions``."""
    quotas = [n * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split_indices(labels, spec: SplitSpec) -> tuple[list[int], list[int], list[int]]:
    labels = np.asarray(labels)
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < 3:
            raise StratificationError(f"class {int(cls)} has {len(members)} samples; at least 3 are needed")
        rng = np.random.default_rng([spec.seed, int(cls)])
        members = members[rng.permutation(len(members))]
        start = 0
        for part, count in zip(parts, largest_remainder(len(members), spec.fractions)):
            part.extend(int(i) for i in members[start:start + count])
            start += count
    return parts


def stratified_split(data, spec: SplitSpec = SplitSpec()):
    """Per-class shuffled, proportionally allocated train/val/test partition.

    Accepts a :class:`DatasetManifest` or any dataset with ``labels`` and
    ``subset``.
    """
    return tuple(data.subset(idx) for idx in stratified_split_indices(data.labels, spec))


# ---------------------------------------------------------------- synthetic data


def _pattern(k: int, size: int) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / size
    freq = 1 + k // 2
    wave = 0.5 + 0.35 * np.sin(2 * np.pi * freq * coords)
    # even classes vary along rows, odd classes along columns: both survive flips
    plane = np.repeat(wave[:, None], size, axis=1) if k % 2 == 0 else np.repeat(wave[None, :], size, axis=0)
    tint = np.array([1.0, 0.8 + 0.05 * (k % 3), 0.6])[:, None, None]
    return plane[None] * tint


def synth_dataset(num_classes: int, per_class: int, size: int = 32, seed: int = 0,
                  noise: float = 0.1) -> ArrayDataset:
    """Stripe patterns of class-specific orientation and frequency plus noise."""
    if num_classes < 2:
        raise ContractError("synthetic data needs at least two classes")
    rng = np.random.default_rng(seed)
    images, labels, ids = [], [], []
    for k in range(num_classes):
        base = _pattern(k, size)
        for i in range(per_class):
            img = np.clip(base + rng.normal(0.0, noise, size=base.shape), 0.0, 1.0)
            images.append((img - MEAN) / STD)
            labels.append(k)
            ids.append(f"synth-{k}-{i}")
    return ArrayDataset(np.stack(images), np.array(labels), ids, tuple(f"class_{k}" for k in range(num_classes)))
