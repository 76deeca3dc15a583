"""
Procedural two-domain segmentation data

Label maps are built from layered rectangles, ellipses and strips, claimed from
the rarest class to the most frequent so that every class lands near its target
pixel share; class 0 is the background. Pixel colors come from a per-class
palette with texture and jitter, and the target domain adds a covariate shift
(hue rotation, brightness offset, Gaussian noise) that never touches labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import EmptyInputError, FormatError, OutputExistsError, ShapeError
from .utils.parallel import map_ordered

logger = logging.getLogger(__name__)

IGNORE_LABEL = 255
RECORD_MAGIC = b"CALSEG1"
RECORD_SUFFIX = ".calseg"
INDEX_FILE = "index.json"
MIN_SIZE = 16
SHAPE_KINDS = ("rect", "ellipse", "strip")
TAIL_SHARE = 0.02


class ShiftSpec(BaseModel):
    """Covariate shift applied on top of the palette colors"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    hue: float = Field(default=0.0, description="Hue rotation (fraction of the color wheel)")
    brightness: float = Field(default=0.0, description="Additive brightness offset")
    noise: float = Field(default=0.0, ge=0.0, description="Gaussian pixel noise σ")

    @property
    def is_identity(self) -> bool:
        return self.hue == 0.0 and self.brightness == 0.0 and self.noise == 0.0


def check_class_targets(targets: Sequence[float], num_classes: int) -> None:
    """
    One positive share per class, summing to 1, with at least one tail class.

    Raises:
        ValueError: any of those fails
    """
    if len(targets) != num_classes:
        raise ValueError(f"class_freq_targets has {len(targets)} entries for {num_classes} classes")
    if any(t <= 0 for t in targets):
        raise ValueError("class_freq_targets must be positive")
    if abs(sum(targets) - 1.0) > 1e-6:
        raise ValueError(f"class_freq_targets sums to {sum(targets):.6f}, expected 1")
    if min(targets) > TAIL_SHARE:
        raise ValueError(f"class_freq_targets needs a tail class with share <= {TAIL_SHARE}")


class DomainSpec(BaseModel):
    """Everything needed to regenerate one domain bit-for-bit"""
    model_config = ConfigDict(extra="forbid")

    n_images: int = Field(ge=1)
    height: int
    width: int
    num_classes: int = Field(ge=2)
    class_freq_targets: List[float]
    palette_mean: List[List[float]]
    palette_noise: float = Field(default=0.06, ge=0.0)
    shift: ShiftSpec = Field(default_factory=ShiftSpec)
    seed: int = 0

    @model_validator(mode="after")
    def _check_classes(self) -> "DomainSpec":
        check_class_targets(self.class_freq_targets, self.num_classes)
        if len(self.palette_mean) != self.num_classes:
            raise ValueError(f"palette_mean has {len(self.palette_mean)} colors for {self.num_classes} classes")
        return self


class DatasetIndex(BaseModel):
    """index.json of a dataset directory"""
    model_config = ConfigDict(extra="forbid")

    format: str = RECORD_MAGIC.decode()
    name: str
    num_classes: int
    records: List[str]
    spec: Optional[DomainSpec] = None


def default_palette(num_classes: int) -> List[List[float]]:
    """Evenly spaced hues; saturation and value alternate so neighbours differ after a hue shift."""
    hsv = np.array(
        [
            [c / num_classes, 0.55 + 0.35 * (c % 2), 0.85 - 0.4 * (c % 2)]
            for c in range(num_classes)
        ]
    )
    return np.round(hsv_to_rgb(hsv), 6).tolist()


@dataclass
class LabeledImage:
    image: np.ndarray  # 3×H×W float32 in [0, 1]
    labels: np.ndarray  # H×W uint8, classes or IGNORE_LABEL

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ShapeError(f"image must be 3×H×W, got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise ShapeError(f"labels {self.labels.shape} do not match image {self.image.shape[1:]}")

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])


@dataclass
class SegDataset:
    name: str
    num_classes: int
    images: List[LabeledImage]
    spec: Optional[DomainSpec] = None
    ids: List[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.ids:
            self.ids = list(range(len(self.images)))

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return self.images[i]

    def __iter__(self) -> Iterator[LabeledImage]:
        return iter(self.images)

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "SegDataset":
        return SegDataset(
            name=name or self.name,
            num_classes=self.num_classes,
            images=[self.images[i] for i in indices],
            spec=self.spec,
            ids=[self.ids[i] for i in indices],
        )

    def stack(self, indices: Optional[Sequence[int]] = None) -> tuple[np.ndarray, np.ndarray]:
        """(N×3×H×W images, N×H×W labels) for the given positions."""
        chosen = range(len(self)) if indices is None else indices
        x = np.stack([self.images[i].image for i in chosen])
        y = np.stack([self.images[i].labels for i in chosen])
        return x, y

    def with_labels(self, labels: Sequence[np.ndarray], name: str) -> "SegDataset":
        """Same images, new label maps (pseudo-labels)."""
        return SegDataset(
            name=name,
            num_classes=self.num_classes,
            images=[LabeledImage(img.image, lab.astype(np.uint8)) for img, lab in zip(self.images, labels)],
            spec=self.spec,
            ids=list(self.ids),
        )


def _shape_mask(kind: str, area: float, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "rect":
        ratio = rng.uniform(0.5, 2.0)
        sh = int(np.clip(round(np.sqrt(area * ratio)), 1, h))
        sw = int(np.clip(round(area / sh), 1, w))
        y0 = rng.integers(0, h - sh + 1)
        x0 = rng.integers(0, w - sw + 1)
        return (yy >= y0) & (yy < y0 + sh) & (xx >= x0) & (xx < x0 + sw)
    if kind == "ellipse":
        ratio = rng.uniform(0.5, 2.0)
        a = max(np.sqrt(area * ratio / np.pi), 0.75)
        b = max(area / (np.pi * a), 0.75)
        cy = rng.uniform(b, max(b, h - b))
        cx = rng.uniform(a, max(a, w - a))
        return ((yy - cy) / b) ** 2 + ((xx - cx) / a) ** 2 <= 1.0
    if rng.random() < 0.5:
        thickness = int(np.clip(round(area / w), 1, h))
        y0 = rng.integers(0, h - thickness + 1)
        return (yy >= y0) & (yy < y0 + thickness)
    thickness = int(np.clip(round(area / h), 1, w))
    x0 = rng.integers(0, w - thickness + 1)
    return (xx >= x0) & (xx < x0 + thickness)


def _layout(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.uint8)
    claimed = np.zeros((h, w), dtype=bool)
    order = np.argsort(spec.class_freq_targets, kind="stable")
    for c in order:
        if c == 0:
            continue
        need = spec.class_freq_targets[c] * h * w * rng.uniform(0.7, 1.3)
        got = 0
        for _ in range(40):
            remaining = need - got
            if remaining < 1:
                break
            piece = max(min(remaining, 16.0), remaining * rng.uniform(0.4, 1.0))
            kind = SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
            new = _shape_mask(kind, piece, h, w, rng) & ~claimed
            labels[new] = c
            claimed |= new
            got += int(new.sum())
    if len(np.unique(labels)) < 2:
        labels[: h // 4, : w // 4] = 1
    return labels


def _texture(c: int, num_classes: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    angle = np.pi * c / num_classes
    period = 4.0 + 2.0 * c
    return 0.06 * np.sin(2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / period)


def _render(spec: DomainSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = labels.shape
    palette = np.asarray(spec.palette_mean, dtype=np.float64)
    jitter = rng.normal(0.0, spec.palette_noise, size=(spec.num_classes, 3))
    rgb = palette[labels] + jitter[labels]
    for c in np.unique(labels):
        mask = labels == c
        rgb[mask] += _texture(int(c), spec.num_classes, h, w)[mask][:, None]
    rgb += rng.normal(0.0, 0.02, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def apply_shift(rgb: np.ndarray, shift: ShiftSpec, rng: np.random.Generator) -> np.ndarray:
    """H×W×3 in [0,1] -> shifted H×W×3 in [0,1]."""
    if shift.is_identity:
        return rgb
    out = rgb
    if shift.hue:
        hsv = rgb_to_hsv(np.clip(out, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + shift.hue) % 1.0
        out = hsv_to_rgb(hsv)
    out = out + shift.brightness
    if shift.noise:
        out = out + rng.normal(0.0, shift.noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_image(spec: DomainSpec, index: int) -> LabeledImage:
    """One image; its randomness depends only on (spec.seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    labels = _layout(spec, rng)
    rgb = apply_shift(_render(spec, labels, rng), spec.shift, rng)
    image = np.ascontiguousarray(rgb.transpose(2, 0, 1), dtype=np.float32)
    return LabeledImage(image=image, labels=labels)


def generate_domain(spec: DomainSpec, name: str = "domain", threads: Optional[int] = 1) -> SegDataset:
    """
    Generate spec.n_images labeled images.

    Raises:
        ShapeError: height or width below 16
    """
    if spec.height < MIN_SIZE or spec.width < MIN_SIZE:
        raise ShapeError(f"images must be at least {MIN_SIZE}×{MIN_SIZE}, got {spec.height}×{spec.width}")
    if len(spec.class_freq_targets) != spec.num_classes or len(spec.palette_mean) != spec.num_classes:
        raise ShapeError("class_freq_targets and palette_mean need one entry per class")
    images = map_ordered(lambda i: generate_image(spec, i), range(spec.n_images), threads)
    logger.info(f"Generated {name}: {len(images)} images {spec.height}×{spec.width}, C={spec.num_classes}")
    return SegDataset(name=name, num_classes=spec.num_classes, images=images, spec=spec)


def class_frequencies(dataset: SegDataset) -> np.ndarray:
    """Pixel share per class, ignoring 255."""
    counts = np.zeros(dataset.num_classes, dtype=np.int64)
    for img in dataset:
        valid = img.labels[img.labels != IGNORE_LABEL]
        counts += np.bincount(valid, minlength=dataset.num_classes)[: dataset.num_classes]
    return counts / max(int(counts.sum()), 1)


def augment(
    img: LabeledImage,
    rng: np.random.Generator,
    flip_probability: float = 0.5,
    force: Optional[bool] = None,
) -> LabeledImage:
    """Horizontal flip applied to image and labels together."""
    flip = bool(rng.random() < flip_probability) if force is None else force
    if not flip:
        return img
    return LabeledImage(
        image=np.ascontiguousarray(img.image[:, :, ::-1]),
        labels=np.ascontiguousarray(img.labels[:, ::-1]),
    )


def split_validation(dataset: SegDataset, fraction: float, seed: int) -> tuple[SegDataset, SegDataset]:
    """
    Seeded disjoint split into (train, val); both keep ascending record order.

    Raises:
        EmptyInputError: fraction outside (0, 1) or leaving one side empty
    """
    if not 0.0 < fraction < 1.0:
        raise EmptyInputError(f"validation fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val == n:
        raise EmptyInputError(f"fraction {fraction} of {n} images leaves an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = sorted(int(i) for i in perm[:n_val])
    train_idx = sorted(int(i) for i in perm[n_val:])
    return (
        dataset.subset(train_idx, f"{dataset.name}-train"),
        dataset.subset(val_idx, f"{dataset.name}-val"),
    )


def write_record(path: Path, img: LabeledImage, num_classes: int) -> None:
    header = np.array([img.height, img.width, num_classes], dtype="<u4").tobytes()
    pixels = np.ascontiguousarray(img.image.transpose(1, 2, 0), dtype="<f4").tobytes()
    labels = np.ascontiguousarray(img.labels, dtype=np.uint8).tobytes()
    with open(path, "wb") as f:
        f.write(RECORD_MAGIC + header + pixels + labels)


def read_record(path: Path) -> tuple[LabeledImage, int]:
    """
    Read one record.

    Raises:
        FormatError: wrong magic or truncated payload, naming the file
    """
    path = Path(path)
    buf = path.read_bytes()
    if not buf.startswith(RECORD_MAGIC):
        raise FormatError(path, "bad magic, expected CALSEG1")
    offset = len(RECORD_MAGIC)
    if len(buf) < offset + 12:
        raise FormatError(path, "truncated header")
    h, w, c = (int(v) for v in np.frombuffer(buf, dtype="<u4", count=3, offset=offset))
    offset += 12
    expected = offset + h * w * 3 * 4 + h * w
    if len(buf) != expected:
        raise FormatError(path, f"payload is {len(buf)} bytes, expected {expected}")
    pixels = np.frombuffer(buf, dtype="<f4", count=h * w * 3, offset=offset).reshape(h, w, 3)
    labels = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=offset + h * w * 3 * 4).reshape(h, w)
    image = np.ascontiguousarray(pixels.transpose(2, 0, 1), dtype=np.float32)
    return LabeledImage(image=image, labels=labels.copy()), c


def record_name(i: int) -> str:
    return f"{i:05d}{RECORD_SUFFIX}"


def write_dataset(dataset: SegDataset, directory: Path, force: bool = False) -> Path:
    """
    Write one record per image plus index.json.

    Raises:
        OutputExistsError: directory exists and is not empty, unless force
    """
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()):
        if not force:
            raise OutputExistsError(f"{directory} is not empty (use --force to overwrite)")
        for stale in directory.glob(f"*{RECORD_SUFFIX}"):
            stale.unlink()
    directory.mkdir(parents=True, exist_ok=True)
    names = [record_name(i) for i in dataset.ids]
    for name, img in zip(names, dataset.images):
        write_record(directory / name, img, dataset.num_classes)
    index = DatasetIndex(name=dataset.name, num_classes=dataset.num_classes, records=names, spec=dataset.spec)
    (directory / INDEX_FILE).write_text(index.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.debug(f"Wrote {len(names)} records to {directory}")
    return directory


def read_dataset(directory: Path) -> SegDataset:
    """
    Read a dataset directory written by write_dataset.

    Raises:
        FormatError: missing/invalid index or a bad record
    """
    directory = Path(directory)
    index_path = directory / INDEX_FILE
    if not index_path.exists():
        raise FormatError(index_path, "missing dataset index")
    try:
        index = DatasetIndex.model_validate_json(index_path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise FormatError(index_path, f"invalid index: {e}") from e
    images = []
    for name in index.records:
        img, c = read_record(directory / name)
        if c != index.num_classes:
            raise FormatError(directory / name, f"class count {c} != index {index.num_classes}")
        images.append(img)
    ids = [int(name.split(".")[0]) for name in index.records]
    return SegDataset(name=index.name, num_classes=index.num_classes, images=images, spec=index.spec, ids=ids)
