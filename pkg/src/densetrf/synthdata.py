"""Procedural texture/shape domain-shift benchmark and image-folder ingestion.

Each class is a texture (grating warped by multi-octave value noise, coloured
through a two-colour palette). Foreground regions are elliptical bumps with
a smoothed-noise boundary perturbation, thresholded to a target coverage.
Domains that share texture descriptors but differ in blob shape and additive
photometric offsets give a shift where per-patch texture statistics stay put
while colours and geometry move.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import measure

from .backbone import TEXTURE_STATS, patch_statistics

log = logging.getLogger(__name__)

TRAIN_UNLABELED = "train_unlabeled"
TRAIN_LABELED = "train_labeled"
TEST = "test"
SPLITS = (TRAIN_UNLABELED, TRAIN_LABELED, TEST)

# random-stream ids so that pools drawn from the same domain never share samples
_STREAMS = {TRAIN_LABELED: 1, TRAIN_UNLABELED: 2, TEST: 3}


class DegenerateSpecError(ValueError):
    pass


class IncompatibleClassesError(ValueError):
    pass


class MissingMaskError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class TextureDescriptor:
    frequency: float  # cycles per pixel of the base grating
    orientation: float  # degrees
    octaves: int = 3
    palette: tuple = ((0.3, 0.3, 0.3), (0.6, 0.6, 0.6))
    warp: float = 1.5  # phase warp amplitude from the noise field (radians)


@dataclass(frozen=True)
class ShapeParams:
    smoothness: float = 8.0  # blob radius scale, pixels
    elongation: float = 1.0  # major / minor axis ratio of each blob
    deformation: float = 0.25  # amplitude of the smoothed-noise boundary perturbation
    blobs: int = 2  # blob seeds per foreground class
    coverage: float = 0.18  # target area fraction per foreground class


@dataclass(frozen=True)
class Photometric:
    brightness: tuple = (0.0, 0.0)  # additive offset range
    tint: tuple = (0.0, 0.0, 0.0)  # per-channel additive offset
    jitter: float = 0.02  # per-sample tint jitter


@dataclass(frozen=True)
class DomainSpec:
    name: str
    textures: tuple  # TextureDescriptor per class; index 0 is background
    shape: ShapeParams = ShapeParams()
    photometric: Photometric = Photometric()
    seed: int = 0
    image_size: int = 64

    def __post_init__(self):
        if len(self.textures) < 2:
            raise DegenerateSpecError("need background plus at least one foreground texture")
        seen = {}
        for i, tex in enumerate(self.textures):
            if tex in seen:
                raise DegenerateSpecError(f"classes {seen[tex]} and {i} have identical textures")
            seen[tex] = i
        if not 0.0 < self.shape.coverage < 0.5 or self.shape.blobs < 1:
            raise DegenerateSpecError("coverage must lie in (0, 0.5)")
        if self.shape.smoothness <= 0 or self.shape.elongation < 1.0:
            raise DegenerateSpecError("smoothness must be > 0 and elongation >= 1")

    @property
    def num_classes(self) -> int:
        """Foreground class count (label channels)."""
        return len(self.textures) - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        textures = tuple(
            TextureDescriptor(**{**t, "palette": tuple(tuple(c) for c in t["palette"])})
            for t in d["textures"]
        )
        return cls(
            name=d["name"], textures=textures, shape=ShapeParams(**d["shape"]),
            photometric=Photometric(**{k: tuple(v) if isinstance(v, list) else v
                                       for k, v in d["photometric"].items()}),
            seed=d["seed"], image_size=d.get("image_size", 64),
        )


DEFAULT_TEXTURES = (
    TextureDescriptor(frequency=0.08, orientation=0.0, octaves=3,
                      palette=((0.38, 0.36, 0.34), (0.56, 0.52, 0.48)), warp=2.0),
    TextureDescriptor(frequency=0.18, orientation=0.0, octaves=3,
                      palette=((0.34, 0.36, 0.40), (0.60, 0.55, 0.50)), warp=2.0),
    TextureDescriptor(frequency=0.18, orientation=90.0, octaves=3,
                      palette=((0.40, 0.34, 0.34), (0.58, 0.58, 0.52)), warp=2.0),
)


def default_source_spec(seed: int = 0) -> DomainSpec:
    return DomainSpec(
        name="source", textures=DEFAULT_TEXTURES,
        shape=ShapeParams(smoothness=8.0, elongation=1.0, deformation=0.25),
        photometric=Photometric(brightness=(-0.03, 0.03), tint=(0.0, 0.0, 0.0)),
        seed=seed,
    )


def default_target_spec(seed: int = 1) -> DomainSpec:
    return DomainSpec(
        name="target", textures=DEFAULT_TEXTURES,
        shape=ShapeParams(smoothness=11.0, elongation=4.0, deformation=0.25),
        photometric=Photometric(brightness=(0.08, 0.16), tint=(0.10, -0.04, -0.12)),
        seed=seed,
    )


@dataclass
class Sample:
    image: np.ndarray  # Hi x Wi x 3 float32 in [0, 1]
    label: np.ndarray | None  # Hi x Wi x C uint8 in {0, 1}
    domain: str
    split: str
    sample_id: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if (self.label is None) != (self.split == TRAIN_UNLABELED):
            raise ValueError("label must be present exactly when split is not train_unlabeled")
        if self.label is not None and self.label.shape[:2] != self.image.shape[:2]:
            raise ValueError(f"label shape {self.label.shape} does not match image {self.image.shape}")


def _value_noise(rng: np.random.Generator, size: int, octaves: int, base_cell: int = 16) -> np.ndarray:
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    cell = base_cell
    for _ in range(octaves):
        n = size // cell + 2
        grid = rng.random((n, n))
        out += amp * ndimage.zoom(grid, cell, order=1)[:size, :size]
        total += amp
        amp *= 0.5
        cell = max(cell // 2, 1)
    return out / total


def render_texture(tex: TextureDescriptor, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.deg2rad(tex.orientation)
    noise = _value_noise(rng, size, tex.octaves)
    phase = 2 * np.pi * tex.frequency * (xx * np.cos(theta) + yy * np.sin(theta))
    t = 0.5 + 0.5 * np.sin(phase + rng.uniform(0, 2 * np.pi) + tex.warp * 2 * np.pi * (noise - 0.5))
    t = 0.75 * t + 0.25 * noise
    lo, hi = np.asarray(tex.palette[0]), np.asarray(tex.palette[1])
    return lo + (hi - lo) * t[..., None]


def _blob_field(rng: np.random.Generator, size: int, shape: ShapeParams) -> np.ndarray:
    """Elliptical bumps at random centres, perturbed by smoothed noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    major = shape.smoothness * np.sqrt(shape.elongation)
    minor = shape.smoothness / np.sqrt(shape.elongation)
    field_ = np.zeros((size, size))
    for _ in range(shape.blobs):
        cy, cx = rng.uniform(0, size, 2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        field_ = np.maximum(field_, np.exp(-0.5 * ((u / major) ** 2 + (v / minor) ** 2)))
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), shape.smoothness / 2)
    noise /= noise.std() + 1e-12
    return field_ + shape.deformation * 0.25 * noise


def render_sample(spec: DomainSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One image and its per-class foreground masks."""
    size = spec.image_size
    fields = np.stack([_blob_field(rng, size, spec.shape) for _ in range(spec.num_classes)])
    thresholds = np.quantile(fields.reshape(spec.num_classes, -1), 1.0 - spec.shape.coverage, axis=1)
    above = fields > thresholds[:, None, None]
    winner = np.argmax(np.where(above, fields, -np.inf), axis=0)
    class_map = np.where(above.any(axis=0), winner + 1, 0)

    image = np.zeros((size, size, 3))
    for c, tex in enumerate(spec.textures):
        region = class_map == c
        if region.any():
            image[region] = render_texture(tex, rng, size)[region]
    ph = spec.photometric
    offset = rng.uniform(*ph.brightness) + np.asarray(ph.tint) + rng.uniform(-ph.jitter, ph.jitter, 3)
    image = np.clip(image + offset, 0.0, 1.0).astype(np.float32)
    labels = np.stack([class_map == c + 1 for c in range(spec.num_classes)], axis=-1).astype(np.uint8)
    return image, labels


def _sample_rng(spec: DomainSpec, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, stream, index])


def generate_pool(spec: DomainSpec, count: int, split: str, stream: int | None = None) -> list[Sample]:
    stream = _STREAMS[split] if stream is None else stream
    samples = []
    for i in range(count):
        image, labels = render_sample(spec, _sample_rng(spec, stream, i))
        samples.append(Sample(
            image=image, label=None if split == TRAIN_UNLABELED else labels,
            domain=spec.name, split=split, sample_id=f"{spec.name}_{split}_{i:05d}",
        ))
    return samples


def generate_domain(spec: DomainSpec, n: int, labeled_fraction: float = 0.0) -> list[Sample]:
    """``n`` training samples, the first ``round(n * labeled_fraction)`` labeled."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= labeled_fraction <= 1.0:
        raise ValueError("labeled_fraction must lie in [0, 1]")
    n_labeled = int(round(n * labeled_fraction))
    samples = []
    for i in range(n):
        image, labels = render_sample(spec, _sample_rng(spec, 0, i))
        split = TRAIN_LABELED if i < n_labeled else TRAIN_UNLABELED
        samples.append(Sample(image=image, label=labels if split == TRAIN_LABELED else None,
                              domain=spec.name, split=split, sample_id=f"{spec.name}_{i:05d}"))
    return samples


@dataclass
class BenchmarkBundle:
    source_labeled: list[Sample]
    source_unlabeled: list[Sample]
    source_test: list[Sample]
    target_unlabeled: list[Sample]
    target_test: list[Sample]
    manifest: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.source_labeled[0].label.shape[-1]

    def pools(self) -> dict[str, list[Sample]]:
        return {
            "source_labeled": self.source_labeled,
            "source_unlabeled": self.source_unlabeled,
            "source_test": self.source_test,
            "target_unlabeled": self.target_unlabeled,
            "target_test": self.target_test,
        }


def make_shift_benchmark(source_spec: DomainSpec, target_spec: DomainSpec,
                         sizes: tuple[int, int, int] = (64, 256, 64)) -> BenchmarkBundle:
    """Build pools for a source -> target shift.

    ``sizes`` is ``(n_labeled, n_unlabeled, n_test)``: the source labeled pool,
    each domain's unlabeled pool, and each domain's test split.
    """
    if source_spec.num_classes != target_spec.num_classes:
        raise IncompatibleClassesError(
            f"source has {source_spec.num_classes} foreground classes, target {target_spec.num_classes}"
        )
    n_labeled, n_unlabeled, n_test = sizes
    manifest = benchmark_manifest(source_spec, target_spec, sizes)
    return BenchmarkBundle(
        source_labeled=generate_pool(source_spec, n_labeled, TRAIN_LABELED),
        source_unlabeled=generate_pool(source_spec, n_unlabeled, TRAIN_UNLABELED),
        source_test=generate_pool(source_spec, n_test, TEST),
        target_unlabeled=generate_pool(target_spec, n_unlabeled, TRAIN_UNLABELED),
        target_test=generate_pool(target_spec, n_test, TEST),
        manifest=manifest,
    )


def benchmark_manifest(source_spec: DomainSpec, target_spec: DomainSpec, sizes) -> dict:
    """Everything needed to regenerate a benchmark: specs, seeds and pool sizes."""
    n_labeled, n_unlabeled, n_test = sizes
    return {
        "format": "densetrf-benchmark",
        "version": 1,
        "sizes": [n_labeled, n_unlabeled, n_test],
        "source": source_spec.to_dict(),
        "target": target_spec.to_dict(),
        "counts": {
            "source_labeled": n_labeled, "source_unlabeled": n_unlabeled, "source_test": n_test,
            "target_unlabeled": n_unlabeled, "target_test": n_test,
        },
    }


def bundle_from_manifest(manifest: dict) -> BenchmarkBundle:
    return make_shift_benchmark(DomainSpec.from_dict(manifest["source"]),
                                DomainSpec.from_dict(manifest["target"]),
                                tuple(manifest["sizes"]))


# -- disk layout -----------------------------------------------------------

def _to_png(array01: np.ndarray, path: Path) -> None:
    Image.fromarray(np.rint(np.clip(array01, 0, 1) * 255).astype(np.uint8)).save(path)


def write_samples(samples: list[Sample], root, class_names: list[str] | None = None) -> None:
    """``<root>/<domain>/<split>/images/<id>.png`` and ``.../masks/<class>/<id>.png``."""
    root = Path(root)
    for s in samples:
        base = root / s.domain / s.split
        (base / "images").mkdir(parents=True, exist_ok=True)
        _to_png(s.image, base / "images" / f"{s.sample_id}.png")
        if s.label is None:
            continue
        names = class_names or [f"class{c + 1}" for c in range(s.label.shape[-1])]
        for c, name in enumerate(names):
            d = base / "masks" / name
            d.mkdir(parents=True, exist_ok=True)
            Image.fromarray(s.label[..., c] * 255).save(d / f"{s.sample_id}.png")


def write_benchmark(bundle: BenchmarkBundle, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for samples in bundle.pools().values():
        write_samples(samples, root)
    path = root / "manifest.json"
    path.write_text(json.dumps(bundle.manifest, indent=2, sort_keys=True))
    return path


def read_manifest(root) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def _fit_to_grid(img: Image.Image, size: int | None, multiple: int, resample) -> Image.Image:
    if size is not None:
        img = img.resize((size, size), resample)
    w, h = img.size
    cw, ch = w - w % multiple, h - h % multiple
    if cw == 0 or ch == 0:
        raise ValueError(f"image {w}x{h} smaller than one {multiple}px patch")
    left, top = (w - cw) // 2, (h - ch) // 2
    return img.crop((left, top, left + cw, top + ch))


def load_image_folder(path, labels_path=None, *, domain: str | None = None, split: str | None = None,
                      patch_size: int = 8, size: int | None = None,
                      color_map: dict[str, tuple] | None = None) -> list[Sample]:
    """Load ``*.png``/``*.jpg`` images, optionally with masks.

    Masks are either per-class subdirectories of ``labels_path`` holding
    grayscale images (foreground > 127), or, when ``color_map`` is given,
    single colour-coded images directly in ``labels_path`` with one RGB
    colour per class.
    """
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    domain = domain or path.parent.parent.name or "folder"
    if split is None:
        split = TRAIN_UNLABELED if labels_path is None else TRAIN_LABELED
    class_dirs = []
    if labels_path is not None and color_map is None:
        class_dirs = sorted(d for d in Path(labels_path).iterdir() if d.is_dir())
        if not class_dirs:
            raise MissingMaskError(f"{labels_path}: no class subdirectories")
    samples = []
    for f in files:
        try:
            img = Image.open(f).convert("RGB")
        except OSError as exc:
            raise OSError(f"unreadable image {f}: {exc}") from exc
        img = _fit_to_grid(img, size, patch_size, Image.BILINEAR)
        image = np.asarray(img, dtype=np.float32) / 255.0
        label = None
        if labels_path is not None:
            channels = []
            if color_map is not None:
                mpath = Path(labels_path) / f"{f.stem}.png"
                if not mpath.exists():
                    raise MissingMaskError(f"no mask for {f.name} (expected {mpath})")
                rgb = np.asarray(_fit_to_grid(Image.open(mpath).convert("RGB"), size, patch_size,
                                              Image.NEAREST))
                for colour in color_map.values():
                    channels.append(np.all(rgb == np.asarray(colour, dtype=np.uint8), axis=-1))
            else:
                for d in class_dirs:
                    mpath = d / f"{f.stem}.png"
                    if not mpath.exists():
                        raise MissingMaskError(f"no mask for {f.name} in class folder {d.name}")
                    m = _fit_to_grid(Image.open(mpath).convert("L"), size, patch_size, Image.NEAREST)
                    channels.append(np.asarray(m) > 127)
            label = np.stack(channels, axis=-1).astype(np.uint8)
        samples.append(Sample(image=image, label=label, domain=domain, split=split, sample_id=f.stem))
    return samples


def load_benchmark_folder(root) -> BenchmarkBundle:
    """Read a dataset written by ``write_benchmark`` back from disk."""
    root = Path(root)
    manifest = read_manifest(root)

    def pool(domain, split):
        base = root / domain / split
        labels = base / "masks" if split != TRAIN_UNLABELED else None
        return load_image_folder(base / "images", labels, domain=domain, split=split)

    src, tgt = manifest["source"]["name"], manifest["target"]["name"]
    return BenchmarkBundle(
        source_labeled=pool(src, TRAIN_LABELED),
        source_unlabeled=pool(src, TRAIN_UNLABELED),
        source_test=pool(src, TEST),
        target_unlabeled=pool(tgt, TRAIN_UNLABELED),
        target_test=pool(tgt, TEST),
        manifest=manifest,
    )


# -- statistics used to check the benchmark --------------------------------

def blob_eccentricities(mask: np.ndarray, min_area: int = 20) -> list[float]:
    regions = measure.regionprops(measure.label(mask.astype(bool), connectivity=1))
    return [r.eccentricity for r in regions if r.area >= min_area]


def mean_blob_eccentricity(samples: list[Sample]) -> float:
    vals = []
    for s in samples:
        for c in range(s.label.shape[-1]):
            vals.extend(blob_eccentricities(s.label[..., c]))
    return float(np.mean(vals))


def class_texture_statistics(samples: list[Sample], patch_size: int = 8, purity: float = 0.9) -> np.ndarray:
    """Mean offset-invariant patch statistics per class, background first.

    Only patches whose label is at least ``purity`` one class contribute.
    Returns (C + 1, S); rows with no qualifying patch are NaN.
    """
    p = patch_size
    n_cls = samples[0].label.shape[-1] + 1
    sums, counts = None, np.zeros(n_cls)
    for s in samples:
        stats = patch_statistics(s.image.astype(np.float64), p)[..., TEXTURE_STATS]
        h, w = stats.shape[:2]
        fg = s.label[:h * p, :w * p].astype(np.float64)
        full = np.concatenate([1.0 - fg.max(axis=-1, keepdims=True), fg], axis=-1)
        frac = full.reshape(h, p, w, p, n_cls).mean(axis=(1, 3))
        if sums is None:
            sums = np.zeros((n_cls, stats.shape[-1]))
        for c in range(n_cls):
            sel = frac[..., c] >= purity
            sums[c] += stats[sel].sum(axis=0)
            counts[c] += sel.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / counts[:, None]


@dataclass
class ShiftCheck:
    texture_divergence: list  # relative L1 per class, background first
    eccentricity: tuple  # (source, target) mean blob eccentricity
    texture_tol: float
    shape_min: float

    @property
    def eccentricity_gap(self) -> float:
        src, tgt = self.eccentricity
        return abs(tgt - src) / src

    @property
    def passed(self) -> bool:
        return max(self.texture_divergence) < self.texture_tol and self.eccentricity_gap > self.shape_min


def check_shift(source: list[Sample], target: list[Sample], patch_size: int = 8,
                texture_tol: float = 0.10, shape_min: float = 0.25) -> ShiftCheck:
    """Texture statistics should match across domains while blob shapes differ."""
    a = class_texture_statistics(source, patch_size)
    b = class_texture_statistics(target, patch_size)
    div = [float(np.abs(x - y).sum() / np.abs(x).sum()) for x, y in zip(a, b)]
    ecc = (mean_blob_eccentricity(source), mean_blob_eccentricity(target))
    return ShiftCheck(div, ecc, texture_tol, shape_min)
