"""B-scan loading, cropping, and sliding-window patch harvesting.

Three patch populations are produced for training:

* ``noisy``  windows over whole noisy B-scans,
* ``clean``  windows over whole clean B-scans (disjoint subjects),
* ``noise``  windows lying entirely in the structure-free background below
  each noisy scan's boundary row.

Patch sets are written to a directory holding ``manifest.tsv`` plus one
``.npy`` archive per population.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DimensionError, MissingInputError

log = logging.getLogger(__name__)

PATCHSET_FORMAT = "despeckle-patchset/1"
POPULATIONS = ("noisy", "clean", "noise")
IMAGE_SUFFIXES = (".png", ".tif", ".tiff")
FLAT_PATCH_STD = 1e-6


@dataclass(frozen=True)
class ImageSample:
    image_id: str
    pixels: np.ndarray
    boundary_row: Optional[int] = None
    domain_tag: str = "noisy"

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise DimensionError(f"{self.image_id}: expected a 2-D grayscale array, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError(f"{self.image_id}: pixel values must lie in [0, 1]")
        if self.domain_tag not in ("noisy", "clean"):
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")
        if self.boundary_row is not None and not 0 <= self.boundary_row <= px.shape[0]:
            raise ValueError(f"{self.image_id}: boundary_row {self.boundary_row} outside [0, {px.shape[0]}]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Patch:
    source: str
    row: int
    col: int
    population: str
    pixels: np.ndarray


@dataclass
class PatchSet:
    patch_size: int
    stride: int
    noise_stride: int
    noisy_patches: np.ndarray
    clean_patches: np.ndarray
    noise_patches: np.ndarray
    manifest: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def population(self, name: str) -> np.ndarray:
        return {"noisy": self.noisy_patches, "clean": self.clean_patches, "noise": self.noise_patches}[name]

    def manifest_text(self) -> str:
        lines = [f"# {PATCHSET_FORMAT} patch_size={self.patch_size} stride={self.stride} noise_stride={self.noise_stride}",
                 "patch_id\tsource\trow\tcol\tpopulation"]
        lines += [f"{pid}\t{src}\t{r}\t{c}\t{pop}" for pid, src, r, c, pop in self.manifest]
        return "\n".join(lines) + "\n"

    def manifest_hash(self) -> str:
        return hashlib.sha256(self.manifest_text().encode("utf-8")).hexdigest()

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "manifest.tsv").write_text(self.manifest_text(), encoding="utf-8")
        for name in POPULATIONS:
            np.save(directory / f"{name}.npy", self.population(name).astype(np.float32), allow_pickle=False)
        return directory

    @classmethod
    def load(cls, directory) -> "PatchSet":
        directory = Path(directory)
        manifest_path = directory / "manifest.tsv"
        if not manifest_path.exists():
            raise MissingInputError(f"no manifest.tsv in {directory}")
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
        header = lines[0]
        if not header.startswith(f"# {PATCHSET_FORMAT}"):
            raise ConfigError(f"unsupported patch set format line: {header!r}")
        params = dict(tok.split("=", 1) for tok in header.split()[2:])
        manifest = []
        for line in lines[2:]:
            pid, src, r, c, pop = line.split("\t")
            manifest.append((int(pid), src, int(r), int(c), pop))
        arrays = {name: np.load(directory / f"{name}.npy", allow_pickle=False) for name in POPULATIONS}
        return cls(int(params["patch_size"]), int(params["stride"]), int(params["noise_stride"]),
                   arrays["noisy"], arrays["clean"], arrays["noise"], manifest)


def to_unit_range(raw: np.ndarray) -> np.ndarray:
    """Map 8-bit (or 16-bit) integer intensities to float32 in [0, 1]."""
    if raw.dtype == np.uint8:
        return raw.astype(np.float32) / 255.0
    if raw.dtype in (np.uint16, np.int32) or (np.issubdtype(raw.dtype, np.integer) and raw.max() > 255):
        return raw.astype(np.float32) / 65535.0
    if np.issubdtype(raw.dtype, np.integer):
        return raw.astype(np.float32) / 255.0
    return np.clip(raw.astype(np.float32), 0.0, 1.0)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P", "LA", "CMYK"):
            raise DimensionError(f"{path}: expected a single-channel image, got mode {im.mode}")
        raw = np.array(im)
    if raw.ndim != 2:
        raise DimensionError(f"{path}: expected a single-channel image, got shape {raw.shape}")
    return to_unit_range(raw)


def write_image(path, pixels: np.ndarray) -> None:
    """Save a [0, 1] float array as an 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def read_boundary_manifest(path) -> dict[str, int]:
    """Parse ``<image_filename>,<boundary_row>`` lines; ``#`` starts a comment."""
    rows = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            name, value = (tok.strip() for tok in line.split(","))
            rows[name] = int(value)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: expected '<image_filename>,<boundary_row>', got {line!r}") from None
    return rows


def write_boundary_manifest(path, rows: dict[str, int]) -> None:
    text = "".join(f"{name},{row}\n" for name, row in sorted(rows.items()))
    Path(path).write_text(text, encoding="utf-8")


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingInputError(f"image directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_samples(directory, domain_tag: str, boundaries: Optional[dict[str, int]] = None,
                 ids: Optional[Iterable[str]] = None) -> list[ImageSample]:
    boundaries = boundaries or {}
    wanted = set(ids) if ids is not None else None
    samples = []
    for path in list_images(directory):
        if wanted is not None and path.stem not in wanted:
            continue
        boundary = boundaries.get(path.name, boundaries.get(path.stem))
        samples.append(ImageSample(path.stem, read_image(path), boundary, domain_tag))
    if wanted is not None:
        missing = wanted - {s.image_id for s in samples}
        if missing:
            raise MissingInputError(f"images not found in {directory}: {', '.join(sorted(missing))}")
    return samples


def center_crop(sample: ImageSample, target_h: int, target_w: int) -> ImageSample:
    """Crop to ``target_h x target_w`` around the center.

    An odd remainder drops the extra row/column from the bottom/right.
    """
    h, w = sample.height, sample.width
    if target_h > h or target_w > w:
        raise DimensionError(f"{sample.image_id}: cannot crop {h}x{w} to {target_h}x{target_w}")
    top = (h - target_h) // 2
    left = (w - target_w) // 2
    pixels = sample.pixels[top:top + target_h, left:left + target_w]
    boundary = sample.boundary_row
    if boundary is not None:
        boundary = min(max(boundary - top, 0), target_h)
    return ImageSample(sample.image_id, pixels, boundary, sample.domain_tag)


def split_information_background(sample: ImageSample) -> tuple[np.ndarray, np.ndarray]:
    if sample.boundary_row is None:
        raise ConfigError(f"sample {sample.image_id!r} has no boundary_row")
    b = sample.boundary_row
    return sample.pixels[:b], sample.pixels[b:]


def window_positions(dim: int, patch_size: int, stride: int) -> range:
    if dim < patch_size:
        return range(0)
    return range(0, (dim - patch_size) // stride * stride + 1, stride)


def patch_count(h: int, w: int, patch_size: int, stride: int) -> int:
    if h < patch_size or w < patch_size:
        return 0
    return ((h - patch_size) // stride + 1) * ((w - patch_size) // stride + 1)


def extract_patches(region: np.ndarray, patch_size: int, stride: int,
                    warnings: Optional[list] = None) -> list[tuple[int, int, np.ndarray]]:
    """Raster-order ``(row, col, patch)`` windows over ``region``.

    A region smaller than the window yields no patches; a warning record is
    appended to ``warnings`` (when given) and logged.
    """
    if patch_size < 1 or stride < 1:
        raise ValueError("patch_size and stride must be positive")
    region = np.asarray(region)
    h, w = region.shape
    if h < patch_size or w < patch_size:
        msg = f"region {h}x{w} smaller than patch size {patch_size}; no patches"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return []
    out = []
    for r in window_positions(h, patch_size, stride):
        for c in window_positions(w, patch_size, stride):
            out.append((r, c, region[r:r + patch_size, c:c + patch_size]))
    return out


def harvest_noise_patches(sample: ImageSample, patch_size: int, stride: int,
                          warnings: Optional[list] = None) -> list[Patch]:
    if sample.domain_tag != "noisy":
        raise ConfigError(f"noise patches are harvested from noisy samples only ({sample.image_id} is {sample.domain_tag})")
    _, background = split_information_background(sample)
    local: list = []
    found = extract_patches(background, patch_size, stride, local)
    for msg in local:
        if warnings is not None:
            warnings.append(f"{sample.image_id}: background {msg}")
    b = sample.boundary_row
    return [Patch(sample.image_id, r + b, c, "noise", p) for r, c, p in found]


def _stack(patches: Sequence[Patch], size: int) -> np.ndarray:
    if not patches:
        return np.zeros((0, size, size), dtype=np.float32)
    return np.stack([p.pixels for p in patches]).astype(np.float32)


def _drop_flat(patches: list[Patch], min_std: float, image_id: str, warnings: list) -> list[Patch]:
    if min_std < 0:
        return patches
    kept = [p for p in patches if float(p.pixels.std()) > min_std]
    if len(kept) < len(patches):
        warnings.append(f"{image_id}: dropped {len(patches) - len(kept)} flat {patches[0].population} patches (std <= {min_std:g})")
    return kept


def _harvest_one(sample: ImageSample, patch_size: int, stride: int, noise_stride: int, min_std: float):
    warnings: list = []
    population = sample.domain_tag
    patches = [Patch(sample.image_id, r, c, population, p)
               for r, c, p in extract_patches(sample.pixels, patch_size, stride, warnings)]
    noise = harvest_noise_patches(sample, patch_size, noise_stride, warnings) if population == "noisy" else []
    return (_drop_flat(patches, min_std, sample.image_id, warnings),
            _drop_flat(noise, min_std, sample.image_id, warnings), warnings)


def build_patchset(noisy_samples: Sequence[ImageSample], clean_samples: Sequence[ImageSample],
                   patch_size: int = 256, stride: int = 8, noise_stride: int = 64,
                   out_dir=None, workers: int = 1, min_std: float = FLAT_PATCH_STD) -> PatchSet:
    """Harvest the three patch populations and optionally persist them.

    Output order is (population, sorted image id, raster offset) regardless
    of ``workers``.  Patches with ``std <= min_std`` are dropped (a negative
    ``min_std`` keeps everything): exactly uniform windows are degenerate for
    the instance-normalized networks.
    """
    if not noisy_samples or not clean_samples:
        raise ConfigError("both noisy and clean sample sets must be nonempty")
    overlap = {s.image_id for s in noisy_samples} & {s.image_id for s in clean_samples}
    if overlap:
        raise ConfigError(f"subjects present in both noisy and clean populations (paired leakage): {', '.join(sorted(overlap))}")
    for s in noisy_samples:
        if s.boundary_row is None:
            raise ConfigError(f"noisy sample {s.image_id!r} has no boundary_row")

    ordered = sorted(noisy_samples, key=lambda s: s.image_id) + sorted(clean_samples, key=lambda s: s.image_id)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda s: _harvest_one(s, patch_size, stride, noise_stride, min_std), ordered))
    else:
        results = [_harvest_one(s, patch_size, stride, noise_stride, min_std) for s in ordered]

    pops: dict[str, list[Patch]] = {name: [] for name in POPULATIONS}
    warnings: list = []
    for patches, noise, warn in results:
        for p in patches:
            pops[p.population].append(p)
        pops["noise"].extend(noise)
        warnings.extend(warn)

    manifest = []
    for name in POPULATIONS:
        for p in pops[name]:
            manifest.append((len(manifest), p.source, p.row, p.col, name))
    ps = PatchSet(patch_size, stride, noise_stride,
                  _stack(pops["noisy"], patch_size), _stack(pops["clean"], patch_size),
                  _stack(pops["noise"], patch_size), manifest, warnings)
    if out_dir is not None:
        ps.save(out_dir)
    return ps


def unpaired_split(ids: Sequence[str]) -> tuple[list[str], list[str]]:
    """First half of the sorted ids feeds the noisy population, the rest the clean one."""
    ids = sorted(ids)
    half = len(ids) // 2
    return ids[:half], ids[half:]


def prepare_from_dirs(noisy_dir, clean_dir, boundary_manifest, out_dir, *, patch_size=256, stride=8,
                      noise_stride=64, crop_h=450, crop_w=900, train_ids=None, split="disjoint",
                      workers: int = 1, min_std: float = FLAT_PATCH_STD) -> PatchSet:
    """Load, crop, and harvest a patch set from ``noisy/`` and ``clean/`` directories.

    ``split="halves"`` takes matched noisy/clean pairs and assigns the first
    half of the sorted ids to the noisy population and the second half to the
    clean one; ``split="disjoint"`` uses every file as-is.
    """
    boundaries = read_boundary_manifest(boundary_manifest) if boundary_manifest else {}
    if split == "halves":
        ids = train_ids if train_ids is not None else sorted(
            {p.stem for p in list_images(noisy_dir)} & {p.stem for p in list_images(clean_dir)})
        noisy_ids, clean_ids = unpaired_split(ids)
    elif split == "disjoint":
        noisy_ids = clean_ids = train_ids
    else:
        raise ConfigError(f"unknown split mode {split!r}")
    noisy = load_samples(noisy_dir, "noisy", boundaries, noisy_ids)
    clean = load_samples(clean_dir, "clean", None, clean_ids)
    for s in noisy:
        if s.boundary_row is None:
            raise ConfigError(f"no boundary row for {s.image_id!r} in {boundary_manifest}")
    if crop_h and crop_w:
        noisy = [center_crop(s, crop_h, crop_w) for s in noisy]
        clean = [center_crop(s, crop_h, crop_w) for s in clean]
    return build_patchset(noisy, clean, patch_size, stride, noise_stride, out_dir, workers, min_std)


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
