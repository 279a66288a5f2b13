"""Classic comparison filters and ingestion of externally computed results."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

from .dataset_prep import IMAGE_SUFFIXES, read_image
from .errors import ConfigError, MissingInputError


def median_filter(image: np.ndarray, window: int = 3) -> np.ndarray:
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"median window must be an odd integer >= 3, got {window}")
    return ndimage.median_filter(np.asarray(image), size=window, mode="reflect")


def bilateral_filter(image: np.ndarray, sigma_spatial: float = 2.0, sigma_range: float = 0.1,
                     radius: int | None = None) -> np.ndarray:
    """Gaussian space/range bilateral filter with symmetric-reflect borders.

    The window radius defaults to ``ceil(3 * sigma_spatial)``.
    """
    if sigma_spatial <= 0 or sigma_range <= 0:
        raise ConfigError("bilateral sigmas must be positive")
    src = np.asarray(image)
    img = src.astype(np.float64)
    r = int(math.ceil(3 * sigma_spatial)) if radius is None else int(radius)
    padded = np.pad(img, r, mode="symmetric")
    h, w = img.shape
    num = np.zeros_like(img)
    den = np.zeros_like(img)
    inv_s = 1.0 / (2 * sigma_spatial ** 2)
    inv_r = 1.0 / (2 * sigma_range ** 2)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = padded[r + dy:r + dy + h, r + dx:r + dx + w]
            wgt = math.exp(-(dy * dy + dx * dx) * inv_s) * np.exp(-((shifted - img) ** 2) * inv_r)
            num += wgt * shifted
            den += wgt
    out_dtype = src.dtype if np.issubdtype(src.dtype, np.floating) else np.float64
    return (num / den).astype(out_dtype)


BUILTIN_FILTERS = {
    "median": lambda img: median_filter(img, 3),
    "bilateral": lambda img: bilateral_filter(img, 2.0, 0.1),
}


class ResultRegistry:
    """Denoised image sets keyed by method name, all covering the same test ids."""

    def __init__(self, test_ids):
        self.test_ids = sorted(test_ids)
        self.methods: dict[str, dict[str, np.ndarray]] = {}

    def register(self, method: str, images: Mapping[str, np.ndarray]) -> None:
        if method in self.methods:
            raise ConfigError(f"duplicate method name {method!r}")
        missing = [i for i in self.test_ids if i not in images]
        if missing:
            raise MissingInputError(f"method {method!r} is missing results for: {', '.join(missing)}")
        self.methods[method] = {i: np.asarray(images[i]) for i in self.test_ids}

    def ingest_external_result(self, method: str, directory) -> None:
        """Register ``<directory>/<image_id>.png`` files as a method's outputs."""
        directory = Path(directory)
        if not directory.is_dir():
            raise MissingInputError(f"results directory not found: {directory}")
        files = {p.stem: p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
        missing = [i for i in self.test_ids if i not in files]
        if missing:
            raise MissingInputError(f"method {method!r} is missing result files for: "
                                    + ", ".join(f"{i}.png" for i in missing))
        self.register(method, {i: read_image(files[i]) for i in self.test_ids})

    def ingest_results_root(self, root) -> list[str]:
        """Register every ``<root>/<method>/`` directory; returns the method names."""
        root = Path(root)
        names = sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
        for name in names:
            self.ingest_external_result(name, root / name)
        return names
