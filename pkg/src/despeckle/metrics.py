"""Reference-free speckle metrics over manually chosen ROIs.

All statistics use the population standard deviation (divide by N).
Rectangles are ``(top, left, height, width)`` with half-open extents.
A metric whose precondition fails raises :class:`UndefinedMetricError`;
:func:`evaluate_set` turns those into flags so means stay meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, MissingInputError, UndefinedMetricError

METRIC_COLUMNS = ("CNR", "MSR", "EPI", "ENL")

Rect = tuple[int, int, int, int]


@dataclass(frozen=True)
class RoiSpec:
    signal_rois: tuple[Rect, ...]
    background_roi: Rect
    info_boundary_row: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "signal_rois", tuple(tuple(int(v) for v in r) for r in self.signal_rois))
        object.__setattr__(self, "background_roi", tuple(int(v) for v in self.background_roi))
        if not self.signal_rois:
            raise ConfigError("at least one signal ROI is required")
        for i, r in enumerate(self.signal_rois, 1):
            if _overlaps(r, self.background_roi):
                raise ConfigError(f"signal ROI #{i} {r} overlaps the background ROI {self.background_roi}")

    def validate(self, shape: tuple[int, int]) -> None:
        h, w = shape
        for name, r in [(f"signal ROI #{i}", r) for i, r in enumerate(self.signal_rois, 1)] + [("background ROI", self.background_roi)]:
            top, left, rh, rw = r
            if rh < 1 or rw < 1 or top < 0 or left < 0 or top + rh > h or left + rw > w:
                raise DimensionError(f"{name} {r} is outside the {h}x{w} image")
        if self.info_boundary_row is not None and not 1 <= self.info_boundary_row <= h:
            raise DimensionError(f"info boundary row {self.info_boundary_row} outside [1, {h}]")


@dataclass(frozen=True)
class RoiStats:
    mu: tuple[float, ...]
    sigma: tuple[float, ...]
    mu_b: float
    sigma_b: float

    @property
    def m(self) -> int:
        return len(self.mu)


@dataclass
class MetricReport:
    image_id: str
    cnr: Optional[float] = None
    msr: Optional[float] = None
    epi: Optional[float] = None
    enl: Optional[float] = None
    roi: Optional[RoiSpec] = None
    undefined: dict = field(default_factory=dict)

    def value(self, column: str) -> Optional[float]:
        return getattr(self, column.lower())

    def row(self) -> dict:
        return {c: self.value(c) for c in METRIC_COLUMNS}


def _overlaps(a: Rect, b: Rect) -> bool:
    return a[0] < b[0] + b[2] and b[0] < a[0] + a[2] and a[1] < b[1] + b[3] and b[1] < a[1] + a[3]


def _crop(image: np.ndarray, r: Rect) -> np.ndarray:
    top, left, h, w = r
    return image[top:top + h, left:left + w]


def roi_stats(image: np.ndarray, roi: RoiSpec) -> RoiStats:
    image = np.asarray(image, dtype=np.float64)
    roi.validate(image.shape)
    regions = [_crop(image, r) for r in roi.signal_rois]
    bg = _crop(image, roi.background_roi)
    return RoiStats(tuple(float(r.mean()) for r in regions), tuple(float(r.std()) for r in regions),
                    float(bg.mean()), float(bg.std()))


def cnr(image: np.ndarray, roi: RoiSpec) -> float:
    """Mean over signal ROIs of ``10 log10((mu_i - mu_b) / sqrt(sigma_i^2 + sigma_b^2))``."""
    st = roi_stats(image, roi)
    terms = []
    for i, (mu, sd) in enumerate(zip(st.mu, st.sigma), 1):
        denom = math.sqrt(sd * sd + st.sigma_b * st.sigma_b)
        if mu <= st.mu_b:
            raise UndefinedMetricError(f"CNR undefined: signal ROI #{i} mean {mu:.6g} <= background mean {st.mu_b:.6g}")
        if denom == 0.0:
            raise UndefinedMetricError(f"CNR undefined: signal ROI #{i} and background are both constant")
        terms.append(10.0 * math.log10((mu - st.mu_b) / denom))
    return float(np.mean(terms))


def msr(image: np.ndarray, roi: RoiSpec) -> float:
    st = roi_stats(image, roi)
    terms = []
    for i, (mu, sd) in enumerate(zip(st.mu, st.sigma), 1):
        if sd == 0.0:
            raise UndefinedMetricError(f"MSR undefined: signal ROI #{i} is constant")
        terms.append(mu / sd)
    return float(np.mean(terms))


def enl(image: np.ndarray, roi: RoiSpec) -> float:
    st = roi_stats(image, roi)
    if st.sigma_b == 0.0:
        raise UndefinedMetricError("ENL undefined: background ROI is constant")
    return st.mu_b ** 2 / st.sigma_b ** 2


def vertical_variation(image: np.ndarray) -> float:
    image = np.asarray(image, dtype=np.float64)
    return float(np.abs(np.diff(image, axis=0)).sum())


def epi(denoised: np.ndarray, noisy: np.ndarray, roi: RoiSpec) -> float:
    """Ratio of summed vertical first differences (denoised over noisy) in the information part."""
    denoised = np.asarray(denoised, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    if denoised.shape != noisy.shape:
        raise DimensionError(f"EPI needs equal shapes, got {denoised.shape} and {noisy.shape}")
    b = roi.info_boundary_row if roi.info_boundary_row is not None else noisy.shape[0]
    if not 1 <= b <= noisy.shape[0]:
        raise DimensionError(f"info boundary row {b} outside [1, {noisy.shape[0]}]")
    if b == 1:
        raise UndefinedMetricError("EPI undefined: information part is a single row")
    den = vertical_variation(noisy[:b])
    if den == 0.0:
        raise UndefinedMetricError("EPI undefined: noisy information part has no vertical variation")
    return vertical_variation(denoised[:b]) / den


def evaluate_image(image_id: str, denoised: np.ndarray, noisy: np.ndarray, roi: RoiSpec) -> MetricReport:
    roi.validate(np.shape(denoised))
    rep = MetricReport(image_id, roi=roi)
    for name, fn in (("cnr", lambda: cnr(denoised, roi)), ("msr", lambda: msr(denoised, roi)),
                     ("epi", lambda: epi(denoised, noisy, roi)), ("enl", lambda: enl(denoised, roi))):
        try:
            setattr(rep, name, fn())
        except UndefinedMetricError as exc:
            rep.undefined[name.upper()] = str(exc)
    return rep


@dataclass
class SetReport:
    rows: list[MetricReport]
    means: dict
    undefined_counts: dict


def summarize(rows: Sequence[MetricReport]) -> SetReport:
    means, counts = {}, {}
    for col in METRIC_COLUMNS:
        vals = [r.value(col) for r in rows if r.value(col) is not None]
        means[col] = float(np.mean(vals)) if vals else None
        counts[col] = len(rows) - len(vals)
    return SetReport(list(rows), means, counts)


def evaluate_set(denoised: Mapping[str, np.ndarray], noisy: Mapping[str, np.ndarray],
                 rois: Mapping[str, RoiSpec]) -> SetReport:
    """Per-image metric reports plus means that skip undefined entries."""
    missing = [k for k in sorted(denoised) if k not in rois]
    if missing:
        raise ConfigError(f"no ROI specification for: {', '.join(missing)}")
    absent = [k for k in sorted(denoised) if k not in noisy]
    if absent:
        raise MissingInputError(f"no noisy reference image for: {', '.join(absent)}")
    return summarize([evaluate_image(k, denoised[k], noisy[k], rois[k]) for k in sorted(denoised)])


def _fmt_rect(r: Rect) -> str:
    return ",".join(str(v) for v in r)


def _parse_rect(text: str, where: str) -> Rect:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ConfigError(f"{where}: rectangle must be 'top,left,height,width', got {text!r}")
    return tuple(int(p) for p in parts)


def read_roi_config(path) -> dict[str, RoiSpec]:
    """Parse an ROI file.

    One tab-separated record per image::

        <image_id>  <top,left,h,w>[;<top,left,h,w>...]  <top,left,h,w>  <info_boundary_row>

    Columns are image id, signal rectangles, background rectangle, boundary
    row. ``#`` starts a comment.
    """
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        cols = [c.strip() for c in line.split("\t")]
        if len(cols) != 4:
            raise ConfigError(f"{where}: expected 4 tab-separated columns, got {len(cols)}")
        image_id, signals, background, boundary = cols
        out[image_id] = RoiSpec(tuple(_parse_rect(s, where) for s in signals.split(";") if s.strip()),
                                _parse_rect(background, where), int(boundary))
    return out


def write_roi_config(path, rois: Mapping[str, RoiSpec]) -> None:
    lines = ["# image_id\tsignal ROIs (top,left,height,width;...)\tbackground ROI\tinfo boundary row"]
    for image_id in sorted(rois):
        r = rois[image_id]
        lines.append(f"{image_id}\t{';'.join(_fmt_rect(s) for s in r.signal_rois)}\t"
                     f"{_fmt_rect(r.background_roi)}\t{r.info_boundary_row}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
