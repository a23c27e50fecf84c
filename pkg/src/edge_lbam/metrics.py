"""Quantitative evaluation: PSNR, SSIM, masked relative L1 percentage, and a
pluggable perceptual distance.

The perceptual distance reuses the frozen-pyramid interface from the loss
module and is reported as "perc_dist": its value depends on the pyramid
weights in use, so it is comparable across runs of this codebase but is not
interchangeable with numbers from other feature stacks.

Per design, evaluation operates on composited outputs (known pixels taken
from the input, holes from the prediction); reports carry that note in
their header.
"""

from __future__ import annotations

import csv
import math
import warnings
from typing import Optional, Sequence, Union

import numpy as np
import scipy.ndimage as ndi
import torch
from torch import Tensor

from edge_lbam.data import BUCKET_LABELS

ArrayLike = Union[np.ndarray, Tensor]

COMPOSITED_NOTE = "metrics computed on composited outputs (known pixels copied from the input)"


def _to_numpy(x: ArrayLike) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _luminance(image: ArrayLike) -> np.ndarray:
    """(H, W) luminance plane from (3, H, W), (H, W, 3), or (H, W) input."""
    arr = _to_numpy(image)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = arr.transpose(1, 2, 0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected RGB or grayscale image, got {arr.shape}")
    return arr @ np.asarray([0.299, 0.587, 0.114])


def psnr(pred: ArrayLike, gt: ArrayLike) -> float:
    """10 * log10(1 / MSE) for unit-range images; +inf for identical pairs."""
    p, g = _to_numpy(pred), _to_numpy(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(pred: ArrayLike, gt: ArrayLike) -> float:
    """Mean local structural similarity on the luminance plane.

    11-tap Gaussian window (sigma 1.5), population statistics, unit data
    range, and the standard (0.01, 0.03) stabilizers; the half-window border
    is cropped before averaging.
    """
    x = _luminance(pred)
    y = _luminance(gt)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    sigma, truncate = 1.5, 3.5
    radius = int(truncate * sigma + 0.5)
    win = 2 * radius + 1
    if min(x.shape) < win:
        raise ValueError(f"image smaller than the {win}x{win} window")

    def blur(a):
        return ndi.gaussian_filter(a, sigma=sigma, truncate=truncate, mode="reflect")

    ux, uy = blur(x), blur(y)
    vx = blur(x * x) - ux * ux
    vy = blur(y * y) - uy * uy
    vxy = blur(x * y) - ux * uy
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) \
        / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(s[radius:-radius, radius:-radius].mean())


def masked_l1_pct(pred: ArrayLike, gt: ArrayLike, mask: ArrayLike) -> float:
    """Hole-restricted relative L1 as a percentage.

    ||(1 - M) * (gt - pred)||_1 / ||(1 - M) * gt||_1 * 100.  Known pixels
    never contribute.  A zero denominator (no hole, or black hole content)
    is reported as 0.0 with a warning.
    """
    p, g, m = _to_numpy(pred), _to_numpy(gt), _to_numpy(mask)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    hole = 1.0 - m
    if hole.ndim == p.ndim - 1:
        hole = hole[None] if p.shape[0] in (1, 3) else hole[..., None]
    elif hole.ndim == p.ndim and hole.shape != p.shape:
        hole = np.broadcast_to(hole, p.shape)
    denom = float(np.abs(hole * g).sum())
    if denom == 0.0:
        warnings.warn("masked_l1_pct: empty or all-black hole, reporting 0.0")
        return 0.0
    return float(np.abs(hole * (g - p)).sum()) / denom * 100.0


def perceptual_distance(pred: Tensor, gt: Tensor, extractor) -> float:
    """Mean over pyramid levels of the mean-squared feature difference.

    Symmetric, nonnegative, and zero exactly when the features agree.
    """
    if pred.dim() == 3:
        pred = pred[None]
    if gt.dim() == 3:
        gt = gt[None]
    with torch.no_grad():
        pf = extractor(pred)
        gf = extractor(gt)
        total = 0.0
        for p, g in zip(pf, gf):
            total += float(((p - g) ** 2).mean())
    return total / len(pf)


class EvalReport:
    """Per-bucket accumulation of the four metrics.

    Buckets with no samples are omitted from both serializations; reported
    buckets therefore always carry positive counts.  A bucket containing an
    identical reconstruction reports infinite mean PSNR.
    """

    METRICS = ("psnr", "ssim", "l1_pct", "perc_dist")

    def __init__(self, buckets: Sequence[str] = BUCKET_LABELS,
                 note: str = COMPOSITED_NOTE):
        self.buckets = tuple(buckets)
        self.note = note
        self._sums = {b: {m: 0.0 for m in self.METRICS} for b in self.buckets}
        self._counts = {b: 0 for b in self.buckets}

    def add(self, bucket: str, *, psnr: float, ssim: float, l1_pct: float,
            perc_dist: float) -> None:
        if bucket not in self._sums:
            raise KeyError(f"unknown bucket {bucket!r}; expected one of "
                           f"{self.buckets}")
        row = self._sums[bucket]
        row["psnr"] += psnr
        row["ssim"] += ssim
        row["l1_pct"] += l1_pct
        row["perc_dist"] += perc_dist
        self._counts[bucket] += 1

    def count(self, bucket: str) -> int:
        return self._counts[bucket]

    def mean(self, bucket: str, metric: str) -> float:
        n = self._counts[bucket]
        if n == 0:
            raise ValueError(f"bucket {bucket!r} has no samples")
        return self._sums[bucket][metric] / n

    def rows(self):
        for b in self.buckets:
            if self._counts[b] == 0:
                continue
            yield {"bucket": b, "count": self._counts[b],
                   **{m: self.mean(b, m) for m in self.METRICS}}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {self.note}\n")
            writer = csv.DictWriter(fh, fieldnames=["bucket", "count",
                                                    *self.METRICS])
            writer.writeheader()
            for row in self.rows():
                writer.writerow(row)

    def to_table(self) -> str:
        rows = list(self.rows())
        lines = [self.note]
        header = f"{'metric':<10}" + "".join(f"{r['bucket']:>12}" for r in rows)
        lines.append(header)
        lines.append(f"{'count':<10}" + "".join(f"{r['count']:>12d}" for r in rows))
        for m in self.METRICS:
            lines.append(f"{m:<10}" + "".join(f"{r[m]:>12.4f}" for r in rows))
        return "\n".join(lines)
