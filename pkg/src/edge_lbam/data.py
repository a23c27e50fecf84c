"""Dataset ingestion, irregular-mask generation, and sample assembly.

Masks are {0,1} maps with 1 on known pixels and 0 in holes, drawn as random
thick-stroke walks plus ellipses until the hole fraction lands in a declared
area bucket.  Everything is seeded with numpy Generators; evaluation masks
are keyed by a stable checksum of (image id, eval seed, bucket) so every
model variant sees the same damage on the same image.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import cv2
import numpy as np
import torch
from PIL import Image

from edge_lbam.edges import canny, corrupted_edges

logger = logging.getLogger(__name__)

RATIO_BUCKETS: tuple[tuple[float, float], ...] = (
    (0.1, 0.2), (0.2, 0.3), (0.3, 0.4), (0.4, 0.5),
)


def bucket_label(bucket: tuple[float, float]) -> str:
    lo, hi = bucket
    return f"{round(lo * 100)}-{round(hi * 100)}%"


BUCKET_LABELS: tuple[str, ...] = tuple(bucket_label(b) for b in RATIO_BUCKETS)


def bucket_of(ratio: float) -> Optional[tuple[float, float]]:
    """The (lo, hi] bucket containing a hole ratio, or None."""
    for lo, hi in RATIO_BUCKETS:
        if lo < ratio <= hi:
            return (lo, hi)
    return None


@dataclass(frozen=True)
class MaskSpec:
    """A request for one mask: target hole-area bucket plus RNG seed."""

    ratio_bucket: tuple[float, float]
    seed: int

    def __post_init__(self):
        if tuple(self.ratio_bucket) not in RATIO_BUCKETS:
            raise ValueError(f"unknown ratio bucket {self.ratio_bucket}; "
                             f"valid buckets: {RATIO_BUCKETS}")


def _draw_stroke(canvas: np.ndarray, rng: np.random.Generator) -> None:
    """One random thick polyline walk, holes drawn as zeros."""
    h, w = canvas.shape
    scale = min(h, w)
    x = int(rng.integers(0, w))
    y = int(rng.integers(0, h))
    angle = rng.uniform(0, 2 * np.pi)
    thickness = int(rng.integers(max(2, scale // 24), max(3, scale // 9)))
    for _ in range(int(rng.integers(3, 8))):
        angle += rng.uniform(-1.0, 1.0)
        length = int(rng.integers(scale // 8, scale // 3))
        nx = int(np.clip(x + length * np.cos(angle), 0, w - 1))
        ny = int(np.clip(y + length * np.sin(angle), 0, h - 1))
        cv2.line(canvas, (x, y), (nx, ny), 0, thickness)
        x, y = nx, ny


def _draw_ellipse(canvas: np.ndarray, rng: np.random.Generator) -> None:
    h, w = canvas.shape
    scale = min(h, w)
    center = (int(rng.integers(0, w)), int(rng.integers(0, h)))
    axes = (int(rng.integers(scale // 16, scale // 5)),
            int(rng.integers(scale // 16, scale // 5)))
    angle = float(rng.uniform(0, 180))
    cv2.ellipse(canvas, center, axes, angle, 0, 360, 0, -1)


def generate_irregular_mask(spec: MaskSpec, size: Union[int, tuple[int, int]],
                            max_attempts: int = 200) -> np.ndarray:
    """Free-form binary mask whose hole fraction lies in the spec's bucket.

    Shapes are added one at a time; an attempt restarts when the running
    hole fraction overshoots the bucket.  Deterministic per (spec, size).
    """
    h, w = (size, size) if isinstance(size, int) else size
    lo, hi = spec.ratio_bucket
    rng = np.random.default_rng(spec.seed)
    area = h * w
    for _ in range(max_attempts):
        canvas = np.full((h, w), 1, dtype=np.uint8)
        for _ in range(64):
            if rng.random() < 0.7:
                _draw_stroke(canvas, rng)
            else:
                _draw_ellipse(canvas, rng)
            ratio = 1.0 - canvas.sum() / area
            if ratio > hi:
                break
            if ratio > lo:
                return canvas.astype(np.float32)
    raise ValueError(
        f"could not reach hole ratio in ({lo}, {hi}] at size {h}x{w} "
        f"after {max_attempts} attempts; size is likely too small")


def mask_hole_ratio(mask: np.ndarray) -> float:
    return float(1.0 - np.asarray(mask, dtype=np.float64).mean())


def eval_mask_seed(image_id: str, eval_seed: int, bucket: tuple[float, float]) -> int:
    """Stable cross-run seed for an evaluation mask.

    Built from a CRC of the identifying strings, never from builtin hash()
    (which is salted per process).
    """
    key = f"{image_id}|{eval_seed}|{bucket_label(bucket)}".encode("utf-8")
    return zlib.crc32(key)


def save_mask(path, mask: np.ndarray) -> None:
    """Persist a {0,1} mask as an 8-bit single-channel image (0 or 255)."""
    arr = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.float32)


def load_image(path) -> Optional[np.ndarray]:
    """Decode an RGB image to (H, W, 3) float32 in [0, 1]; None on failure."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        if arr.ndim != 3 or min(arr.shape[:2]) < 2:
            raise ValueError(f"degenerate image shape {arr.shape}")
        return arr
    except Exception as e:
        logger.warning("skipping unreadable image %s: %s", path, e)
        return None


def preprocess(image: np.ndarray, rng: Optional[np.random.Generator] = None,
               resize_min: int = 350, crop: int = 256,
               train: bool = True) -> np.ndarray:
    """Scale the short side to ``resize_min``, take a random ``crop`` square,
    and (in training) flip horizontally with probability 0.5.

    With ``rng=None`` or ``train=False`` the crop is centered and no flip is
    applied, so evaluation is deterministic without a generator.
    """
    h, w = image.shape[:2]
    scale = resize_min / min(h, w)
    nh, nw = max(crop, round(h * scale)), max(crop, round(w * scale))
    resized = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
    if train and rng is not None:
        top = int(rng.integers(0, nh - crop + 1))
        left = int(rng.integers(0, nw - crop + 1))
    else:
        top, left = (nh - crop) // 2, (nw - crop) // 2
    out = resized[top:top + crop, left:left + crop]
    if train and rng is not None and rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


@dataclass
class Sample:
    """One training/eval example: clean image, mask, and both edge maps."""

    image_gt: torch.Tensor     # (3, H, W) in [0, 1]
    mask: torch.Tensor         # (1, H, W) in {0, 1}, 1 = known
    edge_gt: torch.Tensor      # (1, H, W) in {0, 1}
    edge_corrupt: torch.Tensor  # (1, H, W) in {0, 1}

    @property
    def image_corrupt(self) -> torch.Tensor:
        """Known pixels of the clean image, holes filled with the known mean."""
        known = self.mask
        total = known.sum()
        fill = (self.image_gt * known).sum(dim=(1, 2), keepdim=True) / total \
            if total > 0 else torch.zeros(3, 1, 1)
        return self.image_gt * known + fill * (1.0 - known)


def rgb_to_gray(image: np.ndarray) -> np.ndarray:
    """Luminance plane of an (H, W, 3) or (3, H, W) image."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = arr.transpose(1, 2, 0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an RGB image, got shape {arr.shape}")
    return arr @ np.asarray([0.299, 0.587, 0.114])


def make_sample(image_gt: np.ndarray, mask: np.ndarray,
                sigma: float = 2.0, low: Optional[float] = None,
                high: Optional[float] = None) -> Sample:
    """Assemble a Sample: clean edges from the clean image, incomplete edges
    from the corrupted one."""
    gray = rgb_to_gray(image_gt)
    edge_gt = canny(gray, sigma=sigma, low=low, high=high)
    edge_corrupt = corrupted_edges(gray, mask, sigma=sigma, low=low, high=high)
    chw = torch.from_numpy(np.ascontiguousarray(image_gt.transpose(2, 0, 1))).float()
    return Sample(
        image_gt=chw,
        mask=torch.from_numpy(np.asarray(mask, dtype=np.float32))[None],
        edge_gt=torch.from_numpy(edge_gt.astype(np.float32))[None],
        edge_corrupt=torch.from_numpy(edge_corrupt.astype(np.float32))[None],
    )


def load_manifest(path) -> list[Path]:
    """Image paths from a UTF-8 manifest, one per line, '#' comments allowed.

    Relative entries resolve against the manifest's directory.
    """
    base = Path(path).parent
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            entry = line.split("#", 1)[0].strip()
            if not entry:
                continue
            p = Path(entry)
            out.append(p if p.is_absolute() else base / p)
    return out


class InpaintDataset(torch.utils.data.Dataset):
    """Deterministic (image, mask, edges) pairing.

    Content draws (crop, flip) and mask draws come from independent streams,
    both keyed by (seed, epoch, index), so emitted samples are independent
    of worker count and iteration order.  In eval mode the mask bucket is
    fixed and the mask seed is the stable per-image key; in train mode the
    bucket and mask vary per index but reproduce exactly given the same
    seed, and ``set_epoch`` refreshes crops and masks between passes over
    the data without breaking that contract.  ``pin_content`` freezes the
    content stream's epoch term: crops stop refreshing while masks keep
    moving, which memorization harnesses use to fix the underlying pictures
    without fixing the holes.
    """

    def __init__(self, images: Sequence, seed: int = 0, train: bool = True,
                 size: int = 256, resize_min: int = 350,
                 eval_bucket: tuple[float, float] = RATIO_BUCKETS[0],
                 canny_sigma: float = 2.0, pin_content: bool = False):
        self.paths = []
        for p in images:
            if load_image(p) is not None:
                self.paths.append(Path(p))
        if not self.paths:
            raise ValueError("no readable images")
        self.seed = seed
        self.epoch = 0
        self.train = train
        self.size = size
        self.resize_min = resize_min
        self.eval_bucket = tuple(eval_bucket)
        self.canny_sigma = canny_sigma
        self.pin_content = pin_content

    def __len__(self) -> int:
        return len(self.paths)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = int(epoch)

    def __getitem__(self, index: int) -> dict:
        content_epoch = 0 if self.pin_content else self.epoch
        content_rng = np.random.default_rng((self.seed, content_epoch, index))
        # distinct trailing tag keeps the mask stream off the content stream
        mask_rng = np.random.default_rng((self.seed, self.epoch, index, 7919))
        image = load_image(self.paths[index])
        if image is None:
            raise RuntimeError(f"image became unreadable: {self.paths[index]}")
        image = preprocess(image, content_rng, resize_min=self.resize_min,
                           crop=self.size, train=self.train)
        if self.train:
            bucket = RATIO_BUCKETS[int(mask_rng.integers(0, len(RATIO_BUCKETS)))]
            mask_seed = int(mask_rng.integers(0, 2 ** 31))
        else:
            bucket = self.eval_bucket
            mask_seed = eval_mask_seed(self.paths[index].name, self.seed, bucket)
        mask = generate_irregular_mask(MaskSpec(bucket, mask_seed), self.size)
        sample = make_sample(image, mask, sigma=self.canny_sigma)
        return {
            "image_gt": sample.image_gt,
            "image_corrupt": sample.image_corrupt,
            "mask": sample.mask,
            "edge_gt": sample.edge_gt,
            "edge_corrupt": sample.edge_corrupt,
            "bucket": bucket_label(bucket),
            "path": str(self.paths[index]),
        }
