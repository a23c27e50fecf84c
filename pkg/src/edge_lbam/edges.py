"""Binary edge maps for edge-guided inpainting.

Ground-truth edge maps come from clean grayscale images, incomplete ones from
corrupted images (holes filled with the known-pixel mean before detection,
responses near the hole wiped afterwards).  The detector is a Canny pipeline
built on scipy.ndimage primitives: Gaussian smoothing with border bleed-over
renormalization, Sobel gradients, bilinear-interpolated non-maximum
suppression, and connected-component hysteresis.

All computation runs in float64 so results are deterministic regardless of
the input container; torch tensors come back as torch, numpy as numpy.
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np
import scipy.ndimage as ndi
import torch
from PIL import Image
from torch import Tensor

ImageLike = Union[np.ndarray, Tensor]

DEFAULT_SIGMA = 2.0
# the standard automatic hysteresis rule for images in [0, 1]
DEFAULT_LOW_FRACTION = 0.1
DEFAULT_HIGH_FRACTION = 0.2


def _as_plane(image: ImageLike, name: str) -> np.ndarray:
    """Return a float64 (H, W) numpy view of a grayscale image."""
    if isinstance(image, Tensor):
        arr = image.detach().cpu().numpy()
    else:
        arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be single-channel (H, W) or (1, H, W), "
                         f"got shape {tuple(arr.shape)}")
    return np.ascontiguousarray(arr, dtype=np.float64)


def _like_input(edges: np.ndarray, reference: ImageLike):
    """Package a binary (H, W) edge plane in the caller's container type."""
    out = edges.astype(np.float32)
    if isinstance(reference, Tensor):
        t = torch.from_numpy(out)
        if reference.dim() == 3:
            t = t[None]
        return t.to(reference.device)
    if np.asarray(reference).ndim == 3:
        return out[None]
    return out


def _smooth_and_border(image: np.ndarray, sigma: float):
    """Gaussian smoothing with zero padding, renormalized by the smoothed
    all-ones field so border pixels are not darkened by the padding; the
    one-pixel border is excluded from detection outright."""
    kwargs = dict(sigma=sigma, mode="constant", cval=0.0, truncate=4.0)
    blurred = ndi.gaussian_filter(image, **kwargs)
    coverage = ndi.gaussian_filter(np.ones_like(image), **kwargs)
    smoothed = blurred / (coverage + np.finfo(np.float64).eps)
    interior = np.ones(image.shape, dtype=bool)
    interior[:1, :] = interior[-1:, :] = False
    interior[:, :1] = interior[:, -1:] = False
    return smoothed, interior


def _nonmax_suppression(isobel: np.ndarray, jsobel: np.ndarray,
                        magnitude: np.ndarray, keep: np.ndarray,
                        low: float) -> np.ndarray:
    """Thin the gradient magnitude to local maxima along the gradient
    direction, interpolating the two flanking neighbors bilinearly.

    A pixel survives when both interpolated neighbors are <= its own
    magnitude (ties kept) and its magnitude is >= ``low``.  Returns the
    magnitude where kept, 0 elsewhere.
    """
    abs_i = np.abs(isobel)
    abs_j = np.abs(jsobel)
    base = keep & (magnitude >= low)
    local_max = np.zeros(magnitude.shape, dtype=bool)

    # each entry: (sign test, ratio numerator/denominator, the four neighbor
    # slice pairs) for one 45-degree sector of gradient directions
    def sector(pts, w, offsets):
        m = magnitude[pts]
        (r1, s1), (r2, s2), (r3, s3), (r4, s4) = offsets
        c1 = magnitude[r1][pts[s1]]
        c2 = magnitude[r2][pts[s2]]
        c_plus = c2 * w + c1 * (1.0 - w) <= m
        c1 = magnitude[r3][pts[s3]]
        c2 = magnitude[r4][pts[s4]]
        c_minus = c2 * w + c1 * (1.0 - w) <= m
        local_max[pts] = c_plus & c_minus

    # 0 to 45 degrees: blend the vertical-axis neighbor with the diagonal
    pts = base & (((isobel >= 0) & (jsobel >= 0)) | ((isobel <= 0) & (jsobel <= 0))) \
        & (abs_i >= abs_j)
    if pts.any():
        sector(pts, abs_j[pts] / abs_i[pts], [
            (np.s_[1:, :], np.s_[:-1, :]), (np.s_[1:, 1:], np.s_[:-1, :-1]),
            (np.s_[:-1, :], np.s_[1:, :]), (np.s_[:-1, :-1], np.s_[1:, 1:]),
        ])
    # 45 to 90 degrees: blend the diagonal with the horizontal-axis neighbor
    pts = base & (((isobel >= 0) & (jsobel >= 0)) | ((isobel <= 0) & (jsobel <= 0))) \
        & (abs_i <= abs_j)
    if pts.any():
        sector(pts, abs_i[pts] / abs_j[pts], [
            (np.s_[:, 1:], np.s_[:, :-1]), (np.s_[1:, 1:], np.s_[:-1, :-1]),
            (np.s_[:, :-1], np.s_[:, 1:]), (np.s_[:-1, :-1], np.s_[1:, 1:]),
        ])
    # 90 to 135 degrees: anti-diagonal against the horizontal-axis neighbor
    pts = base & (((isobel <= 0) & (jsobel >= 0)) | ((isobel >= 0) & (jsobel <= 0))) \
        & (abs_i <= abs_j)
    if pts.any():
        sector(pts, abs_i[pts] / abs_j[pts], [
            (np.s_[:, 1:], np.s_[:, :-1]), (np.s_[:-1, 1:], np.s_[1:, :-1]),
            (np.s_[:, :-1], np.s_[:, 1:]), (np.s_[1:, :-1], np.s_[:-1, 1:]),
        ])
    # 135 to 180 degrees: anti-diagonal against the vertical-axis neighbor
    pts = base & (((isobel <= 0) & (jsobel >= 0)) | ((isobel >= 0) & (jsobel <= 0))) \
        & (abs_i >= abs_j)
    if pts.any():
        sector(pts, abs_j[pts] / abs_i[pts], [
            (np.s_[:-1, :], np.s_[1:, :]), (np.s_[:-1, 1:], np.s_[1:, :-1]),
            (np.s_[1:, :], np.s_[:-1, :]), (np.s_[1:, :-1], np.s_[:-1, 1:]),
        ])
    out = np.zeros_like(magnitude)
    out[local_max] = magnitude[local_max]
    return out


def _hysteresis(thinned: np.ndarray, high: float) -> np.ndarray:
    """Keep 8-connected components of the thinned response that contain at
    least one pixel reaching the high threshold."""
    low_mask = thinned > 0
    labels, count = ndi.label(low_mask, np.ones((3, 3), dtype=bool))
    if count == 0:
        return low_mask
    high_mask = low_mask & (thinned >= high)
    good = np.zeros(count + 1, dtype=bool)
    good[np.unique(labels[high_mask])] = True
    return good[labels]


def canny(image: ImageLike, sigma: float = DEFAULT_SIGMA,
          low: Optional[float] = None, high: Optional[float] = None):
    """Binary Canny edge map of a grayscale image in [0, 1].

    ``low``/``high`` default to the standard automatic rule for unit-range
    images (0.1 and 0.2).  Output is {0, 1}-valued in the input's container
    type and shape.
    """
    plane = _as_plane(image, "image")
    if plane.size and (plane.min() < 0.0 or plane.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    if low is None:
        low = DEFAULT_LOW_FRACTION
    if high is None:
        high = DEFAULT_HIGH_FRACTION
    if not 0.0 < low < high:
        raise ValueError(f"thresholds must satisfy 0 < low < high, got "
                         f"low={low}, high={high}")

    smoothed, interior = _smooth_and_border(plane, sigma)
    jsobel = ndi.sobel(smoothed, axis=1)
    isobel = ndi.sobel(smoothed, axis=0)
    magnitude = np.sqrt(isobel * isobel + jsobel * jsobel)
    thinned = _nonmax_suppression(isobel, jsobel, magnitude, interior, low)
    edges = _hysteresis(thinned, high)
    return _like_input(edges, image)


def corrupted_edges(image: ImageLike, mask: ImageLike,
                    sigma: float = DEFAULT_SIGMA,
                    low: Optional[float] = None, high: Optional[float] = None):
    """Incomplete edge map of a corrupted image.

    Holes (mask 0) are filled with the mean of the known pixels before
    detection, and responses inside the hole or within one pixel of its
    boundary are zeroed; detection artifacts at the fill seam never leak
    into the edge map.  The result times the mask equals the result.
    """
    plane = _as_plane(image, "image")
    mask_plane = _as_plane(mask, "mask")
    if plane.shape != mask_plane.shape:
        raise ValueError(f"image {plane.shape} and mask {mask_plane.shape} "
                         "resolutions differ")
    known = mask_plane > 0.5
    fill = float(plane[known].mean()) if known.any() else 0.0
    filled = np.where(known, plane, fill)
    edges = np.asarray(_as_plane(canny(filled, sigma=sigma, low=low, high=high),
                                 "edges"), dtype=bool)
    hole_grown = ndi.binary_dilation(~known, np.ones((3, 3), dtype=bool))
    edges[hole_grown] = False
    return _like_input(edges, image)


def save_edge_map(path, edges: ImageLike) -> None:
    """Persist a binary edge map as an 8-bit single-channel image (0 or 255)."""
    plane = _as_plane(edges, "edges")
    Image.fromarray(((plane > 0.5) * 255).astype(np.uint8), mode="L").save(path)


def load_edge_map(path) -> np.ndarray:
    """Load an edge map saved by :func:`save_edge_map` back to {0, 1} float32."""
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.float32)
