"""Bucketed evaluation reports and attention-map visualization.

The evaluation path writes three files per run: the delimited per-bucket
metric table (eval_report.csv), the same table rendered as text
(eval_report.txt), and a matplotlib bar-chart figure (eval_report.png).
All three are byte-stable across invocations with the same inputs.

Visualization emits one grayscale panel per map (the edge map, the first
three forward attention maps, and the three reverse maps just before the
output layer), a single-row grid of all seven, and a colorbar sidecar.
Attention panels are stretched to their own peak: the absolute scale of the
soft mask activations decays with depth, so each panel is displayed
relative to its own brightest point.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import NamedTuple, Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from edge_lbam.data import (
    RATIO_BUCKETS,
    InpaintDataset,
    bucket_label,
    bucket_of,
    load_image,
    load_mask,
    make_sample,
    mask_hole_ratio,
    preprocess,
    rgb_to_gray,
)
from edge_lbam.edges import corrupted_edges
from edge_lbam.inpaint import InpaintOutput, InpaintUNet, collect_mask_maps, composite
from edge_lbam.losses import RandomFeaturePyramid
from edge_lbam.metrics import (
    EvalReport,
    masked_l1_pct,
    perceptual_distance,
    psnr,
    ssim,
)
from edge_lbam.train import (
    resolve_images,
    inpaint_from_checkpoint,
    mecnet_from_checkpoint,
)

logger = logging.getLogger(__name__)

PANEL_FORWARD_LAYERS = (1, 2, 3)


def reverse_panel_layers(depth: int) -> tuple:
    """The three reverse-attention layers just before the output layer,
    as absolute indices into the 2*depth layer stack."""
    return (2 * depth - 3, 2 * depth - 2, 2 * depth - 1)


def _as_model(model):
    if isinstance(model, (str, Path)):
        return inpaint_from_checkpoint(model)[0]
    return model


def _as_mecnet(mecnet):
    if mecnet is None or isinstance(mecnet, torch.nn.Module):
        return mecnet
    return mecnet_from_checkpoint(mecnet)[0]


def predict_composited(model, image: torch.Tensor, mask: torch.Tensor,
                       edge: Optional[torch.Tensor]) -> torch.Tensor:
    """Composited prediction from a network or a plain callable.

    Callables may return either an InpaintOutput or a raw [0, 1] prediction
    tensor; raw predictions are composited here.
    """
    if isinstance(model, InpaintUNet):
        out = model(image, mask, edge if model.config.uses_edge else None)
        return out.composited
    out = model(image, mask, edge)
    if isinstance(out, InpaintOutput):
        return out.composited
    return composite(image, mask, out)


def _resolve_edge(model, image, mask, edge, mecnet):
    """Edge input for a single (image, mask) pair: the explicit map if
    given, otherwise the edge network's completion of the visible edges."""
    needs = isinstance(model, InpaintUNet) and model.config.uses_edge
    if edge is not None or not needs:
        return edge
    if mecnet is None:
        raise ValueError(
            "this variant consumes edges; pass an edge map or an edge-network "
            "checkpoint")
    gray = rgb_to_gray(image[0].detach().cpu().numpy())
    visible = corrupted_edges(gray, mask[0, 0].detach().cpu().numpy())
    visible = torch.from_numpy(visible.astype(np.float32))[None, None]
    with torch.no_grad():
        return mecnet(image, mask, visible).edges


# ---------------------------------------------------------------------------
# evaluation


def _sample_dict(sample) -> dict:
    return {"image_gt": sample.image_gt, "image_corrupt": sample.image_corrupt,
            "mask": sample.mask, "edge_gt": sample.edge_gt,
            "edge_corrupt": sample.edge_corrupt}


def _load_bucket_masks(mask_dir, buckets, size: int) -> dict:
    """Mask arrays from a directory, grouped by their own hole-ratio bucket."""
    grouped = {bucket_label(b): [] for b in buckets}
    for path in sorted(Path(mask_dir).glob("*.png")):
        mask = load_mask(path)
        if mask.shape != (size, size):
            raise ValueError(
                f"mask {path} has shape {mask.shape}, expected {(size, size)}")
        bucket = bucket_of(mask_hole_ratio(mask))
        if bucket is not None and bucket_label(bucket) in grouped:
            grouped[bucket_label(bucket)].append(mask)
    return grouped


def _manual_samples(images, masks, size: int, resize_min: int):
    for i, path in enumerate(images):
        arr = load_image(path)
        if arr is None:
            raise RuntimeError(f"image became unreadable: {path}")
        arr = preprocess(arr, None, resize_min=resize_min, crop=size,
                         train=False)
        yield _sample_dict(make_sample(arr, masks[i % len(masks)]))


def evaluate(model, manifest, run_dir, buckets=RATIO_BUCKETS,
             size: Optional[int] = None, resize_min: Optional[int] = None,
             mecnet=None, seed: int = 0, limit: Optional[int] = None,
             mask_dir=None) -> EvalReport:
    """Mean metrics per hole-ratio bucket, written as CSV, text table, and
    bar-chart figure under ``run_dir``.

    By default every image is evaluated once per bucket under its stable
    per-image mask; with ``mask_dir`` the masks come from files instead,
    bucketed by their measured hole ratio, and a bucket with no mask files
    is omitted from the report with a warning.  Edges come from the ground
    truth unless an edge-network checkpoint is given.  Reruns with the same
    inputs produce byte-identical report files.
    """
    model = _as_model(model)
    mecnet = _as_mecnet(mecnet)
    images = resolve_images(manifest)
    if limit is not None:
        images = images[:limit]
    if size is None:
        if not isinstance(model, InpaintUNet):
            raise ValueError("size is required when the model is a callable")
        size = model.config.resolution
    if resize_min is None:
        resize_min = size

    report = EvalReport(buckets=[bucket_label(b) for b in buckets])
    extractor = RandomFeaturePyramid(seed=seed)
    bucket_masks = (None if mask_dir is None
                    else _load_bucket_masks(mask_dir, buckets, size))

    with torch.no_grad():
        for bucket in buckets:
            label = bucket_label(bucket)
            if bucket_masks is not None:
                masks = bucket_masks[label]
                if not masks:
                    continue
                samples = _manual_samples(images, masks, size, resize_min)
            else:
                dataset = InpaintDataset(images, seed=seed, train=False,
                                         size=size, resize_min=resize_min,
                                         eval_bucket=bucket)
                samples = (dataset[i] for i in range(len(dataset)))
            for sample in samples:
                image = sample["image_corrupt"][None]
                mask = sample["mask"][None]
                if mecnet is None:
                    edge = sample["edge_gt"][None]
                else:
                    edge = mecnet(image, mask, sample["edge_corrupt"][None]).edges
                comp = predict_composited(model, image, mask, edge)
                gt = sample["image_gt"]
                report.add(label,
                           psnr=psnr(comp[0], gt),
                           ssim=ssim(comp[0], gt),
                           l1_pct=masked_l1_pct(comp[0], gt, sample["mask"]),
                           perc_dist=perceptual_distance(comp, gt[None],
                                                         extractor))

    for label in report.buckets:
        if report.count(label) == 0:
            logger.warning("bucket %s has no samples; omitted from the report",
                           label)

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(run_dir / "eval_report.csv")
    (run_dir / "eval_report.txt").write_text(report.to_table() + "\n",
                                             encoding="utf-8")
    _report_figure(report, run_dir / "eval_report.png")
    return report


def _report_figure(report: EvalReport, path) -> None:
    rows = list(report.rows())
    fig, axes = plt.subplots(2, 2, figsize=(8, 6))
    for ax, metric in zip(axes.flat, EvalReport.METRICS):
        values = [r[metric] if np.isfinite(r[metric]) else 0.0 for r in rows]
        ax.bar(range(len(rows)), values, color="#4878a8")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels([r["bucket"] for r in rows], rotation=45, fontsize=7)
        ax.set_title(metric, fontsize=9)
    fig.suptitle("metric means per hole-ratio bucket", fontsize=11)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# attention-map visualization


class MaskMapFiles(NamedTuple):
    """The seven panel files (edge map first, then forward layers 1-3, then
    the three late reverse layers), the row grid, and the colorbar."""

    panels: tuple
    grid: Path
    colorbar: Path


def region_means(map_tensor: torch.Tensor, mask: torch.Tensor) -> tuple:
    """(known-region mean, hole-region mean) of a display-normalized map.

    The hole indicator is area-pooled down to the map's resolution; pixels
    more than half inside the original hole count as hole, those more than
    half outside as known.
    """
    m = map_tensor.detach()
    while m.dim() > 2:
        m = m[0]
    peak = m.max()
    if peak > 0:
        m = m / peak
    hole = 1.0 - mask.detach().reshape(1, 1, *mask.shape[-2:])
    frac = F.adaptive_avg_pool2d(hole, m.shape)[0, 0]
    return (m[frac < 0.5].mean().item(), m[frac > 0.5].mean().item())


def _panel_array(tensor: torch.Tensor, size, normalize: bool = True) -> np.ndarray:
    t = tensor.detach()
    while t.dim() > 2:
        t = t[0]
    t = t.clamp(min=0)
    if normalize:
        peak = t.max()
        if peak > 0:
            t = t / peak
    t = F.interpolate(t[None, None], size=tuple(size), mode="nearest")[0, 0]
    return (t.clamp(max=1) * 255).round().to(torch.uint8).numpy()


def _write_grid(arrays, path) -> Path:
    sep = np.full((arrays[0].shape[0], 4), 255, np.uint8)
    cols = []
    for i, arr in enumerate(arrays):
        if i:
            cols.append(sep)
        cols.append(arr)
    Image.fromarray(np.concatenate(cols, axis=1), mode="L").save(path)
    return Path(path)


def _write_colorbar(path) -> Path:
    fig, ax = plt.subplots(figsize=(1.4, 4))
    mappable = matplotlib.cm.ScalarMappable(
        norm=matplotlib.colors.Normalize(0, 1), cmap="gray")
    fig.colorbar(mappable, cax=ax)
    ax.set_ylabel("attention, peak-normalized per panel", fontsize=8)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return Path(path)


def visualize_masks(model, image: torch.Tensor, mask: torch.Tensor, out_dir,
                    edge: Optional[torch.Tensor] = None,
                    mecnet=None) -> MaskMapFiles:
    """Render the traced attention maps of one forward pass to image files.

    Seven 8-bit grayscale panels: the edge map, forward maps for layers
    1-3, and reverse maps for the three layers before the output layer.
    Attention panels are peak-normalized; the edge panel keeps its [0, 1]
    scale.  Outputs are byte-stable for a fixed model and input.
    """
    model = _as_model(model)
    mecnet = _as_mecnet(mecnet)
    if image.dim() == 3:
        image = image[None]
    if mask.dim() == 3:
        mask = mask[None]
    if edge is not None and edge.dim() == 3:
        edge = edge[None]
    edge = _resolve_edge(model, image, mask, edge, mecnet)

    with torch.no_grad():
        _, trace = model(image, mask,
                         edge if model.config.uses_edge else None, trace=True)
    maps = dict(collect_mask_maps(trace))
    depth = len(model.config.channels)
    missing = [l for l in reverse_panel_layers(depth) if l not in maps]
    if missing:
        raise ValueError(
            f"variant {model.config.variant!r} keeps no reverse attention "
            "maps; visualization needs a reverse-capable checkpoint")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = image.shape[-2:]
    named = [("edge", edge if edge is not None else torch.zeros_like(mask), False)]
    for layer in PANEL_FORWARD_LAYERS:
        named.append((f"forward_{layer:02d}", maps[layer], True))
    for layer in reverse_panel_layers(depth):
        named.append((f"reverse_{layer:02d}", maps[layer], True))

    arrays, paths = [], []
    for i, (name, tensor, normalize) in enumerate(named):
        arr = _panel_array(tensor, size, normalize)
        path = out_dir / f"panel_{i}_{name}.png"
        Image.fromarray(arr, mode="L").save(path)
        arrays.append(arr)
        paths.append(path)

    grid = _write_grid(arrays, out_dir / "mask_maps.png")
    colorbar = _write_colorbar(out_dir / "mask_maps_colorbar.png")
    return MaskMapFiles(tuple(paths), grid, colorbar)


def inpaint_image(model, image: torch.Tensor, mask: torch.Tensor,
                  edge: Optional[torch.Tensor] = None,
                  mecnet=None) -> torch.Tensor:
    """Composited [0, 1] prediction for one image, resolving the edge input
    the same way visualize_masks does."""
    model = _as_model(model)
    mecnet = _as_mecnet(mecnet)
    if image.dim() == 3:
        image = image[None]
    if mask.dim() == 3:
        mask = mask[None]
    if edge is not None and edge.dim() == 3:
        edge = edge[None]
    edge = _resolve_edge(model, image, mask, edge, mecnet)
    with torch.no_grad():
        return predict_composited(model, image, mask, edge)
