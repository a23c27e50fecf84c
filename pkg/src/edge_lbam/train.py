"""Training orchestration: edge completion, inpainting, joint finetuning.

Stage defaults, applied when the corresponding config field is left unset:

====== ======= ========== ======
stage  lr      adam_beta1 epochs
====== ======= ========== ======
mecnet 1e-4    0.1        400
inpaint 2.5e-5 0.5        400
joint  1e-5    0.5        100
====== ======= ========== ======

Note the edge stage's first-moment decay of 0.1. That is not a typo for the
usual 0.5: the edge-completion optimizer deliberately runs Adam with
betas=(0.1, 0.999), keeping almost no gradient momentum, while the
inpainting and joint stages use the conventional betas=(0.5, 0.999).

Determinism is stateless by construction: batch membership is keyed by
(seed, stage, epoch), per-sample crops and masks by (seed, epoch, index)
inside the dataset, and the gradient-penalty mixing draw by (seed, step).
No step reads mutable RNG state carried over from earlier steps, so a run
resumed from a checkpoint at step k replays steps k+1.. exactly as the
uninterrupted run would, and two runs with the same seed produce identical
loss logs in single-worker mode.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

import edge_lbam
from edge_lbam.data import InpaintDataset, load_manifest
from edge_lbam.inpaint import InpaintUNet, UNetConfig
from edge_lbam.losses import (
    LossWeights,
    RandomFeaturePyramid,
    TwoColumnCritic,
    VGG16FeaturePyramid,
    adversarial_losses,
    l1_loss,
    perceptual_loss,
    style_loss,
    total_loss,
)
from edge_lbam.mecnet import (
    EdgePatchDiscriminator,
    MECNet,
    MECNetConfig,
    mecnet_discriminator_loss,
    mecnet_generator_loss,
    multi_loss_objective,
)

logger = logging.getLogger(__name__)

STAGES = ("mecnet", "inpaint", "joint")

# per stage: (learning rate, Adam first-moment decay, epochs)
STAGE_DEFAULTS = {
    "mecnet": (1e-4, 0.1, 400),
    "inpaint": (2.5e-5, 0.5, 400),
    "joint": (1e-5, 0.5, 100),
}
ADAM_BETA2 = 0.999

# The edge discriminator steps at a tenth of the generator rate: the
# reconstruction term is a feature-matching distance measured in the
# discriminator's own feature space, and that space has to move slowly for
# the generator to make headway against it.
MECNET_DISC_LR_RATIO = 0.1

CHECKPOINT_VERSION = 1

INPAINT_LOG_COLUMNS = ("step", "l1", "adv", "perc", "style", "total", "disc", "gp")
MECNET_LOG_COLUMNS = ("step", "adv", "rec", "total", "disc")


@dataclass
class TrainConfig:
    """One stage's knobs.  lr, adam_beta1, and epochs default per stage
    (see the module table) when left as None.

    ``iterations`` caps the run at an explicit step count, replacing the
    epoch budget; desk-scale runs always use it.  ``overfit`` turns the
    stage into a memorization check: the adversarial, perceptual, and style
    terms drop out so the pixel term is optimized alone, and image crops are
    pinned so the run memorizes a fixed set of pictures while the holes
    keep refreshing every epoch.
    """

    stage: str = "inpaint"
    lr: Optional[float] = None
    adam_beta1: Optional[float] = None
    batch_size: int = 8
    epochs: Optional[int] = None
    iterations: Optional[int] = None
    variant: str = "Edge-LBAM"
    mecnet_variant: str = "full"
    seed: int = 0
    desk_scale: bool = False
    overfit: bool = False
    size: Optional[int] = None
    resize_min: Optional[int] = None
    log_every: int = 1
    checkpoint_every: int = 0   # 0 writes only the final checkpoint
    vgg_weights: Optional[str] = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        if self.overfit:
            # memorization in a couple thousand steps needs a far hotter
            # rate than the full-scale schedule
            return 1e-3
        return STAGE_DEFAULTS[self.stage][0]

    def betas(self) -> tuple:
        beta1 = STAGE_DEFAULTS[self.stage][1] \
            if self.adam_beta1 is None else self.adam_beta1
        return (beta1, ADAM_BETA2)

    def resolved_epochs(self) -> int:
        return STAGE_DEFAULTS[self.stage][2] if self.epochs is None else self.epochs

    def resolved_size(self) -> int:
        return self.size if self.size is not None else (64 if self.desk_scale else 256)

    def resolved_resize_min(self) -> int:
        if self.resize_min is not None:
            return self.resize_min
        return 72 if self.desk_scale else 350

    def total_steps(self, num_images: int) -> int:
        if self.iterations is not None:
            return self.iterations
        return self.resolved_epochs() * steps_per_epoch(num_images, self.batch_size)

    def unet_config(self) -> UNetConfig:
        return (UNetConfig.desk(self.variant) if self.desk_scale
                else UNetConfig.full(self.variant))

    def mecnet_config(self) -> MECNetConfig:
        if self.desk_scale:
            return MECNetConfig.desk(self.mecnet_variant)
        if self.mecnet_variant == "single_scale":
            return MECNetConfig.single_scale()
        return MECNetConfig(variant=self.mecnet_variant)

    def loss_weights(self) -> LossWeights:
        if self.overfit:
            return LossWeights(lambda2=0.0, lambda3=0.0, lambda4=0.0)
        return LossWeights()


def _require_stage(config: TrainConfig, stage: str) -> None:
    if config.stage != stage:
        raise ValueError(f"config.stage is {config.stage!r}, expected {stage!r}")


def resolve_images(manifest) -> list:
    if isinstance(manifest, (str, Path)):
        images = load_manifest(manifest)
    else:
        images = list(manifest)
    if not images:
        raise ValueError("manifest lists no images")
    return images


# ---------------------------------------------------------------------------
# stateless sampling


def step_seed(seed: int, tag: str, step: int) -> int:
    """Stable 63-bit key for the RNG used at one step of one consumer."""
    digest = hashlib.blake2b(f"{seed}:{tag}:{step}".encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "big") & 0x7FFF_FFFF_FFFF_FFFF


def steps_per_epoch(num_images: int, batch_size: int) -> int:
    return max(1, num_images // batch_size)


def epoch_indices(num_images: int, batch_size: int, seed: int, tag: str,
                  step: int) -> tuple:
    """(epoch, batch indices) for a global step.

    Each epoch is an independent keyed permutation of the dataset, consumed
    in batch-size slices; with fewer images than the batch size the batch
    simply shrinks.  Pure function of its arguments, hence resume-safe.
    """
    per = steps_per_epoch(num_images, batch_size)
    epoch, pos = divmod(step, per)
    rng = np.random.default_rng(step_seed(seed, f"order:{tag}", epoch))
    perm = rng.permutation(num_images)
    chosen = perm[pos * batch_size:(pos + 1) * batch_size]
    return epoch, [int(i) for i in chosen]


def load_batch(dataset: InpaintDataset, indices: Sequence) -> dict:
    samples = [dataset[i] for i in indices]
    batch = {}
    for key in ("image_gt", "image_corrupt", "mask", "edge_gt", "edge_corrupt"):
        batch[key] = torch.stack([s[key] for s in samples])
    return batch


def _fetch(dataset: InpaintDataset, config: TrainConfig, tag: str, step: int) -> dict:
    epoch, indices = epoch_indices(len(dataset), config.batch_size,
                                   config.seed, tag, step)
    dataset.set_epoch(epoch)
    return load_batch(dataset, indices)


# ---------------------------------------------------------------------------
# loss logs


class LossLog:
    """Append-only CSV of per-step scalars, flushed after every row so an
    interrupted run still leaves a readable log behind."""

    def __init__(self, path, columns: Sequence):
        self.path = Path(path)
        self.columns = tuple(columns)
        self._fh = open(self.path, "a" if self.path.exists() else "w",
                        newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        if self._fh.tell() == 0:
            self._writer.writerow(self.columns)
            self._fh.flush()

    def append(self, values: dict) -> None:
        missing = set(self.columns) - set(values)
        if missing:
            raise ValueError(f"log row missing columns: {sorted(missing)}")
        self._writer.writerow([_fmt(values[c]) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(value) -> str:
    if isinstance(value, torch.Tensor):
        value = value.item()
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".12g")


def read_loss_log(path) -> list:
    """Rows of a loss CSV as dicts of floats (step stays an int)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "step" else float(v))
                         for k, v in row.items()})
    return rows


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path, expect_kind: Optional[str] = None) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint {path} has version {version}; "
            f"this build reads version {CHECKPOINT_VERSION}")
    if expect_kind is not None and payload.get("kind") != expect_kind:
        raise ValueError(
            f"checkpoint {path} holds a {payload.get('kind')!r} model, "
            f"expected {expect_kind!r}")
    return payload


def _payload(kind: str, arch, config: TrainConfig, step: int, **states) -> dict:
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "package": edge_lbam.__version__,
        "arch": dataclasses.asdict(arch),
        "train": dataclasses.asdict(config),
        "step": step,
    }
    payload.update(states)
    return payload


def mecnet_from_checkpoint(path) -> tuple:
    """(model in eval mode, full payload) from an edge-stage checkpoint."""
    payload = load_checkpoint(path, expect_kind="mecnet")
    arch = dict(payload["arch"])
    arch["scales"] = tuple(arch["scales"])
    model = MECNet(MECNetConfig(**arch))
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload


def inpaint_from_checkpoint(path) -> tuple:
    """(model in eval mode, full payload) from an inpainting checkpoint."""
    payload = load_checkpoint(path, expect_kind="inpaint")
    arch = dict(payload["arch"])
    arch["channels"] = tuple(arch["channels"])
    model = InpaintUNet(UNetConfig(**arch))
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload


def _critic_for(config: TrainConfig) -> TwoColumnCritic:
    if config.desk_scale:
        return TwoColumnCritic(base_channels=16, layers=4, max_channels=128)
    return TwoColumnCritic()


def _extractor_for(config: TrainConfig):
    if config.vgg_weights is not None:
        return VGG16FeaturePyramid(config.vgg_weights)
    return RandomFeaturePyramid(seed=config.seed)


def _dataset_for(config: TrainConfig, images) -> InpaintDataset:
    return InpaintDataset(images, seed=config.seed, train=True,
                          size=config.resolved_size(),
                          resize_min=config.resolved_resize_min(),
                          pin_content=config.overfit)


# ---------------------------------------------------------------------------
# stage 1: edge completion


def train_mecnet(config: TrainConfig, manifest, run_dir,
                 resume=None) -> Path:
    """Alternate discriminator and generator steps on the edge objective.

    Writes loss_mecnet.csv plus periodic and final checkpoints under
    ``run_dir``; returns the final checkpoint path.
    """
    _require_stage(config, "mecnet")
    images = resolve_images(manifest)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    arch = config.mecnet_config()
    gen = MECNet(arch)
    disc = EdgePatchDiscriminator(
        base_channels=16 if config.desk_scale else 64)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.resolved_lr(),
                             betas=config.betas())
    opt_d = torch.optim.Adam(disc.parameters(),
                             lr=config.resolved_lr() * MECNET_DISC_LR_RATIO,
                             betas=config.betas())

    start = 0
    if resume is not None:
        payload = load_checkpoint(resume, expect_kind="mecnet")
        gen.load_state_dict(payload["model"])
        disc.load_state_dict(payload["disc"])
        opt_g.load_state_dict(payload["optimizer"])
        opt_d.load_state_dict(payload["disc_optimizer"])
        start = payload["step"]

    dataset = _dataset_for(config, images)
    total = config.total_steps(len(dataset))

    def checkpoint(step: int) -> dict:
        return _payload("mecnet", arch, config, step,
                        model=gen.state_dict(), optimizer=opt_g.state_dict(),
                        disc=disc.state_dict(),
                        disc_optimizer=opt_d.state_dict())

    with LossLog(run_dir / "loss_mecnet.csv", MECNET_LOG_COLUMNS) as log:
        for step in range(start, total):
            batch = _fetch(dataset, config, "mecnet", step)
            image = batch["image_corrupt"]
            prediction = gen(image, batch["mask"], batch["edge_corrupt"])

            d_loss = mecnet_discriminator_loss(prediction.edges,
                                               batch["edge_gt"], image, disc)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            if arch.variant == "multi_loss":
                g = multi_loss_objective(prediction, batch["edge_gt"], image, disc)
            else:
                g = mecnet_generator_loss(prediction.edges, batch["edge_gt"],
                                          image, disc)
            opt_g.zero_grad()
            g.total.backward()
            opt_g.step()

            if (step + 1) % config.log_every == 0 or step + 1 == total:
                log.append({"step": step + 1, "adv": g.adversarial,
                            "rec": g.reconstruction, "total": g.total,
                            "disc": d_loss})
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                write_checkpoint(run_dir / f"mecnet_{step + 1:06d}.pt",
                                 checkpoint(step + 1))

    final = write_checkpoint(run_dir / "mecnet_final.pt", checkpoint(total))
    logger.info("edge stage done at step %d: %s", total, final)
    return final


# ---------------------------------------------------------------------------
# stage 2: inpainting


EDGE_SOURCES = ("ground_truth", "mecnet_checkpoint")


def _edge_provider(config: TrainConfig, needs_edges: bool, edge_source,
                   mecnet_checkpoint):
    """Callable(batch) -> edge map or None, per the configured source."""
    if not needs_edges:
        return lambda batch: None
    if edge_source is None:
        raise ValueError(
            f"variant {config.variant!r} consumes edges; pass an edge source")
    if edge_source not in EDGE_SOURCES:
        raise ValueError(f"edge_source must be one of {EDGE_SOURCES}")
    if edge_source == "ground_truth":
        return lambda batch: batch["edge_gt"]
    if mecnet_checkpoint is None:
        raise ValueError("edge_source 'mecnet_checkpoint' needs a checkpoint path")
    edge_model, _ = mecnet_from_checkpoint(mecnet_checkpoint)
    for p in edge_model.parameters():
        p.requires_grad_(False)

    def predict(batch):
        with torch.no_grad():
            return edge_model(batch["image_corrupt"], batch["mask"],
                              batch["edge_corrupt"]).edges
    return predict


def train_inpaint(config: TrainConfig, manifest, run_dir,
                  edge_source: Optional[str] = "ground_truth",
                  mecnet_checkpoint=None, resume=None) -> Path:
    """Stage-2 training of the attention U-Net under the four-term objective.

    Per step: one critic update (Wasserstein loss with gradient penalty on
    the composited output), then one generator update, then projection of
    the attention shape parameters onto their valid ranges.  In overfit
    mode the critic is left untouched and the objective is the pixel term.
    """
    _require_stage(config, "inpaint")
    images = resolve_images(manifest)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    arch = config.unet_config()
    net = InpaintUNet(arch)
    critic = _critic_for(config)
    extractor = _extractor_for(config)
    opt_g = torch.optim.Adam(net.parameters(), lr=config.resolved_lr(),
                             betas=config.betas())
    opt_c = torch.optim.Adam(critic.parameters(), lr=config.resolved_lr(),
                             betas=config.betas())

    edges_for = _edge_provider(config, arch.uses_edge, edge_source,
                               mecnet_checkpoint)

    start = 0
    if resume is not None:
        payload = load_checkpoint(resume, expect_kind="inpaint")
        net.load_state_dict(payload["model"])
        critic.load_state_dict(payload["critic"])
        opt_g.load_state_dict(payload["optimizer"])
        opt_c.load_state_dict(payload["critic_optimizer"])
        start = payload["step"]

    dataset = _dataset_for(config, images)
    total = config.total_steps(len(dataset))
    weights = config.loss_weights()

    def checkpoint(step: int) -> dict:
        return _payload("inpaint", arch, config, step,
                        model=net.state_dict(), optimizer=opt_g.state_dict(),
                        critic=critic.state_dict(),
                        critic_optimizer=opt_c.state_dict(),
                        edge_source=edge_source if arch.uses_edge else None)

    with LossLog(run_dir / "loss_inpaint.csv", INPAINT_LOG_COLUMNS) as log:
        for step in range(start, total):
            batch = _fetch(dataset, config, "inpaint", step)
            scalars = _inpaint_step(net, critic, extractor, opt_g, opt_c,
                                    batch, edges_for(batch), weights,
                                    config.seed, step)
            if (step + 1) % config.log_every == 0 or step + 1 == total:
                scalars["step"] = step + 1
                log.append(scalars)
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                write_checkpoint(run_dir / f"inpaint_{step + 1:06d}.pt",
                                 checkpoint(step + 1))

    final = write_checkpoint(run_dir / "inpaint_final.pt", checkpoint(total))
    logger.info("inpainting stage done at step %d: %s", total, final)
    return final


def _inpaint_step(net, critic, extractor, opt_g, opt_c, batch, edge_hat,
                  weights: LossWeights, seed: int, step: int,
                  extra_params=()) -> dict:
    """One critic update followed by one generator update; returns the
    logged scalars.  ``extra_params`` join the generator update (used by
    joint finetuning, where the edge network trains through edge_hat)."""
    image_gt = batch["image_gt"]
    mask = batch["mask"]
    out = net(batch["image_corrupt"], mask, edge_hat)
    pred = (out.raw + 1.0) / 2.0
    comp = out.composited

    adversarial_on = weights.lambda2 != 0.0
    zero = image_gt.new_zeros(())
    if adversarial_on:
        eps_gen = torch.Generator().manual_seed(step_seed(seed, "gp", step))
        d = adversarial_losses(comp.detach(), image_gt, critic, mask,
                               generator=eps_gen)
        opt_c.zero_grad()
        d.disc.backward()
        opt_c.step()
        adv = adversarial_losses(comp, image_gt, critic, mask,
                                 with_penalty=False).gen
        disc_scalar, gp_scalar = d.disc, d.penalty
    else:
        adv, disc_scalar, gp_scalar = zero, zero, zero

    l1 = l1_loss(pred, image_gt)
    if weights.lambda3 != 0.0 or weights.lambda4 != 0.0:
        perc = perceptual_loss(comp, image_gt, extractor)
        style = style_loss(comp, image_gt, extractor)
    else:
        perc, style = zero, zero

    total = total_loss(l1, adv, perc, style, weights)
    opt_g.zero_grad()
    total.backward()
    opt_g.step()
    net.project_attention_()

    return {"l1": l1, "adv": adv, "perc": perc, "style": style,
            "total": total, "disc": disc_scalar, "gp": gp_scalar}


# ---------------------------------------------------------------------------
# stage 3: joint finetuning


def finetune_joint(mecnet_checkpoint, inpaint_checkpoint, config: TrainConfig,
                   manifest, run_dir, resume=None) -> tuple:
    """Finetune both networks end to end under the inpainting objective.

    The predicted edge map enters the U-Net without detaching, so the
    inpainting losses backpropagate through it into the edge network; one
    Adam instance owns the union of both parameter sets.  Returns the pair
    of final checkpoint paths (edge network first).
    """
    _require_stage(config, "joint")
    images = resolve_images(manifest)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    edge_net, _ = mecnet_from_checkpoint(mecnet_checkpoint)
    net, inpaint_payload = inpaint_from_checkpoint(inpaint_checkpoint)
    if not net.config.uses_edge:
        raise ValueError(
            f"variant {net.config.variant!r} consumes no edges; "
            "joint finetuning would leave the edge network untrained")
    edge_net.train()
    net.train()

    torch.manual_seed(config.seed)
    critic = _critic_for(config)
    critic.load_state_dict(inpaint_payload["critic"])
    extractor = _extractor_for(config)
    opt = torch.optim.Adam(list(edge_net.parameters()) + list(net.parameters()),
                           lr=config.resolved_lr(), betas=config.betas())
    opt_c = torch.optim.Adam(critic.parameters(), lr=config.resolved_lr(),
                             betas=config.betas())

    start = 0
    if resume is not None:
        payload = load_checkpoint(resume, expect_kind="joint")
        edge_net.load_state_dict(payload["mecnet_model"])
        net.load_state_dict(payload["model"])
        critic.load_state_dict(payload["critic"])
        opt.load_state_dict(payload["optimizer"])
        opt_c.load_state_dict(payload["critic_optimizer"])
        start = payload["step"]

    dataset = _dataset_for(config, images)
    total = config.total_steps(len(dataset))
    weights = config.loss_weights()

    def state(step: int) -> dict:
        return _payload("joint", net.config, config, step,
                        mecnet_arch=dataclasses.asdict(edge_net.config),
                        mecnet_model=edge_net.state_dict(),
                        model=net.state_dict(), optimizer=opt.state_dict(),
                        critic=critic.state_dict(),
                        critic_optimizer=opt_c.state_dict())

    with LossLog(run_dir / "loss_joint.csv", INPAINT_LOG_COLUMNS) as log:
        for step in range(start, total):
            batch = _fetch(dataset, config, "joint", step)
            edge_hat = edge_net(batch["image_corrupt"], batch["mask"],
                                batch["edge_corrupt"]).edges
            scalars = _inpaint_step(net, critic, extractor, opt, opt_c,
                                    batch, edge_hat, weights,
                                    config.seed, step)
            if (step + 1) % config.log_every == 0 or step + 1 == total:
                scalars["step"] = step + 1
                log.append(scalars)
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                write_checkpoint(run_dir / f"joint_{step + 1:06d}.pt",
                                 state(step + 1))

    mecnet_final = write_checkpoint(
        run_dir / "mecnet_joint_final.pt",
        _payload("mecnet", edge_net.config, config, total,
                 model=edge_net.state_dict(), optimizer=None,
                 disc=None, disc_optimizer=None))
    inpaint_final = write_checkpoint(
        run_dir / "inpaint_joint_final.pt",
        _payload("inpaint", net.config, config, total,
                 model=net.state_dict(), optimizer=None,
                 critic=critic.state_dict(), critic_optimizer=None,
                 edge_source="mecnet_checkpoint"))
    logger.info("joint stage done at step %d", total)
    return mecnet_final, inpaint_final
