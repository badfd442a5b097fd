"""Training loop, inference and throughput benchmark."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from mccl import ops
from mccl.ail import adv_generator_loss, build_discriminator, disc_loss
from mccl.checkpoint import inference_state, load_checkpoint, save_checkpoint, CheckpointError
from mccl.data import (
    GroupBatch,
    ImageGroup,
    augment,
    dataset_roots,
    load_dataset,
    load_images,
    make_batch,
    normalize,
    save_gray,
)
from mccl.losses import LossWeights, bce_loss, iou_loss, total_generator_loss
from mccl.mcm import ConsensusMemory, mcm_loss, memory_update, unit
from mccl.model import ModelConfig, build_params, config_from_params, forward, predict_maps, probabilities
from mccl.nn import ParamStore
from mccl.optim import AdamW, clip_grad_norm
from mccl.tensor import Tape, Tensor, backward, suspend

log = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    image_size: int = 64
    n_groups_per_batch: int = 2
    group_cap: int = 16
    epochs: int = 200
    lr: float = 1e-4
    lr_drop_epochs_from_end: int = 20
    weight_decay: float = 1e-2
    beta: float = 0.1
    alpha: float = 0.1
    lambda1: float = 30.0
    lambda2: float = 0.5
    lambda3: float = 3.0
    lambda4: float = 10.0
    lambda5: float = 3.0
    seed: int = 0
    enable_gcam: bool = True
    enable_mcm: bool = True
    enable_ail: bool = True
    mcm_clamp: bool = False
    mcm_normalize: bool = True
    channels: tuple = (24, 48, 96, 192)
    clip_norm: float = 5.0
    augment: bool = True

    def __post_init__(self):
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        self.channels = tuple(int(c) for c in self.channels)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(channels=self.channels, use_gcam=self.enable_gcam)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: divided by 10 over the final epochs."""
        return self.lr / 10 if epoch > self.epochs - self.lr_drop_epochs_from_end else self.lr

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in dataclasses.fields(cls)}


@dataclass
class TrainState:
    cfg: TrainConfig
    params: ParamStore
    memory: ConsensusMemory
    gen_opt: AdamW
    disc: Optional[ParamStore] = None
    disc_opt: Optional[AdamW] = None
    steps: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig) -> "TrainState":
        params = build_params(cfg.model, seed=cfg.seed)
        disc = build_discriminator(seed=cfg.seed + 1) if cfg.enable_ail else None
        return cls(
            cfg=cfg,
            params=params,
            memory=ConsensusMemory(cfg.beta, cfg.alpha, clamp=cfg.mcm_clamp),
            gen_opt=AdamW(params.tensors(), cfg.lr, weight_decay=cfg.weight_decay),
            disc=disc,
            disc_opt=AdamW(disc.tensors(), cfg.lr, weight_decay=cfg.weight_decay) if disc is not None else None,
        )

    def state_dict(self) -> dict:
        out = dict(self.params.state())
        out.update(self.memory.state())
        if self.disc is not None:
            out.update(self.disc.state())
        return out


def discriminator_step(state: TrainState, pred: Tensor, gt: Tensor, source: Tensor, lr: float) -> float:
    """One discriminator update on detached predictions; returns the loss value."""
    state.disc_opt.zero_grad()
    with Tape() as tape:
        loss = disc_loss(pred.detach(), gt, source, state.disc, weight=state.cfg.lambda5)
    backward(loss, tape)
    clip_grad_norm(state.disc_opt.params, state.cfg.clip_norm)
    state.disc_opt.step(lr)
    return loss.item()


def gan_step(state: TrainState, batch: GroupBatch, lr: float, seeds: Sequence[Optional[int]]) -> tuple[dict, Optional[float]]:
    """One training step: generator forward, discriminator update, generator update.

    Returns the generator loss parts and the discriminator loss (None without AIL).
    """
    cfg = state.cfg
    src = Tensor(batch.images)
    gt = Tensor(batch.gts)
    state.gen_opt.zero_grad()
    parts: dict = {}
    disc_value = None
    with Tape() as tape:
        res = forward(Tensor(normalize(batch.images)), batch.class_ids, batch.group_sizes, state.params,
                      cfg.model, training=True, seeds=seeds)
        pred = probabilities(res.logits)
        bce = bce_loss(pred, gt)
        iou = iou_loss(pred, gt)
        l_mcm = None
        if cfg.enable_mcm:
            live = {}
            for r in res.consensus:
                pair = (unit(r.vec_a), unit(r.vec_b)) if cfg.mcm_normalize else (r.vec_a, r.vec_b)
                memory_update(state.memory, r.class_id, *pair)
                live[r.class_id] = pair
            l_mcm = mcm_loss(batch.class_ids, state.memory, live)
        l_adv = None
        if cfg.enable_ail:
            disc_value = discriminator_step(state, pred, gt, src, lr)
            l_adv = adv_generator_loss(pred, src, state.disc.frozen())
        total = total_generator_loss(bce, iou, l_mcm, l_adv, cfg.weights)
    backward(total, tape)
    clip_grad_norm(state.gen_opt.params, cfg.clip_norm)
    state.gen_opt.step(lr)
    state.steps += 1
    parts = {"L_BCE": bce.item(), "L_IoU": iou.item()}
    if l_mcm is not None:
        parts["L_MCM"] = l_mcm.item()
    if l_adv is not None:
        parts["L_adv"] = l_adv.item()
    parts["L_sal"] = total.item()
    return parts, disc_value


def epoch_batches(groups: Sequence[ImageGroup], cfg: TrainConfig, rng: np.random.Generator) -> list:
    """Class tuples for one epoch: a shuffled pass over every class, N at a time."""
    n = len(groups)
    N = cfg.n_groups_per_batch
    order = list(rng.permutation(n))
    tuples = []
    while order:
        chunk, order = order[:N], order[N:]
        if len(chunk) < N:
            pool = [i for i in range(n) if i not in chunk]
            chunk += [int(i) for i in rng.choice(pool, size=N - len(chunk), replace=False)]
        tuples.append([int(i) for i in chunk])
    return tuples


def augmented(batch: GroupBatch, rng: np.random.Generator) -> GroupBatch:
    imgs, gts = [], []
    for img, gt in zip(batch.images, batch.gts):
        a, b = augment(img, gt, rng)
        imgs.append(a)
        gts.append(b)
    return dataclasses.replace(batch, images=np.stack(imgs), gts=np.stack(gts))


@dataclass
class TrainResult:
    state: TrainState
    log: list = field(default_factory=list)
    checkpoint: Optional[Path] = None
    seconds: float = 0.0


LOG_COLUMNS = ("epoch", "L_BCE", "L_IoU", "L_MCM", "L_adv", "L_disc", "L_sal")


def log_columns(cfg: TrainConfig) -> list:
    cols = ["epoch", "L_BCE", "L_IoU"]
    if cfg.enable_mcm:
        cols.append("L_MCM")
    if cfg.enable_ail:
        cols += ["L_adv", "L_disc"]
    cols.append("L_sal")
    return cols


def train_on_groups(cfg: TrainConfig, groups: Sequence[ImageGroup], out_dir=None,
                    progress: bool = False, on_epoch: Optional[Callable] = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs; ``on_epoch(row, state)`` is called after each one."""
    if len(groups) < cfg.n_groups_per_batch:
        raise TrainError(f"{len(groups)} classes cannot fill batches of {cfg.n_groups_per_batch} groups")
    state = TrainState.create(cfg)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    t0 = time.time()
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        sums: dict = {}
        count = 0
        for step, classes in enumerate(epoch_batches(groups, cfg, rng)):
            try:
                batch = make_batch(groups, cfg.n_groups_per_batch, cfg.group_cap, rng, classes=classes)
                if cfg.augment:
                    batch = augmented(batch, rng)
                seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=len(classes))]
                parts, disc_value = gan_step(state, batch, lr, seeds)
            except Exception as exc:
                raise TrainError(f"epoch {epoch}, step {step}: {exc}") from exc
            if disc_value is not None:
                parts["L_disc"] = disc_value
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        row = {"epoch": epoch, **{k: v / count for k, v in sums.items()}}
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row, state)
        if progress and (epoch == 1 or epoch % 10 == 0 or epoch == cfg.epochs):
            log.info("epoch %d  L_sal %.4f  (%.0fs)", epoch, row["L_sal"], time.time() - t0)
    result = TrainResult(state, rows, seconds=time.time() - t0)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_checkpoint(out / "checkpoint.mccl", state.state_dict())
        write_log(out / "train_log.tsv", cfg, rows)
    return result


def train(cfg: TrainConfig, dataset_root, out_dir=None, progress: bool = False,
          on_epoch: Optional[Callable] = None) -> TrainResult:
    """Train on a dataset directory with ``images/`` and ``gts/`` sub-folders."""
    img_root, gt_root = dataset_roots(dataset_root)
    groups = load_dataset(img_root, gt_root, cfg.image_size)
    return train_on_groups(cfg, groups, out_dir, progress, on_epoch)


def write_log(path, cfg: TrainConfig, rows: list) -> None:
    cols = log_columns(cfg)
    with open(path, "w", newline="") as fh:
        for k, v in dataclasses.asdict(cfg).items():
            fh.write(f"# {k}={format_value(v)}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["epoch"]] + [f"{r[c]:.6f}" for c in cols[1:]])


def read_log(path) -> list:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines, delimiter="\t")
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in reader]


def format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


# ---------------------------------------------------------------------------
# inference

def load_inference_model(checkpoint) -> tuple[ParamStore, ModelConfig]:
    """Generator parameters only; memory and discriminator tensors are ignored."""
    state = inference_state(load_checkpoint(checkpoint)) if not isinstance(checkpoint, dict) else inference_state(checkpoint)
    try:
        cfg = config_from_params(state)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing tensor {exc.args[0]!r}") from None
    ps = build_params(cfg, seed=0)
    for name in list(ps.params) + list(ps.buffers):
        if name not in state:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
    ps.load_state(state)
    return ps, cfg


def predict_group(ps: ParamStore, cfg: ModelConfig, group: ImageGroup) -> list:
    with suspend():
        images = Tensor(normalize(np.stack(group.images)))
        res = forward(images, [group.class_id], [len(group)], ps, cfg, training=False)
    sizes = group.orig_sizes or [im.shape[1:] for im in group.images]
    return predict_maps(res.logits, sizes)


def infer(checkpoint, dataset_root, out_dir, image_size: int = 64) -> list:
    """Write one 8-bit PNG map per input image, mirroring ``<group>/<stem>`` layout."""
    ps, cfg = load_inference_model(checkpoint)
    root = Path(dataset_root)
    if (root / "images").is_dir():
        root = root / "images"
    out = Path(out_dir)
    written = []
    for group in load_images(root, image_size):
        maps = predict_group(ps, cfg, group)
        (out / group.class_id).mkdir(parents=True, exist_ok=True)
        for stem, m in zip(group.stems, maps):
            path = out / group.class_id / f"{stem}.png"
            save_gray(path, m)
            written.append(path)
    return written


def predict_groups(ps: ParamStore, cfg: ModelConfig, groups: Sequence[ImageGroup]) -> dict:
    """In-memory maps keyed by (group, stem)."""
    out = {}
    for g in groups:
        for stem, m in zip(g.stems, predict_group(ps, cfg, g)):
            out[(g.class_id, stem)] = m
    return out


def bench(ps: ParamStore, cfg: ModelConfig, image_size: int = 64, batch_sizes=(1, 2, 4, 8),
          repeats: int = 3, seed: int = 0) -> dict:
    """Inference images per second for each batch size (one group per batch)."""
    rng = np.random.default_rng(seed)
    out = {}
    for bs in batch_sizes:
        x = Tensor(rng.random((bs, 3, image_size, image_size), dtype=np.float32))
        with suspend():
            forward(x, ["bench"], [bs], ps, cfg, training=False)
            t = time.perf_counter()
            for _ in range(repeats):
                forward(x, ["bench"], [bs], ps, cfg, training=False)
            dt = time.perf_counter() - t
        out[bs] = bs * repeats / dt if dt > 0 else math.inf
    return out
