"""Adversarial training, cross-validation and full-volume inference."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import AugmentationConfig, augment, extract_patch, worker_rng
from .data_io import NUM_CLASSES, Subject, center_crop, center_pad, from_categorical, to_categorical
from .loss import LossConfig, discriminator_loss, generator_loss
from .metrics import REGIONS, dice, remap_regions
from .model import (Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
                    save_checkpoint)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    epochs: int = 30
    alpha: float = 5.0
    patch_size: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    folds: int = 3
    augment: bool = True
    log_steps: bool = True
    device: str = "cpu"

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning rate, batch size and epochs must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.folds < 2:
            raise ValueError("cross-validation needs at least 2 folds")


@dataclass
class FoldSplit:
    fold: int
    train_ids: list[str]
    val_ids: list[str]


class NonFiniteLossError(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss: {record}")
        self.record = record


@dataclass
class GANPair:
    """Generator, discriminator and their Adam optimizers."""

    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer

    @classmethod
    def build(cls, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig,
              cfg: TrainConfig) -> "GANPair":
        if gen_cfg.depth != disc_cfg.depth:
            raise ValueError("generator and discriminator depth must match")
        g = Generator(gen_cfg).to(cfg.device)
        d = Discriminator(disc_cfg).to(cfg.device)
        betas = (cfg.beta1, cfg.beta2)
        return cls(g, d, torch.optim.Adam(g.parameters(), lr=cfg.lr, betas=betas),
                   torch.optim.Adam(d.parameters(), lr=cfg.lr, betas=betas))


@dataclass
class TrainResult:
    model: GANPair
    log: list[dict]
    best_epoch: int | None = None
    best_dice_wt: float | None = None
    split: FoldSplit | None = None


def train_step(model: GANPair, x: torch.Tensor, y: torch.Tensor, alpha: float) -> dict:
    """One discriminator update followed by one generator update on the batch ``(x, y)``."""
    g, d = model.generator, model.discriminator
    g.train()
    d.train()
    y_hat = g(x)

    model.opt_d.zero_grad(set_to_none=True)
    loss_d = discriminator_loss(d(x, y), d(x, y_hat.detach()))
    if not torch.isfinite(loss_d):
        raise NonFiniteLossError({"L_D": loss_d.item(), "L_G": float("nan"),
                                  "adversarial": float("nan"), "GDL": float("nan")})
    loss_d.backward()
    model.opt_d.step()

    d.requires_grad_(False)
    try:
        model.opt_g.zero_grad(set_to_none=True)
        total, adversarial, gdl = generator_loss(d(x, y_hat), y, y_hat, LossConfig(alpha=alpha))
        total.backward()
        model.opt_g.step()
    finally:
        d.requires_grad_(True)

    record = {"L_D": loss_d.item(), "L_G": total.item(),
              "adversarial": adversarial.item(), "GDL": gdl.item()}
    if not all(math.isfinite(v) for v in record.values()):
        raise NonFiniteLossError(record)
    return record


def make_folds(subject_ids: Sequence[str], M: int, seed: int) -> list[FoldSplit]:
    """Shuffle by ``seed`` and split into ``M`` validation folds whose sizes differ by at most 1."""
    ids = list(subject_ids)
    if M < 2:
        raise ValueError("need at least 2 folds")
    if M > len(ids):
        raise ValueError(f"{M} folds requested for {len(ids)} subjects")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = []
    for k, part in enumerate(np.array_split(order, M)):
        val = [ids[i] for i in sorted(part)]
        held = set(val)
        folds.append(FoldSplit(k, [s for s in ids if s not in held], val))
    return folds


# ----------------------------------------------------------------------------
# inference
# ----------------------------------------------------------------------------


def internal_shape(shape: Sequence[int], depth: int, mode: str = "crop") -> tuple[int, ...]:
    """Nearest multiple of ``2**depth`` per axis, below (``crop``) or above (``pad``)."""
    f = 2 ** depth
    if any(n < f for n in shape):
        raise ValueError(f"volume {tuple(shape)} smaller than 2^{depth} = {f} along some axis")
    if mode == "crop":
        return tuple(n // f * f for n in shape)
    if mode == "pad":
        return tuple(-(-n // f) * f for n in shape)
    raise ValueError(f"unknown mode {mode!r}")


def predict(g: Generator, v: np.ndarray, mode: str = "crop",
            shape: Sequence[int] | None = None, device: str | torch.device = "cpu") -> np.ndarray:
    """Run the generator on a whole ``(4, X, Y, Z)`` volume and return probabilities on the same grid.

    The volume is center-cropped and/or zero-padded to ``shape`` (default: the
    nearest multiple of ``2**depth`` chosen by ``mode``). Padding is removed
    from the output and cropped-away margins are set to background.
    """
    depth = g.cfg.depth
    original = v.shape[1:]
    target = tuple(shape) if shape is not None else internal_shape(original, depth, mode)
    if any(t % 2 ** depth for t in target):
        raise ValueError(f"internal shape {target} not divisible by 2^{depth}")
    kept = tuple(min(t, n) for t, n in zip(target, original))
    x = center_pad(center_crop(v, kept), target)

    was_training = g.training
    g.eval()
    with torch.no_grad():
        out = g(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None].to(device))
    g.train(was_training)
    probs = out[0].cpu().numpy()

    probs = center_crop(probs, kept)
    if kept != tuple(original):
        background = np.zeros((NUM_CLASSES,) + tuple(original), dtype=probs.dtype)
        background[0] = 1.0
        off = [(n - k) // 2 for n, k in zip(original, kept)]
        sl = tuple(slice(o, o + k) for o, k in zip(off, kept))
        background[(slice(None),) + sl] = probs
        probs = background
    return probs


def validation_dice(g: Generator, subjects: Sequence[Subject], device="cpu") -> dict[str, float]:
    """Mean Dice over subjects for WT, TC and ET of the argmax prediction."""
    scores = {r: [] for r in REGIONS}
    for s in subjects:
        pred = from_categorical(predict(g, s.image, device=device))
        for r, p, t in zip(REGIONS, remap_regions(pred), remap_regions(s.label)):
            scores[r].append(dice(p, t))
    return {f"val_dice_{r}": float(np.mean(v)) for r, v in scores.items()}


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------


def _epoch_batches(subjects: Sequence[Subject], cfg: TrainConfig, aug: AugmentationConfig,
                   epoch: int):
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(subjects))
    xs, ys = [], []
    for i in order:
        s = subjects[i]
        rng = worker_rng(cfg.seed, int(i), epoch)
        v, m = extract_patch(s.image, s.label, cfg.patch_size, rng)
        if cfg.augment:
            v, m = augment(v, m, aug, rng)
        xs.append(np.ascontiguousarray(v, dtype=np.float32))
        ys.append(to_categorical(m))
        if len(xs) == cfg.batch_size:
            yield np.stack(xs), np.stack(ys)
            xs, ys = [], []
    if xs:
        yield np.stack(xs), np.stack(ys)


def _write_jsonl(path: Path | None, record: dict) -> None:
    if path is not None:
        with path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")


def train(dataset: Sequence[Subject], cfg: TrainConfig,
          gen_cfg: GeneratorConfig | None = None, disc_cfg: DiscriminatorConfig | None = None,
          aug_cfg: AugmentationConfig | None = None, validation: Sequence[Subject] = (),
          out_dir: str | Path | None = None, fold: int | None = None) -> TrainResult:
    """Train a generator/discriminator pair, one random patch per subject per epoch.

    With a validation set, whole-tumor Dice is measured after every epoch and
    the generator weights of the best epoch are restored (and checkpointed to
    ``out_dir``) at the end.
    """
    if not dataset:
        raise ValueError("empty dataset")
    gen_cfg = gen_cfg or GeneratorConfig()
    disc_cfg = disc_cfg or DiscriminatorConfig(depth=gen_cfg.depth,
                                               base_filters=gen_cfg.base_filters)
    aug_cfg = aug_cfg or AugmentationConfig(patch_size=cfg.patch_size)

    torch.manual_seed(cfg.seed)
    model = GANPair.build(gen_cfg, disc_cfg, cfg)
    device = torch.device(cfg.device)

    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "log.jsonl"
        log_path.write_text("")

    records: list[dict] = []
    best_state, best_epoch, best_wt = None, None, -1.0
    start = time.time()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        steps = []
        for xb, yb in _epoch_batches(dataset, cfg, aug_cfg, epoch):
            x = torch.from_numpy(xb).to(device)
            y = torch.from_numpy(yb).to(device)
            try:
                rec = train_step(model, x, y, cfg.alpha)
            except NonFiniteLossError as err:
                bad = {"fold": fold, "epoch": epoch, "step": step, **err.record,
                       "wall_time": time.time() - start, "error": "non-finite loss"}
                _write_jsonl(log_path, bad)
                raise
            step += 1
            steps.append(rec)
            if cfg.log_steps:
                srec = {"fold": fold, "epoch": epoch, "step": step, **rec,
                        "wall_time": time.time() - start}
                records.append(srec)
                _write_jsonl(log_path, srec)

        erec = {"fold": fold, "epoch": epoch, "step": None}
        for key in ("L_D", "L_G", "adversarial", "GDL"):
            erec[key] = float(np.mean([r[key] for r in steps]))
        if validation:
            erec.update(validation_dice(model.generator, validation, device))
            if erec["val_dice_WT"] > best_wt:
                best_wt, best_epoch = erec["val_dice_WT"], epoch
                best_state = copy.deepcopy(model.generator.state_dict())
        erec["wall_time"] = time.time() - start
        records.append(erec)
        _write_jsonl(log_path, erec)
        log.info("fold %s epoch %d: L_D %.4f L_G %.4f GDL %.4f%s", fold, epoch, erec["L_D"],
                 erec["L_G"], erec["GDL"],
                 f" val WT {erec['val_dice_WT']:.3f}" if validation else "")

    if best_state is not None:
        model.generator.load_state_dict(best_state)
    if out is not None:
        save_checkpoint(out / "generator.pt", model.generator, "generator", asdict(gen_cfg),
                        seed=cfg.seed, epoch=best_epoch or cfg.epochs, fold=fold)
        save_checkpoint(out / "discriminator.pt", model.discriminator, "discriminator",
                        asdict(disc_cfg), seed=cfg.seed, epoch=cfg.epochs, fold=fold)
    return TrainResult(model, records, best_epoch, best_wt if best_state is not None else None)


def cross_validate(dataset: Sequence[Subject], cfg: TrainConfig,
                   gen_cfg: GeneratorConfig | None = None,
                   disc_cfg: DiscriminatorConfig | None = None,
                   aug_cfg: AugmentationConfig | None = None,
                   out_dir: str | Path | None = None,
                   folds: Sequence[int] | None = None) -> list[TrainResult]:
    """Train one independent model per fold; fold ``k`` is validated only on its held-out subjects."""
    by_id = {s.id: s for s in dataset}
    splits = make_folds(list(by_id), cfg.folds, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "folds.json").write_text(json.dumps([asdict(s) for s in splits], indent=2) + "\n")
    results = []
    for split in splits:
        if folds is not None and split.fold not in folds:
            continue
        fold_dir = out / f"fold_{split.fold}" if out is not None else None
        if fold_dir is not None:
            fold_dir.mkdir(parents=True, exist_ok=True)
            (fold_dir / "split.json").write_text(json.dumps(asdict(split), indent=2) + "\n")
        res = train([by_id[i] for i in split.train_ids], cfg, gen_cfg, disc_cfg, aug_cfg,
                    validation=[by_id[i] for i in split.val_ids], out_dir=fold_dir,
                    fold=split.fold)
        res.split = split
        results.append(res)
    return results
