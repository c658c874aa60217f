"""Convolutional ensembling of the fold models' probability outputs."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data_io import NUM_CLASSES, Subject, to_categorical
from .loss import generalized_dice_loss
from .model import Generator, he_init
from .train import predict


@dataclass
class EnsemblerConfig:
    models: int = 3
    kernel_size: int = 3
    epochs: int = 100
    patience: int = 10
    offset: float = 0.5
    batch_size: int = 2
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    patch_size: tuple[int, int, int] = (32, 32, 32)
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.models < 1:
            raise ValueError("need at least one model")
        if self.patience > self.epochs:
            raise ValueError("patience cannot exceed the epoch budget")
        if self.kernel_size % 2 == 0:
            raise ValueError("ensembler kernel size must be odd")


class Ensembler(nn.Module):
    """A single stride-1 convolution from ``4M`` centered probabilities to 4 class scores, then softmax."""

    def __init__(self, cfg: EnsemblerConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = nn.Conv3d(NUM_CLASSES * cfg.models, NUM_CLASSES, cfg.kernel_size,
                              stride=1, padding=cfg.kernel_size // 2)
        he_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.conv(x), dim=1)


def build_ensembler(cfg: EnsemblerConfig) -> Ensembler:
    """Construct with weights drawn from ``cfg.seed``, leaving the global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return Ensembler(cfg)


def stack_predictions(preds: Sequence[np.ndarray], offset: float = 0.5,
                      models: int | None = None) -> np.ndarray:
    """Concatenate per-model ``(4, X, Y, Z)`` probabilities in fold order and subtract ``offset``."""
    if not preds:
        raise ValueError("no predictions to stack")
    if models is not None and len(preds) != models:
        raise ValueError(f"expected {models} predictions, got {len(preds)}")
    shapes = {p.shape for p in preds}
    if len(shapes) != 1:
        raise ValueError(f"prediction shape mismatch: {sorted(shapes)}")
    if preds[0].shape[0] != NUM_CLASSES:
        raise ValueError(f"expected {NUM_CLASSES} channels, got {preds[0].shape[0]}")
    return np.concatenate(preds, axis=0).astype(np.float32) - np.float32(offset)


class EarlyStopping:
    """Signals a stop after ``patience`` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class EnsemblerResult:
    ensembler: Ensembler
    log: list[dict]
    best_epoch: int
    stopped_epoch: int


def _patch(x: np.ndarray, y: np.ndarray, size, rng) -> tuple[np.ndarray, np.ndarray]:
    spatial = x.shape[1:]
    size = tuple(min(p, s) for p, s in zip(size, spatial))
    corner = [int(rng.integers(0, s - p + 1)) for s, p in zip(spatial, size)]
    sl = (slice(None),) + tuple(slice(c, c + p) for c, p in zip(corner, size))
    return x[sl], y[sl]


def _val_loss(ensembler: Ensembler, pairs, device) -> float:
    ensembler.eval()
    with torch.no_grad():
        losses = [
            generalized_dice_loss(torch.from_numpy(y)[None].to(device),
                                  ensembler(torch.from_numpy(x)[None].to(device))).item()
            for x, y in pairs
        ]
    return float(np.mean(losses))


def train_ensembler(ensembler: Ensembler, train_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                    val_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                    cfg: EnsemblerConfig | None = None, device: str = "cpu",
                    log_path: str | Path | None = None) -> EnsemblerResult:
    """Minimize the generalized dice loss with Adam, early-stopping on validation loss.

    Pairs are ``(stacked centered predictions, one-hot ground truth)``. The
    weights of the best validation epoch are restored before returning.
    """
    cfg = cfg or ensembler.cfg
    if not train_pairs or not val_pairs:
        raise ValueError("ensembler training needs nonempty train and validation splits")
    torch.manual_seed(cfg.seed)
    ensembler.to(device)
    opt = torch.optim.Adam(ensembler.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    stopper = EarlyStopping(cfg.patience)
    best_state = copy.deepcopy(ensembler.state_dict())
    best_epoch = 0
    records = []
    start = time.time()
    if log_path is not None:
        Path(log_path).write_text("")

    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        ensembler.train()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_pairs))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            xs, ys = zip(*(_patch(*train_pairs[i], cfg.patch_size, rng)
                           for i in order[b:b + cfg.batch_size]))
            x = torch.from_numpy(np.stack(xs)).to(device)
            y = torch.from_numpy(np.stack(ys)).to(device)
            opt.zero_grad(set_to_none=True)
            loss = generalized_dice_loss(y, ensembler(x))
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val = _val_loss(ensembler, val_pairs, device)
        if val < stopper.best:
            best_state = copy.deepcopy(ensembler.state_dict())
            best_epoch = epoch
        stop = stopper.step(val)
        rec = {"epoch": epoch, "GDL": float(np.mean(losses)), "val_GDL": val,
               "wall_time": time.time() - start}
        records.append(rec)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if stop:
            break
    ensembler.load_state_dict(best_state)
    ensembler.eval()
    return EnsemblerResult(ensembler, records, best_epoch, epoch)


def model_predictions(models: Sequence[Generator], v: np.ndarray, device: str = "cpu",
                      mode: str = "crop") -> list[np.ndarray]:
    return [predict(g, v, mode=mode, device=device) for g in models]


def ensemble_dataset(models: Sequence[Generator], subjects: Sequence[Subject],
                     offset: float = 0.5, device: str = "cpu") -> list[tuple[np.ndarray, np.ndarray]]:
    """Stacked predictions of every model for every subject, paired with one-hot ground truth."""
    return [
        (stack_predictions(model_predictions(models, s.image, device), offset, len(models)),
         to_categorical(s.label))
        for s in subjects
    ]


def split_subjects(ids: Sequence[str], val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Random train/validation split with at least one subject on each side."""
    ids = list(ids)
    if len(ids) < 2:
        raise ValueError("need at least 2 subjects to split")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_val = min(max(1, int(round(val_fraction * len(ids)))), len(ids) - 1)
    val = sorted(ids[i] for i in order[:n_val])
    return [i for i in ids if i not in set(val)], val


def ensemble_predict(models: Sequence[Generator], ensembler: Ensembler, v: np.ndarray,
                     device: str = "cpu", mode: str = "crop") -> np.ndarray:
    """Run every generator on ``v``, stack and center their outputs, and fuse them."""
    x = stack_predictions(model_predictions(models, v, device, mode), ensembler.cfg.offset,
                          ensembler.cfg.models)
    ensembler.eval()
    with torch.no_grad():
        out = ensembler(torch.from_numpy(x)[None].to(device))
    return out[0].cpu().numpy()
