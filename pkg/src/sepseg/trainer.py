"""Patch-based training loop: Adam with L2 weight decay, step-decayed learning
rate, random patch batches and per-epoch validation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import loss as L
from .infer import predict
from .sepnet import Model, NetworkSpec, build_sepnet, save_checkpoint
from .tensor import Tensor
from .volgrid import LabelMap, Volume, center_offsets, random_offsets
from .xform import TransformSpec, transform_values

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 6
    lr0: float = 1e-3
    weight_decay: float = 1e-8
    lr_decay: float = 0.9
    lr_decay_every: int = 10
    patch: tuple[int, int, int] = (16, 128, 128)
    window: int = 256
    seed: int = 0
    loss: str = "ath_l_exp"
    alpha: float | None = 0.5
    steps_per_epoch: int | None = None
    foreground_oversample: float = 0.0
    val_every: int = 1

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        problems = self.validate()
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))

    def validate(self) -> list[str]:
        problems = []
        for name in ("epochs", "batch_size", "lr0", "lr_decay", "lr_decay_every", "window", "val_every"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if self.weight_decay < 0:
            problems.append("weight_decay must be non-negative")
        if len(self.patch) != 3 or any(p < 1 for p in self.patch):
            problems.append(f"patch must be three positive extents, got {self.patch}")
        if self.loss not in L.LOSSES:
            problems.append(f"loss must be one of {sorted(L.LOSSES)}, got {self.loss!r}")
        if self.loss == "ath_l_exp" and (self.alpha is None or self.alpha <= 0):
            problems.append("ath_l_exp needs a positive alpha")
        if self.steps_per_epoch is not None and self.steps_per_epoch <= 0:
            problems.append("steps_per_epoch must be positive")
        if not 0.0 <= self.foreground_oversample <= 1.0:
            problems.append("foreground_oversample must lie in [0, 1]")
        return problems

    def lr_at(self, epoch: int) -> float:
        return lr_at(epoch, self.lr0, self.lr_decay, self.lr_decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d


DESK_PROFILE = dict(batch_size=2, patch=(8, 32, 32))


def lr_at(epoch: int, lr0: float = 1e-3, decay: float = 0.9, every: int = 10) -> float:
    return lr0 * decay ** (epoch // every)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(model: Model, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam; ``weight_decay * theta`` is added to the gradient."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in model.params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


# --- data preparation -------------------------------------------------------------

@dataclass
class Prepared:
    image: np.ndarray  # normalised float32 (D, H, W)
    labels: np.ndarray  # uint8 (D, H, W)
    num_classes: int


def prepare(v: Volume, g: LabelMap, t: TransformSpec, window: int) -> Prepared:
    """Centre-crop each slice to ``window`` (or the full extent) and normalise."""
    if v.dims != g.dims:
        raise ValueError(f"volume {v.dims} and labels {g.dims} differ in shape")
    d, h, w = v.dims
    size = (d, min(window, h), min(window, w))
    o = center_offsets(v.dims, size)
    sl = tuple(slice(a, a + s) for a, s in zip(o, size))
    return Prepared(transform_values(v.data[sl], t).astype(np.float32), np.asarray(g.labels[sl]), g.num_classes)


def sample_batch(items: Sequence[Prepared], patch, batch_size: int, rng: np.random.Generator,
                 foreground_oversample: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for _ in range(batch_size):
        it = items[int(rng.integers(len(items)))]
        if foreground_oversample and rng.random() < foreground_oversample and it.labels.any():
            fg = np.argwhere(it.labels > 0)
            centre = fg[int(rng.integers(len(fg)))]
            off = [int(np.clip(c - p // 2, 0, n - p)) for c, p, n in zip(centre, patch, it.labels.shape)]
        else:
            off = random_offsets(it.labels.shape, patch, rng)
        sl = tuple(slice(o, o + p) for o, p in zip(off, patch))
        xs.append(it.image[sl])
        ys.append(it.labels[sl])
    return np.stack(xs)[:, None], np.stack(ys)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, D, H, W) integer labels -> (N, C, D, H, W) indicators."""
    return (labels[:, None] == np.arange(num_classes).reshape((1, -1) + (1,) * (labels.ndim - 1))).astype(dtype)


def validation_dsc(model: Model, val: Sequence[tuple[Volume, LabelMap]], t: TransformSpec,
                   window: int, tile_depth: int | None = None) -> list[float]:
    """Per-class soft DSC (eps=1) over the whole validation set."""
    c = model.spec.num_classes
    inter = np.zeros(c)
    total = np.zeros(c)
    for v, g in val:
        pm, _ = predict(model, v, t, window, tile_depth)
        oh = g.one_hot()
        ax = (1, 2, 3)
        inter += (pm.probs * oh).sum(axis=ax)
        total += (pm.probs + oh).sum(axis=ax)
    return list((2 * inter + 1.0) / (total + 1.0))


def loss_config_for(cfg: TrainConfig, items: Sequence[Prepared], num_classes: int) -> L.LossConfig:
    freqs = L.class_frequencies([it.labels for it in items], num_classes)
    return L.LossConfig(alpha=cfg.alpha if cfg.loss == "ath_l_exp" else None,
                        class_weights=L.class_weights(freqs, floor=1.0).tolist())


@dataclass
class TrainResult:
    model: Model
    last_checkpoint: Path | None
    best_checkpoint: Path | None
    history: list[dict]


def train(cfg: TrainConfig, train_data: Sequence[tuple[Volume, LabelMap]], transform: TransformSpec,
          net: NetworkSpec, val_data: Sequence[tuple[Volume, LabelMap]] = (),
          out_dir=None) -> TrainResult:
    """Train a SepNet on (volume, labels) pairs.

    Every step draws a batch of random patches from the centre-cropped,
    intensity-transformed training volumes.  With ``out_dir`` a JSON-lines
    metrics log and ``last``/``best`` checkpoints are written there.
    """
    if not train_data:
        raise ValueError("no training data")
    c = net.num_classes
    for v, g in list(train_data) + list(val_data):
        if g.num_classes != c:
            raise ValueError(f"label map has {g.num_classes} classes, network expects {c}")
    items = [prepare(v, g, transform, cfg.window) for v, g in train_data]
    for it in items:
        if any(p > n for p, n in zip(cfg.patch, it.labels.shape)):
            raise ValueError(f"patch {cfg.patch} exceeds cropped volume {it.labels.shape}")
    rng = np.random.default_rng(cfg.seed)
    model = build_sepnet(net, np.float32, seed=int(rng.integers(2 ** 31)))
    lcfg = loss_config_for(cfg, items, c)
    loss_fn = L.get_loss(cfg.loss)
    state = AdamState()
    steps = cfg.steps_per_epoch or math.ceil(len(items) / cfg.batch_size)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.jsonl"
        log_path.write_text("")
    history: list[dict] = []
    best_score = -np.inf
    best_path = last_path = None

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        losses = []
        for _ in range(steps):
            x, y = sample_batch(items, cfg.patch, cfg.batch_size, rng, cfg.foreground_oversample)
            model.zero_grad()
            probs = model.forward(x)
            value = loss_fn(probs, Tensor(one_hot(y, c)), lcfg)
            lv = float(value)
            if not np.isfinite(lv):
                dump = None
                if out is not None:
                    dump = out / f"nonfinite_epoch{epoch}.npz"
                    np.savez(dump, image=x, labels=y, probs=probs.data)
                raise NumericalError(f"non-finite loss {lv} at epoch {epoch}; batch dumped to {dump}")
            value.backward()
            adam_step(model, state, lr, cfg.weight_decay)
            losses.append(lv)
        record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_dsc_per_class": None}
        is_last = epoch == cfg.epochs - 1
        if val_data and ((epoch + 1) % cfg.val_every == 0 or is_last):
            val = validation_dsc(model, val_data, transform, cfg.window, cfg.patch[0])
            record["val_dsc_per_class"] = val
            score = float(np.mean(val[1:]))
            if score > best_score and out is not None:
                best_score = score
                best_path = out / "best.sepn"
                save_checkpoint(model, best_path)
        history.append(record)
        log.info("epoch %d lr %.3g loss %.4f", epoch, lr, record["train_loss"])
        if out is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
    if out is not None:
        last_path = out / "last.sepn"
        save_checkpoint(model, last_path)
        if best_path is None:
            best_path = last_path
    return TrainResult(model, last_path, best_path, history)
