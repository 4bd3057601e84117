"""Dice-based and exponential-logarithmic segmentation losses with
hard-voxel attention weighting.

Predictions ``p`` and one-hot targets ``g`` are shaped (N, C, ...) with the
class on axis 1.  Loss functions accept numpy arrays or :class:`Tensor`
inputs and return a scalar :class:`Tensor`, so they can be back-propagated
into a network or simply converted with ``float()``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

P_MIN = 1e-7


@dataclass
class LossConfig:
    w_dsc: float = 1.0
    w_cross: float = 1.0
    gamma_dsc: float = 1.0
    gamma_cross: float = 1.0
    eps: float = 1.0
    alpha: float | None = None
    class_weights: list[float] | None = None

    def __post_init__(self):
        problems = []
        for name in ("w_dsc", "w_cross", "gamma_dsc", "gamma_cross"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        if self.eps <= 0:
            problems.append("eps must be positive")
        if self.alpha is not None and self.alpha <= 0:
            problems.append("alpha must be positive when given")
        if problems:
            raise ValueError("invalid loss config: " + "; ".join(problems))

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "LossConfig":
        return cls(**json.loads(text))


def class_frequencies(label_arrays, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for lab in label_arrays:
        counts += np.bincount(np.asarray(lab).ravel(), minlength=num_classes)[:num_classes]
    return counts.astype(np.float64)


def class_weights(freqs, floor: float | None = None) -> np.ndarray:
    """w_c = (sum_k f_k / f_c) ** 0.5.

    A zero frequency is an error unless ``floor`` (e.g. one voxel) is given,
    in which case frequencies are raised to at least ``floor``.
    """
    f = np.asarray(freqs, dtype=np.float64)
    if floor is not None:
        f = np.maximum(f, floor)
    if np.any(f <= 0):
        bad = [int(i) for i in np.flatnonzero(f <= 0)]
        raise ValueError(f"classes {bad} have zero frequency; pass floor=1 to use a one-voxel pseudo-frequency")
    return np.sqrt(f.sum() / f)


def _reduce_axes(x: Tensor) -> tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


def soft_dsc(p, g, eps: float = 1.0) -> Tensor:
    """(2 sum(g p) + eps) / (sum(g + p) + eps) over all entries of one class."""
    p, g = T.as_tensor(p), T.as_tensor(g)
    return (2.0 * (g * p).sum() + eps) / ((g + p).sum() + eps)


def soft_dsc_per_class(p, g, eps: float = 1.0) -> Tensor:
    p, g = T.as_tensor(p), T.as_tensor(g)
    axes = _reduce_axes(p)
    return (2.0 * (g * p).sum(axis=axes) + eps) / ((g + p).sum(axis=axes) + eps)


def _neg_log_pow(x: Tensor, gamma: float) -> Tensor:
    nl = -T.log(x)
    if gamma == 1.0:
        return nl
    return T.power(T.clip(nl, 0.0, np.inf), gamma)


def l_dsc(p, g, cfg: LossConfig | None = None) -> Tensor:
    """Mean over classes of (-ln DSC_c) ** gamma_dsc."""
    cfg = cfg or LossConfig()
    return _neg_log_pow(soft_dsc_per_class(p, g, cfg.eps), cfg.gamma_dsc).mean()


def l_cross(p, g, cfg: LossConfig | None = None) -> Tensor:
    """Mean over voxels of w_c (-ln p_c) ** gamma_cross at the true class."""
    cfg = cfg or LossConfig()
    p, g = T.as_tensor(p), T.as_tensor(g)
    c = p.shape[1]
    w = np.ones(c) if cfg.class_weights is None else np.asarray(cfg.class_weights, dtype=np.float64)
    if w.shape != (c,):
        raise ValueError(f"{w.size} class weights given for {c} classes")
    w = w.reshape((1, c) + (1,) * (p.ndim - 2)).astype(p.dtype)
    per_voxel = (g * w * _neg_log_pow(T.clip(p, P_MIN, 1.0), cfg.gamma_cross)).sum(axis=1)
    return per_voxel.mean()


def l_exp(p, g, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    return cfg.w_dsc * l_dsc(p, g, cfg) + cfg.w_cross * l_cross(p, g, cfg)


def dice_loss(p, g, cfg: LossConfig | None = None) -> Tensor:
    """Plain soft Dice loss 1 - mean_c DSC_c."""
    cfg = cfg or LossConfig()
    return 1.0 - soft_dsc_per_class(p, g, cfg.eps).mean()


def ath_weight(p, g, alpha: float):
    """exp((p - g) / alpha); returns a Tensor for Tensor input, else an ndarray."""
    if isinstance(p, Tensor) or isinstance(g, Tensor):
        return T.exp((T.as_tensor(p) - T.as_tensor(g)) * (1.0 / alpha))
    return np.exp((np.asarray(p, dtype=np.float64) - np.asarray(g, dtype=np.float64)) / alpha)


def ath_apply(p, g, alpha: float):
    """Weighted prediction p * exp((p - g) / alpha), pushed away from the target."""
    if isinstance(p, Tensor) or isinstance(g, Tensor):
        return T.as_tensor(p) * ath_weight(p, g, alpha)
    return np.asarray(p, dtype=np.float64) * ath_weight(p, g, alpha)


def ath_l_exp(p, g, cfg: LossConfig) -> Tensor:
    """L_Exp whose Dice term sees attention-weighted predictions.

    The cross-entropy term uses the raw probabilities; gradients flow through
    the weights as well.
    """
    if cfg.alpha is None:
        raise ValueError("ath_l_exp needs cfg.alpha")
    p, g = T.as_tensor(p), T.as_tensor(g)
    pw = ath_apply(p, g, cfg.alpha)
    return cfg.w_dsc * l_dsc(pw, g, cfg) + cfg.w_cross * l_cross(p, g, cfg)


def grad_l_dsc(p, g, cfg: LossConfig | None = None) -> np.ndarray:
    """Closed-form dL_DSC/dp.

    With S = sum(g + p), I = sum(g p) per class,
    dDSC/dp = (2 g (S + eps) - (2 I + eps)) / (S + eps)^2, chained through
    gamma (-ln DSC)^(gamma-1) * (-1/DSC) and the 1/C class mean.  For eps = 0
    this is -(1/DSC) * 2 (g S - I) / S^2 per class.
    """
    cfg = cfg or LossConfig()
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
    axes = (0,) + tuple(range(2, p.ndim))
    shape = (1, p.shape[1]) + (1,) * (p.ndim - 2)
    s = (g + p).sum(axis=axes).reshape(shape) + cfg.eps
    i2 = 2.0 * (g * p).sum(axis=axes).reshape(shape) + cfg.eps
    dsc = i2 / s
    ddsc = (2.0 * g * s - i2) / s ** 2
    outer = -1.0 / dsc
    if cfg.gamma_dsc != 1.0:
        outer = outer * cfg.gamma_dsc * (-np.log(dsc)) ** (cfg.gamma_dsc - 1.0)
    return outer * ddsc / p.shape[1]


LOSSES = {
    "dice": dice_loss,
    "l_exp": l_exp,
    "ath_l_exp": ath_l_exp,
}


def get_loss(name: str):
    try:
        return LOSSES[name]
    except KeyError:
        raise KeyError(f"unknown loss {name!r}; choose from {sorted(LOSSES)}") from None
