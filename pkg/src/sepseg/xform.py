"""Piecewise-linear HU to [0, 1] intensity transforms.

A transform is a list of anchors ``(h_i, x_i)``: HU values at or below the
first anchor map to 0, values above the last map to 1, and values in between
are linearly interpolated through the anchors.  A naive window/level mapping
is the two-anchor special case.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .volgrid import Volume


@dataclass(frozen=True)
class TransformSpec:
    hs: tuple[float, ...]
    xs: tuple[float, ...]

    def __post_init__(self):
        hs = tuple(float(h) for h in self.hs)
        xs = tuple(float(x) for x in self.xs)
        object.__setattr__(self, "hs", hs)
        object.__setattr__(self, "xs", xs)
        if len(hs) != len(xs):
            raise ValueError(f"{len(hs)} HU anchors but {len(xs)} intensity anchors")
        if len(hs) < 2:
            raise ValueError("a transform needs at least two anchors")
        if any(b <= a for a, b in zip(hs, hs[1:])):
            raise ValueError(f"HU anchors must be strictly increasing, got {list(hs)}")
        if any(b < a for a, b in zip(xs, xs[1:])):
            raise ValueError(f"intensity anchors must be non-decreasing, got {list(xs)}")
        if xs[0] != 0.0 or xs[-1] != 1.0:
            raise ValueError(f"intensity anchors must start at 0 and end at 1, got {list(xs)}")

    @property
    def anchors(self) -> list[tuple[float, float]]:
        return list(zip(self.hs, self.xs))

    def to_json(self) -> str:
        return json.dumps({"xs": list(self.xs), "hs": list(self.hs)})

    @classmethod
    def from_json(cls, text: str) -> "TransformSpec":
        obj = json.loads(text)
        return make_slf(obj["xs"], obj["hs"])


def make_slf(xs, hs) -> TransformSpec:
    return TransformSpec(tuple(hs), tuple(xs))


def make_nlf(h1: float, h2: float) -> TransformSpec:
    return TransformSpec((h1, h2), (0.0, 1.0))


_SLF_XS = (0.0, 0.2, 0.8, 1.0)

PRESETS: dict[str, TransformSpec] = {
    "SLF1": make_slf(_SLF_XS, (-500, -200, 200, 1500)),
    "SLF2": make_slf(_SLF_XS, (-500, -100, 100, 1500)),
    "SLF3": make_slf(_SLF_XS, (-500, -100, 400, 1500)),
    "NLF1": make_nlf(-100, 100),
    "NLF2": make_nlf(-500, 800),
}


def preset(name: str) -> TransformSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown transform preset {name!r}; choose from {sorted(PRESETS)}") from None


def transform_values(h, t: TransformSpec) -> np.ndarray:
    """Evaluate the transform on raw HU values (any shape)."""
    h = np.asarray(h, dtype=np.float64)
    hs = np.asarray(t.hs)
    xs = np.asarray(t.xs)
    # segment i covers (h_i, h_{i+1}]
    seg = np.clip(np.searchsorted(hs, h, side="left") - 1, 0, len(hs) - 2)
    h0, h1 = hs[seg], hs[seg + 1]
    x0, x1 = xs[seg], xs[seg + 1]
    # the clip keeps rounding from stepping past the next anchor, which
    # preserves monotonicity across segment boundaries
    x = np.clip(x0 + (h - h0) / (h1 - h0) * (x1 - x0), x0, x1)
    x = np.where(h == h1, x1, x)
    x = np.where(h <= hs[0], 0.0, x)
    return np.where(h > hs[-1], 1.0, x)


def apply_transform(v: Volume, t: TransformSpec) -> Volume:
    if v.intensity_kind != "HU":
        raise ValueError("apply_transform expects a volume in HU")
    return Volume(transform_values(v.data, t).astype(np.float32), v.spacing_mm, "Normalized")


def window_level(h, level: float, width: float) -> np.ndarray:
    """Classic window/level mapping clip((h - (level - width/2)) / width, 0, 1)."""
    h = np.asarray(h, dtype=np.float64)
    return np.clip((h - (level - width / 2.0)) / width, 0.0, 1.0)
