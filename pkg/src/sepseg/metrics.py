"""Overlap and surface-distance metrics with importance-weighted reporting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_SIX = ndimage.generate_binary_structure(3, 1)

# StructSeg 2019 head-and-neck organs and their importance weights
STRUCTSEG22_WEIGHTS: dict[str, float] = {
    "Eye L": 100, "Eye R": 100,
    "Lens L": 50, "Lens R": 50,
    "Opt Nerve L": 80, "Opt Nerve R": 80,
    "Opt Chiasma": 50,
    "Pituitary": 80,
    "Brain Stem": 100,
    "Temporal Lobes L": 80, "Temporal Lobes R": 80,
    "Spinal Cord": 100,
    "Parotid Gland L": 50, "Parotid Gland R": 50,
    "Inner Ear L": 70, "Inner Ear R": 70,
    "Mid Ear L": 70, "Mid Ear R": 70,
    "TM Joint L": 60, "TM Joint R": 60,
    "Mandible L": 100, "Mandible R": 100,
}

WEIGHT_PRESETS = {"structseg22": STRUCTSEG22_WEIGHTS}


class UndefinedDistanceError(ValueError):
    pass


def _as_mask(m) -> np.ndarray:
    return np.asarray(m, dtype=bool)


def dsc(pred, gt, c: int | None = None) -> float:
    """2TP / (2TP + FP + FN); with ``c`` the inputs are label maps, otherwise masks.

    Two empty masks score 1.
    """
    if c is not None:
        pred, gt = np.asarray(pred) == c, np.asarray(gt) == c
    pred, gt = _as_mask(pred), _as_mask(gt)
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def surface_mask(mask) -> np.ndarray:
    """Mask voxels with a 6-connected background neighbour or on the grid border."""
    mask = _as_mask(mask)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def surface(mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Boundary voxel centres as an (n, 3) array of physical (z, y, x) coordinates."""
    idx = np.argwhere(surface_mask(mask))
    return idx * np.asarray(spacing, dtype=np.float64)


def directed_surface_distances(a, b, spacing) -> np.ndarray:
    """Distance from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    a, b = _as_mask(a), _as_mask(b)
    if not a.any() or not b.any():
        raise UndefinedDistanceError("undefined distance: empty mask")
    sa, sb = surface_mask(a), surface_mask(b)
    dt = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return dt[sa]


def _nearest_rank(d: np.ndarray, q: float) -> float:
    d = np.sort(d)
    k = max(int(math.ceil(q / 100.0 * d.size)) - 1, 0)
    return float(d[k])


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Max of the two directed nearest-rank 95th-percentile surface distances (mm)."""
    return max(_nearest_rank(directed_surface_distances(pred, gt, spacing), 95.0),
               _nearest_rank(directed_surface_distances(gt, pred, spacing), 95.0))


def hausdorff(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    return max(float(directed_surface_distances(pred, gt, spacing).max()),
               float(directed_surface_distances(gt, pred, spacing).max()))


def assd(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    d1 = directed_surface_distances(pred, gt, spacing)
    d2 = directed_surface_distances(gt, pred, spacing)
    return float((d1.sum() + d2.sum()) / (d1.size + d2.size))


@dataclass
class MetricsReport:
    names: list[str]
    dsc: list[float]
    hd95: list[float | None]
    assd: list[float | None]
    weights: list[float]
    weighted: dict[str, float | None] = field(default_factory=dict)

    def to_dict(self) -> dict:
        per_class = [
            {"name": n, "dsc": d, "hd95": h, "assd": a, "weight": w}
            for n, d, h, a, w in zip(self.names, self.dsc, self.hd95, self.assd, self.weights)]
        return {"per_class": per_class, "weighted": self.weighted}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.4f}"

        width = max([len("weighted")] + [len(n) for n in self.names])
        rows = [f"{'class':<{width}}  {'weight':>8}  {'DSC':>9}  {'HD95(mm)':>9}  {'ASSD(mm)':>9}"]
        for n, d, h, a, w in zip(self.names, self.dsc, self.hd95, self.assd, self.weights):
            rows.append(f"{n:<{width}}  {w:>8g}  {fmt(d):>9}  {fmt(h):>9}  {fmt(a):>9}")
        wd = self.weighted
        rows.append(f"{'weighted':<{width}}  {'':>8}  {fmt(wd.get('dsc')):>9}  "
                    f"{fmt(wd.get('hd95')):>9}  {fmt(wd.get('assd')):>9}")
        return "\n".join(rows)


def _weighted_mean(values, weights) -> float | None:
    pairs = [(v, w) for v, w in zip(values, weights) if v is not None]
    if not pairs:
        return None
    total = sum(w for _, w in pairs)
    return sum(v * w for v, w in pairs) / total


def weighted_report(per_class: dict[str, dict], weights=None) -> MetricsReport:
    """Aggregate per-class {dsc, hd95, assd} with importance weights.

    ``weights`` is a name->weight mapping, a preset name, or None for equal
    weights.  Undefined distances are skipped in their weighted mean.
    """
    names = list(per_class)
    if isinstance(weights, str):
        weights = WEIGHT_PRESETS[weights]
    if weights is None:
        w = [1.0] * len(names)
    else:
        missing = [n for n in names if n not in weights]
        if missing:
            raise KeyError(f"no importance weight for {missing}")
        w = [float(weights[n]) for n in names]
    cols = {k: [per_class[n].get(k) for n in names] for k in ("dsc", "hd95", "assd")}
    weighted = {k: _weighted_mean(v, w) for k, v in cols.items()}
    return MetricsReport(names, cols["dsc"], cols["hd95"], cols["assd"], w, weighted)


def evaluate_labels(pred, gt, spacing, names=None, weights=None) -> MetricsReport:
    """Per-class metrics for foreground classes of two label arrays."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    num = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    if names is None:
        names = [f"class{c}" for c in range(1, num)]
    per_class = {}
    for c, name in enumerate(names, start=1):
        pm, gm = pred == c, gt == c
        entry = {"dsc": dsc(pm, gm), "hd95": None, "assd": None}
        if pm.any() and gm.any():
            entry["hd95"] = hd95(pm, gm, spacing)
            entry["assd"] = assd(pm, gm, spacing)
        per_class[name] = entry
    return weighted_report(per_class, weights)
