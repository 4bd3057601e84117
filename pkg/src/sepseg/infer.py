"""Whole-volume prediction, class-wise rank-weighted ensembling and
ensemble-based uncertainty (voxel entropy, volume variation coefficient)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .sepnet import Model, load_checkpoint
from .volgrid import LabelMap, ProbMap, UncertaintyMap, Volume
from .xform import PRESETS, TransformSpec, preset, transform_values

RANK_WEIGHTS = (5, 4, 3, 1, 1, 1)
LEVEL_DECIMALS = 9


@dataclass
class EnsembleMember:
    checkpoint: str
    transform: TransformSpec


@dataclass
class EnsembleSpec:
    members: list[EnsembleMember]
    dsc_table: np.ndarray  # (members, classes) validation DSC
    rank_weights: tuple[float, ...] = RANK_WEIGHTS

    def __post_init__(self):
        self.dsc_table = np.asarray(self.dsc_table, dtype=np.float64)
        if self.dsc_table.ndim != 2 or self.dsc_table.shape[0] != len(self.members):
            raise ValueError("dsc_table must be (members, classes)")
        if any(w <= 0 for w in self.rank_weights):
            raise ValueError("rank weights must be positive")

    def weights(self) -> np.ndarray:
        return rank_members(self.dsc_table, self.rank_weights)

    def to_json(self) -> str:
        return json.dumps({
            "members": [{"checkpoint": m.checkpoint, "transform": {"xs": list(m.transform.xs),
                                                                   "hs": list(m.transform.hs)}}
                        for m in self.members],
            "dsc_table": self.dsc_table.tolist(),
            "rank_weights": list(self.rank_weights),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EnsembleSpec":
        obj = json.loads(text)
        members = [EnsembleMember(m["checkpoint"], _member_transform(m["transform"])) for m in obj["members"]]
        return cls(members, np.asarray(obj["dsc_table"]), tuple(obj.get("rank_weights", RANK_WEIGHTS)))


def _member_transform(t) -> TransformSpec:
    """A preset name or an {"hs": [...], "xs": [...]} anchor dict."""
    if isinstance(t, str):
        if t not in PRESETS:
            raise ValueError(f"unknown transform preset {t!r}")
        return preset(t)
    return TransformSpec(tuple(t["hs"]), tuple(t["xs"]))


# --- single-model prediction -------------------------------------------------

def _depth_starts(depth: int, tile: int) -> list[int]:
    if depth <= tile:
        return [0]
    step = max(tile // 2, 1)
    starts = list(range(0, depth - tile + 1, step))
    if starts[-1] != depth - tile:
        starts.append(depth - tile)
    return starts


def _blend_profile(tile: int) -> np.ndarray:
    # triangular weights, strictly positive so every slice is covered
    i = np.arange(tile, dtype=np.float64)
    return np.minimum(i + 1, tile - i)


def predict_probs(m: Model, x: np.ndarray, tile_depth: int | None = None) -> np.ndarray:
    """Probabilities (C, D, H, W) for a normalised (D, H, W) array.

    In-plane extents are zero-padded to the pooling multiple.  Depth is
    processed in tiles overlapping by half a tile and blended linearly.
    """
    spec = m.spec
    d, h, w = x.shape
    mult = [p ** (spec.num_scales - 1) for p in spec.pool]
    tile = d if tile_depth is None else min(int(tile_depth), d)
    tile = -(-tile // mult[0]) * mult[0]
    ph, pw = (-h) % mult[1], (-w) % mult[2]
    pdd = max(tile - d, 0)
    xp = np.pad(x, ((0, pdd), (0, ph), (0, pw)))
    dp = xp.shape[0]
    acc = np.zeros((spec.num_classes, dp, h + ph, w + pw), dtype=np.float64)
    norm = np.zeros(dp, dtype=np.float64)
    prof = _blend_profile(tile) if dp > tile else np.ones(tile)
    for s in _depth_starts(dp, tile):
        chunk = xp[s:s + tile][None, None].astype(m.dtype)
        probs = m.predict_probs(chunk)[0].astype(np.float64)
        acc[:, s:s + tile] += probs * prof[None, :, None, None]
        norm[s:s + tile] += prof
    acc /= norm[None, :, None, None]
    return acc[:, :d, :h, :w]


def predict(m: Model, v: Volume, t: TransformSpec, window: int = 256,
            tile_depth: int | None = None) -> tuple[ProbMap, LabelMap]:
    """Transform, crop the in-plane centre window, run the model, and paste back.

    Voxels outside the window are background with probability 1.
    """
    if v.intensity_kind != "HU":
        raise ValueError("predict expects a volume in HU")
    d, h, w = v.dims
    wh, ww = min(window, h), min(window, w)
    oh, ow = (h - wh) // 2, (w - ww) // 2
    x = transform_values(v.data[:, oh:oh + wh, ow:ow + ww], t)
    inner = predict_probs(m, x, tile_depth)
    c = m.spec.num_classes
    probs = np.zeros((c, d, h, w), dtype=np.float64)
    probs[0] = 1.0
    probs[:, :, oh:oh + wh, ow:ow + ww] = inner
    pm = ProbMap(probs, v.spacing_mm)
    return pm, pm.argmax()


# --- ensembling -----------------------------------------------------------------

def rank_members(dsc_table, rank_weights: Sequence[float] = RANK_WEIGHTS) -> np.ndarray:
    """Per-class weights (members, classes): the i-th best member for a class
    receives ``rank_weights[i]``; ranks past the list get 1; ties favour the
    lower member index."""
    table = np.asarray(dsc_table, dtype=np.float64)
    n, c = table.shape
    ladder = np.ones(n)
    k = min(n, len(rank_weights))
    ladder[:k] = rank_weights[:k]
    out = np.empty_like(table)
    for j in range(c):
        order = np.argsort(-table[:, j], kind="stable")
        out[order, j] = ladder
    return out


def ensemble_fuse(probmaps: Sequence, weights) -> ProbMap:
    """Class-wise weighted mean: P_c = sum_i w_ic P_ic / sum_i w_ic.

    Channel sums of the result need not be 1 when per-class weights differ;
    labels are taken by argmax over the fused maps.
    """
    arrays = [np.asarray(p.probs if isinstance(p, ProbMap) else p, dtype=np.float64) for p in probmaps]
    spacing = probmaps[0].spacing_mm if isinstance(probmaps[0], ProbMap) else (1.0, 1.0, 1.0)
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"member geometry mismatch: {a.shape} vs {shape}")
    if isinstance(probmaps[0], ProbMap) and any(p.spacing_mm != spacing for p in probmaps):
        raise ValueError("member spacing mismatch")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(arrays), shape[0]):
        raise ValueError(f"weights must be (members, classes) = {(len(arrays), shape[0])}, got {w.shape}")
    stack = np.stack(arrays)
    ww = w.reshape(w.shape + (1,) * (stack.ndim - 2))
    fused = (ww * stack).sum(axis=0) / w.sum(axis=0).reshape((-1,) + (1,) * (stack.ndim - 2))
    return ProbMap(fused, spacing)


# --- uncertainty ---------------------------------------------------------------

def _label_arrays(labelmaps) -> np.ndarray:
    return np.stack([np.asarray(g.labels if isinstance(g, LabelMap) else g) for g in labelmaps])


def entropy_map(labelmaps) -> UncertaintyMap:
    """Voxel-wise entropy (nats) of the empirical label distribution across members."""
    stack = _label_arrays(labelmaps)
    n = stack.shape[0]
    h = np.zeros(stack.shape[1:], dtype=np.float64)
    for value in np.unique(stack):
        f = np.count_nonzero(stack == value, axis=0) / n
        nz = f > 0
        h[nz] -= f[nz] * np.log(f[nz])
    spacing = labelmaps[0].spacing_mm if isinstance(labelmaps[0], LabelMap) else (1.0, 1.0, 1.0)
    return UncertaintyMap(h, n, spacing)


def vvc(volumes, spacing=None) -> float:
    """Coefficient of variation sigma/mu (population sigma) of member volumes.

    ``volumes`` are voxel counts when ``spacing`` is given (converted to mm^3),
    otherwise physical volumes.  All-zero volumes give 0.
    """
    v = np.asarray(volumes, dtype=np.float64)
    if spacing is not None:
        v = v * float(np.prod(spacing))
    mu = v.mean()
    if mu == 0.0:
        if np.all(v == 0):
            return 0.0
        raise ValueError("volume mean is zero but volumes are not all zero")
    return float(v.std() / mu)


def structure_vvc(labelmaps, num_classes: int) -> dict[int, float]:
    stack = _label_arrays(labelmaps)
    spacing = labelmaps[0].spacing_mm if isinstance(labelmaps[0], LabelMap) else (1.0, 1.0, 1.0)
    out = {}
    for c in range(1, num_classes):
        counts = np.count_nonzero(stack == c, axis=tuple(range(1, stack.ndim)))
        out[c] = vvc(counts, spacing)
    return out


def majority_vote(labelmaps) -> np.ndarray:
    stack = _label_arrays(labelmaps)
    top = int(stack.max()) + 1
    counts = np.stack([np.count_nonzero(stack == c, axis=0) for c in range(top)])
    return counts.argmax(axis=0)


def uncertainty_levels(entropy: np.ndarray) -> np.ndarray:
    return np.unique(np.round(entropy, LEVEL_DECIMALS))


def uncertainty_report(labelmaps, gt, prediction=None) -> dict:
    """Error rate per uncertainty level and the level mix of mis-segmented voxels.

    Regions are the whole image, the predicted background and the predicted
    foreground.  ``prediction`` defaults to the members' majority vote.
    """
    ent = np.round(entropy_map(labelmaps).entropy, LEVEL_DECIMALS)
    gt = np.asarray(gt.labels if isinstance(gt, LabelMap) else gt)
    pred = majority_vote(labelmaps) if prediction is None else np.asarray(
        prediction.labels if isinstance(prediction, LabelMap) else prediction)
    wrong = pred != gt
    regions = {"whole": np.ones(gt.shape, bool), "background": pred == 0, "foreground": pred != 0}
    levels = np.unique(ent)
    rates: dict[str, list] = {}
    counts: dict[str, list] = {}
    distribution: dict[str, list] = {}
    for name, region in regions.items():
        r, cnt, dist = [], [], []
        n_wrong = np.count_nonzero(wrong & region)
        for lv in levels:
            at = region & (ent == lv)
            n_at = np.count_nonzero(at)
            n_err = np.count_nonzero(at & wrong)
            r.append(n_err / n_at if n_at else None)
            cnt.append([int(n_err), int(n_at)])
            dist.append(n_err / n_wrong if n_wrong else 0.0)
        rates[name], counts[name], distribution[name] = r, cnt, dist
    return {
        "levels": [float(lv) for lv in levels],
        "error_rate": rates,
        "counts": counts,
        "error_level_distribution": distribution,
    }


# --- ensemble driver -------------------------------------------------------------

def run_ensemble(spec: EnsembleSpec, v: Volume, window: int = 256, tile_depth: int | None = None,
                 models: Sequence[Model] | None = None) -> dict:
    """Predict with every member, fuse, and compute voxel/structure uncertainty."""
    if models is None:
        models = [load_checkpoint(m.checkpoint) for m in spec.members]
    probmaps, labelmaps = [], []
    for model, member in zip(models, spec.members):
        pm, lm = predict(model, v, member.transform, window, tile_depth)
        probmaps.append(pm)
        labelmaps.append(lm)
    fused = ensemble_fuse(probmaps, spec.weights())
    return {
        "fused": fused,
        "labels": fused.argmax(),
        "member_labels": labelmaps,
        "uncertainty": entropy_map(labelmaps),
        "vvc": structure_vvc(labelmaps, fused.num_classes),
    }
