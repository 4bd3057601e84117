"""Command-line driver.

Every subcommand reads JSON configuration where one is needed.  Values given
as flags override the file, which overrides the built-in defaults.  Failures
end with one JSON line on stderr, ``{"error": <kind>, "message": ...}``, and
exit code 2 (configuration), 3 (data) or 4 (numerical).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import infer, metrics, volgrid, xform
from .sepnet import NetworkSpec, load_checkpoint, param_count, unet_spec_for
from .tensor import ShapeError
from .trainer import NumericalError, TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
LABEL_SUFFIX = ".labels.vol.json"


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every violation found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(ValueError):
    pass


# --- helpers ---------------------------------------------------------------

def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file {path} does not exist"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"config file {path} is not valid JSON: {e}"]) from None


def _resolve_transform(value, problems: list[str]):
    if value is None:
        return None
    if isinstance(value, str):
        if value in xform.PRESETS:
            return xform.preset(value)
        p = Path(value)
        if p.suffix == ".json" and p.exists():
            value = json.loads(p.read_text())
        else:
            problems.append(f"transform {value!r} is neither a preset ({', '.join(sorted(xform.PRESETS))}) "
                            "nor an existing JSON file")
            return None
    try:
        return xform.TransformSpec(tuple(value["hs"]), tuple(value["xs"]))
    except (KeyError, TypeError, ValueError) as e:
        problems.append(f"invalid transform: {e}")
        return None


def _label_path_for(volume_path: Path) -> Path:
    name = volume_path.name
    if not name.endswith(".vol.json"):
        raise DataError(f"{volume_path}: volume sidecars must end in .vol.json")
    return volume_path.with_name(name[: -len(".vol.json")] + LABEL_SUFFIX)


def _dataset_pairs(entry, problems: list[str], what: str) -> list[tuple[Path, Path]]:
    """A directory of phantom pairs, or an explicit list of volume paths / [volume, labels] pairs."""
    pairs: list[tuple[Path, Path]] = []
    if entry is None:
        return pairs
    items = [entry] if isinstance(entry, str) else list(entry)
    for it in items:
        if isinstance(it, str) and Path(it).is_dir():
            for lab in sorted(Path(it).glob("*" + LABEL_SUFFIX)):
                pairs.append((lab.with_name(lab.name[: -len(LABEL_SUFFIX)] + ".vol.json"), lab))
            continue
        if isinstance(it, str):
            vol = Path(it)
            try:
                pair = (vol, _label_path_for(vol))
            except DataError as e:
                problems.append(str(e))
                continue
        else:
            pair = (Path(it[0]), Path(it[1]))
        pairs.append(pair)
    for v, g in pairs:
        for p in (v, g):
            if not p.exists():
                problems.append(f"{what}: {p} does not exist")
    return pairs


def _load_pairs(pairs):
    return [(volgrid.load_volume(v), volgrid.load_labels(g)) for v, g in pairs]


def _merge(defaults: dict, file_values: dict, flags: dict) -> dict:
    out = dict(defaults)
    out.update({k: v for k, v in file_values.items()})
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        print(text)


# --- subcommands --------------------------------------------------------------

def cmd_phantom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for seed in range(args.seed, args.seed + args.count):
        spec = volgrid.desk_phantom_spec(seed, dims=tuple(args.dims))
        v, g = volgrid.generate_phantom(spec)
        stem = out / f"phantom_{seed:04d}"
        volgrid.save_volume(v, str(stem) + ".vol.json")
        volgrid.save_labels(g, str(stem) + LABEL_SUFFIX)
        written.append(str(stem) + ".vol.json")
    print(json.dumps({"volumes": written}))
    return EXIT_OK


def cmd_transform(args) -> int:
    problems: list[str] = []
    t = _resolve_transform(args.preset or args.transform, problems)
    if t is None and not problems:
        problems.append("one of --preset or --transform is required")
    if problems:
        raise ConfigError(problems)
    v = volgrid.load_volume(args.input)
    out = xform.apply_transform(v, t)
    volgrid.save_volume(out, args.out)
    print(json.dumps({"out": args.out, "anchors": t.anchors}))
    return EXIT_OK


TRAIN_SECTIONS = {"train_data", "val_data", "transform", "network", "train", "out_dir"}


def build_train_job(args):
    """Resolve the training job from --config plus flags; raise ConfigError listing every problem."""
    cfg = _read_json(args.config) if args.config else {}
    problems = [f"unknown config key {k!r}" for k in sorted(set(cfg) - TRAIN_SECTIONS)]
    net_flags = {"base_channels": args.base, "num_scales": args.scales, "num_classes": args.classes}
    train_flags = {"epochs": args.epochs, "seed": args.seed, "loss": args.loss, "alpha": args.alpha,
                   "batch_size": args.batch_size, "steps_per_epoch": args.steps_per_epoch,
                   "patch": args.patch, "lr0": args.lr}
    net_kw = _merge({}, cfg.get("network", {}), net_flags)
    train_kw = _merge({}, cfg.get("train", {}), train_flags)
    net = cfg_train = None
    try:
        net = NetworkSpec(**net_kw)
    except (TypeError, ValueError) as e:
        problems.append(f"network: {e}")
    try:
        cfg_train = TrainConfig(**train_kw)
    except (TypeError, ValueError) as e:
        problems.append(f"train: {e}")
    t = _resolve_transform(args.transform or cfg.get("transform", "SLF1"), problems)
    train_pairs = _dataset_pairs(args.data or cfg.get("train_data"), problems, "train_data")
    val_pairs = _dataset_pairs(args.val or cfg.get("val_data"), problems, "val_data")
    if not train_pairs:
        problems.append("train_data is empty; pass --data or set train_data")
    out_dir = args.out or cfg.get("out_dir")
    if not out_dir:
        problems.append("out_dir is required (--out)")
    if problems:
        raise ConfigError(problems)
    return net, cfg_train, t, train_pairs, val_pairs, Path(out_dir)


def cmd_train(args) -> int:
    net, cfg, t, train_pairs, val_pairs, out = build_train_job(args)
    result = train(cfg, _load_pairs(train_pairs), t, net, _load_pairs(val_pairs), out_dir=out)
    (out / "transform.json").write_text(t.to_json() + "\n")
    print(json.dumps({"last": str(result.last_checkpoint), "best": str(result.best_checkpoint),
                      "final_loss": result.history[-1]["train_loss"]}))
    return EXIT_OK


def cmd_predict(args) -> int:
    problems: list[str] = []
    t = _resolve_transform(args.transform or _sibling_transform(args.checkpoint), problems)
    if t is None and not problems:
        problems.append("--transform is required (no transform.json next to the checkpoint)")
    if problems:
        raise ConfigError(problems)
    model = load_checkpoint(args.checkpoint)
    v = volgrid.load_volume(args.input)
    pm, lm = infer.predict(model, v, t, args.window, args.tile_depth)
    volgrid.save_labels(lm, args.out)
    if args.probs:
        np.save(args.probs, pm.probs.astype(np.float32))
    print(json.dumps({"out": args.out}))
    return EXIT_OK


def _sibling_transform(checkpoint) -> str | None:
    p = Path(checkpoint).with_name("transform.json")
    return str(p) if p.exists() else None


def cmd_ensemble(args) -> int:
    spec_text = Path(args.config).read_text() if Path(args.config).exists() else None
    if spec_text is None:
        raise ConfigError([f"ensemble config {args.config} does not exist"])
    try:
        spec = infer.EnsembleSpec.from_json(spec_text)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError([f"invalid ensemble config: {e}"]) from None
    if args.rank_weights:
        spec.rank_weights = tuple(args.rank_weights)
    missing = [m.checkpoint for m in spec.members if not Path(m.checkpoint).exists()]
    if missing:
        raise ConfigError([f"member checkpoint {m} does not exist" for m in missing])
    v = volgrid.load_volume(args.input)
    res = infer.run_ensemble(spec, v, args.window, args.tile_depth)
    volgrid.save_labels(res["labels"], args.out)
    report = {"out": args.out, "vvc": {str(k): val for k, val in res["vvc"].items()},
              "weights": spec.weights().tolist()}
    if args.uncertainty_out:
        volgrid.save_uncertainty(res["uncertainty"], args.uncertainty_out)
        report["uncertainty"] = args.uncertainty_out
    if args.members_dir:
        d = Path(args.members_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, lm in enumerate(res["member_labels"]):
            volgrid.save_labels(lm, d / f"member_{i}{LABEL_SUFFIX}")
    _emit(json.dumps(report, indent=2), args.report)
    return EXIT_OK


def cmd_uncertainty(args) -> int:
    members = [volgrid.load_labels(p) for p in args.members]
    gt = volgrid.load_labels(args.gt)
    pred = volgrid.load_labels(args.prediction) if args.prediction else None
    for lm in members + ([pred] if pred else []):
        if lm.dims != gt.dims:
            raise DataError(f"label map shape {lm.dims} differs from ground truth {gt.dims}")
    rep = infer.uncertainty_report(members, gt, pred)
    rep["vvc"] = {str(k): v for k, v in infer.structure_vvc(members, gt.num_classes).items()}
    if args.entropy_out:
        volgrid.save_uncertainty(infer.entropy_map(members), args.entropy_out)
    _emit(json.dumps(rep, indent=2), args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred, gt = volgrid.load_labels(args.pred), volgrid.load_labels(args.gt)
    if pred.dims != gt.dims:
        raise DataError(f"prediction shape {pred.dims} differs from ground truth {gt.dims}")
    weights = args.weights
    names = args.names
    problems = []
    if weights and weights not in metrics.WEIGHT_PRESETS:
        try:
            weights = _read_json(weights)
        except ConfigError as e:
            problems.extend(e.problems)
    if names and len(names) != gt.num_classes - 1:
        problems.append(f"--names needs {gt.num_classes - 1} entries, got {len(names)}")
    if problems:
        raise ConfigError(problems)
    try:
        report = metrics.evaluate_labels(pred.labels, gt.labels, gt.spacing_mm, names, weights)
    except KeyError as e:
        raise ConfigError([str(e.args[0])]) from None
    _emit(report.to_table() if args.format == "table" else report.to_json(), args.out)
    return EXIT_OK


def _load_any(path):
    meta = json.loads(Path(path).read_text())
    kind = meta.get("intensity_kind")
    if kind == "Label":
        return volgrid.load_labels(path)
    if kind == "Uncertainty":
        return volgrid.load_uncertainty(path)
    return volgrid.load_volume(path)


def cmd_export_slices(args) -> int:
    src = _load_any(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extent = src.dims[args.axis]
    indices = args.index if args.index else list(range(extent))
    written = []
    for i in indices:
        p = out / f"axis{args.axis}_{i:04d}.pgm"
        volgrid.export_slice_image(src, args.axis, i, p)
        written.append(str(p))
    print(json.dumps({"images": written}))
    return EXIT_OK


def cmd_param_count(args) -> int:
    spec = NetworkSpec(num_classes=args.classes, base_channels=args.base, num_scales=args.scales)
    sep, unet = param_count(spec), param_count(unet_spec_for(spec))
    chosen = sep if args.net == "sepnet" else unet
    print(json.dumps({"net": args.net, "params": chosen, "sepnet": sep, "unet": unet,
                      "ratio": sep / unet}))
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def _threads_arg(p):
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS/OpenMP thread cap (default 1, the reproducible setting)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sepseg", description="Anisotropic CT segmentation toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write synthetic CT phantoms with labels")
    p.add_argument("--seed", type=int, default=0, help="seed of the first phantom")
    p.add_argument("--count", type=int, default=1, help="number of phantoms (consecutive seeds)")
    p.add_argument("--dims", type=int, nargs=3, default=(16, 48, 48), metavar=("D", "H", "W"),
                   help="grid size (slices, rows, columns)")
    p.add_argument("--out", required=True, help="output directory")
    _threads_arg(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("transform", help="map an HU volume to [0, 1]")
    p.add_argument("--preset", help="SLF1, SLF2, SLF3, NLF1 or NLF2")
    p.add_argument("--transform", help="JSON file with {xs, hs}")
    p.add_argument("--in", dest="input", required=True, help="input .vol.json (HU)")
    p.add_argument("--out", required=True, help="output .vol.json (normalized)")
    _threads_arg(p)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("train", help="train a SepNet on labelled volumes")
    p.add_argument("--config", help="JSON with train_data, val_data, transform, network, train, out_dir")
    p.add_argument("--data", nargs="+", help="training volumes or phantom directories")
    p.add_argument("--val", nargs="+", help="validation volumes or phantom directories")
    p.add_argument("--transform", help="preset name or transform JSON")
    p.add_argument("--out", help="output directory for checkpoints and metrics.jsonl")
    p.add_argument("--base", type=int, help="base channel count n0")
    p.add_argument("--scales", type=int, help="number of resolution scales S")
    p.add_argument("--classes", type=int, help="number of classes including background")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--loss", help="dice, l_dsc, l_cross, l_exp or ath_l_exp")
    p.add_argument("--alpha", type=float, help="hard-voxel temperature for ath_l_exp")
    p.add_argument("--batch-size", type=int, help="patches per step")
    p.add_argument("--steps-per-epoch", type=int, help="optimiser steps per epoch")
    p.add_argument("--patch", type=int, nargs=3, metavar=("D", "H", "W"), help="patch size")
    p.add_argument("--lr", type=float, help="initial learning rate")
    _threads_arg(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment one volume with one checkpoint")
    p.add_argument("--checkpoint", required=True, help="model .sepn file")
    p.add_argument("--transform", help="preset or JSON (default: transform.json beside the checkpoint)")
    p.add_argument("--in", dest="input", required=True, help="input .vol.json (HU)")
    p.add_argument("--out", required=True, help="output label .vol.json")
    p.add_argument("--probs", help="optional .npy for class probabilities")
    p.add_argument("--window", type=int, default=256, help="in-plane centre window")
    p.add_argument("--tile-depth", type=int, help="slices per inference tile")
    _threads_arg(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="fuse several members and estimate uncertainty")
    p.add_argument("--config", required=True, help="ensemble JSON: members, dsc_table, rank_weights")
    p.add_argument("--in", dest="input", required=True, help="input .vol.json (HU)")
    p.add_argument("--out", required=True, help="fused label .vol.json")
    p.add_argument("--uncertainty-out", help="entropy map .vol.json")
    p.add_argument("--members-dir", help="directory for member label maps")
    p.add_argument("--report", help="JSON report path (default stdout)")
    p.add_argument("--rank-weights", type=float, nargs="+", help="override rank weights")
    p.add_argument("--window", type=int, default=256, help="in-plane centre window")
    p.add_argument("--tile-depth", type=int, help="slices per inference tile")
    _threads_arg(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("uncertainty", help="error rate per entropy level against ground truth")
    p.add_argument("--members", nargs="+", required=True, help="member label .vol.json files")
    p.add_argument("--gt", required=True, help="ground-truth label .vol.json")
    p.add_argument("--prediction", help="label map to score (default: member majority vote)")
    p.add_argument("--entropy-out", help="entropy map .vol.json")
    p.add_argument("--out", help="JSON report path (default stdout)")
    _threads_arg(p)
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("evaluate", help="DSC, HD95 and ASSD per class with weighted means")
    p.add_argument("--pred", required=True, help="predicted label .vol.json")
    p.add_argument("--gt", required=True, help="ground-truth label .vol.json")
    p.add_argument("--names", nargs="+", help="foreground class names")
    p.add_argument("--weights", help="preset name (structseg22) or JSON name->weight")
    p.add_argument("--format", choices=("json", "table"), default="json", help="output format")
    p.add_argument("--out", help="output path (default stdout)")
    _threads_arg(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-slices", help="write 8-bit PGM slices of any volume")
    p.add_argument("--in", dest="input", required=True, help="volume, label or uncertainty .vol.json")
    p.add_argument("--axis", type=int, default=0, choices=(0, 1, 2), help="slice axis (0 = axial)")
    p.add_argument("--index", type=int, nargs="+", help="slice indices (default: all)")
    p.add_argument("--out", required=True, help="output directory")
    _threads_arg(p)
    p.set_defaults(func=cmd_export_slices)

    p = sub.add_parser("param-count", help="parameter counts of SepNet and its UNet baseline")
    p.add_argument("--net", choices=("sepnet", "unet"), default="sepnet", help="network to report")
    p.add_argument("--base", type=int, default=48, help="base channel count n0")
    p.add_argument("--scales", type=int, default=4, help="number of scales S")
    p.add_argument("--classes", type=int, default=4, help="number of classes")
    _threads_arg(p)
    p.set_defaults(func=cmd_param_count)
    return ap


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limit = threadpool_limits(limits=args.threads) if args.threads else nullcontext()
    try:
        with limit:
            return args.func(args)
    except ConfigError as e:
        return _fail("config", str(e), EXIT_CONFIG)
    except NumericalError as e:
        return _fail("numerical", str(e), EXIT_NUMERICAL)
    except (ValueError, ShapeError, FileNotFoundError, IndexError) as e:
        return _fail("data", str(e), EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
