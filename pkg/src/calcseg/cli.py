"""``calcseg`` command line: synth, train, infer, eval, stats, compare.

Parameters resolve as built-in default < ``--config`` file < explicit flag.
A config file is JSON: ``{"version": 1, "seed": 0, "train": {"epochs": 200}}``.
Every run writes ``run_record.json`` into its output directory holding the
effective parameters (in the same schema, so it can be fed back through
``--config``) and SHA-256 checksums of the artifacts it wrote.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from . import inference as I
from . import model as M
from . import morphology as MO
from . import training as TR
from .errors import CalcsegError, NumericalError
from .tensor import set_num_threads

log = logging.getLogger("calcseg")

CONFIG_VERSION = 1
OUTPUT_DIR_ENV = "CALCSEG_OUTPUT_DIR"


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v != "")


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v != "")


def _bool(text):
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


_arch = M.ArchConfig()
_train = TR.TrainConfig()
_synth = D.SyntheticParams()

# (name, parser, default, help)
ARCH_PARAMS = [
    ("num_blocks", int, _arch.num_blocks, "parallel-convolution blocks"),
    ("branch_kernels", _ints, _arch.branch_kernels, "comma-separated odd kernel sizes per block"),
    ("branch_width", int, _arch.branch_width, "channels per branch"),
    ("final_kernel", int, _arch.final_kernel, "kernel of the output convolution"),
]
TRAIN_PARAMS = [
    ("epochs", int, _train.epochs, "training epochs"),
    ("learning_rate", float, _train.learning_rate, "SGD learning rate"),
    ("momentum", float, _train.momentum, "SGD momentum"),
    ("pos_neg_ratio", int, _train.pos_neg_ratio, "hard negatives per positive"),
    ("crop_size", int, _train.crop_size, "training crop side in pixels"),
    ("rotation_range_deg", _floats, _train.rotation_range_deg, "rotation interval lo,hi"),
    ("hflip", _bool, _train.hflip, "random horizontal flips"),
    ("fallback_negatives", int, _train.fallback_negatives, "negatives used by positive-free crops"),
    ("positive_crop_probability", float, _train.positive_crop_probability,
     "probability a crop is centred on a positive pixel"),
    ("hard_negative_mining", _bool, _train.hard_negative_mining,
     "false trains on every pixel (ablation)"),
    ("checkpoint_every", int, _train.checkpoint_every, "checkpoint period in epochs (0: end only)"),
]
NORM_PARAMS = [
    ("normalization", str, "maxval", "image scaling to [0, 1]: maxval or minmax"),
]
SPLIT_PARAMS = [
    ("train_fraction", float, 0.75, "fraction of the manifest used for training"),
    ("split_seed", int, 0, "seed of the train/test shuffle"),
]
SYNTH_PARAMS = [
    ("n", int, 40, "number of images"),
    ("height", int, _synth.height, "image height"),
    ("width", int, _synth.width, "image width"),
    ("num_isolated", int, _synth.num_isolated, "isolated calcifications per image"),
    ("num_clusters", int, _synth.num_clusters, "clusters per image"),
    ("cluster_size", int, _synth.cluster_size, "calcifications per cluster"),
    ("cluster_radius", float, _synth.cluster_radius, "cluster disk radius in pixels"),
    ("blob_diameter", _floats, _synth.blob_diameter, "diameter range lo,hi in pixels"),
    ("blob_amplitude", _floats, _synth.blob_amplitude, "peak contrast range lo,hi"),
    ("pixel_spacing_mm", float, _synth.pixel_spacing_mm, "pixel spacing in mm"),
]
INFER_PARAMS = NORM_PARAMS + [
    ("tile_size", int, 512, "tile side in pixels"),
    ("halo", int, -1, "tile overlap (-1: receptive-field radius)"),
    ("pixel_spacing_mm", float, 0.1, "pixel spacing recorded in the map"),
    ("display_threshold", float, 0.1, "heatmap transparency cutoff"),
]
EVAL_PARAMS = NORM_PARAMS + SPLIT_PARAMS + [
    ("split", str, "test", "which part of the manifest to evaluate: train, test or all"),
    ("froc_thresholds", _floats, E.DEFAULT_FROC_THRESHOLDS, "comma-separated FROC thresholds"),
    ("connectivity", int, 8, "component connectivity (4 or 8)"),
    ("match_rule", str, "overlap", "overlap or iou"),
    ("iou_threshold", float, 0.5, "IoU needed when match_rule is iou"),
    ("tile_size", int, 512, "inference tile side"),
]
STATS_PARAMS = [
    ("threshold", float, 0.5, "binarization threshold for probability maps"),
    ("pixel_spacing_mm", float, -1.0, "pixel spacing (-1: from the map, else 0.1)"),
    ("region", _ints, (), "optional crude cluster region y0,x0,y1,x1"),
    ("connectivity", int, 8, "component connectivity (4 or 8)"),
    ("bin_edges", _ints, MO.DEFAULT_BIN_EDGES, "histogram bin edges in pixels"),
    ("label", str, "", "label of this time point"),
]
COMPARE_PARAMS = [
    ("labels", str, "", "comma-separated labels for the two time points"),
]

SUBCOMMANDS = {
    "synth": SYNTH_PARAMS,
    "train": ARCH_PARAMS + TRAIN_PARAMS + NORM_PARAMS + SPLIT_PARAMS,
    "infer": INFER_PARAMS,
    "eval": EVAL_PARAMS,
    "stats": STATS_PARAMS,
    "compare": COMPARE_PARAMS,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="intra-op threads; 1 is bit-reproducible (default 1)")
    common.add_argument("--config", type=Path, default=None, help="JSON config or run record")
    common.add_argument("--out", type=Path, default=None,
                        help=f"output directory (default ${OUTPUT_DIR_ENV} or ./calcseg_out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="calcseg", description="Microcalcification segmentation pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "synth": "write a synthetic dataset and manifest",
        "train": "train a model on the train split of a manifest",
        "infer": "probability map and heatmap for one image",
        "eval": "ROC / PR / FROC on a manifest split",
        "stats": "shape statistics of a probability map or mask",
        "compare": "follow-up comparison of two stats files",
    }
    for name, params in SUBCOMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=helps[name])
        for pname, ptype, _, phelp in params:
            p.add_argument("--" + pname.replace("_", "-"), dest=pname, type=ptype, default=None,
                           help=phelp)
        if name == "train":
            p.add_argument("--manifest", type=Path, required=True)
        elif name == "infer":
            p.add_argument("--checkpoint", type=Path, required=True)
            p.add_argument("--image", type=Path, required=True)
        elif name == "eval":
            p.add_argument("--checkpoint", type=Path, required=True)
            p.add_argument("--manifest", type=Path, required=True)
        elif name == "stats":
            p.add_argument("--input", type=Path, required=True, help=".cmap map or mask image")
        elif name == "compare":
            p.add_argument("before", type=Path)
            p.add_argument("after", type=Path)
    return parser


def load_config(path) -> dict:
    cfg = json.loads(Path(path).read_text())
    if "config" in cfg and "artifacts" in cfg:  # a run record
        cfg = cfg["config"]
    if cfg.get("version") != CONFIG_VERSION:
        raise UsageError(f"{path}: unsupported config version {cfg.get('version')!r}")
    return cfg


def _coerce(ptype, raw):
    if isinstance(raw, list):
        raw = ",".join(map(str, raw))
    return ptype(raw)


def resolve(args) -> dict:
    """Effective parameters: defaults, then config file, then explicit flags."""
    cfg = load_config(args.config) if args.config else {"version": CONFIG_VERSION}
    section = cfg.get(args.command, {})
    params = {}
    for name, ptype, default, _ in SUBCOMMANDS[args.command]:
        value = getattr(args, name)
        if value is None:
            value = _coerce(ptype, section[name]) if name in section else default
        params[name] = value
    unknown = set(section) - {n for n, *_ in SUBCOMMANDS[args.command]}
    if unknown:
        raise UsageError(f"unknown {args.command} parameters in config: {sorted(unknown)}")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    threads = args.threads if args.threads is not None else cfg.get("threads", 1)
    return {"version": CONFIG_VERSION, "seed": int(seed), "threads": int(threads),
            args.command: params}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _output_dir(args) -> Path:
    out = args.out or Path(os.environ.get(OUTPUT_DIR_ENV, "calcseg_out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_record(out: Path, args, effective: dict, artifacts: list[Path], inputs: dict):
    record = {
        "command": args.command,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "config": _jsonable(effective),
        "artifacts": {str(p.relative_to(out) if p.is_relative_to(out) else p): _sha256(p)
                      for p in artifacts},
    }
    path = out / "run_record.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _split_part(dataset, params, which):
    if which == "all":
        return dataset
    train, test = D.split(dataset, params["train_fraction"], params["split_seed"])
    if which == "train":
        return train
    if which == "test":
        return test
    raise UsageError(f"--split must be train, test or all, got {which!r}")


def cmd_synth(args, eff, out):
    p = eff["synth"]
    params = D.SyntheticParams(
        height=p["height"], width=p["width"], num_isolated=p["num_isolated"],
        num_clusters=p["num_clusters"], cluster_size=p["cluster_size"],
        cluster_radius=p["cluster_radius"], blob_diameter=tuple(p["blob_diameter"]),
        blob_amplitude=tuple(p["blob_amplitude"]), pixel_spacing_mm=p["pixel_spacing_mm"])
    manifest = D.write_synthetic_dataset(out, p["n"], params, seed=eff["seed"])
    ds = D.load_dataset(manifest)
    print(f"wrote {len(ds)} images to {out} (positive fraction 1/{1 / ds.positive_fraction():.0f})"
          if len(ds) and ds.positive_fraction() else f"wrote {len(ds)} images to {out}")
    files = [manifest] + [out / s.record.image for s in ds] + [out / s.record.mask for s in ds]
    return files, {}


def cmd_train(args, eff, out):
    p = eff["train"]
    arch = M.ArchConfig(num_blocks=p["num_blocks"], branch_kernels=tuple(p["branch_kernels"]),
                        branch_width=p["branch_width"], final_kernel=p["final_kernel"])
    cfg = TR.TrainConfig(
        learning_rate=p["learning_rate"], momentum=p["momentum"], pos_neg_ratio=p["pos_neg_ratio"],
        epochs=p["epochs"], crop_size=p["crop_size"],
        rotation_range_deg=tuple(p["rotation_range_deg"]), hflip=p["hflip"],
        fallback_negatives=p["fallback_negatives"],
        positive_crop_probability=p["positive_crop_probability"],
        hard_negative_mining=p["hard_negative_mining"], checkpoint_every=p["checkpoint_every"],
        seed=eff["seed"])
    dataset = D.load_dataset(args.manifest, normalization=p["normalization"])
    train_set, _ = D.split(dataset, p["train_fraction"], p["split_seed"])
    ckpt, log_path = out / "model.cseg", out / "training_log.tsv"
    model, tlog = TR.train(train_set, arch, cfg, log_path=log_path, checkpoint_path=ckpt)
    last = tlog.epochs[-1] if tlog.epochs else None
    print(f"trained {model.parameter_count} parameters on {len(train_set)} images"
          + (f"; final loss {last.mean_loss:.4f}" if last else ""))
    return [ckpt, log_path], {"manifest": args.manifest}


def cmd_infer(args, eff, out):
    p = eff["infer"]
    model = M.load_checkpoint(args.checkpoint)
    image = D.load_image(args.image, p["normalization"])
    halo = None if p["halo"] < 0 else p["halo"]
    pmap = I.predict_full(model, image, p["tile_size"], halo, p["pixel_spacing_mm"],
                          args.image.stem)
    cmap = I.save_probability_map(pmap, out / f"{args.image.stem}.cmap")
    heat = I.save_heatmap(I.render_heatmap(pmap, image, p["display_threshold"]),
                          out / f"{args.image.stem}_heatmap.ppm")
    print(f"{pmap.width}x{pmap.height} map written to {cmap}")
    return [cmap, heat], {"checkpoint": args.checkpoint, "image": args.image}


def cmd_eval(args, eff, out):
    p = eff["eval"]
    model = M.load_checkpoint(args.checkpoint)
    dataset = D.load_dataset(args.manifest, normalization=p["normalization"])
    part = _split_part(dataset, p, p["split"])
    if len(part) == 0:
        raise D.DataError(f"the {p['split']} split is empty")
    maps, masks = [], []
    for s in part:
        maps.append(I.predict_full(model, s.image(), p["tile_size"],
                                   pixel_spacing_mm=s.pixel_spacing_mm, source_id=s.id))
        masks.append(s.mask())
    roc = E.roc_auc(maps, masks)
    pr = E.precision_recall_aps(maps, masks)
    fr = E.froc(maps, masks, p["froc_thresholds"], p["connectivity"], p["match_rule"],
                p["iou_threshold"])
    files = [roc.save(out / "roc.tsv"), pr.save(out / "pr.tsv"), fr.save(out / "froc.tsv")]
    results = {p["split"]: {"auc": roc.summary, "aps": pr.summary, "n_images": len(part)}}
    files.append(E.write_run_report(out / "eval_report.tsv", results))
    table = E.summary_table({k: (v["auc"], v["aps"]) for k, v in results.items()})
    (out / "summary.txt").write_text(table)
    files.append(out / "summary.txt")
    print(table, end="")
    return files, {"checkpoint": args.checkpoint, "manifest": args.manifest}


def cmd_stats(args, eff, out):
    p = eff["stats"]
    if args.input.suffix.lower() == ".cmap":
        pmap = I.load_probability_map(args.input)
        mask = MO.binarize(pmap.probs, p["threshold"])
        spacing = pmap.pixel_spacing_mm
    else:
        mask = D.load_mask(args.input)
        spacing = 0.1
    if p["pixel_spacing_mm"] > 0:
        spacing = p["pixel_spacing_mm"]
    region = tuple(p["region"]) or None
    if region is not None and len(region) != 4:
        raise UsageError("--region needs four integers y0,x0,y1,x1")
    comps = MO.connected_components(MO.crop_region(mask, region), p["connectivity"])
    stats = MO.shape_stats(comps, spacing, p["label"] or args.input.stem)
    hist = MO.size_histogram([stats], p["bin_edges"])
    table = MO.format_stats_table(stats)
    files = [MO.write_stats(out / "stats.tsv", stats)]
    (out / "stats.txt").write_text(table)
    (out / "size_histogram.tsv").write_text(hist.to_tsv())
    files += [out / "stats.txt", out / "size_histogram.tsv"]
    print(table, end="")
    return files, {"input": args.input}


def cmd_compare(args, eff, out):
    p = eff["compare"]
    before, after = MO.read_stats(args.before), MO.read_stats(args.after)
    if len(before) != 1 or len(after) != 1:
        raise D.DataError("compare expects stats files holding exactly one record each")
    labels = [s for s in p["labels"].split(",") if s] if p["labels"] else []
    if labels and len(labels) != 2:
        raise UsageError("--labels needs exactly two comma-separated names")
    report = MO.compare_followup(before[0], after[0], *(labels or [None, None]))
    (out / "comparison.txt").write_text(report.to_text())
    (out / "comparison.tsv").write_text(report.to_tsv())
    print(report.to_text(), end="")
    return [out / "comparison.txt", out / "comparison.tsv"], {"before": args.before,
                                                              "after": args.after}


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "stats": cmd_stats, "compare": cmd_compare}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand (one of: " + ", ".join(COMMANDS) + ")")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        eff = resolve(args)
        set_num_threads(eff["threads"])
        out = _output_dir(args)
        files, inputs = COMMANDS[args.command](args, eff, out)
        _write_record(out, args, eff, files, inputs)
    except UsageError as exc:
        print(f"calcseg: usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"calcseg: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (CalcsegError, OSError, ValueError) as exc:
        print(f"calcseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
