"""``telcos`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Errors print one line ``telcos: error=<kind> type=<exception> reason=<text>`` on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .evaluate import evaluate_pairs
from .groundtruth import SIGMA_FRAC, THETA_S, Script, load_annotations, render_ground_truth
from .imageio import ImageFormatError, read_image, write_ppm
from .netgraph import WIDTH_TABLE, CheckpointError, Widths, build_network, load_checkpoint, param_count, save_checkpoint
from .pipeline import TOY_STUDENT_WIDTHS, TOY_WIDTHS, detect, evaluate_detector
from .postproc import draw_overlay, load_detections, save_detections
from .pruning import PRUNABLE_TAPS, PruneError, apply_and_finetune
from .scriptid import FINE_CLASSES, ScriptIdModel, accuracy, build_scriptid, extract_crops, load_crops, save_crops, train_scriptid
from .synthgen import GenConfig, generate_dataset, procedural_background
from .trainer import TrainConfig, distill_train, load_dataset, train

__all__ = ["run", "main", "EXIT_OK", "EXIT_USAGE", "EXIT_DATA", "EXIT_NUMERIC"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
WIDTH_PRESETS = {"toy": TOY_WIDTHS, "toy_student": TOY_STUDENT_WIDTHS}
IMAGE_SUFFIXES = (".ppm", ".png")

log = logging.getLogger("telcos")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _widths(spec: str) -> str | Widths:
    if spec in WIDTH_TABLE:
        return spec
    if spec in WIDTH_PRESETS:
        return WIDTH_PRESETS[spec]
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"unknown widths {spec!r}; use one of {sorted(WIDTH_TABLE) + sorted(WIDTH_PRESETS)} or a JSON file")
    d = json.loads(path.read_text())
    try:
        return Widths(
            int(d["conv1"]), tuple(tuple(p) for p in d["stages"]), int(d["conv2"]),
            tuple(tuple(p) for p in d["upconv"]), tuple(d["head"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed widths file ({exc})") from exc


def _train_config(args, **extra) -> TrainConfig:
    d = dict(args.train or {})
    for key in ("epochs", "lr", "batch_size", "halve_every", "clip_norm", "input_size", "epoch_fraction", "patience"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    if getattr(args, "literal_momentum", False):
        d["literal_momentum"] = True
    d["seed"] = args.seed
    d.update(extra)
    cfg = TrainConfig.from_json(d)
    print("train config: " + json.dumps(cfg.to_json(), sort_keys=True), file=sys.stderr)
    return cfg


def _images_in(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        return sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {p}")
    return [p]


# --- subcommands ------------------------------------------------------------


def cmd_synth(args) -> None:
    gen = dict(args.gen or {})
    for key in ("height", "width"):
        if getattr(args, key) is not None:
            gen[key] = getattr(args, key)
    fields = {f.name for f in dataclasses.fields(GenConfig)}
    unknown = set(gen) - fields
    if unknown:
        raise UsageError(f"unknown generator option(s): {sorted(unknown)}")
    cfg = GenConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in gen.items()})
    backgrounds = [b for spec in args.backgrounds or [] for b in _images_in(spec)]
    if not backgrounds:
        size = args.bg_size
        backgrounds = [procedural_background(size, size, np.random.default_rng([args.seed, i])) for i in range(args.procedural)]
    manifest = generate_dataset(backgrounds, args.count, args.seed, args.out, cfg, args.workers)
    words = sum(it["words"] for it in manifest["items"])
    print(f"wrote {manifest['count']} images with {words} words to {args.out}")


def cmd_gt(args) -> None:
    ann = Path(args.annotation)
    image_name, words = load_annotations(ann)
    if args.size:
        try:
            h, w = (int(v) for v in args.size.lower().split("x"))
        except ValueError as exc:
            raise UsageError(f"--size must look like HxW, got {args.size!r}") from exc
    else:
        h, w = read_image(ann.parent / image_name).shape[:2]
    maps = render_ground_truth(words, h, w, args.theta_s, args.sigma_frac)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nx.save_tensor(out / "region.tns", maps.region)
    nx.save_tensor(out / "affinity.tns", maps.affinity)
    nx.save_tensor(out / "script.tns", maps.script)
    idx = maps.script_index
    summary = {
        "image": image_name,
        "size": [h, w],
        "map_size": list(maps.region.shape),
        "words": len(words),
        "clipped": maps.clipped,
        "skipped": maps.skipped,
        "class_pixels": {s.label: int((idx == s).sum()) for s in Script},
        "region_sum": round(float(maps.region.sum()), 6),
        "affinity_sum": round(float(maps.affinity.sum()), 6),
    }
    _write_json(out / "gt.json", summary)
    if args.preview:
        gray = np.clip(np.maximum(maps.region, maps.affinity) * 255, 0, 255).astype(np.uint8)
        write_ppm(out / "preview.ppm", np.repeat(gray[:, :, None], 3, axis=2))
    print(f"rendered {len(words)} words into {out}")


def _metric_fn(val):
    if not val:
        return None
    return lambda net: {"hmean_0.5": round(evaluate_detector(net, val, 0.5).hmean, 6)}


def cmd_train(args) -> None:
    cfg = _train_config(args)
    data = load_dataset(args.data)
    val = load_dataset(args.val_data) if args.val_data else None
    net = build_network(_widths(args.widths), seed=args.seed)
    report = train(net, data, cfg, val_set=None, checkpoint_dir=args.checkpoint_dir, metrics=_metric_fn(val))
    save_checkpoint(net, args.out)
    doc = {"config": cfg.to_json(), "params": param_count(net), "report": report.to_json()}
    if args.report:
        _write_json(args.report, doc)
    print(f"trained {net.config} ({param_count(net)} parameters) for {len(report.epochs)} epochs -> {args.out}")


def cmd_distill(args) -> None:
    cfg = _train_config(args)
    teacher = load_checkpoint(args.teacher)
    data = load_dataset(args.data)
    val = load_dataset(args.val_data) if args.val_data else None
    student = build_network(_widths(args.student), seed=args.seed)
    student, report = distill_train(
        teacher, student, data, cfg, args.phase1, args.phase2, checkpoint_dir=args.checkpoint_dir, metrics=_metric_fn(val)
    )
    save_checkpoint(student, args.out)
    doc = {
        "config": cfg.to_json(),
        "teacher_params": param_count(teacher),
        "student_params": param_count(student),
        "report": report.to_json(),
    }
    if args.report:
        _write_json(args.report, doc)
    print(f"distilled {param_count(teacher)} -> {param_count(student)} parameters -> {args.out}")


def cmd_prune(args) -> None:
    net = load_checkpoint(args.model)
    rep = load_dataset(args.data)[: args.rep_count]
    if not rep:
        raise ValueError(f"{args.data}: no representative images")
    taps = tuple(args.taps.split(",")) if args.taps else PRUNABLE_TAPS
    finetune = metric = None
    if args.finetune_data:
        ft_data = load_dataset(args.finetune_data)
        cfg = _train_config(args, restore_best=False, patience=10**6)

        def finetune(n):
            r = train(n, ft_data, cfg)
            return {"epochs": len(r.epochs), "final_train": r.epochs[-1]["train"] if r.epochs else None}

    if args.val_data:
        val = load_dataset(args.val_data)

        def metric(n):
            return round(evaluate_detector(n, val, 0.5).hmean, 6)

    before = param_count(net)
    pruned, records = apply_and_finetune(
        net, [s.image for s in rep], taps, args.k, args.x, args.tau, args.per_iteration, finetune, metric, args.guard, args.linkage
    )
    save_checkpoint(pruned, args.out)
    after = param_count(pruned)
    doc = {
        "params_before": before,
        "params_after": after,
        "param_reduction": round(1 - after / before, 6),
        "channels_before": {t: c for t, c in sorted(net.channels().items()) if t in taps},
        "channels_after": {t: c for t, c in sorted(pruned.channels().items()) if t in taps},
        "iterations": [r.to_json() for r in records],
    }
    if args.report:
        _write_json(args.report, doc)
    print(f"pruned {before} -> {after} parameters ({100 * (1 - after / before):.1f}% fewer) -> {args.out}")


def cmd_infer(args) -> None:
    net = load_checkpoint(args.model)
    sid = ScriptIdModel.load(args.scriptid) if args.scriptid else None
    img = read_image(args.image)
    words = detect(net, img, args.t_text, args.min_pixels, sid, args.source, args.t_r, args.t_a)
    save_detections(args.out, words)
    if args.overlay:
        overlay = draw_overlay(img, words)
        if Path(args.overlay).suffix.lower() == ".png":
            from PIL import Image

            Image.fromarray(overlay).save(args.overlay)
        else:
            write_ppm(args.overlay, overlay)
    counts = {k: sum(w.script.label == k for w in words) for k in ("latin", "cjk", "other")}
    print(f"{len(words)} words " + " ".join(f"{k}={v}" for k, v in counts.items()))


def _eval_pairs(det, gt):
    det, gt = Path(det), Path(gt)
    if det.is_dir() != gt.is_dir():
        raise ValueError("--det and --gt must both be files or both be directories")
    if not det.is_dir():
        return [(load_detections(det), load_annotations(gt)[1])]
    pairs = []
    for g in sorted(gt.glob("*.json")):
        if g.name == "manifest.json":
            continue
        d = det / g.name
        if not d.exists():
            raise FileNotFoundError(f"no detections for {g.name} in {det}")
        pairs.append((load_detections(d), load_annotations(g)[1]))
    return pairs


def cmd_eval(args) -> None:
    report = evaluate_pairs(_eval_pairs(args.det, args.gt), args.iou, args.method)
    if args.out:
        _write_json(args.out, report.to_json())
    acc = report.overall_script_accuracy
    print(report.row(f"IoU>{args.iou:g}  ") + f"  script {'N/A' if acc is None else f'{100 * acc:.1f}'}")


def cmd_scriptid(args) -> None:
    classes = tuple(args.classes.split(",")) if args.classes else FINE_CLASSES
    if args.crops:
        crops, labels, classes = load_crops(args.crops)
    else:
        if not (args.model and args.data):
            raise UsageError("scriptid needs --crops, or --model with --data")
        crops, labels, names = extract_crops(load_checkpoint(args.model), load_dataset(args.data), classes)
        if args.save_crops:
            save_crops(args.save_crops, crops, labels, classes, names)
    if len(labels) < 2:
        raise ValueError("need at least two labelled crops")
    order = np.random.default_rng(args.seed).permutation(len(labels))
    n_val = max(1, int(round(args.val_fraction * len(labels))))
    va, tr = order[:n_val], order[n_val:]
    if args.teacher:
        teacher = ScriptIdModel.load(args.teacher)
        teacher_report = None
    else:
        teacher = build_scriptid("teacher", crops.shape[1], classes, seed=args.seed)
        teacher_report = train_scriptid(teacher, crops[tr], labels[tr], None, 0.0, args.epochs, args.lr, args.batch_size, seed=args.seed)
        if args.teacher_out:
            teacher.save(args.teacher_out)
    student = build_scriptid("student", crops.shape[1], classes, seed=args.seed + 1)
    lam = args.lam_t
    student_report = train_scriptid(student, crops[tr], labels[tr], teacher if lam > 0 else None, lam, args.epochs, args.lr, args.batch_size, seed=args.seed)
    student.save(args.out)
    doc = {
        "classes": list(classes),
        "train_crops": int(len(tr)),
        "val_crops": int(len(va)),
        "teacher": teacher_report,
        "student": student_report,
        "teacher_val_accuracy": round(accuracy(teacher, crops[va], labels[va]), 6),
        "student_val_accuracy": round(accuracy(student, crops[va], labels[va]), 6),
    }
    if args.report:
        _write_json(args.report, doc)
    print(f"student val accuracy {doc['student_val_accuracy']:.3f} (teacher {doc['teacher_val_accuracy']:.3f}) -> {args.out}")


# --- parser -----------------------------------------------------------------

REQUIRED = {
    "synth": ("out",),
    "gt": ("annotation", "out"),
    "train": ("data", "out"),
    "distill": ("teacher", "data", "out"),
    "prune": ("model", "data", "out"),
    "infer": ("model", "image", "out"),
    "eval": ("det", "gt"),
    "scriptid": ("out",),
}


def _train_flags(p) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--halve-every", type=int)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--input-size", type=int)
    p.add_argument("--epoch-fraction", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--literal-momentum", action="store_true", help="Adam first-moment decay 0.01")
    p.add_argument("--val-data", help="annotated directory scored after every epoch")
    p.add_argument("--report", help="write the run report JSON here")
    p.set_defaults(train=None)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file of option defaults; flags override it")
    common.add_argument("--threads", type=int, help="BLAS thread cap (default: $TELCOS_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="telcos", description="Text localization and script clustering pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic annotated dataset")
    p.add_argument("--out")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--backgrounds", nargs="*", help="background images or directories")
    p.add_argument("--procedural", type=int, default=20, help="procedural backgrounds when none are given")
    p.add_argument("--bg-size", type=int, default=160)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_synth, gen=None)

    p = sub.add_parser("gt", parents=[common], help="render ground-truth maps for one annotation")
    p.add_argument("--annotation")
    p.add_argument("--out")
    p.add_argument("--size", help="HxW; default: read from the referenced image")
    p.add_argument("--theta-s", type=float, default=THETA_S)
    p.add_argument("--sigma-frac", type=float, default=SIGMA_FRAC)
    p.add_argument("--preview", action="store_true")
    p.set_defaults(func=cmd_gt)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--widths", default="toy")
    p.add_argument("--checkpoint-dir")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", parents=[common], help="distil a teacher detector into a student")
    p.add_argument("--teacher")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--student", default="toy_student")
    p.add_argument("--phase1", type=int)
    p.add_argument("--phase2", type=int)
    p.add_argument("--checkpoint-dir")
    _train_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("prune", parents=[common], help="similarity-based channel pruning")
    p.add_argument("--model")
    p.add_argument("--data", help="annotated directory; the first --rep-count images drive the statistics")
    p.add_argument("--out")
    p.add_argument("--rep-count", type=int, default=32)
    p.add_argument("--taps", help="comma-separated taps (default: all prunable)")
    p.add_argument("--k", type=float, default=0.2)
    p.add_argument("--x", type=float, default=0.1)
    p.add_argument("--tau", type=float)
    p.add_argument("--linkage", choices=("connected", "complete"), default="connected")
    p.add_argument("--per-iteration", type=int, default=3)
    p.add_argument("--guard", type=float)
    p.add_argument("--finetune-data")
    _train_flags(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("infer", parents=[common], help="detect and route words in one image")
    p.add_argument("--model")
    p.add_argument("--image")
    p.add_argument("--out")
    p.add_argument("--overlay")
    p.add_argument("--scriptid", help="script identifier for words routed to other")
    p.add_argument("--source", choices=("script", "loc"), default="script")
    p.add_argument("--t-text", type=float, default=0.5)
    p.add_argument("--t-r", type=float, default=0.5)
    p.add_argument("--t-a", type=float, default=0.5)
    p.add_argument("--min-pixels", type=int, default=4)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score detections against annotations")
    p.add_argument("--det")
    p.add_argument("--gt")
    p.add_argument("--iou", type=float, default=0.8)
    p.add_argument("--method", choices=("greedy", "hungarian"), default="greedy")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("scriptid", parents=[common], help="train the second-stage script identifier")
    p.add_argument("--out")
    p.add_argument("--crops", help="crop directory (skips extraction)")
    p.add_argument("--model", help="detector whose conv2 features are cropped")
    p.add_argument("--data")
    p.add_argument("--save-crops")
    p.add_argument("--classes", help="comma-separated fine classes")
    p.add_argument("--teacher", help="existing teacher model")
    p.add_argument("--teacher-out")
    p.add_argument("--lam-t", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--report")
    p.set_defaults(func=cmd_scriptid)
    return parser


def _subparser(parser, name) -> argparse.ArgumentParser:
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices[name]


def _resolve(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        sub = _subparser(parser, args.command)
        dests = {a.dest for a in sub._actions} | set(sub._defaults)
        dests -= {"help", "func", "config"}
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        unknown = set(doc) - dests
        if unknown:
            raise UsageError(f"unknown config key(s) for {args.command}: {sorted(unknown)}")
        sub.set_defaults(**doc)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) in (None, "")]
    if missing:
        raise UsageError(f"{args.command} needs " + ", ".join("--" + k.replace("_", "-") for k in missing))
    if args.threads is None and os.environ.get("TELCOS_THREADS"):
        try:
            args.threads = int(os.environ["TELCOS_THREADS"])
        except ValueError as exc:
            raise UsageError(f"TELCOS_THREADS must be an integer, got {os.environ['TELCOS_THREADS']!r}") from exc
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be positive")
    return args


def _fail(kind: str, exc: BaseException) -> None:
    reason = " ".join(str(exc).split()) or type(exc).__name__
    print(f"telcos: error={kind} type={type(exc).__name__} reason={reason}", file=sys.stderr)


def run(argv=None) -> int:
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = _resolve(parser, argv)
    except UsageError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        _fail("data", exc)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    print("config: " + json.dumps(resolved, sort_keys=True, default=str), file=sys.stderr)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.func(args)
        else:
            args.func(args)
    except UsageError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    except nx.NumericError as exc:
        _fail("numeric", exc)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, json.JSONDecodeError, CheckpointError, ImageFormatError, PruneError) as exc:
        _fail("data", exc)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())
