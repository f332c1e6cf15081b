"""Command-line harness: ``gen-data``, ``train``, ``eval``, ``metrics``, ``ablate``, ``report``.

Settings resolve in three layers: built-in defaults, then ``--config`` JSON,
then explicit flags. Exit codes are 0 on success, 1 for usage or config
errors, 2 for data or checkpoint errors, and 3 when training hits a
non-finite loss.
"""

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .checkpoint import load_checkpoint
from .config import (BACKBONE_PRESETS, COMPONENT_ROWS, ExperimentConfig, load_config,
                     large_shape_config)
from .data import (CLASS_NAMES, Dataset, build_splits, draw_cover, load_dir, read_pgm,
                   save_dir, synth_scene, write_pgm)
from .errors import ConfigError, DataError, NumericAbort
from .metrics import ConfusionMatrix, summarize, summary_csv
from .model import CloudAdapterNet, param_report
from .training import TrainLog, confusion, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

ABLATION_AXES = ("rank", "context_dim", "interaction_n", "strategy", "components", "backbone_preset")
COMPONENT_NAMES = ("baseline", "stem", "blocks", "aggregator", "full")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _class_names(num_classes):
    return list(CLASS_NAMES) if num_classes == len(CLASS_NAMES) else [str(i) for i in range(num_classes)]


def _base_config(path):
    return load_config(path) if path else ExperimentConfig().validate()


def _apply(cfg_dict, section, key, value):
    if value is not None:
        cfg_dict.setdefault(section, {})[key] = value


# ---------------------------------------------------------------- gen-data

def parse_cover(text):
    if text in ("low", "medium", "high", "mixed"):
        return text
    try:
        value = float(text)
    except ValueError:
        raise UsageError(f"--cover must be low, medium, high, mixed or a number in [0, 1], got {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise UsageError(f"--cover {value} outside [0, 1]")
    return value


def parse_size(text):
    try:
        h, w = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--size must be H,W, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError(f"--size must be positive, got {text!r}")
    return h, w


def run_gen_data(out, count, size, cover, seed):
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2 ** 63 - 1, size=count)
    samples = [synth_scene(int(s), size[0], size[1], draw_cover(rng, cover)) for s in seeds]
    save_dir(samples, out)
    return len(samples)


# ---------------------------------------------------------------- train

def run_train(cfg, out_dir, resume=None, progress=None):
    """Train under ``cfg`` into ``out_dir``; returns the TrainLog."""
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "config.json"), json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    splits = build_splits(cfg.data, cfg.model.num_classes)
    if resume:
        model, state, _ = load_checkpoint(resume)
    else:
        model, state = CloudAdapterNet(cfg.model, cfg.training.seed), None
    log, _ = train(model, splits["train"], splits["val"], cfg.training, out_dir, cfg, resume=state, progress=progress)
    if len(splits["val"]):
        cm = confusion(model, splits["val"].images, splits["val"].masks, cfg.model.num_classes,
                       cfg.training.batch_size, cfg.training.ignore_index)
        _write(os.path.join(out_dir, "val_metrics.csv"),
               summary_csv(summarize(cm), _class_names(cfg.model.num_classes)))
    return log


# ---------------------------------------------------------------- eval

def run_eval(ckpt, data_dir, out_dir, model=None, batch_size=4, threads=None):
    """Score a checkpoint on a dataset directory; writes ``metrics.csv`` and ``pred/NNNN.pgm``."""
    if model is None:
        model, _, _ = load_checkpoint(ckpt)
    num_classes = model.cfg.num_classes
    samples = load_dir(data_dir, num_classes)
    if not samples:
        raise DataError(f"{data_dir}: no samples found")
    ds = Dataset.from_samples(samples)
    cm = confusion(model, ds.images, ds.masks, num_classes, batch_size, threads=threads)
    summary = summarize(cm)
    os.makedirs(os.path.join(out_dir, "pred"), exist_ok=True)
    for s in range(0, len(ds), batch_size):
        preds = model.predict(ds.images[s:s + batch_size])
        for sample, pred in zip(samples[s:s + batch_size], preds):
            write_pgm(os.path.join(out_dir, "pred", f"{sample.name}.pgm"), pred)
    _write(os.path.join(out_dir, "metrics.csv"), summary_csv(summary, _class_names(num_classes)))
    return summary


# ---------------------------------------------------------------- metrics

def _pgm_stems(path):
    if not os.path.isdir(path):
        raise DataError(f"{path}: not a directory")
    return sorted(os.path.splitext(n)[0] for n in os.listdir(path) if n.endswith(".pgm"))


def run_metrics(pred_dir, gt_dir, num_classes, ignore=None):
    pred_stems, gt_stems = _pgm_stems(pred_dir), _pgm_stems(gt_dir)
    missing = sorted(set(gt_stems) ^ set(pred_stems))
    if missing:
        raise DataError(f"unpaired masks between {pred_dir} and {gt_dir}: {missing[:5]}")
    if not gt_stems:
        raise DataError(f"{gt_dir}: no PGM masks found")
    cm = ConfusionMatrix(num_classes, ignore)
    for stem in gt_stems:
        try:
            cm.accumulate(read_pgm(os.path.join(pred_dir, stem + ".pgm")),
                          read_pgm(os.path.join(gt_dir, stem + ".pgm")))
        except DataError as exc:
            raise DataError(f"{stem}.pgm: {exc}") from None
    return summary_csv(summarize(cm), _class_names(num_classes))


# ---------------------------------------------------------------- ablate

def _component_index(value):
    text = str(value).strip().lower()
    if text in COMPONENT_NAMES:
        return COMPONENT_NAMES.index(text)
    try:
        idx = int(text)
    except ValueError:
        raise ConfigError(f"components value must be 0-4 or one of {COMPONENT_NAMES}, got {value!r}") from None
    if not 0 <= idx < len(COMPONENT_ROWS):
        raise ConfigError(f"components row {idx} outside [0, {len(COMPONENT_ROWS) - 1}]")
    return idx


def _positive_int(axis, value):
    try:
        v = int(value)
    except ValueError:
        raise ConfigError(f"{axis} values must be positive integers, got {value!r}") from None
    if v < 1:
        raise ConfigError(f"{axis} values must be positive integers, got {value!r}")
    return v


def sweep_config(base, axis, value):
    """``base`` (an ExperimentConfig dict) with one axis set to ``value``; validated."""
    d = json.loads(json.dumps(base))
    if axis == "rank":
        d.setdefault("adapter", {})["rank"] = _positive_int(axis, value)
    elif axis == "context_dim":
        d.setdefault("spm", {})["context_channels"] = _positive_int(axis, value)
    elif axis == "interaction_n":
        d.setdefault("adapter", {})["interaction_count"] = _positive_int(axis, value)
    elif axis == "strategy":
        d["strategy"] = str(value)
    elif axis == "components":
        row = COMPONENT_ROWS[_component_index(value)]
        d["components"] = {"use_stem": row.use_stem, "use_blocks": row.use_blocks,
                           "use_aggregator": row.use_aggregator, "use_adapting": row.use_adapting}
        if not row.use_adapting:
            d["strategy"] = "aggregated"
    elif axis == "backbone_preset":
        if value not in BACKBONE_PRESETS:
            raise ConfigError(f"unknown backbone preset {value!r}")
        d["backbone"] = {"preset": value}
        size = BACKBONE_PRESETS[value]["img_size"]
        d.setdefault("data", {})["size"] = [size, size]
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    return ExperimentConfig.from_dict(d).validate()


def _large_base(axis, value):
    kwargs = {}
    if axis == "rank":
        kwargs["rank"] = _positive_int(axis, value)
    elif axis == "context_dim":
        kwargs["context_channels"] = _positive_int(axis, value)
    elif axis == "interaction_n":
        kwargs["interaction_count"] = _positive_int(axis, value)
    elif axis == "strategy":
        kwargs["strategy"] = str(value)
    cfg = large_shape_config(**kwargs)
    if axis == "components":
        row = COMPONENT_ROWS[_component_index(value)]
        cfg.components = row
        if not row.use_adapting:
            cfg.strategy = "aggregated"
    elif axis == "backbone_preset":
        raise ConfigError("backbone_preset sweeps use --config, not --large-shape")
    return cfg.validate()


def _ablate_one(job):
    """One sweep row; failures are captured in the row instead of raised."""
    axis, value, base, out_dir, params_only, large_shape = job
    row = {"axis": axis, "value": str(value), "config": "", "trainable": "", "percent": "",
           "final_val_miou": "", "error": ""}
    try:
        if large_shape:
            mcfg = _large_base(axis, value)
            row["config"] = json.dumps({"large_shape": True, axis: value}, sort_keys=True)
            report = param_report(mcfg)
        else:
            cfg = sweep_config(base, axis, value)
            row["config"] = json.dumps(cfg.to_dict(), sort_keys=True)
            report = param_report(cfg.model)
        row["trainable"] = str(report.trainable)
        row["percent"] = f"{report.percent:.4f}"
        if not params_only:
            run_dir = os.path.join(out_dir, f"{axis}_{value}")
            log = run_train(cfg, run_dir)
            vals = log.validations()
            if vals:
                row["final_val_miou"] = f"{100.0 * vals[-1][1]:.2f}"
    except (ConfigError, DataError, NumericAbort) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


ABLATE_FIELDS = ("axis", "value", "config", "trainable", "percent", "final_val_miou", "error")


def run_ablate(axis, values, base=None, out_dir=None, params_only=False, large_shape=False, parallel=1):
    """Sweep one axis; returns CSV text with one row per value.

    Runs are sequential unless ``parallel > 1``; each run seeds itself from its
    own configuration, so results do not depend on scheduling.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    if not values:
        raise ConfigError("ablate needs at least one value")
    if not params_only and not out_dir:
        raise ConfigError("ablate needs --out unless --params-only is given")
    if large_shape and not params_only:
        raise ConfigError("--large-shape sweeps are parameter-count only; add --params-only")
    base = base if base is not None else ExperimentConfig().to_dict()
    jobs = [(axis, v, base, out_dir, params_only, large_shape) for v in values]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(parallel) as pool:
            rows = list(pool.map(_ablate_one, jobs))
    else:
        rows = [_ablate_one(j) for j in jobs]
    buf = io.StringIO()
    w = csv.DictWriter(buf, ABLATE_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------- report

def _read_metrics_mean(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        if row.get("class") == "mean":
            return row
    raise DataError(f"{path}: no mean row")


def run_report(run_dirs, out_dir=None):
    """Merge run directories into ``(markdown, table_csv, curves_csv, problems)``."""
    table, curves, problems = [], [], []
    for d in run_dirs:
        name = os.path.basename(os.path.normpath(d))
        log_path = os.path.join(d, "train_log.csv")
        try:
            log = TrainLog.read(log_path)
        except (OSError, DataError) as exc:
            problems.append(f"{d}: {getattr(exc, 'strerror', None) or exc}")
            continue
        vals = log.validations()
        row = {"run": name, "iters": str(max((r[0] for r in log.rows), default=0)),
               "final_val_miou": f"{100 * vals[-1][1]:.2f}" if vals else "",
               "best_val_miou": f"{100 * max(v for _, v in vals):.2f}" if vals else "",
               "mIoU": "", "mAcc": "", "mDice": "", "aAcc": ""}
        for fname in ("metrics.csv", "val_metrics.csv"):
            path = os.path.join(d, fname)
            if os.path.exists(path):
                try:
                    mean = _read_metrics_mean(path)
                    row.update({"mIoU": mean["iou"], "mAcc": mean["acc"], "mDice": mean["dice"],
                                "aAcc": mean.get("aacc", "")})
                except (DataError, KeyError, csv.Error) as exc:
                    problems.append(f"{path}: malformed metrics CSV ({exc})")
                break
        table.append(row)
        curves.extend((name, it, loss) for it, loss in log.losses())

    fields = ["run", "iters", "final_val_miou", "best_val_miou", "mIoU", "mAcc", "mDice", "aAcc"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fields, lineterminator="\n")
    w.writeheader()
    w.writerows(table)
    table_csv = buf.getvalue()
    curves_csv = "run,iter,loss\n" + "".join(f"{r},{i},{l!r}\n" for r, i, l in curves)
    md = ["| " + " | ".join(fields) + " |", "|" + "---|" * len(fields)]
    md += ["| " + " | ".join(r[f] for f in fields) + " |" for r in table]
    if problems:
        md += ["", "Problems:"] + [f"- {p}" for p in problems]
    markdown = "\n".join(md) + "\n"
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write(os.path.join(out_dir, "report.md"), markdown)
        _write(os.path.join(out_dir, "report.csv"), table_csv)
        _write(os.path.join(out_dir, "loss_curves.csv"), curves_csv)
    return markdown, table_csv, curves_csv, problems


# ---------------------------------------------------------------- entry point

def build_parser():
    p = _Parser(prog="cloudadapt", description="Frozen-backbone cloud segmentation adapter toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--size")
    g.add_argument("--cover")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train the adapter and write logs and checkpoints")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--data", help="dataset directory (overrides synthetic generation)")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset directory")
    e.add_argument("--config", help="accepted for symmetry; the checkpoint carries its own model config")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--batch-size", type=int, default=4)

    m = sub.add_parser("metrics", help="score predicted PGM masks against ground truth")
    m.add_argument("--config")
    m.add_argument("--pred", required=True)
    m.add_argument("--gt", required=True)
    m.add_argument("--classes", type=int)
    m.add_argument("--ignore", type=int)
    m.add_argument("--out")

    a = sub.add_parser("ablate", help="sweep one configuration axis")
    a.add_argument("--config")
    a.add_argument("--axis", required=True, choices=ABLATION_AXES)
    a.add_argument("--values", required=True, help="comma-separated values")
    a.add_argument("--out")
    a.add_argument("--iters", type=int)
    a.add_argument("--params-only", action="store_true")
    a.add_argument("--large-shape", action="store_true", help="count parameters at the large reference shape")
    a.add_argument("--parallel", type=int, default=1)

    r = sub.add_parser("report", help="merge run directories into comparison tables")
    r.add_argument("--config")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out")
    return p


def _config_dict(path):
    return _base_config(path).to_dict()


def _dispatch(args):
    if args.command == "gen-data":
        d = _config_dict(args.config)["data"]
        size = parse_size(args.size) if args.size else tuple(d["size"])
        cover = parse_cover(args.cover) if args.cover else d["cover"]
        count = args.count if args.count is not None else d["count"]
        if count < 0:
            raise UsageError("--count must be >= 0")
        n = run_gen_data(args.out, count, size, cover, args.seed if args.seed is not None else d["seed"])
        print(f"wrote {n} samples to {args.out}")
    elif args.command == "train":
        d = _config_dict(args.config)
        _apply(d, "data", "path", args.data)
        _apply(d, "training", "max_iters", args.iters)
        _apply(d, "training", "seed", args.seed)
        if args.iters is not None and d["training"]["warmup_iters"] >= max(args.iters, 1):
            d["training"]["warmup_iters"] = max(0, args.iters // 40)
        cfg = ExperimentConfig.from_dict(d).validate()
        progress = None
        if not args.quiet:
            every = max(1, cfg.training.max_iters // 20)

            def progress(it, lr, loss):
                if it % every == 0:
                    print(f"iter {it} lr {lr:.3e} loss {loss:.4f}", flush=True)
        log = run_train(cfg, args.out, args.resume, progress)
        vals = log.validations()
        if vals:
            print(f"final val mIoU {100 * vals[-1][1]:.2f}")
    elif args.command == "eval":
        summary = run_eval(args.ckpt, args.data, args.out, batch_size=args.batch_size)
        print(f"mIoU {100 * summary['mIoU']:.2f}  aAcc {100 * summary['aAcc']:.2f}")
    elif args.command == "metrics":
        classes = args.classes if args.classes is not None else _base_config(args.config).model.num_classes
        text = run_metrics(args.pred, args.gt, classes, args.ignore)
        if args.out:
            _write(args.out, text)
        else:
            sys.stdout.write(text)
    elif args.command == "ablate":
        base = _config_dict(args.config)
        _apply(base, "training", "max_iters", args.iters)
        if args.iters is not None and base["training"]["warmup_iters"] >= max(args.iters, 1):
            base["training"]["warmup_iters"] = max(0, args.iters // 40)
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        if args.parallel < 1:
            raise UsageError("--parallel must be >= 1")
        text = run_ablate(args.axis, values, base, args.out, args.params_only, args.large_shape, args.parallel)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            _write(os.path.join(args.out, "ablation.csv"), text)
        sys.stdout.write(text)
    elif args.command == "report":
        markdown, _, _, problems = run_report(args.runs, args.out)
        sys.stdout.write(markdown)
        if len(problems) == len(args.runs):
            raise DataError("no readable runs")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
