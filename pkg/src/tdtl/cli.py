"""Command line entry point: ``tdtl {gen,features,train-tdtl,baseline,eval}``.

Exit codes: 0 success, 2 usage, 3 input/output, 4 numeric or runtime failure.
Every subcommand accepts ``--config FILE`` with ``key=value`` lines (keys are
flag names without dashes); flags given on the command line win.
"""
import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, adapt, data, features, metrics, nn
from . import transductive as T

log = logging.getLogger("tdtl")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
CSV_FORMAT_VERSION = 1


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# small helpers


def _int_list(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _float_list(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def parse_grid(text):
    """``"1:300"`` / ``"10:100:10"`` (inclusive) or a comma list."""
    text = text.strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) == 2:
            parts.append(1.0)
        lo, hi, step = parts
        if step <= 0:
            raise argparse.ArgumentTypeError("grid step must be positive")
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        values = [lo + i * step for i in range(max(n, 0))]
    else:
        values = [float(v) for v in text.split(",") if v.strip()]
    if not values:
        raise argparse.ArgumentTypeError("empty grid")
    return tuple(values)


def parse_schedule(text):
    """``"1,0;0,1"`` -> ((1.0, 0.0), (0.0, 1.0))."""
    pairs = []
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        vals = _float_list(chunk)
        if len(vals) != 2 or any(v not in (0.0, 1.0) for v in vals):
            raise argparse.ArgumentTypeError(f"schedule step {chunk!r} must be two of 0/1")
        pairs.append(vals)
    if not pairs:
        raise argparse.ArgumentTypeError("empty schedule")
    return tuple(pairs)


def read_config_file(path):
    values = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def write_run_meta(out_dir, command, args, extra=None):
    lines = ["[run_meta]", f"command={command}", f"version={__version__}",
             f"seed={args.seed}", f"format.csv={CSV_FORMAT_VERSION}",
             f"format.checkpoint={nn.CHECKPOINT_VERSION}"]
    for key in sorted(vars(args)):
        if key in ("func", "command"):
            continue
        lines.append(f"flag.{key}={_meta_value(getattr(args, key))}")
    for key, value in (extra or {}).items():
        lines.append(f"{key}={value}")
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "run_meta.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _meta_value(v):
    if isinstance(v, (tuple, list)):
        return ";".join(_meta_value(x) for x in v)
    return str(v)


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args):
    cfg = data.SyntheticConfig(
        n_classes=args.classes, views_per_domain=args.views, samples_per_cell=args.per_cell,
        mode=args.mode, dim=args.dim, shift=args.shift, rotation_step=args.rotation_step,
        noise_std=args.noise, target_noise_scale=args.target_noise_scale,
        class_weights=args.class_weights, seed=args.seed)
    source, target = data.generate_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ds, name in ((source, "source"), (target, "target")):
        if cfg.mode == "feature":
            feat_name = f"{name}_features.csv"
            for r in ds.manifest.records:
                r.path = feat_name
            data.save_feature_csv(out / feat_name, ds.x, ds.manifest)
        else:
            (out / "images").mkdir(exist_ok=True)
            for r, img in zip(ds.manifest.records, ds.x):
                r.path = f"images/{r.id}.pgm"
                data.write_pgm(out / r.path, img)
        data.save_manifest(out / f"{name}_manifest.csv", ds.manifest)
    if cfg.mode == "image":
        pts = data.synthetic_landmarks(cfg.image_size)
        ids = source.manifest.ids + target.manifest.ids
        data.save_landmarks(out / "landmarks.csv", {i: pts for i in ids})
    write_run_meta(out, "gen", args)
    print(f"gen: {len(source.manifest)} source + {len(target.manifest)} target samples "
          f"({cfg.mode} mode, seed {args.seed}) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# features


def cmd_features(args):
    if args.kind == "sift" and not args.landmarks:
        raise UsageError("sift features need --landmarks")
    manifest = data.load_manifest(args.manifest)
    root = Path(args.manifest).parent
    landmarks = data.load_landmarks(args.landmarks) if args.kind == "sift" else None
    rows = []
    for r in manifest.records:
        img = data.read_pgm(root / r.path)
        if args.kind == "lbp":
            rows.append(features.lbp_u2_histogram(img))
        else:
            if r.id not in landmarks:
                raise UsageError(f"no landmarks for image {r.id!r}")
            rows.append(features.sift_at_landmarks(img, landmarks[r.id]))
    width = features.LBP_LENGTH if args.kind == "lbp" else features.SIFT_LENGTH
    x = np.array(rows).reshape(len(rows), width)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_feature_csv(out, x, manifest)
    write_run_meta(out.parent, "features", args)
    print(f"features: {len(rows)} x {width} {args.kind} values -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-tdtl


def cmd_train_tdtl(args):
    xs, ms = data.load_feature_csv(args.source)
    xt, mt = data.load_feature_csv(args.target)
    if ms.n_classes != mt.n_classes:
        raise UsageError("source and target disagree on the class count")
    if not ms.has_labels:
        raise UsageError("every source sample needs a label")
    if xs.shape[1] != xt.shape[1]:
        raise UsageError(f"source has {xs.shape[1]} features, target {xt.shape[1]}")
    c = ms.n_classes
    if not args.no_center:
        xs, xt = T.center_domains(xs, xt)
    spec = nn.default_architecture(xs.shape[1], c, hidden=args.hidden, drop_rate=args.dropout)
    try:
        schedule = T.TrainSchedule(epochs_max=args.epochs, batch_size=args.batch_size,
                                   source_fraction=args.source_fraction,
                                   alternation=args.schedule,
                                   convergence_rel_tol=args.rel_tol,
                                   convergence_window=args.window)
        weights = T.LossWeights(alpha=args.alpha)
        optimizer = nn.OptimizerConfig(args.lr_backbone, args.lr_transfer, args.lr_labels, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = T.train(xs, ms.labels, xt, spec, schedule, weights, optimizer,
                    n_classes=c, target_ids=mt.ids)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(out / "model.tdtl", model.params)
    pred = T.predict_labels(model.labels)
    truth = mt.labels
    _write_csv(out / "predictions.csv", ["sample_id", "predicted_class", "true_class"],
               [(i, int(p), int(t)) for i, p, t in zip(mt.ids, pred, truth)])
    _write_csv(out / "loss_history.csv", ["step", "lambda1", "lambda2", "loss"],
               [(k, _num(l1), _num(l2), repr(loss)) for k, ((l1, l2), loss)
                in enumerate(zip(model.step_weights, model.loss_history))])
    zero_frac = model.labels.zero_fraction()
    extra = {"epochs_run": model.epochs_run, "steps": len(model.loss_history),
             "label_zero_fraction": f"{zero_frac:.6f}"}
    summary = f"train-tdtl: {model.epochs_run} epochs, P zero fraction {zero_frac:.4f}"
    if mt.has_labels:
        report = metrics.evaluate(pred, truth, c)
        metrics.write_report(out / "metrics.csv", report, mt.class_names)
        extra["accuracy_percent"] = f"{report.accuracy_percent:.4f}"
        extra["f1_macro"] = f"{report.f1_macro:.4f}"
        summary += f", target accuracy {report.accuracy_percent:.2f}%, macro F1 {report.f1_macro:.4f}"
    write_run_meta(out, "train-tdtl", args, extra)
    print(summary)
    return EXIT_OK


def _num(v):
    return int(v) if float(v).is_integer() else v


# ---------------------------------------------------------------------------
# baseline


def cmd_baseline(args):
    xs, ms = data.load_feature_csv(args.source)
    xt, mt = data.load_feature_csv(args.target)
    if not ms.has_labels or not mt.has_labels:
        raise UsageError("baseline sweeps need labels on both domains (target labels score the sweep)")
    if xs.shape[1] != xt.shape[1]:
        raise UsageError(f"source has {xs.shape[1]} features, target {xt.shape[1]}")
    grid = args.grid if args.grid is not None else adapt.DEFAULT_GRIDS[args.method]
    if args.method in ("sa", "gfk"):
        grid = tuple(int(round(v)) for v in grid)
    rows = adapt.sweep(args.method, xs, ms.labels, xt, mt.labels, grid=grid,
                       n_classes=ms.n_classes, tca_dim=args.tca_dim)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, ["method", "param", "value", "accuracy", "f1_macro"],
               [(m, p, _num(v), f"{acc:.4f}", f"{f1:.4f}") for m, p, v, acc, f1 in rows])
    best = adapt.best_row(rows)
    write_run_meta(out.parent, "baseline", args,
                   {"best_value": _num(best[2]), "best_accuracy": f"{best[3]:.4f}"})
    print(f"best {best[0]} {best[1]}={_num(best[2])}: accuracy {best[3]:.2f}%, macro F1 {best[4]:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _read_label_file(path, column):
    """Map sample id -> label from a predictions CSV or a manifest/feature CSV."""
    text = Path(path).read_text(encoding="utf-8")
    first = next((ln for ln in text.splitlines() if not ln.startswith("#")), "")
    if first.startswith("sample_id,"):
        reader = csv.DictReader(io.StringIO(text))
        out = {}
        for line_no, row in enumerate(reader, start=2):
            try:
                out[row["sample_id"]] = int(row[column])
            except (KeyError, TypeError, ValueError):
                raise data.DataFormatError(f"{path}:{line_no}: bad {column} field") from None
        return out, None
    if first.startswith("id,path,"):
        m = data.load_manifest(path)
    else:
        _, m = data.load_feature_csv(path)
    return dict(zip(m.ids, m.labels.tolist())), m


def cmd_eval(args):
    pred, _ = _read_label_file(args.predictions, "predicted_class")
    if args.truth:
        truth, manifest = _read_label_file(args.truth, "predicted_class")
    else:
        truth, manifest = _read_label_file(args.predictions, "true_class")
    missing = [i for i in pred if i not in truth]
    if missing:
        raise UsageError(f"{len(missing)} predicted ids have no truth entry (first: {missing[0]!r})")
    ids = [i for i in pred if truth[i] >= 0]
    if not ids:
        raise UsageError("no sample has a known true class")
    p = np.array([pred[i] for i in ids])
    t = np.array([truth[i] for i in ids])
    c = args.classes or (manifest.n_classes if manifest else int(max(p.max(), t.max())) + 1)
    names = manifest.class_names if manifest and manifest.n_classes == c else None
    report = metrics.evaluate(p, t, c)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_report(out, report, names)
    write_run_meta(out.parent, "eval", args)
    print(f"eval: {report.n_samples} samples, accuracy {report.accuracy_percent:.2f}%, "
          f"macro F1 {report.f1_macro:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="tdtl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tdtl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--config", help="key=value file; command-line flags override it")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen", help="write a synthetic two-domain dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("feature", "image"), default="feature")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--views", type=int, default=2, help="views per domain")
    p.add_argument("--per-cell", type=int, default=25, help="samples per (class, view, domain)")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--shift", type=float, default=data.SyntheticConfig.shift)
    p.add_argument("--rotation-step", type=float, default=data.SyntheticConfig.rotation_step)
    p.add_argument("--noise", type=float, default=data.SyntheticConfig.noise_std)
    p.add_argument("--target-noise-scale", type=float, default=1.0)
    p.add_argument("--class-weights", type=_float_list, default=None,
                   help="comma list, e.g. 4,4,4,1")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("features", help="LBP or SIFT features for an image manifest")
    common(p)
    p.add_argument("--kind", choices=("lbp", "sift"), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--landmarks")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train-tdtl", help="train the transductive network and label matrix")
    common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--source-fraction", type=float, default=0.5)
    p.add_argument("--lr-backbone", type=float, default=0.01)
    p.add_argument("--lr-transfer", type=float, default=0.005)
    p.add_argument("--lr-labels", type=float, default=0.25)
    p.add_argument("--alpha", type=float, default=T.LossWeights.alpha)
    p.add_argument("--schedule", type=parse_schedule, default=((1.0, 0.0), (0.0, 1.0)),
                   help='(lambda1,lambda2) pattern, e.g. "1,0;0,1"')
    p.add_argument("--hidden", type=_int_list, default=(64, 32))
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--rel-tol", type=float, default=1e-4)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--no-center", action="store_true",
                   help="skip per-domain mean removal of the inputs")
    p.set_defaults(func=cmd_train_tdtl)

    p = sub.add_parser("baseline", help="SA / GFK / TCA parameter sweep with 1-NN")
    common(p)
    p.add_argument("--method", choices=("sa", "gfk", "tca"), required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=parse_grid, default=None,
                   help='"lo:hi[:step]" inclusive or comma list; defaults follow each method')
    p.add_argument("--tca-dim", type=int, default=adapt.TCA_DIM)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="metrics report for a predictions file")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", help="predictions, manifest or feature CSV; defaults to true_class")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def _peek_config(argv):
    """Subcommand name and ``--config`` path, found before full parsing."""
    command = config = None
    it = iter(argv)
    for tok in it:
        if tok == "--config":
            config = next(it, None)
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
        elif command is None and not tok.startswith("-"):
            command = tok
    return command, config


def parse_args(parser, argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    command, config = _peek_config(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    if config and command in subparsers:
        try:
            values = read_config_file(config)
        except OSError as exc:
            parser.exit(EXIT_IO, f"tdtl: cannot read config: {exc}\n")
        except UsageError as exc:
            parser.exit(EXIT_USAGE, f"tdtl: {exc}\n")
        sub = subparsers[command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in values.items():
            action = known.get(key)
            if action is None or key in ("config", "help"):
                parser.exit(EXIT_USAGE, f"tdtl: unknown config key {key!r}\n")
            if action.nargs == 0:
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    value = action.type(raw) if action.type else raw
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    parser.exit(EXIT_USAGE, f"tdtl: config {key}: {exc}\n")
                if action.choices is not None and value not in action.choices:
                    parser.exit(EXIT_USAGE, f"tdtl: config {key}: {value!r} not one of {list(action.choices)}\n")
                defaults[key] = value
            action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    args = parse_args(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tdtl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, data.DataFormatError) as exc:
        print(f"tdtl {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (T.TrainingError, adapt.NumericError, adapt.InfeasibleGrid, FloatingPointError) as exc:
        print(f"tdtl {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
