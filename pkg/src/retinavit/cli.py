"""``retinavit`` command line: train, eval, probe, ablate, inspect-posembed, export-plots."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config
from .data import DataError
from .encoder import DivergenceError
from .posembed import grid_for_spec, posembed_sequence
from .probe import ProbeReport, finalize, plot_report, run_probe
from .pyramid import build_pyramid, extract_patches
from .training import ablate_depth, build_model, configure_threads, evaluate, train

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4
VERBS = ("train", "eval", "probe", "ablate", "inspect-posembed", "export-plots")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retinavit", description=__doc__, epilog=config.help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", metavar="PATH", help="key=value config file")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                        help="override one config key (repeatable)")
    parser.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    parser.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    parser.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    parser.add_argument("--checkpoint", metavar="PATH", help="model checkpoint (eval, probe)")
    parser.add_argument("--report", metavar="PATH", help="probe report JSON (export-plots)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


class Outputs:
    def __init__(self, root: Path, force: bool):
        self.root, self.force = root, force

    def path(self, name: str) -> Path:
        p = self.root / name
        if p.exists() and not self.force:
            raise CliError(EXIT_CONFIG, "config", f"{p} exists; pass --force to overwrite")
        return p

    def write(self, name: str, data):
        checkpoint.atomic_write(self.path(name), data)


def _load_model(args, values):
    if args.checkpoint:
        try:
            return checkpoint.load(args.checkpoint)
        except (OSError, checkpoint.CheckpointError) as exc:
            raise CliError(EXIT_DATA, "data", f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    return build_model(config.train_config(values))


def cmd_train(args, values, out: Outputs):
    cfg = config.train_config(values)
    train_set = config.dataset(values, "data")
    eval_set = config.dataset(values, "eval_data")
    ckpt, log_path = out.path("checkpoint.rvit"), out.path("train_log.jsonl")
    out.write("config.txt", config.dump(values))
    result = train(cfg, train_set, eval_set, log_path=log_path, checkpoint_path=ckpt)
    last = result.log[-1]
    print(f"train_loss={last['train_loss']:.6f} eval_top1={last['eval_top1']}")


def cmd_eval(args, values, out: Outputs):
    if not args.checkpoint:
        raise CliError(EXIT_CONFIG, "config", "eval requires --checkpoint")
    model = _load_model(args, values)
    ds = config.dataset(values, "eval_data")
    if ds is None:
        raise CliError(EXIT_CONFIG, "config", "eval_data is 'none'")
    top1 = evaluate(model, ds)
    out.write("eval.json", json.dumps({"top1": top1, "count": len(ds), "checkpoint": args.checkpoint}) + "\n")
    print(f"top1={top1:.6f}")


def cmd_probe(args, values, out: Outputs):
    model = _load_model(args, values)
    if not hasattr(model, "spec"):
        raise CliError(EXIT_CONFIG, "config", "probe needs a RetinaViT checkpoint")
    n = config._int(values, "probe_images")
    vals = dict(values, train_size=str(n), base_edge=str(model.spec.base_edge),
                num_classes=str(model.config.num_classes))
    ds = config.dataset(vals, "data")
    images = ds.images[:n]
    acc = run_probe(model, images, aggregate=values["probe_aggregate"], norm=values["probe_norm"])
    cfg = model.config
    echo = {"dim": cfg.dim, "depth": cfg.depth, "heads": cfg.heads, "mlp_dim": cfg.mlp_dim,
            "patch_edge": cfg.patch_edge, "pooling": cfg.pooling, "base_edge": model.spec.base_edge,
            "stride": model.spec.stride, "levels": list(model.spec.levels),
            "checkpoint": args.checkpoint, "data": values["data"]}
    report = finalize(acc, model.spec, echo)
    out.write("probe.json", report.to_json())
    out.write("probe.csv", report.to_csv())
    print(f"probe count={report.count} positions={report.means.shape[2]} boundaries={report.boundaries}")


def cmd_ablate(args, values, out: Outputs):
    cfg = config.train_config(values)
    train_set = config.dataset(values, "data")
    eval_set = config.dataset(values, "eval_data")
    table = ablate_depth(cfg, config.depths(values), train_set, eval_set)
    out.write("ablation.csv", table.to_csv())
    sys.stdout.write(table.to_csv())


def cmd_inspect(args, values, out: Outputs):
    spec = config.pyramid_spec(values)
    enc = config.encoder_config(values)
    blank = np.zeros((spec.base_edge, spec.base_edge, enc.channels))
    patches = extract_patches(build_pyramid(blank, spec))
    embeds = posembed_sequence(patches, grid_for_spec(spec, enc.dim, enc.temperature),
                               config.resolved_norm_scale(values))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = min(8, enc.dim)
    w.writerow(["level", "row", "col", "top", "left", "edge", "norm"] + [f"c{i}" for i in range(k)])
    for p, e in zip(patches, embeds):
        w.writerow([p.level_index, p.grid_row, p.grid_col, *(repr(float(v)) for v in p.rf_box),
                    repr(float(np.linalg.norm(e.vector)))] + [repr(float(v)) for v in e.vector[:k]])
    out.write("posembed.csv", buf.getvalue())
    print(f"wrote {len(patches)} embeddings")


def cmd_export_plots(args, values, out: Outputs):
    if not args.report:
        raise CliError(EXIT_CONFIG, "config", "export-plots requires --report")
    try:
        report = ProbeReport.from_dict(json.loads(Path(args.report).read_text()))
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_DATA, "data", f"cannot read report {args.report}: {exc}") from None
    for name, svg in plot_report(report).items():
        out.write(f"{name}.svg", svg)
        print(f"wrote {name}.svg")


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "probe": cmd_probe, "ablate": cmd_ablate,
            "inspect-posembed": cmd_inspect, "export-plots": cmd_export_plots}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    try:
        overrides = list(args.overrides) + ([f"seed={args.seed}"] if args.seed is not None else [])
        values = config.load(args.config, overrides)
        COMMANDS[args.verb](args, values, Outputs(Path(args.out), args.force))
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except config.ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except DataError as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGED, "divergence", str(exc))
    return 0


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
