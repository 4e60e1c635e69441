"""Command line entry point: ``featstyle <command> [options]``.

Exit codes: 0 success, 1 invalid input or failed check, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..data import SHAPES, generate_task, leave_one_domain_out, load_dataset, save_dataset
from ..errors import FeatStyleError, NumericalError
from ..gradcheck import run_suites
from ..model import load_checkpoint, save_checkpoint
from . import report
from .ablation import AXES, grid
from .config import PRESETS, RunConfig, load_config
from .runner import evaluate, run_protocol, train_split

log = logging.getLogger("featstyle")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; 2 is reserved for numerical failures here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--workers", type=int, default=1, help="parallel processes for protocol splits")
    p.add_argument("--no-plots", action="store_true", help="skip matplotlib figures")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="featstyle", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on one leave-one-domain-out split")
    _common(p)
    p.add_argument("--target", type=int, help="held-out domain")

    p = sub.add_parser("protocol", help="every domain as target, for each seed")
    _common(p)
    p.add_argument("--seeds", type=int, help="number of seeds")

    p = sub.add_parser("ablate", help="run one ablation grid")
    _common(p)
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--seeds", type=int, help="number of seeds")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("gen-data", help="write the synthetic task to a binary container")
    _common(p)
    p.add_argument("--manifest", action="store_true", help="also write a CSV manifest")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one domain")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--data", type=Path, help="dataset container (default: regenerate from the checkpoint's config)")
    p.add_argument("--domain", type=int, help="domain to evaluate (default: the checkpoint's target)")
    return parser


def _config(args, **extra) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise FeatStyleError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return load_config(args.config, args.preset, **overrides)


def _prepare_out(out: Path, cfg: RunConfig, args) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    if args.config is not None:
        (out / "config.source.txt").write_text(Path(args.config).read_text())
    return out


def _domain_names(cfg: RunConfig) -> list[str]:
    from ..data import domain_specs

    return [s.name for s in domain_specs(cfg.num_domains, cfg.data_seed)]


def cmd_train(args) -> int:
    cfg = _config(args, target_domain=args.target)
    out = _prepare_out(args.out, cfg, args)
    dataset = generate_task(cfg.task())
    split = leave_one_domain_out(dataset, cfg.target_domain, cfg.val_fraction, cfg.data_seed)
    result = train_split(cfg, dataset, split, cfg.seed)
    report.write_metrics(out / "metrics.csv", [result])
    report.write_timing(out / "timing.csv", [result])
    save_checkpoint(out / "model.ckpt", result.model, asdict(cfg))
    print("target_domain,seed,selected_epoch,val_accuracy,test_accuracy")
    print(f"{result.target_domain},{result.seed},{result.selected_epoch},{result.val_accuracy:.6f},{result.test_accuracy:.6f}")
    return EXIT_OK


def _protocol_outputs(out: Path, cfg: RunConfig, results, plots: bool, title: str) -> list[list]:
    names = _domain_names(cfg)
    report.write_metrics(out / "metrics.csv", results)
    report.write_timing(out / "timing.csv", results)
    report.write_rows(out / "protocol.csv", report.PROTOCOL_HEADER, report.protocol_rows(results, names))
    rows = report.summary_rows(results, names)
    report.write_rows(out / "summary.csv", report.SUMMARY_HEADER, rows)
    if plots:
        report.plot_bars(out / "protocol.png", [r[1] for r in rows], [r[2] for r in rows], [r[3] for r in rows],
                         title, "target accuracy (%)")
    return rows


def cmd_protocol(args) -> int:
    cfg = _config(args, seeds=args.seeds)
    out = _prepare_out(args.out, cfg, args)
    results = run_protocol(cfg, seeds=[cfg.seed + i for i in range(cfg.seeds)], workers=args.workers)
    rows = _protocol_outputs(out, cfg, results, not args.no_plots, "leave-one-domain-out")
    print(",".join(report.SUMMARY_HEADER))
    for row in rows:
        print(",".join(report._fmt(v) for v in row))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _config(args, seeds=args.seeds)
    out = _prepare_out(args.out, base, args)
    variants = grid(args.axis, base)
    header = ["axis", "variant", "seed", "lodo_average"]
    rows, labels, means, stds = [], [], [], []
    for v in variants:
        cfg = base.with_overrides(**v.overrides).validate()
        sub = out / v.name.replace("=", "")
        sub.mkdir(exist_ok=True)
        (sub / "config.txt").write_text(cfg.dump())
        results = run_protocol(cfg, seeds=[cfg.seed + i for i in range(cfg.seeds)], workers=args.workers)
        _protocol_outputs(sub, cfg, results, False, v.name)
        avg = report.seed_averages(results)
        for seed, a in zip(sorted({r.seed for r in results}), avg):
            rows.append([args.axis, v.name, seed, float(a)])
        labels.append(v.name)
        means.append(float(avg.mean()))
        stds.append(float(avg.std()))
        log.info("%s %s: %.4f +- %.4f", args.axis, v.name, means[-1], stds[-1])
    report.write_rows(out / "grid.csv", header, rows)
    summary = [[args.axis, lab, m, s] for lab, m, s in zip(labels, means, stds)]
    report.write_rows(out / "grid_summary.csv", ["axis", "variant", "mean_lodo_average", "std_lodo_average"], summary)
    report.write_dat(out / "grid.dat", labels, means, stds)
    if not args.no_plots:
        if args.axis == "scale":
            report.plot_curve(out / "grid.png", [float(v.overrides["s_mu"]) for v in variants], means, stds,
                              "style scale sweep", "scale s")
        else:
            report.plot_bars(out / "grid.png", labels, means, stds, f"ablation: {args.axis}", "LODO average (%)")
    print("axis,variant,mean_lodo_average,std_lodo_average")
    for row in summary:
        print(",".join(report._fmt(v) for v in row))
    if args.axis == "scale":
        verdict = report.scale_verdict([float(v.overrides["s_mu"]) for v in variants], means)
        (out / "verdict.json").write_text(json.dumps(verdict, indent=2, sort_keys=True) + "\n")
        print(f"# scale verdict: {verdict['verdict']} (best s = {verdict['best_scale']})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suites(args.seed, args.instances, args.tolerance)
    print("component,max_rel_error,tolerance,status")
    for r in results:
        print(f"{r.name},{r.max_rel_error:.3e},{r.tolerance:.0e},{'pass' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out, cfg, args)
    dataset = generate_task(cfg.task())
    path = out / "task.bin"
    save_dataset(dataset, path, manifest=args.manifest)
    print("domain,name,samples," + ",".join(SHAPES[: cfg.num_classes]))
    for d, spec in enumerate(dataset.specs):
        counts = np.bincount(dataset.labels[dataset.domains == d], minlength=cfg.num_classes)
        print(f"{d},{spec.name},{counts.sum()}," + ",".join(str(c) for c in counts))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    cfg = RunConfig(**{**header["config"], "stage_channels": tuple(header["config"]["stage_channels"])}).validate()
    dataset = load_dataset(args.data) if args.data else generate_task(cfg.task())
    domain = cfg.target_domain if args.domain is None else args.domain
    if not 0 <= domain < dataset.config.num_domains:
        raise FeatStyleError(f"unknown domain {domain}")
    acc = evaluate(model, dataset, dataset.domain_indices(domain))
    print("domain,samples,accuracy")
    print(f"{domain},{len(dataset.domain_indices(domain))},{acc:.6f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "protocol": cmd_protocol,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FeatStyleError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
