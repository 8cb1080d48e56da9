"""command line entry point: seqbench, mnist, inspect, verify-data"""

from pathlib import Path
from typing import Any, Sequence
import argparse
import json
import shlex
import sys
import time

import numpy as np
from pydantic import ValidationError
from loguru import logger

from mnist import STAGES, run_pipeline, verify_data
from reports import describe_nodes, render_table, write_csv
from schemas import ConfigError, DestinError, RunConfig, deep_merge, parse_override
from sequence_bench import decay_slope, run_benchmark
from snapshots import load_snapshot
from utils import config_hash, default_jobs, get_resource_path, setup_logging, write_json

DEFAULT_OUT_DIR = Path("output")


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file merged over the profile")
    common.add_argument("--profile", choices=["desk", "full"], default="desk")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, help="worker count (default: available cores)")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value, may be repeated",
    )
    common.add_argument("--out-dir", type=Path, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite completed outputs")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    help_file = get_resource_path("static/help.md")
    epilog = help_file.read_text(encoding="utf-8") if help_file.exists() else None
    parser = argparse.ArgumentParser(
        prog="destin",
        description="Recurrent clustering hierarchy, sequence benchmark and MNIST pipeline",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_flags()

    sub.add_parser("seqbench", parents=[common], help="temporal sequence benchmark grid")

    mnist = sub.add_parser("mnist", parents=[common], help="hierarchy + ensemble on MNIST")
    mnist.add_argument("--stage", choices=STAGES, help="run a single stage")
    mnist.add_argument("--data-dir", help=f"MNIST directory (or ${RunConfig.DATA_DIR_ENV})")

    inspect = sub.add_parser("inspect", parents=[common], help="summarize a snapshot file")
    inspect.add_argument("snapshot", type=Path)

    verify = sub.add_parser("verify-data", parents=[common], help="check MNIST files")
    verify.add_argument("--data-dir", help=f"MNIST directory (or ${RunConfig.DATA_DIR_ENV})")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, Any] = {}
    for item in args.overrides:
        overrides = deep_merge(overrides, parse_override(item))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    return RunConfig.load(args.config, profile=args.profile, overrides=overrides)


def _out_dir(args: argparse.Namespace) -> Path:
    return args.out_dir or DEFAULT_OUT_DIR / args.command


def cmd_seqbench(cfg: RunConfig, out_dir: Path, force: bool, command: str) -> int:
    digest = config_hash(cfg.hashed_dump())
    meta_path = out_dir / "seqbench_meta.json"
    if meta_path.exists() and not force:
        previous = json.loads(meta_path.read_text(encoding="utf-8"))
        raise ConfigError(
            "out_dir",
            f"{out_dir} already holds a benchmark run (config hash {previous.get('config_hash')}); "
            "pass --force to overwrite",
        )

    started = time.perf_counter()
    result = run_benchmark(cfg.seqbench, cfg.seed, cfg.node, jobs=default_jobs(cfg.jobs))
    write_csv(result.runs, out_dir / "seqbench_runs.csv")
    write_csv(result.summary, out_dir / "seqbench_summary.csv")

    slopes = {}
    if len(cfg.seqbench.L_values) > 1:
        slopes = {str(K): decay_slope(result.summary, K) for K in cfg.seqbench.K_values}
    write_json(
        meta_path,
        {
            "config_hash": digest,
            "seed": cfg.seed,
            "command": command,
            "decay_slopes": slopes,
        },
    )
    write_json(
        out_dir / "run_meta.json",
        {
            "config_hash": digest,
            "seed": cfg.seed,
            "command": command,
            "stage_timings": {"seqbench": round(time.perf_counter() - started, 3)},
        },
    )

    rows = result.summary[["L", "K", "mean_accuracy", "std_accuracy"]].itertuples(index=False)
    print(render_table(["L", "K", "mean accuracy", "std"], [list(r) for r in rows]))
    for K, slope in slopes.items():
        print(f"K={K}: slope of log(acc - 0.5) vs L = {slope:.4f}")
    return 0


def cmd_mnist(
    cfg: RunConfig,
    data_dir: Path | None,
    out_dir: Path,
    stage: str | None,
    force: bool,
    command: str,
) -> int:
    report = run_pipeline(
        cfg, data_dir, out_dir, stage=stage, force=force, jobs=default_jobs(cfg.jobs), command=command
    )
    if report is not None:
        print(f"accuracy: {report['accuracy']:.4f} on {report['n_test']} test images")
        per_class = [[c, acc] for c, acc in enumerate(report["per_class_accuracy"])]
        print(render_table(["class", "accuracy"], per_class))
    return 0


def cmd_inspect(snapshot_path: Path) -> str:
    doc = load_snapshot(snapshot_path)
    header = (
        f"{snapshot_path.name}: kind={doc.kind} version={doc.version} "
        f"config_hash={doc.config_hash} seed={doc.seed}\n\n"
    )
    if doc.kind == "node":
        return header + describe_nodes("Node", [("node", [doc.node.to_node()])])
    if doc.kind == "hierarchy":
        h = doc.to_hierarchy()
        layers = [
            (f"{li} ({layer.spec.grid[0]}x{layer.spec.grid[1]})", layer.nodes)
            for li, layer in enumerate(h.layers)
        ]
        return header + f"window {h.window}, {h.node_count} nodes\n\n" + describe_nodes("Hierarchy", layers)
    rows = []
    for i, m in enumerate(doc.members):
        norms = [float(np.linalg.norm(np.asarray(w))) for w in m.weights]
        rows.append([i, "x".join(map(str, doc.layer_sizes)), " ".join(f"{n:.3g}" for n in norms)])
    summary = (
        f"members {doc.spec.n_members}, ncl_lambda {doc.spec.ncl_lambda}, "
        f"epochs {doc.spec.member.epochs}\n\n"
    )
    return header + summary + render_table(["member", "layers", "weight norms"], rows)


def cmd_verify_data(data_dir: Path | None) -> int:
    if data_dir is None:
        raise ConfigError("--data-dir", f"pass --data-dir or set {RunConfig.DATA_DIR_ENV}")
    rows = verify_data(data_dir)
    print(render_table(["split", "file", "status", "checksum"], [list(r.values()) for r in rows]))
    bad = [r for r in rows if r["status"] != "ok" or r["checksum"] == "MISMATCH"]
    return 3 if bad else 0


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    command = shlex.join(["destin", *argv])
    out_dir = _out_dir(args) if args.command in ("seqbench", "mnist") else None
    setup_logging(out_dir, args.verbose)
    try:
        if args.command == "inspect":
            print(cmd_inspect(args.snapshot))
            return 0
        if args.command == "verify-data":
            return cmd_verify_data(RunConfig.data_dir(args.data_dir))

        cfg = resolve_config(args)
        logger.info(f"{command} (seed={cfg.seed}, config hash {config_hash(cfg.hashed_dump())[:12]})")
        if args.command == "seqbench":
            return cmd_seqbench(cfg, out_dir, args.force, command)
        return cmd_mnist(
            cfg, RunConfig.data_dir(args.data_dir), out_dir, args.stage, args.force, command
        )
    except DestinError as e:
        logger.error(str(e))
        return e.exit_code
    except ValidationError as e:
        logger.error(f"invalid configuration: {e}")
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
