"""Command-line entry point: ``narpath <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .cbs import cbs_solve
from .core import read_scenario
from .data import KINDS, DatasetError, export_jsonl, group_by_scenario, import_jsonl
from .fusion import fusion_samples, train_fusion
from .harness.config import load_config
from .harness.evaluate import POLICIES, ConfigurationError, evaluate, make_policy
from .harness.pipeline import (
    collect_episodes,
    label_dataset,
    make_client,
    run_pipeline,
    scenario_spec,
    write_curve_csv,
    write_results,
)
from .harness.scenarios import GenerationError, gen_scenarios, read_scenario_files, write_scenario_files
from .harness.trajectory import export_trajectory
from .nar import pretrain_nar
from .nn import load_checkpoint, save_checkpoint

log = logging.getLogger("narpath")


def _common(p: argparse.ArgumentParser, out_help: str):
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config file)")
    p.add_argument("--config", type=Path, default=None, help="key = value run configuration file")
    p.add_argument("--out", type=Path, required=True, help=out_help)
    p.add_argument("--workers", type=int, default=None, help="parallel episodes for evaluation")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="narpath", description="LLM + neural algorithmic reasoner MAPF workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate solvable scenarios")
    _common(p, "directory for .scen files")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--agents", type=int)
    p.add_argument("--count", type=int, dest="scenarios")

    p = sub.add_parser("cbs", help="solve scenarios with CBS and export action labels")
    _common(p, "labels JSONL file")
    p.add_argument("--scenarios", type=Path, required=True, dest="scenario_dir")

    p = sub.add_parser("pretrain-nar", help="imitation-train the NAR on CBS labels")
    _common(p, "NAR checkpoint file (a .curve.csv is written next to it)")
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--steps", type=int, dest="nar_steps")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("collect-llm", help="roll out the LLM-only policy and export episode records")
    _common(p, "episodes JSONL file")
    p.add_argument("--scenarios", type=Path, required=True, dest="scenario_dir")
    p.add_argument("--client", choices=("stub", "live"))
    p.add_argument("--model")
    p.add_argument("--invalid-rate", type=float)

    p = sub.add_parser("train-fusion", help="train the fusion head with the LLM and NAR frozen")
    _common(p, "fusion checkpoint file (a .curve.csv is written next to it)")
    p.add_argument("--episodes", type=Path, required=True)
    p.add_argument("--nar", type=Path, required=True)
    p.add_argument("--steps", type=int, dest="fusion_steps")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("eval", help="evaluate a policy and write a results CSV")
    _common(p, "results CSV file")
    p.add_argument("--scenarios", type=Path, required=True, dest="scenario_dir")
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--nar", type=Path)
    p.add_argument("--fusion", type=Path)
    p.add_argument("--client", choices=("stub", "live"))
    p.add_argument("--model")
    p.add_argument("--repeats", type=int)
    p.add_argument("--runtime", action="store_true", help="include the wall-clock runtime column")

    p = sub.add_parser("traj", help="run one episode and export its trajectory as SVG + JSON")
    _common(p, "output prefix; <out>.svg and <out>.json are written")
    p.add_argument("--scenario", type=Path, required=True)
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--nar", type=Path)
    p.add_argument("--fusion", type=Path)
    p.add_argument("--client", choices=("stub", "live"))
    p.add_argument("--model")

    p = sub.add_parser("dataset", help="validate and merge JSONL datasets")
    _common(p, "merged JSONL file")
    p.add_argument("inputs", type=Path, nargs="+")
    p.add_argument("--kind", choices=KINDS)

    p = sub.add_parser("pipeline", help="run the full training pipeline end to end")
    _common(p, "artifact directory")
    p.add_argument("--scenarios", type=int)
    p.add_argument("--test-scenarios", type=int)
    p.add_argument("--nar-steps", type=int)
    p.add_argument("--fusion-steps", type=int)
    return parser


_CONFIG_KEYS = (
    "seed", "workers", "height", "width", "density", "agents", "scenarios", "test_scenarios", "nar_steps",
    "fusion_steps", "batch_size", "lr", "client", "model", "invalid_rate", "policy",
)


def _config(args):
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if isinstance(getattr(args, k, None), (int, float, str))}
    return load_config(args.config, **overrides)


def _checkpoint(path, kind):
    if path is None:
        return None
    if not Path(path).exists():
        raise ConfigurationError(f"checkpoint {path} not found")
    return load_checkpoint(path, kind)[0]


def _policy(args, cfg):
    client = make_client(cfg) if cfg.policy in ("stub-llm", "live-llm", "llm-nar") else None
    nar = _checkpoint(args.nar, "nar")
    fusion = _checkpoint(args.fusion, "fusion")
    return make_policy(cfg.policy, client, nar, fusion, cfg.node_budget)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        out = args.out
        if args.command == "gen":
            paths = write_scenario_files(gen_scenarios(scenario_spec(cfg)), out)
            print(f"wrote {len(paths)} scenarios to {out}")
        elif args.command == "cbs":
            n = export_jsonl(label_dataset(read_scenario_files(args.scenario_dir), cfg.node_budget), out)
            print(f"wrote {n} label records to {out}")
        elif args.command == "pretrain-nar":
            labels = import_jsonl(args.labels, kind="labels")
            nar, curve = pretrain_nar(labels, steps=cfg.nar_steps, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
            out.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out, nar, "nar", {"seed": cfg.seed})
            write_curve_csv(curve, out.with_suffix(".curve.csv"))
            print(f"final agreement {curve[-1].agreement:.4f}; checkpoint {out}")
        elif args.command == "collect-llm":
            records = collect_episodes(read_scenario_files(args.scenario_dir), make_client(cfg), cfg.seed)
            n = export_jsonl(records, out)
            print(f"wrote {n} episode records to {out}")
        elif args.command == "train-fusion":
            episodes = import_jsonl(args.episodes, kind="episodes")
            nar = _checkpoint(args.nar, "nar")
            fusion, curve = train_fusion(
                fusion_samples(episodes, cfg.node_budget), nar, steps=cfg.fusion_steps,
                batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed,
            )
            out.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out, fusion, "fusion", {"seed": cfg.seed})
            write_curve_csv(curve, out.with_suffix(".curve.csv"))
            print(f"final agreement {curve[-1].agreement:.4f}; checkpoint {out}")
        elif args.command == "eval":
            table = evaluate(_policy(args, cfg), read_scenario_files(args.scenario_dir), cfg.seed, args.repeats, cfg.workers)
            write_results([table], out, include_runtime=args.runtime)
            print(Path(out).read_text(), end="")
        elif args.command == "traj":
            scenario = read_scenario(args.scenario.read_text())
            episode = _policy(args, cfg).run(scenario, cfg.seed)
            svg, js = export_trajectory(episode, out)
            print(f"wrote {svg} and {js}")
        elif args.command == "dataset":
            records = []
            for path in args.inputs:
                records.extend(import_jsonl(path, kind=args.kind))
            n = export_jsonl(records, out)
            print(f"{n} records from {len(group_by_scenario(records))} scenarios written to {out}")
        elif args.command == "pipeline":
            for name, path in run_pipeline(cfg, out).items():
                print(f"{name}: {path}")
    except (ConfigurationError, DatasetError, GenerationError, ValueError, OSError) as exc:
        print(f"narpath: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
