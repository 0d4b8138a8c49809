"""Command-line entry point: ``mtnetopt run | analyze | oracle``.

Exit codes: 0 on success, 2 for configuration errors, 3 for numerical
failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .channel import ChannelProcess
from .config import load_config, parse_int_list
from .errors import ConfigError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("mtnetopt")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtnetopt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate schemes and write CSV/JSON/SVG outputs")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", type=Path, default=Path("results"))
    run.add_argument("--seeds", help="comma list or inclusive range, e.g. 0,1,2 or 0-19")
    run.add_argument("--grid", help="one key swept over values, e.g. a_H=1,10,50")
    run.add_argument("--schemes", help="comma list overriding experiment.schemes")

    analyze = sub.add_parser("analyze", help="stability parameters, verdict and error bound (JSON)")
    analyze.add_argument("--config", required=True, type=Path)
    analyze.add_argument("--seed", type=int)
    analyze.add_argument("--out", type=Path, help="also write the report to this file")

    oracle = sub.add_parser("oracle", help="print y* and x_hat at t = 0")
    oracle.add_argument("--config", required=True, type=Path)
    oracle.add_argument("--seed", type=int)
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    from .experiment import parse_grid, run_grid
    from .outputs import emit_outputs, grid_value

    cfg = load_config(args.config)
    seeds = None
    if args.seeds:
        try:
            seeds = parse_int_list(args.seeds)
        except ValueError as exc:
            raise ConfigError(f"--seeds: {exc}") from exc
        if not seeds:
            raise ConfigError("--seeds: empty list")
    schemes = [s.strip() for s in args.schemes.split(",")] if args.schemes else None
    grid = parse_grid(args.grid) if args.grid else None
    results = run_grid(cfg, schemes, seeds, grid)
    emit_outputs(results, args.out, grid[0] if grid else None)
    label = grid[0] if grid else "a_H"
    for res in results:
        agg = res.aggregate
        value = res.scenario.config.channel.a_H if grid is None else grid_value(res, grid[0])
        cells = "  ".join(
            f"{k}={agg[k]['mean']:.4g}±{agg[k]['half_width']:.2g}" for k in ("P_out", "throughput", "utility", "e_x")
        )
        print(f"{res.scenario.scheme:17s} {label}={value:g}  {cells}")
    print(f"outputs written to {args.out}")
    return EXIT_OK


def _cmd_analyze(args: argparse.Namespace) -> int:
    from .experiment import stability_report

    cfg = load_config(args.config)
    report = stability_report(cfg, args.seed)
    text = json.dumps(report, indent=2, sort_keys=True, default=float)
    print(text)
    if args.out:
        args.out.write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def _cmd_oracle(args: argparse.Namespace) -> int:
    from .experiment import outer_oracle_for
    from .oracle import solve_inner

    cfg = load_config(args.config)
    seed = cfg.experiment.seeds[0] if args.seed is None else args.seed
    topo = cfg.load_topology()
    problem = cfg.problem(topo)
    ocfg = cfg.oracle_config()
    csi = ChannelProcess.start(topo, cfg.channel.params(), seed).csi()
    y_star = outer_oracle_for(cfg, problem, csi)(csi.h_l)
    x_hat = solve_inner(y_star, csi, problem, ocfg)
    doc = {
        "seed": seed,
        "flow_ids": list(topo.flow_ids),
        "link_ids": list(topo.link_ids),
        "y_star": y_star.tolist(),
        "p_hat": x_hat.p.tolist(),
        "lam_hat": x_hat.lam.tolist(),
        "h_l": csi.h_l.tolist(),
        "abs_h_s": np.abs(csi.h_s).tolist(),
    }
    print(json.dumps(doc, indent=2))
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "analyze": _cmd_analyze, "oracle": _cmd_oracle}


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
