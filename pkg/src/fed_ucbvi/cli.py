"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 invariant breach.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from fed_ucbvi.checks import run_checks
from fed_ucbvi.errors import ConfigError, InputError, InvariantError
from fed_ucbvi.harness import ExperimentConfig, format_csv, oracle_report, run_experiment, write_csv
from fed_ucbvi.protocol import ALGORITHMS

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INVARIANT = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _load_config(path, seed=None, algorithm=None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if algorithm is not None:
        overrides["algorithm"] = algorithm
    return cfg.replace(**overrides) if overrides else cfg


def _guarded(fn):
    """Map library exceptions onto the exit-code contract."""
    try:
        return fn()
    except ConfigError as exc:
        _err(f"config error in field {exc}")
        return EXIT_CONFIG
    except InvariantError as exc:
        _err(f"invariant breach: {exc}")
        return EXIT_INVARIANT
    except InputError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"I/O error: {exc}")
        return EXIT_IO


def cmd_run(config_path, seed=None, algorithm=None) -> int:
    def body():
        cfg = _load_config(config_path, seed, algorithm)
        metrics = run_experiment(cfg)
        write_csv(metrics, cfg.output_path)
        print(json.dumps(metrics.summary()))
        return EXIT_OK

    return _guarded(body)


@dataclass
class SweepSpec:
    base: ExperimentConfig
    eps_p_values: list
    M_values: list
    seeds: list
    output_dir: str = "sweep"

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "sweep spec must be a JSON object")
        for key in data:
            if key not in ("base", "eps_p_values", "M_values", "seeds", "output_dir"):
                raise ConfigError(key, "unknown sweep field")
        base = ExperimentConfig.from_dict(data.get("base", {}))
        lists = {}
        for key in ("eps_p_values", "M_values", "seeds"):
            value = data.get(key)
            if not isinstance(value, list) or not value:
                raise ConfigError(key, "must be a nonempty list")
            lists[key] = value
        spec = cls(base, output_dir=str(data.get("output_dir", "sweep")), **lists)
        for cfg in spec.cells():
            cfg.validate()
        return spec

    @classmethod
    def load(cls, path) -> "SweepSpec":
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON in {path}: {exc}") from None
        return cls.from_dict(data)

    def cells(self) -> list[ExperimentConfig]:
        out = []
        for eps_p in self.eps_p_values:
            for M in self.M_values:
                for seed in self.seeds:
                    cfg = self.base.replace(eps_p=eps_p, M=M, seed=seed)
                    name = f"{cfg.env}_ep{cfg.eps_p!r}_M{cfg.M}_s{cfg.seed}.csv"
                    out.append(cfg.replace(output_path=str(Path(self.output_dir) / name)))
        return out


def _run_cell(cfg: ExperimentConfig) -> tuple[dict, str]:
    metrics = run_experiment(cfg)
    return metrics.summary(), format_csv(metrics)


def _cell_id(cfg: ExperimentConfig) -> str:
    return f"eps_p={cfg.eps_p!r} M={cfg.M} seed={cfg.seed}"


def cmd_sweep(sweep_path, seed=None, algorithm=None, jobs=None) -> int:
    def body():
        spec = SweepSpec.load(sweep_path)
        if algorithm is not None:
            spec.base = spec.base.replace(algorithm=algorithm)
        if seed is not None:
            spec.seeds = [seed]
        cells = spec.cells()
        out_dir = Path(spec.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        n_jobs = max(1, jobs or os.cpu_count() or 1)
        if n_jobs == 1:
            results = map(_run_cell, cells)
            pool = None
        else:
            pool = ProcessPoolExecutor(max_workers=min(n_jobs, len(cells)))
            results = pool.map(_run_cell, cells)
        rows = []
        try:
            for cfg in cells:
                try:
                    summary, text = next(results)
                except (InvariantError, InputError, OSError) as exc:
                    _err(f"sweep cell {_cell_id(cfg)} failed")
                    raise exc
                Path(cfg.output_path).write_text(text)
                rows.append((cfg, summary))
        finally:
            if pool is not None:
                pool.shutdown(cancel_futures=True)
        lines = ["eps_p,M,seed,final_regret,comm_rounds"]
        for cfg, summary in rows:
            lines.append(f"{cfg.eps_p!r},{cfg.M},{cfg.seed},{summary['final_regret']:.10g},{summary['comm_rounds']}")
        (out_dir / "summary.csv").write_text("\n".join(lines) + "\n")
        for eps_p in spec.eps_p_values:
            for M in spec.M_values:
                group = [s for c, s in rows if c.eps_p == float(eps_p) and c.M == M]
                regrets = [s["final_regret"] for s in group]
                rounds = [s["comm_rounds"] for s in group]
                print(json.dumps({
                    "eps_p": float(eps_p),
                    "M": M,
                    "runs": len(group),
                    "mean_regret": statistics.fmean(regrets),
                    "std_regret": statistics.pstdev(regrets),
                    "mean_comm_rounds": statistics.fmean(rounds),
                    "std_comm_rounds": statistics.pstdev(rounds),
                }))
        return EXIT_OK

    return _guarded(body)


def cmd_oracle(config_path, seed=None, algorithm=None) -> int:
    def body():
        cfg = _load_config(config_path, seed, algorithm)
        print(json.dumps(oracle_report(cfg)))
        return EXIT_OK

    return _guarded(body)


def cmd_check(config_path, seed=None, algorithm=None) -> int:
    def body():
        cfg = _load_config(config_path, seed, algorithm)
        results = run_checks(cfg)
        for res in results:
            print(res.line())
        return EXIT_OK if all(r.passed is not False for r in results) else EXIT_INVARIANT

    return _guarded(body)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--algorithm", choices=ALGORITHMS, default=argparse.SUPPRESS, help="override the config algorithm")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel sweep cells (default: CPU count)")

    parser = argparse.ArgumentParser(prog="fed-ucbvi", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "run one experiment from a JSON config"),
        ("sweep", "run a grid over eps_p, M and seeds"),
        ("oracle", "print optimal values and policy of the common MDP"),
        ("check", "run the invariant battery"),
    ):
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.add_argument("path", help="sweep spec" if name == "sweep" else "experiment config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    seed = getattr(args, "seed", None)
    algorithm = getattr(args, "algorithm", None)
    if args.command == "sweep":
        return cmd_sweep(args.path, seed, algorithm, getattr(args, "jobs", None))
    handler = {"run": cmd_run, "oracle": cmd_oracle, "check": cmd_check}[args.command]
    return handler(args.path, seed, algorithm)


if __name__ == "__main__":
    sys.exit(main())
