"""Command line entry point: ``renq {train,eval,measure-bvc,lab,dump-config}``.

Exit codes: 0 ok, 1 usage, 2 configuration, 3 failed acceptance check.
``RENQ_THREADS`` caps the worker threads of the numeric backend.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2, 3
CHECKPOINT = "checkpoint.renq"


def _cap_threads() -> None:
    n = os.environ.get("RENQ_THREADS")
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="renq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="config file of 'section.key = value' lines")
        sp.add_argument("--preset", choices=["desk", "paper"], help="preset the config starts from")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")

    sp = sub.add_parser("train", help="train an agent; writes metrics CSVs and a checkpoint")
    config_args(sp)
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("eval", help="evaluate a checkpoint against random and scripted baselines")
    sp.add_argument("checkpoint")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--seed", type=int, default=12345)
    sp.add_argument("--random", type=float, help="random-policy mean return")
    sp.add_argument("--scripted", type=float, help="scripted-policy mean return")
    sp.add_argument("--baseline-episodes", type=int, default=100)

    sp = sub.add_parser("measure-bvc", help="proxy bias / variance / covariance over independent runs")
    sp.add_argument("runs", nargs="+", help="run directories or checkpoint files")
    sp.add_argument("--transitions", type=int)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--seed", type=int, default=777)
    sp.add_argument("--name", help="row label (default: agent mode and ensemble size)")
    sp.add_argument("--out", help="CSV path (default: standard output only)")

    sp = sub.add_parser("lab", help="run the synthetic decomposition suites")
    sp.add_argument("suite")
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--datasets", type=int, default=100)
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--members", type=int, default=5)
    sp.add_argument("--out", help="write the component report CSV here")

    sp = sub.add_parser("dump-config", help="print a full config snapshot")
    config_args(sp)
    return p


def _config(args):
    from .config import RunConfig

    if args.config:
        if args.preset:
            raise UsageError("--preset and --config are exclusive; a config file names its own preset")
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.from_preset(args.preset or "desk")
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    cfg.validate()
    return cfg


def _checkpoint_path(p: str) -> Path:
    path = Path(p)
    return path / CHECKPOINT if path.is_dir() else path


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    from .train import Trainer

    out = Path(args.out)
    if args.resume:
        given = _config(args) if (args.config or args.set or args.preset) else None
        tr = Trainer.resume(args.resume, given)
    else:
        tr = Trainer(_config(args))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(tr.cfg.to_text())
    every = tr.cfg["train.checkpoint_every"] or tr.total_steps
    t0 = time.time()
    while not tr.done:
        tr.run(every - tr.step % every)
        tr.write_metrics(out)
        tr.save(out / CHECKPOINT)
        if not args.quiet:
            recent = [e["return"] for e in tr.episodes[-10:]]
            mean = sum(recent) / len(recent) if recent else float("nan")
            print(f"step {tr.step}/{tr.total_steps}  episodes {tr.episode}  "
                  f"recent return {mean:.2f}  {time.time() - t0:.0f}s", flush=True)
    tr.write_metrics(out)
    tr.save(out / CHECKPOINT)
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np

    from .train import baseline_returns, evaluate_agent, load_agent, normalized_score

    agent, cfg = load_agent(_checkpoint_path(args.checkpoint))
    episodes = args.episodes or cfg["eval.episodes"]
    returns = evaluate_agent(agent, cfg, episodes, args.seed)
    rand, scripted = args.random, args.scripted
    if rand is None or scripted is None:
        bseed = args.seed + 1
        print(f"computing baselines over {args.baseline_episodes} episodes with seed {bseed}")
        base = baseline_returns(cfg, args.baseline_episodes, bseed)
        rand = float(base["random"].mean()) if rand is None else rand
        scripted = float(base["scripted"].mean()) if scripted is None else scripted
    mean, median = float(returns.mean()), float(np.median(returns))
    print(f"{'episodes':<22}{episodes}")
    print(f"{'mean return':<22}{mean:.3f}")
    print(f"{'median return':<22}{median:.3f}")
    print(f"{'random baseline':<22}{rand:.3f}")
    print(f"{'scripted baseline':<22}{scripted:.3f}")
    print(f"{'normalized mean %':<22}{normalized_score(mean, rand, scripted):.2f}")
    print(f"{'normalized median %':<22}{normalized_score(median, rand, scripted):.2f}")
    return EXIT_OK


def measure_runs(paths, transitions=None, epsilon=None, seed=777) -> tuple[dict, dict]:
    """Proxy measurement averaged over environments. Returns ``(average, per-env)``."""
    import numpy as np

    from . import bvc
    from .agent import derive_seed
    from .config import ConfigError
    from .train import StepAdapter, build_env, load_agent

    loaded = [load_agent(_checkpoint_path(p)) for p in paths]
    if len(loaded) < 2:
        raise ConfigError("measure-bvc needs at least two completed runs")

    def key(cfg, *drop):
        return tuple((k, v) for k, v in cfg.values.items() if k not in drop)

    ref = key(loaded[0][1], "train.seed", "env.id")
    for _, cfg in loaded[1:]:
        if key(cfg, "train.seed", "env.id") != ref:
            diff = [k for (k, v), (_, w) in zip(key(cfg), key(loaded[0][1])) if v != w
                    and k not in ("train.seed", "env.id")]
            raise ConfigError(f"runs have different configs (keys: {', '.join(diff)})")
    groups: dict[str, list] = {}
    for agent, cfg in loaded:
        groups.setdefault(cfg["env.id"], []).append((agent, cfg))
    per_env = {}
    for env_id, runs in groups.items():
        if len(runs) < 2:
            raise ConfigError(f"environment {env_id!r} has a single run; need at least two")
        cfg = runs[0][1]
        n = transitions or cfg["bvc.transitions"]
        eps = cfg["eval.epsilon"] if epsilon is None else epsilon
        fns = [a.member_q_values for a, _ in runs]

        def behaviour(obs, fns=fns):
            return np.mean([f(obs).mean(axis=0) for f in fns], axis=0)

        tr = bvc.collect_transitions(StepAdapter(build_env(cfg)), behaviour, n, eps, derive_seed(seed, env_id))
        per_env[env_id] = bvc.proxy_bvc(fns, tr, cfg["agent.gamma"])
    return bvc.average_measurements(list(per_env.values())), per_env


def cmd_measure_bvc(args) -> int:
    from . import bvc
    from .train import load_agent

    avg, per_env = measure_runs(args.runs, args.transitions, args.epsilon, args.seed)
    cfg = load_agent(_checkpoint_path(args.runs[0]))[1]
    name = args.name or f"{cfg['agent.mode']} (M={avg['M']})"
    rows = {f"{name} [{e}]": r for e, r in per_env.items()}
    print(bvc.measurement_table(rows), end="")
    text = bvc.measurement_table({name: avg})
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_lab(args) -> int:
    from . import bvc
    from .lab import SUITES, Lab

    if args.suite != "all" and args.suite not in SUITES:
        print(f"unknown suite {args.suite!r}; available: {', '.join(SUITES + ('all',))}", file=sys.stderr)
        return EXIT_USAGE
    lab = Lab(seed=args.seed, D=args.datasets, S=args.seeds, M=args.members)
    checks = lab.run(args.suite)
    for c in checks:
        print(c.line())
    rows = lab.table_rows()
    if rows:
        print()
        print(bvc.format_table(rows))
        if args.out:
            Path(args.out).write_text(bvc.report_csv(rows))
    failed = sum(not c.passed for c in checks)
    print(f"\n{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_dump_config(args) -> int:
    print(_config(args).to_text(), end="")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "measure-bvc": cmd_measure_bvc, "lab": cmd_lab,
            "dump-config": cmd_dump_config}


def main(argv=None) -> int:
    _cap_threads()
    args = build_parser().parse_args(argv)
    from .checkpoint import CheckpointError
    from .config import ConfigError

    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"renq: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError) as e:
        print(f"renq: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"renq: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
