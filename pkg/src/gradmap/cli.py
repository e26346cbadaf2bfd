"""Command-line entry point.

Subcommands: ``gen-scenario``, ``train``, ``eval``, ``gradcheck`` and
``export-traces``. Values resolve as defaults < config file < flags, and
every run prints the resolved configuration before doing any work.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import devices, feeder, policy, rollout, scenario, trainer

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

# run-level keys that are not part of TrainConfig
_RUN_DEFAULTS = {
    "feeder": "small4bus",
    "fleet": "desk10",
    "scenario": None,
    "out": "run",
    "checkpoint": None,
    "n_days": 21,
    "n_test_days": 5,
    "dt": 1.0,
    "consecutive": True,
    "episodes": 1,
    "scenario_seed": 0,
}


class InputError(Exception):
    pass


def _path_or_bundled(value, kind):
    """Resolve a file path, falling back to a bundled fixture name."""
    p = Path(value)
    if p.exists():
        return p
    bundled = Path(__file__).parent / "data" / f"{value}.json"
    if p.suffix == "" and bundled.exists():
        return bundled
    raise InputError(f"{kind} file not found: {value}")


def _load_inputs(cfg):
    try:
        net = feeder.load_feeder(_path_or_bundled(cfg["feeder"], "feeder"))
    except feeder.FeederError as exc:
        raise InputError(f"feeder {cfg['feeder']}: {exc}") from None
    try:
        fleet = devices.load_fleet(_path_or_bundled(cfg["fleet"], "fleet"))
        fleet.node_index(net)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"fleet {cfg['fleet']}: {exc}") from None
    if cfg.get("scenario"):
        path = Path(cfg["scenario"])
        if not path.exists():
            raise InputError(f"scenario file not found: {path}")
        try:
            sc = scenario.load_scenario(path)
        except (ValueError, KeyError) as exc:
            raise InputError(f"scenario {path}: {exc}") from None
        if tuple(sc.agent_ids) != tuple(fleet.ids):
            raise InputError("scenario agent ids do not match the fleet")
    else:
        sc = _synthetic(int(cfg["scenario_seed"]), fleet.n_agents, cfg, fleet.ids)
    return net, fleet, sc


def _synthetic(seed, n_agents, cfg, agent_ids=None):
    try:
        return scenario.generate_synthetic(seed, n_agents, int(cfg["n_days"]), dt=float(cfg["dt"]),
                                           n_test_days=int(cfg["n_test_days"]), agent_ids=agent_ids)
    except ValueError as exc:
        raise InputError(f"scenario: {exc}") from None


def _resolve(args) -> dict:
    cfg = dict(_RUN_DEFAULTS)
    cfg.update(trainer.TrainConfig().to_dict(), learning_rate=None)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        try:
            loaded = trainer.load_config(path)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise InputError(f"{path}: unknown config keys {unknown}")
        cfg.update(loaded)
    for key in ("feeder", "fleet", "scenario", "seed", "mode", "out", "workers", "checkpoint", "n_days", "episodes"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _train_config(cfg) -> trainer.TrainConfig:
    keys = {f for f in trainer.TrainConfig.__dataclass_fields__}
    try:
        return trainer.TrainConfig.from_dict({k: v for k, v in cfg.items() if k in keys})
    except (ValueError, TypeError) as exc:
        raise InputError(f"config: {exc}") from None


def _print_config(cfg, tc=None):
    shown = dict(cfg)
    if tc is not None:
        shown.update(tc.to_dict())
    print("resolved config: " + json.dumps(shown, sort_keys=True, default=str), flush=True)


def _policies(cfg, fleet):
    if not cfg.get("checkpoint"):
        raise InputError("--checkpoint is required")
    path = Path(cfg["checkpoint"])
    if not path.exists():
        raise InputError(f"checkpoint file not found: {path}")
    try:
        return policy.load_checkpoint(path, fleet.ids)
    except (KeyError, ValueError) as exc:
        raise InputError(f"checkpoint {path}: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scenario(args, cfg):
    n_agents = args.agents
    fleet = None
    if n_agents is None:
        fleet = devices.load_fleet(_path_or_bundled(cfg["fleet"], "fleet"))
        n_agents = fleet.n_agents
    sc = _synthetic(int(cfg["seed"]), n_agents, cfg, fleet.ids if fleet is not None else None)
    path = scenario.save_csv(sc, cfg["out"])
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args, cfg):
    tc = _train_config(cfg)
    _print_config(cfg, tc)
    net, fleet, sc = _load_inputs(cfg)
    out = Path(cfg["out"])
    if tc.mode == "naive":
        out.mkdir(parents=True, exist_ok=True)
        env = rollout.Environment(fleet, net, sc.dt, M=tc.M)
        m = trainer.naive_baseline(env, sc, consecutive=bool(cfg["consecutive"]))
        trainer.write_metrics(m, out / "metrics.csv")
        print(f"naive evaluation cost {m.total_cost:.6g}")
        return EXIT_OK
    res = trainer.train(tc, fleet, net, sc, out_dir=out,
                        progress=lambda r: print(f"dual {r['dual_step']} primal {r['primal_step']} "
                                                 f"cost {r['cost_mean']:.4f} trust {r['trust']:.4f}", flush=True))
    env = rollout.Environment(fleet, net, sc.dt, M=tc.M)
    m = trainer.evaluate(res.policies, env, sc, consecutive=bool(cfg["consecutive"]))
    trainer.write_metrics(m, out / "metrics.csv")
    print(f"evaluation cost {m.total_cost:.6g}; log in {out / 'training_log.csv'}")
    return EXIT_OK


def cmd_eval(args, cfg):
    _print_config(cfg)
    net, fleet, sc = _load_inputs(cfg)
    env = rollout.Environment(fleet, net, sc.dt, M=float(cfg["M"]))
    pols = None if cfg["mode"] == "naive" else _policies(cfg, fleet)
    m = trainer.evaluate(pols, env, sc, consecutive=bool(cfg["consecutive"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    trainer.write_metrics(m, out / "metrics.csv")
    print(f"evaluation cost {m.total_cost:.6g}; max voltage violation {m.max_voltage_violation:.3g} p.u.")
    return EXIT_OK


def cmd_export_traces(args, cfg):
    _print_config(cfg)
    net, fleet, sc = _load_inputs(cfg)
    env = rollout.Environment(fleet, net, sc.dt, M=float(cfg["M"]))
    pols = None if cfg["mode"] == "naive" else _policies(cfg, fleet)
    m = trainer.evaluate(pols, env, sc, consecutive=bool(cfg["consecutive"]))
    d = Path(cfg["out"]) / "traces"
    for k in range(min(int(cfg["episodes"]), m.trace.n_episodes)):
        rollout.export_trace(m.trace, fleet, net, d, episode=k)
    print(f"wrote traces to {d}")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from . import gradcheck

    _print_config(cfg)
    if args.fixture != "small4bus":
        raise InputError(f"unknown fixture {args.fixture!r}")
    results = gradcheck.run_all(seed=int(cfg["seed"]))
    ok = True
    for name, err, tol in results:
        flag = "ok" if err <= tol else "FAIL"
        ok &= err <= tol
        print(f"{name}: max relative error {err:.3e} (tolerance {tol:g}) {flag}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gradmap", description="Multi-agent grid-edge control with gradient reuse.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON or key=value config file")
        p.add_argument("--feeder", help="feeder JSON (path or bundled name)")
        p.add_argument("--fleet", help="fleet JSON (path or bundled name)")
        p.add_argument("--scenario", help="scenario.json written by gen-scenario")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=trainer.MODES)
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int)
        return p

    p = common(sub.add_parser("gen-scenario", help="write synthetic scenario CSVs"))
    p.add_argument("--agents", type=int, help="number of agents (default: fleet size)")
    p.add_argument("--n-days", dest="n_days", type=int)
    common(sub.add_parser("train", help="train policies"))
    p = common(sub.add_parser("eval", help="evaluate a checkpoint on the test days"))
    p.add_argument("--checkpoint")
    p = common(sub.add_parser("export-traces", help="write per-episode trace CSVs"))
    p.add_argument("--checkpoint")
    p.add_argument("--episodes", type=int)
    p = common(sub.add_parser("gradcheck", help="run the finite-difference gradient checks"))
    p.add_argument("--fixture", default="small4bus")
    return ap


_COMMANDS = {
    "gen-scenario": cmd_gen_scenario,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-traces": cmd_export_traces,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        return _COMMANDS[args.command](args, cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (trainer.TrainingAborted, rollout.PowerFlowFailure, feeder.NonConvergence, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
