"""Command-line entry point: ``fdi-bench {synth-region,train,evaluate,report}``.

Exit codes: 0 ok, 1 configuration error, 2 domain failure, 3 training abort.
The output directory comes from ``--out``, else ``$FDI_BENCH_OUT``, else
``runs/``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import pickle
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .ddpg import load_agent_weights, save_agent
from .env import (
    ROLES, Trainer, TrainLogRow, agent_attack_policy, best_constant_threshold,
    constant_detector_tpr, make_agents, online_monitor, pooled_rates,
    scripted_attack_policy,
)
from .errors import ConfigError, TrainingAborted, WorkbenchError
from .region import is_invariant, synthesize_region

log = logging.getLogger("fdi_workbench")

OUT_ENV = "FDI_BENCH_OUT"
SCENARIOS = ("no-attack", "trained-attacker", "scripted-attack", "constant-threshold-baseline")
CERT_FILE = "region_certificate.json"
CHECKPOINT_FILE = "checkpoint.pkl"
LOG_FILE = "train_log.csv"


def fmt(value):
    """Render one CSV cell: 9 significant digits for floats, 0/1 for flags."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".9g")


def trace_header(model):
    def cols(prefix, size):
        return [f"{prefix}_{i + 1}" for i in range(size)]
    n, m, p = model.n, model.m, model.p
    return (["k"] + cols("x", n) + cols("xhat", n) + cols("y", m) + cols("u", p) + cols("r", m)
            + cols("a_y", m) + cols("a_u", p)
            + ["g", "Th", "win_l", "alarm", "attack_active", "controller_mode"])


def write_trace_csv(path, trace, model):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(model))
        for row in trace.rows:
            cells = [row.k, *row.x, *row.x_hat, *row.y, *row.u, *row.r, *row.a_y, *row.a_u,
                     row.g, row.th, row.win_l, row.alarm, row.attack_active, row.controller_mode]
            w.writerow([fmt(c) for c in cells])


def read_trace_csv(path):
    """Load a CSV as a dict of columns; numeric columns become float arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    out = {}
    for key in rows[0]:
        values = [r[key] for r in rows]
        try:
            out[key] = np.array([float(v) for v in values])
        except ValueError:
            out[key] = np.array(values)
    return out


def out_dir(args, sub):
    base = args.out or os.environ.get(OUT_ENV) or "runs"
    path = Path(base) if args.out else Path(base) / sub
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "episodes", None) is not None:
        overrides["schedule.episodes"] = args.episodes
    return load_config(args.config, overrides)


def resolve_region(cfg):
    """Certified ``X_R``: the configured box if it verifies, else the synthesized one."""
    syn = cfg.synthesis
    if cfg.x_r is not None:
        cert = is_invariant(cfg.model, cfg.x_r, syn.steps, syn.sigma_mult)
        if cert.verified:
            return cfg.x_r, cert, None
        log.warning("configured x_r is not %d-step invariant; synthesizing instead", syn.steps)
    result = synthesize_region(cfg.model, cfg.x_s, syn.steps, syn.d_delta, syn.sigma_mult)
    return result.region, result.certificate, result.depth


def _header():
    return {"tool": "fdi-workbench", "version": __version__,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds")}


def _dump_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")


# synth-region ----------------------------------------------------------------

def cmd_synth_region(args):
    cfg = _config(args)
    syn = cfg.synthesis
    result = synthesize_region(cfg.model, cfg.x_s, syn.steps, syn.d_delta, syn.sigma_mult)
    dest = out_dir(args, "synth")
    cert = result.certificate.to_dict()
    cert["depth"] = result.depth
    cert["tried"] = [list(t) for t in result.tried]
    cert["config_hash"] = cfg.config_hash
    _dump_json(dest / CERT_FILE, cert)
    print(f"depth {result.depth:.9g}")
    print(f"box lo {[float(f'{v:.9g}') for v in result.region.lo]} "
          f"hi {[float(f'{v:.9g}') for v in result.region.hi]}")
    print(f"worst margin {result.certificate.worst_margin:.9g}")
    if cfg.x_r is not None:
        c = is_invariant(cfg.model, cfg.x_r, syn.steps, syn.sigma_mult)
        print(f"configured x_r verified: {c.verified} (margin {c.worst_margin:.9g})")
    print(f"certificate written to {dest / CERT_FILE}")
    return 0


# train -------------------------------------------------------------------------

def write_train_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TrainLogRow.FIELDS)
        for r in rows:
            w.writerow([fmt(r.episode), fmt(r.attacker_return), fmt(r.detector_return),
                        fmt(r.controller_return), fmt(r.empirical_tpr), fmt(r.empirical_far)])


def cmd_train(args):
    cfg = _config(args)
    x_r, cert, depth = resolve_region(cfg)
    spaces = cfg.spaces(x_r)
    dest = out_dir(args, "train")
    _dump_json(dest / CERT_FILE, {**cert.to_dict(), "depth": depth, "config_hash": cfg.config_hash})
    ckpt = dest / CHECKPOINT_FILE
    if args.resume and ckpt.exists():
        trainer = Trainer.resume(ckpt, cfg.model, spaces, cfg.reward, cfg.schedule, cfg.ddpg)
        print(f"resumed from episode {trainer.episode}")
    else:
        trainer = Trainer(cfg.model, spaces, cfg.reward, cfg.schedule, cfg.ddpg, seed=cfg.seed)

    every = max(1, cfg.schedule.episodes // 20)

    def progress(row):
        if row.episode % every == 0 or row.episode == cfg.schedule.episodes - 1:
            print(f"episode {row.episode} attack={int(row.attack_present)} "
                  f"R_att={row.attacker_return:.4g} R_det={row.detector_return:.4g} "
                  f"R_ctl={row.controller_return:.4g} tpr={row.empirical_tpr:.3g} "
                  f"far={row.empirical_far:.3g} steps={row.steps}", flush=True)

    start = time.perf_counter()
    try:
        trainer.run(until=args.until, checkpoint=ckpt, progress=None if args.quiet else progress)
    except TrainingAborted as exc:
        with open(dest / "abort_snapshot.pkl", "wb") as fh:
            pickle.dump({"episode": trainer.episode, "message": str(exc), "snapshot": exc.snapshot}, fh)
        write_train_log(dest / LOG_FILE, trainer.log)
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    trainer.save_checkpoint(ckpt)
    write_train_log(dest / LOG_FILE, trainer.log)
    for role, agent in trainer.agents.items():
        save_agent(dest / f"{role}.weights", agent, seed=cfg.seed)
    _dump_json(dest / "train_report.json", {
        "header": _header(), "config_hash": cfg.config_hash, "seed": cfg.seed,
        "episodes_completed": trainer.episode, "applied_defaults": cfg.applied_defaults,
        "wall_seconds": time.perf_counter() - start,
        "region": {**cert.to_dict(), "depth": depth},
    })
    print(f"{trainer.episode} episodes; weights and log written to {dest}")
    return 0


# evaluate ------------------------------------------------------------------------

def load_agents(cfg, spaces, weights_dir):
    agents = make_agents(spaces, cfg.ddpg, cfg.seed)
    for role in ROLES:
        path = Path(weights_dir) / f"{role}.weights"
        if not path.exists():
            raise ConfigError(f"missing weight file {path}")
        load_agent_weights(path, agents[role])
    return agents


def attack_onset(cfg, index):
    rng = np.random.default_rng([cfg.seed, index, 1])
    return int(rng.integers(0, cfg.evaluation.onset_max + 1))


def run_scenario(cfg, spaces, agents, scenario, index):
    """One seeded evaluation episode; seed streams depend only on ``(seed, index)``."""
    ev = cfg.evaluation
    seed = [cfg.seed, index, 0]
    detector, attack = agents["detector"], None
    if scenario == "trained-attacker":
        attack = agent_attack_policy(agents["attacker"], spaces, attack_onset(cfg, index))
    elif scenario == "constant-threshold-baseline":
        detector = (ev.baseline_th, ev.baseline_l)
        attack = agent_attack_policy(agents["attacker"], spaces, attack_onset(cfg, index))
    elif scenario == "scripted-attack":
        a_y = np.zeros(cfg.model.m) if ev.scripted_a_y is None else ev.scripted_a_y
        a_u = np.zeros(cfg.model.p) if ev.scripted_a_u is None else ev.scripted_a_u
        attack = scripted_attack_policy(ev.scripted_onset, a_y, a_u, ev.scripted_ramp or None)
    elif scenario != "no-attack":
        raise ConfigError(f"unknown scenario {scenario!r}")
    return online_monitor(cfg.model, spaces, ev.steps, detector=detector,
                          controller=agents["controller"], attack_policy=attack, seed=seed)


def scenario_metrics(results):
    rates = pooled_rates(results)
    lat = [r.detection_latency for r in results if r.detection_latency is not None]
    return {
        **rates,
        "episodes": len(results),
        "detections": sum(r.detections for r in results),
        "attacked_steps": sum(r.attacked_steps for r in results),
        "false_alarms": sum(r.false_alarms for r in results),
        "unattacked_steps": sum(r.unattacked_steps for r in results),
        "mean_detection_latency": float(np.mean(lat)) if lat else None,
        "undetected_attack_episodes": sum(1 for r in results if r.attacked_steps and not r.detections),
        "safety_violations": sum(int(r.safety_violated) for r in results),
    }


def paired_comparison(cfg, results):
    """Adaptive TPR vs constant thresholds replayed on the same attack residues."""
    attacked = [r for r in results if r.attacked_steps]
    ev, inv = cfg.evaluation, cfg.model.sigma_r_inv
    adaptive = pooled_rates(attacked)["tpr"]
    best_tpr, best_th = best_constant_threshold(attacked, inv, ev.baseline_l, cfg.epsilon, cfg.model.m)
    any_l = max((best_constant_threshold(attacked, inv, l, cfg.epsilon, cfg.model.m) + (l,)
                 for l in range(1, cfg.l_max + 1)), key=lambda t: t[0])
    return {
        "traces": len(attacked),
        "adaptive_tpr": adaptive,
        "baseline_l": ev.baseline_l,
        "best_constant_tpr": best_tpr,
        "best_constant_th": best_th,
        "best_constant_any_l": {"tpr": any_l[0], "th": any_l[1], "l": any_l[2]},
        "fixed_baseline_tpr": constant_detector_tpr(attacked, inv, ev.baseline_th, ev.baseline_l),
        "adaptive_strictly_better": bool(adaptive > best_tpr),
    }


def evaluate(cfg, weights_dir, scenarios, n_seeds, dest=None):
    """Run the scenarios and return ``(report, results_by_scenario)``."""
    x_r, cert, depth = resolve_region(cfg)
    spaces = cfg.spaces(x_r)
    agents = load_agents(cfg, spaces, weights_dir)
    report = {
        "header": _header(), "config_hash": cfg.config_hash, "seed": cfg.seed,
        "applied_defaults": cfg.applied_defaults, "region": {**cert.to_dict(), "depth": depth},
        "seeds": n_seeds, "scenarios": {},
    }
    all_results = {}
    for scenario in scenarios:
        results = [run_scenario(cfg, spaces, agents, scenario, i) for i in range(n_seeds)]
        all_results[scenario] = results
        report["scenarios"][scenario] = scenario_metrics(results)
        if dest is not None:
            tdir = Path(dest) / "traces" / scenario
            tdir.mkdir(parents=True, exist_ok=True)
            for i, res in enumerate(results):
                write_trace_csv(tdir / f"seed_{i:04d}.csv", res.trace, cfg.model)
    if "trained-attacker" in all_results:
        report["paired"] = paired_comparison(cfg, all_results["trained-attacker"])
    return report, all_results


def cmd_evaluate(args):
    cfg = _config(args)
    scenarios = SCENARIOS if args.scenario == "all" else (args.scenario,)
    n_seeds = args.seeds if args.seeds is not None else cfg.evaluation.seeds
    dest = out_dir(args, "evaluate")
    report, _ = evaluate(cfg, args.weights, scenarios, n_seeds, dest)
    _dump_json(dest / "report.json", report)
    for name, met in report["scenarios"].items():
        print(f"{name}: tpr={met['tpr']:.4g} far={met['far_per_step']:.4g} "
              f"latency={met['mean_detection_latency']} violations={met['safety_violations']}")
    if "paired" in report:
        p = report["paired"]
        print(f"paired: adaptive {p['adaptive_tpr']:.4g} vs best constant "
              f"{p['best_constant_tpr']:.4g} (Th={p['best_constant_th']}, l={p['baseline_l']})")
    return 0


# report ----------------------------------------------------------------------------

def cmd_report(args):
    src = Path(args.traces)
    files = sorted(src.rglob("*.csv")) if src.is_dir() else []
    files = [f for f in files if f.parent.name != "figures"]
    if not files:
        print(f"no trace CSVs under {src}", file=sys.stderr)
        return 2
    dest = Path(args.out) if args.out else src / "figures"
    dest.mkdir(parents=True, exist_ok=True)
    cols = ["trace", "k", "g", "Th", "win_l", "alarm", "attack_active", "exceeds"]
    sinks = {}
    counts = {"attack": {}, "no_attack": {}}
    try:
        for name in ("attack", "no_attack"):
            fh = open(dest / f"g_th_{name}.csv", "w", newline="")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            sinks[name] = (fh, w)
        for path in files:
            t = read_trace_csv(path)
            if not t:
                continue
            kind = "attack" if t["attack_active"].any() else "no_attack"
            label = str(path.relative_to(src)) if src in path.parents else path.name
            w = sinks[kind][1]
            for i in range(t["k"].size):
                exceeds = bool(t["g"][i] > t["Th"][i])
                w.writerow([label, fmt(int(t["k"][i])), fmt(t["g"][i]), fmt(t["Th"][i]),
                            fmt(int(t["win_l"][i])), fmt(bool(t["alarm"][i])),
                            fmt(bool(t["attack_active"][i])), fmt(exceeds)])
                th = fmt(t["Th"][i])
                counts[kind][th] = counts[kind].get(th, 0) + 1
    finally:
        for fh, _ in sinks.values():
            fh.close()
    summary = {}
    for kind, c in counts.items():
        if c:
            mode = max(sorted(c), key=c.get)
            summary[kind] = {"steps": sum(c.values()), "majority_Th": float(mode),
                             "majority_share": c[mode] / sum(c.values())}
    _dump_json(dest / "summary.json", summary)
    for kind, s in summary.items():
        print(f"{kind}: {s['steps']} steps, majority Th {s['majority_Th']:.4g} "
              f"({100 * s['majority_share']:.1f}%)")
    return 0


# entry point -------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="fdi-bench", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, episodes=False):
        sp.add_argument("--config", required=True, help="TOML benchmark config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or runs/)")
        if episodes:
            sp.add_argument("--episodes", type=int, help="override schedule.episodes")

    common(sub.add_parser("synth-region", help="synthesize and certify X_R"))
    tr = sub.add_parser("train", help="train attacker, detector and controller")
    common(tr, episodes=True)
    tr.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    tr.add_argument("--until", type=int, help="stop after this many episodes (resumable)")
    tr.add_argument("--quiet", action="store_true")
    ev = sub.add_parser("evaluate", help="run seeded evaluation scenarios")
    common(ev)
    ev.add_argument("--weights", required=True, help="directory with <role>.weights files")
    ev.add_argument("--scenario", default="all", choices=SCENARIOS + ("all",))
    ev.add_argument("--seeds", type=int, help="number of evaluation seeds")
    rp = sub.add_parser("report", help="plot-ready (g, Th) CSVs from trace files")
    rp.add_argument("--traces", required=True, help="directory of trace CSVs")
    rp.add_argument("--out", help="output directory (default <traces>/figures)")
    return p


COMMANDS = {"synth-region": cmd_synth_region, "train": cmd_train,
            "evaluate": cmd_evaluate, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    except WorkbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
