"""Command-line front door for the experiment pipeline.

Typical sequence:

    flowrl validate-solver --config run.yaml --out runs
    flowrl calibrate       --config run.yaml --out runs
    flowrl make-startfiles --config run.yaml --out runs
    flowrl train           --config run.yaml --out runs --iterations 150
    flowrl evaluate        --config run.yaml --out runs
    flowrl shuffle-test    --config run.yaml --out runs --checkpoint ...
    flowrl baseline        --config run.yaml --out runs
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .evalsuite import (BaselineSet, format_stats_table, improvement_factor,
                        recirculation_length, run_uncontrolled,
                        shuffle_experiment, stats_from_history,
                        symmetric_baseline, greedy_run)
from .flow_env import CylinderFlowEnv
from .persist import Manifest, require_artifact, write_json_report
from .rollout import StartFilePool, make_start_files
from .trainer import (Trainer, baseline_path, build_policies_from_checkpoint,
                      latest_checkpoint, load_calibrated_reward)

ST_BAND = (0.28, 0.32)
CD_BAND = (2.9, 3.5)


def _progress(msg: str) -> None:
    print(f"  {msg}", flush=True)


def _resolve_out(args) -> Path:
    root = os.environ.get("FLOWRL_OUTPUT_ROOT")
    out = Path(args.out)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
        cfg.validate()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    return cfg


def cmd_validate_solver(args) -> int:
    cfg = _load(args)
    out = _resolve_out(args)
    h = cfg.config_hash()
    print(f"[validate-solver] config {h}: uncontrolled Re={cfg.reynolds:g} "
          f"run to t*={args.t_max:g}")
    window = (args.t_max - 50.0, args.t_max)
    baseline, env = run_uncontrolled(cfg, t_max=args.t_max, window=window,
                                     progress=_progress)
    st = baseline.stats.strouhal
    cd = baseline.stats.mean_cd
    st_ok = ST_BAND[0] <= st <= ST_BAND[1]
    cd_ok = CD_BAND[0] <= cd <= CD_BAND[1]
    env.write_force_csv(out / f"forces_nocontrol_{h}.csv")
    report = {
        "config_hash": h,
        "window": list(window),
        "strouhal": st, "strouhal_band": list(ST_BAND), "strouhal_ok": st_ok,
        "mean_cd": cd, "cd_band": list(CD_BAND), "cd_ok": cd_ok,
        "amp_cd": baseline.stats.amp_cd, "amp_cl": baseline.stats.amp_cl,
    }
    write_json_report(out / f"solver_validation_{h}.json", report)
    Manifest(out).record("validate-solver", h, report=f"solver_validation_{h}.json")
    print(f"  Strouhal     {st:.4f}  target [{ST_BAND[0]}, {ST_BAND[1]}]  "
          f"{'PASS' if st_ok else 'FAIL'}")
    print(f"  mean C_D     {cd:.4f}  target [{CD_BAND[0]}, {CD_BAND[1]}]  "
          f"{'PASS' if cd_ok else 'FAIL'}")
    return 0 if (st_ok and cd_ok) else 1


def cmd_baseline(args) -> int:
    cfg = _load(args)
    out = _resolve_out(args)
    h = cfg.config_hash()
    print(f"[baseline] config {h}: symmetric no-shedding case")
    sym, env = symmetric_baseline(cfg, t_max=args.t_max, progress=_progress)
    env.write_force_csv(out / f"forces_symmetric_{h}.csv")
    report = {"config_hash": h, "mean_cd": sym.stats.mean_cd,
              "amp_cd": sym.stats.amp_cd, "mean_cl": sym.stats.mean_cl,
              "converged": sym.converged, "drift": sym.drift}
    write_json_report(out / f"baseline_symmetric_{h}.json", report)
    Manifest(out).record("baseline", h, report=f"baseline_symmetric_{h}.json")
    print(f"  symmetric <C_D>={sym.stats.mean_cd:.4f} "
          f"amp={sym.stats.amp_cd:.2e} converged={sym.converged}")
    return 0


def cmd_calibrate(args) -> int:
    """Measure the solver's own no-control and symmetric baselines and derive
    the reward scaling constants used by training."""
    cfg = _load(args)
    out = _resolve_out(args)
    h = cfg.config_hash()
    print(f"[calibrate] config {h}")
    window = (args.t_max - 50.0, args.t_max)
    nc, env_nc = run_uncontrolled(cfg, t_max=args.t_max, window=window,
                                  progress=_progress)
    env_nc.write_force_csv(out / f"forces_nocontrol_{h}.csv")
    sym, env_sym = symmetric_baseline(cfg, progress=_progress)
    env_sym.write_force_csv(out / f"forces_symmetric_{h}.csv")
    cd_nc = nc.stats.mean_cd
    cd_sym = sym.stats.mean_cd
    # place the reward's full-scale point slightly below the symmetric
    # baseline, scaled by the measured shedding gap
    cd_min = cd_sym - 0.07 * (cd_nc - cd_sym)
    payload = {
        "config_hash": h,
        "physics_hash": cfg.physics_hash(),
        "drag_nocontrol": cd_nc,
        "drag_symmetric": cd_sym,
        "drag_min": cd_min,
        "strouhal": nc.stats.strouhal,
        "amp_cd_nocontrol": nc.stats.amp_cd,
        "amp_cl_nocontrol": nc.stats.amp_cl,
        "symmetric_converged": sym.converged,
        "window": list(window),
    }
    write_json_report(baseline_path(out, cfg.physics_hash()), payload)
    Manifest(out).record("calibrate", h,
                         baseline=str(baseline_path(out, cfg.physics_hash())))
    print(f"  <C_D>^nc={cd_nc:.4f}  <C_D>^sym={cd_sym:.4f}  "
          f"C_D,min={cd_min:.4f}  St={nc.stats.strouhal:.4f}")
    return 0


def cmd_make_startfiles(args) -> int:
    cfg = _load(args)
    out = _resolve_out(args)
    h = cfg.config_hash()
    print(f"[make-startfiles] config {h}: warmup to t*={args.warmup:g}")
    pool = make_start_files(cfg, out, warmup_t=args.warmup,
                            progress=_progress)
    Manifest(out).record("make-startfiles", h,
                         files=[p.name for p in pool.paths])
    print(f"  wrote {len(pool.paths)} start files to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _resolve_out(args)
    h = cfg.config_hash()
    reward = load_calibrated_reward(cfg, out) \
        if cfg.reward.mode == "modified" else None
    print(f"[train] config {h}: {args.iterations} iterations, "
          f"{cfg.ppo.n_env} envs, actor={cfg.policy.kind}")
    trainer = Trainer(cfg, out, workers=args.workers,
                      reward_override=reward, progress=_progress)
    result = trainer.run(args.iterations,
                         checkpoint_every=args.checkpoint_every,
                         resume=args.resume)
    Manifest(out).record("train", h, **result)
    print(f"  done: {result['final_checkpoint']}")
    return 0


def _checkpoint_for(args, cfg, out) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    latest = latest_checkpoint(out, cfg.config_hash())
    if latest is None:
        raise FileNotFoundError(
            "no checkpoint found for this config; run `flowrl train` first")
    return latest


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    out = _resolve_out(args)
    h = cfg.config_hash()
    ckpt = _checkpoint_for(args, cfg, out)
    base_file = require_artifact(baseline_path(out, cfg.physics_hash()),
                                 produced_by="calibrate")
    baselines = json.loads(base_file.read_text())
    pool = StartFilePool.discover(out, cfg)
    env0 = CylinderFlowEnv(cfg)
    actor, critic = build_policies_from_checkpoint(
        cfg, ckpt, env0.layout.adjacency, env0.jet.bound)
    print(f"[evaluate] config {h}: greedy run to t*={args.t_total:g} "
          f"from {pool.paths[0].name}")
    avg_window = (args.t_total / 2.0, args.t_total)
    history, actions, averager, env = greedy_run(
        cfg, actor, critic, pool.paths[0], t_total=args.t_total,
        avg_window=avg_window, progress=_progress)
    stats_train = stats_from_history(history, 10.0, 20.0)
    stats_long = stats_from_history(history, *avg_window)
    r_d = improvement_factor(baselines["drag_nocontrol"],
                             baselines["drag_symmetric"],
                             stats_long.mean_cd)
    r_d_train = improvement_factor(baselines["drag_nocontrol"],
                                   baselines["drag_symmetric"],
                                   stats_train.mean_cd)
    recirc = recirculation_length(averager.mean_ux, env.dx, env.cyl_x,
                                  env.cyl_y, env.diameter)
    report = {
        "config_hash": h,
        "checkpoint": str(ckpt),
        "actor_kind": cfg.policy.kind,
        "window_train": stats_train.as_dict(),
        "window_long": stats_long.as_dict(),
        "improvement_factor_drag_long": r_d,
        "improvement_factor_drag_train": r_d_train,
        "recirculation_length": recirc,
        "baselines": baselines,
        "max_abs_action": float(abs(actions).max()),
    }
    write_json_report(out / f"evaluation_{h}.json", report)
    env.write_force_csv(out / f"forces_controlled_{h}.csv")
    if args.dump_fields:
        env.dump_fields(str(out / f"fields_controlled_{h}"))
    Manifest(out).record("evaluate", h, checkpoint=str(ckpt),
                         report=f"evaluation_{h}.json")
    print(format_stats_table({"controlled[10,20]": stats_train,
                              "controlled[long]": stats_long}))
    print(f"  r_D (long window)  {r_d:+.2%}")
    print(f"  recirculation len  {recirc:.2f} D")
    return 0


def cmd_shuffle_test(args) -> int:
    cfg = _load(args)
    out = _resolve_out(args)
    h = cfg.config_hash()
    pool = StartFilePool.discover(out, cfg)
    env0 = CylinderFlowEnv(cfg)
    actors = {}
    for kind, ckpt_arg in (("mlp", args.mlp_checkpoint),
                           ("gcnn", args.gcnn_checkpoint)):
        if not ckpt_arg:
            continue
        kcfg = dataclasses.replace(cfg, policy=dataclasses.replace(
            cfg.policy, kind=kind))
        actor, _ = build_policies_from_checkpoint(
            kcfg, Path(ckpt_arg), env0.layout.adjacency, env0.jet.bound)
        actors[kind] = actor
    if not actors:
        raise FileNotFoundError(
            "shuffle-test needs --mlp-checkpoint and/or --gcnn-checkpoint; "
            "run `flowrl train` for each architecture first")
    print(f"[shuffle-test] config {h}: permutation seed {args.perm_seed}")
    report = shuffle_experiment(actors, cfg, pool.paths[0], args.perm_seed)
    bound = env0.jet.bound
    verdicts = {}
    for kind in actors:
        dev = report[kind]["max_action_deviation"]
        if kind == "gcnn":
            ok = dev <= 1e-12
            verdicts[kind] = "PASS (invariant)" if ok else "FAIL (deviates)"
        else:
            ok = dev > 0.1 * bound
            verdicts[kind] = ("PASS (order-dependent as expected)" if ok
                              else "FAIL (unexpectedly invariant)")
        print(f"  {kind}: max action deviation {dev:.3e}  -> {verdicts[kind]}")
    report["verdicts"] = verdicts
    report["action_bound"] = bound
    write_json_report(out / f"shuffle_test_{h}.json", report)
    Manifest(out).record("shuffle-test", h, verdicts=verdicts)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowrl", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None,
                        help="YAML run configuration (defaults when omitted)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
        sp.add_argument("--out", default="runs", help="output directory")
        sp.add_argument("--workers", type=int,
                        default=max(1, os.cpu_count() or 1),
                        help="parallel rollout workers")

    sp = sub.add_parser("validate-solver",
                        help="uncontrolled run vs. reference bands")
    common(sp)
    sp.add_argument("--t-max", type=float, default=150.0)
    sp.set_defaults(func=cmd_validate_solver)

    sp = sub.add_parser("baseline", help="symmetric no-shedding baseline")
    common(sp)
    sp.add_argument("--t-max", type=float, default=300.0)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("calibrate",
                        help="measure baselines and reward constants")
    common(sp)
    sp.add_argument("--t-max", type=float, default=150.0)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("make-startfiles",
                        help="snapshot 8 shedding phases as episode starts")
    common(sp)
    sp.add_argument("--warmup", type=float, default=100.0)
    sp.set_defaults(func=cmd_make_startfiles)

    sp = sub.add_parser("train", help="PPO training")
    common(sp)
    sp.add_argument("--iterations", type=int, default=150)
    sp.add_argument("--checkpoint-every", type=int, default=10)
    sp.add_argument("--resume", action="store_true",
                    help="continue from the latest checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="greedy long-horizon evaluation")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--t-total", type=float, default=100.0)
    sp.add_argument("--dump-fields", action="store_true")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("shuffle-test",
                        help="permutation invariance comparison")
    common(sp)
    sp.add_argument("--mlp-checkpoint", default=None)
    sp.add_argument("--gcnn-checkpoint", default=None)
    sp.add_argument("--perm-seed", type=int, default=1)
    sp.set_defaults(func=cmd_shuffle_test)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
