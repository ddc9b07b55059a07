"""Shared fixtures: a coarse desk-scale configuration plus a cached
start-file pool and measured baselines so the expensive warmup runs once."""

import dataclasses
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from flowrl.config import GeometryConfig, PPOConfig, RunConfig
from flowrl.flow_env import CylinderFlowEnv
from flowrl.rollout import StartFilePool, make_start_files

CACHE_ROOT = Path.home() / ".cache" / "flowrl-tests"


def coarse_config(**overrides) -> RunConfig:
    cfg = RunConfig(
        geometry=GeometryConfig(grid_resolution=20),
        ppo=PPOConfig(n_env=8),
    )
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def desk_config() -> RunConfig:
    return coarse_config()


@pytest.fixture(scope="session")
def desk_artifacts(desk_config):
    """Start-file pool + measured baselines for the coarse grid, cached on
    disk keyed by the config hash."""
    cache = CACHE_ROOT / desk_config.physics_hash()
    baseline_file = cache / "baseline.json"
    try:
        pool = StartFilePool.discover(cache, desk_config)
        baselines = json.loads(baseline_file.read_text())
        return {"pool": pool, "baselines": baselines, "dir": cache}
    except (FileNotFoundError, json.JSONDecodeError):
        pass
    shutil.rmtree(cache, ignore_errors=True)
    cache.mkdir(parents=True, exist_ok=True)
    pool = make_start_files(desk_config, cache, warmup_t=100.0)
    from flowrl.evalsuite import stats_from_history, symmetric_baseline
    env = CylinderFlowEnv(desk_config)
    env.load_snapshot(pool.paths[0])
    for _ in range(200):  # 50 t* of uncontrolled statistics
        env.step(0.0)
    stats = stats_from_history(env.history, env.t_offset, env.t_star)
    sym, _ = symmetric_baseline(desk_config, t_max=200.0)
    cd_nc = stats.mean_cd
    cd_sym = sym.stats.mean_cd
    baselines = {
        "drag_nocontrol": cd_nc,
        "drag_symmetric": cd_sym,
        "drag_min": cd_sym - 0.07 * (cd_nc - cd_sym),
        "strouhal": stats.strouhal,
    }
    baseline_file.write_text(json.dumps(baselines, indent=1))
    return {"pool": pool, "baselines": baselines, "dir": cache}


@pytest.fixture(scope="session")
def desk_env(desk_config):
    return CylinderFlowEnv(desk_config)


@pytest.fixture(scope="session")
def calibrated_reward(desk_config, desk_artifacts):
    """Reward constants measured on this solver (not the paper's units)."""
    b = desk_artifacts["baselines"]
    return dataclasses.replace(desk_config.reward,
                               drag_nocontrol=b["drag_nocontrol"],
                               drag_min=b["drag_min"])


def fresh_env(config) -> CylinderFlowEnv:
    return CylinderFlowEnv(config)
