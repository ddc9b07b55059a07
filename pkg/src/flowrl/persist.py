"""Artifact persistence: checkpoints, metrics files, run manifest.

Every artifact filename embeds the run config hash; loaders refuse hashes
that do not match the active configuration.
"""

from __future__ import annotations

import json
import struct
import time
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"FLOWCKPT"
CKPT_VERSION = 1

METRICS_HEADER = "iteration,mean_return,eval_return,actor_epochs,critic_epochs,final_kl,lr"


class ArtifactMismatch(RuntimeError):
    """Artifact belongs to a different run configuration."""


def save_checkpoint(path, *, config_hash: str, iteration: int, seed: int,
                    actor_kind: str, arrays: dict[str, np.ndarray],
                    scalars: dict | None = None) -> None:
    """JSON header + little-endian float64 payload, one blob per array."""
    names = list(arrays.keys())
    header = {
        "version": CKPT_VERSION,
        "config_hash": config_hash,
        "iteration": iteration,
        "seed": seed,
        "actor_kind": actor_kind,
        "scalars": scalars or {},
        "arrays": [{"name": n, "length": int(arrays[n].size)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path, expected_hash: str | None = None):
    """Returns (header dict, {name: float64 array})."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        if expected_hash is not None and header["config_hash"] != expected_hash:
            raise ArtifactMismatch(
                f"checkpoint {path} belongs to config {header['config_hash']}"
                f", expected {expected_hash}")
        arrays = {}
        for spec in header["arrays"]:
            raw = fh.read(spec["length"] * 8)
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").copy()
    return header, arrays


class MetricsWriter:
    """Per-iteration training metrics as CSV with a pinned schema."""

    def __init__(self, path, resume_iteration: int | None = None):
        self.path = Path(path)
        if resume_iteration is not None and self.path.exists():
            self._truncate_after(resume_iteration)
        else:
            with open(self.path, "w") as fh:
                fh.write(METRICS_HEADER + "\n")

    def _truncate_after(self, iteration: int) -> None:
        lines = self.path.read_text().splitlines()
        kept = [lines[0]] if lines else [METRICS_HEADER]
        for line in lines[1:]:
            it = int(line.split(",", 1)[0])
            if it <= iteration:
                kept.append(line)
        self.path.write_text("\n".join(kept) + "\n")

    def write(self, iteration: int, mean_return: float, eval_return: float,
              actor_epochs: int, critic_epochs: int, final_kl: float,
              lr: float) -> None:
        row = (f"{iteration},{mean_return:.17g},{eval_return:.17g},"
               f"{actor_epochs},{critic_epochs},{final_kl:.17g},{lr:.17g}")
        with open(self.path, "a") as fh:
            fh.write(row + "\n")


class Manifest:
    """Append-only record of commands and the artifacts they produced."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / "manifest.jsonl"
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, command: str, config_hash: str, **extra) -> None:
        entry = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
                 "command": command, "config_hash": config_hash}
        entry.update(extra)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def require_artifact(path: Path, produced_by: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(
            f"missing prerequisite artifact {path.name}; "
            f"run `flowrl {produced_by}` first")
    return path


def write_json_report(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
