"""Dataset generation: scenario files plus a manifest binding frames, splits,
config hash, and seed."""

import json
from pathlib import Path

import numpy as np

from . import world
from .config import RunConfig, config_hash


class DataError(RuntimeError):
    pass


def _frame_times(cfg: RunConfig, n):
    t_min = cfg.sensor.sweeps * cfg.sensor.period
    t_max = cfg.world.duration - cfg.model.horizon
    if n == 1:
        return [round(t_min, 6)]
    grid = np.linspace(t_min, t_max, n)
    return [round(float(np.round(t / cfg.world.tick) * cfg.world.tick), 6) for t in grid]


def generate_dataset(cfg: RunConfig, out_dir, force=False, quiet=False):
    """Write train/ and test/ scenario files and manifest.json."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DataError(f"output directory {out_dir} is not empty (use --force)")
    (out_dir / "train").mkdir(parents=True, exist_ok=True)
    (out_dir / "test").mkdir(parents=True, exist_ok=True)

    eval_range = (cfg.eval.x_min, cfg.eval.x_max, cfg.eval.y_min, cfg.eval.y_max)
    manifest = {"config_hash": config_hash(cfg), "seed": cfg.seed}
    stats = {"candidates_per_frame": []}
    per_scn = cfg.data.frames_per_scenario
    for split, n_frames, seed_base in (
            ("train", cfg.data.train_frames, 1_000_003 * cfg.seed + 11),
            ("test", cfg.data.test_frames, 1_000_003 * cfg.seed + 500_011)):
        n_scn = int(np.ceil(n_frames / per_scn))
        scn_files, frames = [], []
        times = _frame_times(cfg, per_scn)
        for i in range(n_scn):
            scn = world.generate_scenario(cfg.world, seed_base + i, eval_range=eval_range)
            rel = f"{split}/scn_{i:04d}.jsonl"
            world.save_scenario(scn, out_dir / rel)
            scn_files.append(rel)
            for t in times:
                if len(frames) < n_frames:
                    frames.append([i, t])
                    stats["candidates_per_frame"].append(len(scn.candidate_ids))
        manifest[split] = {"scenarios": scn_files, "frames": frames}
        if not quiet:
            print(f"[gen] {split}: {len(scn_files)} scenarios, {len(frames)} frames")

    cpf = np.array(stats["candidates_per_frame"])
    manifest["stats"] = {
        "candidates_mean": float(cpf.mean()),
        "candidates_max": int(cpf.max()),
    }
    if not quiet:
        print(f"[gen] candidate SDVs per frame: mean {cpf.mean():.2f}, max {cpf.max()}")
    blob = json.dumps(manifest, indent=1, sort_keys=True)
    (out_dir / "manifest.json").write_text(blob)
    return manifest


def load_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json in {data_dir}")
    return json.loads(path.read_text())


def load_split(data_dir, split):
    manifest = load_manifest(data_dir)
    scenarios = [world.load_scenario(Path(data_dir) / rel)
                 for rel in manifest[split]["scenarios"]]
    frames = [(int(si), float(t)) for si, t in manifest[split]["frames"]]
    return scenarios, frames
