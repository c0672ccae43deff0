"""Staged training: single-vehicle pretraining, joint fusion finetuning,
delay-compensation training, then rate-distortion training of the feature
codec with everything else frozen.  Each stage touches only its own
parameter group; all other tensors come out bit-identical."""

import csv
import json
from pathlib import Path

import numpy as np

from . import aggregation as agg
from . import codecs, nn, sensor, world
from .checkpoint import load_params, save_params
from .config import RunConfig, config_hash
from .model import PnpModel, label_to_ego

STAGES = ("pretrain", "finetune_fusion", "train_temporal", "train_codec")
STAGE_FILES = {
    "pretrain": "pretrain.pnpw",
    "finetune_fusion": "fusion.pnpw",
    "train_temporal": "temporal.pnpw",
    "train_codec": "codec.pnpw",
}
_PREREQ = {
    "pretrain": None,
    "finetune_fusion": "pretrain",
    "train_temporal": "finetune_fusion",
    "train_codec": "train_temporal",
}


class MissingStageError(FileNotFoundError):
    pass


def sample_neighbor_count(rng, candidates_available, cap=6):
    """Uniform over {0, ..., min(candidates_available, cap)} inclusive."""
    return int(rng.integers(0, min(candidates_available, cap) + 1))


def trainable_names(stage, params):
    if stage == "pretrain":
        pick = lambda n: n.startswith(("backbone/", "head/"))
    elif stage == "finetune_fusion":
        pick = lambda n: (n.startswith(("backbone/", "head/", "agg/"))
                          and not n.startswith("agg/time_comp/"))
    elif stage == "train_temporal":
        pick = lambda n: n.startswith("agg/time_comp/")
    elif stage == "train_codec":
        pick = lambda n: n.startswith("codec/")
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return [n for n in sorted(params) if pick(n)]


class FrameSampler:
    """Deterministic (scenario, time, receiver, neighbors) example stream."""

    def __init__(self, scenarios, frames, cfg: RunConfig, stage_rng):
        self.scenarios = scenarios
        self.frames = frames
        self.cfg = cfg
        self.rng = stage_rng
        self._sweep_cache = {}

    def sweeps_for(self, scn, sdv_id, t):
        key = (id(scn), sdv_id, round(t, 6))
        if key not in self._sweep_cache:
            sc = self.cfg.sensor
            self._sweep_cache[key] = [
                sensor.raycast_sweep(scn, sdv_id, t - k * sc.period, sc)
                for k in range(sc.sweeps)]
            if len(self._sweep_cache) > 4096:
                self._sweep_cache.clear()
        return self._sweep_cache[key]

    def draw(self, with_neighbors, delay_max=0.0):
        si, t = self.frames[int(self.rng.integers(len(self.frames)))]
        scn = self.scenarios[si]
        receiver = int(scn.candidate_ids[int(self.rng.integers(len(scn.candidate_ids)))])
        recv_pose = scn.actor(receiver).pose_at(t)
        neighbors = []
        if with_neighbors:
            avail = []
            for cid in scn.candidate_ids:
                if cid == receiver:
                    continue
                p = scn.actor(cid).pose_at(t)
                if np.hypot(p.x - recv_pose.x, p.y - recv_pose.y) <= self.cfg.channel.broadcast_range:
                    avail.append(cid)
            n = sample_neighbor_count(self.rng, len(avail), self.cfg.train.max_neighbors)
            if n:
                neighbors = [int(c) for c in self.rng.choice(avail, size=n, replace=False)]
        offsets = {nid: (float(self.rng.uniform(0.0, delay_max)) if delay_max > 0 else 0.0)
                   for nid in neighbors}
        return scn, t, receiver, neighbors, offsets

    def labels_for(self, scn, t, receiver, active_ids):
        mc = self.cfg.model
        recv_pose = scn.actor(receiver).pose_at(t)
        labels = world.labels_at(
            scn, t, horizon=mc.horizon, interval=mc.interval,
            ego_pose=recv_pose, eval_range=(mc.x_min, mc.x_max, mc.y_min, mc.y_max),
            exclude_ids=set(active_ids))
        return [label_to_ego(lbl, recv_pose) for lbl in labels]


def _forward_example(model, params, sampler, scn, t, receiver, neighbors, offsets, use_agg):
    sweeps = sampler.sweeps_for(scn, receiver, t)
    fm = model.encode(sweeps)
    if use_agg:
        received = []
        for nid in neighbors:
            dt = offsets.get(nid, 0.0)
            nb_sweeps = sampler.sweeps_for(scn, nid, t - dt)
            received.append((model.encode(nb_sweeps), dt))
        acfg = agg.AggregationConfig.from_model(model.cfg)
        z = agg.aggregate(fm, received, params, acfg)
    else:
        z = fm.data
    det, fc = model.output_network(z)
    ego_labels = sampler.labels_for(scn, t, receiver, [receiver] + list(neighbors))
    return model.detection_loss(det, fc, ego_labels)


def train_stage(stage, cfg: RunConfig, data_dir, out_dir, quiet=False):
    """Run one training stage; writes <stage file> and a per-step loss CSV.

    Raises MissingStageError when the prerequisite checkpoint is absent.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prereq = _PREREQ[stage]
    if prereq is None:
        rng_init = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA0]))
        params = PnpModel.init_params(cfg.model, cfg.sensor.sweeps, rng_init)
    else:
        prev = out_dir / STAGE_FILES[prereq]
        if not prev.exists():
            raise MissingStageError(
                f"stage {stage!r} needs checkpoint {prev} from stage {prereq!r}")
        params = load_params(prev)
        rng_init = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA1, STAGES.index(stage)]))
        if stage == "finetune_fusion":
            params.update(agg.init_agg_params(agg.AggregationConfig.from_model(cfg.model), rng_init))
        elif stage == "train_temporal":
            params.update(agg.init_time_comp_params(cfg.model.channels))
        elif stage == "train_codec":
            params.update(codecs.FeatureCodec.init_params(
                cfg.model.channels, cfg.codec.latent_bins, rng_init))

    train_meta = json.loads((Path(data_dir) / "manifest.json").read_text())
    scenarios = [world.load_scenario(Path(data_dir) / rel)
                 for rel in train_meta["train"]["scenarios"]]
    frames = [tuple(f) for f in train_meta["train"]["frames"]]

    stage_idx = STAGES.index(stage)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB0, stage_idx]))
    sampler = FrameSampler(scenarios, frames, cfg, rng)
    model = PnpModel(cfg.model, cfg.sensor.sweeps, params)

    steps, lr = {
        "pretrain": (cfg.train.pretrain_steps, cfg.train.pretrain_lr),
        "finetune_fusion": (cfg.train.fusion_steps, cfg.train.fusion_lr),
        "train_temporal": (cfg.train.temporal_steps, cfg.train.temporal_lr),
        "train_codec": (cfg.train.codec_steps, cfg.train.codec_lr),
    }[stage]
    train_names = trainable_names(stage, params)
    state = nn.AdamState()
    feature_codec = None
    if stage == "train_codec":
        feature_codec = codecs.FeatureCodec(cfg.codec, cfg.model.channels, params)

    log_path = out_dir / f"train_log_{stage}.csv"
    with open(log_path, "w", newline="") as logf:
        logf.write(f"# config_hash={config_hash(cfg)} seed={cfg.seed}\n")
        writer = csv.writer(logf)
        if stage == "train_codec":
            writer.writerow(["step", "stage", "loss", "rate_bits_per_elem", "mse"])
        else:
            writer.writerow(["step", "stage", "loss", "cls", "box", "forecast", "n_pos"])
        for step in range(steps):
            nn.zero_grads(params)
            if stage == "pretrain":
                scn, t, receiver, nbrs, offs = sampler.draw(with_neighbors=False)
                loss, parts = _forward_example(model, params, sampler, scn, t,
                                               receiver, nbrs, offs, use_agg=False)
            elif stage == "finetune_fusion":
                scn, t, receiver, nbrs, offs = sampler.draw(with_neighbors=True)
                loss, parts = _forward_example(model, params, sampler, scn, t,
                                               receiver, nbrs, offs, use_agg=True)
            elif stage == "train_temporal":
                scn, t, receiver, nbrs, offs = sampler.draw(
                    with_neighbors=True, delay_max=cfg.train.delay_max)
                loss, parts = _forward_example(model, params, sampler, scn, t,
                                               receiver, nbrs, offs, use_agg=True)
            else:
                scn, t, receiver, _, _ = sampler.draw(with_neighbors=False)
                sweeps = sampler.sweeps_for(scn, receiver, t)
                fm_obj = model.encode(sweeps)
                fm_detached = codecs.FeatureMap(fm_obj.data.detach(), fm_obj.origin,
                                                fm_obj.resolution, fm_obj.frame,
                                                fm_obj.timestamp)
                loss, rate, mse = feature_codec.rd_loss(fm_detached, cfg.codec.rd_lambda, rng)
                parts = {"rate": rate, "mse": mse}
            loss.backward()
            grads = {n: params[n].grad for n in train_names if params[n].grad is not None}
            nn.adam_step(params, grads, state, lr=lr)
            if stage == "train_codec":
                writer.writerow([step, stage, float(loss.data),
                                 f"{parts['rate']:.6f}", f"{parts['mse']:.6f}"])
            else:
                writer.writerow([step, stage, float(loss.data), f"{parts['cls']:.6f}",
                                 f"{parts['box']:.6f}", f"{parts['forecast']:.6f}",
                                 parts["n_pos"]])
            if not quiet and (step % cfg.train.log_every == 0 or step == steps - 1):
                print(f"[{stage}] step {step}/{steps} loss {float(loss.data):.4f}")

    meta = {"meta/seed": np.array([float(cfg.seed)]),
            "meta/config_hash": np.frombuffer(config_hash(cfg).encode(), dtype=np.uint8).astype(np.float64)}
    ckpt = dict(params)
    ckpt.update({k: nn.Tensor(v) for k, v in meta.items()})
    path = out_dir / STAGE_FILES[stage]
    save_params(path, ckpt)
    return path


def load_stage_params(out_dir, stage):
    path = Path(out_dir) / STAGE_FILES[stage]
    if not path.exists():
        raise MissingStageError(f"missing checkpoint for stage {stage!r}: {path}")
    params = load_params(path)
    return {k: v for k, v in params.items() if not k.startswith("meta/")}
