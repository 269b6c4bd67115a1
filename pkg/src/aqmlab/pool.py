"""Turn kernel logs into return-conditioned training trajectories.

One trajectory per log file; each step is (reward, 8-feature state, action,
done, return-to-go).  Pools serialize to a structured JSON file together with
the discount factor, normalization stats and provenance.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from typing import Optional

from .features import STATE_DIM, STATE_FEATURES
from .simulator import KernelLogRecord, PROB_SCALE, read_klog

POOL_FORMAT_VERSION = 1


class PoolError(ValueError):
    pass


def compute_reward(packet_length: int, queue_delay_ms: float) -> float:
    """pkt_len / (qdelay + 1): throughput up, latency down, no zero-delay pole."""
    if packet_length <= 0:
        raise PoolError("packet_length must be > 0")
    if queue_delay_ms < 0:
        raise PoolError("queue_delay must be >= 0")
    return packet_length / (queue_delay_ms + 1.0)


def returns_to_go(rewards, gamma: float):
    """Discounted suffix sums via the backward recursion R_t = r_t + gamma*R_{t+1}."""
    rewards = list(rewards)
    if not rewards:
        raise PoolError("returns_to_go: empty reward sequence")
    if not (0.0 < gamma <= 1.0):
        raise PoolError(f"gamma must be in (0,1], got {gamma}")
    out = [0.0] * len(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


@dataclass
class Step:
    reward: float
    state: list           # 8 floats in STATE_FEATURES order
    action: int
    done: int
    ret: float = 0.0      # return-to-go
    timestep: Optional[int] = None   # set by temporal jitter, else implicit index
    masked: bool = False             # set by timestep dropout

    def to_dict(self):
        d = {"r": self.reward, "s": self.state, "a": self.action,
             "done": self.done, "R": self.ret}
        if self.timestep is not None:
            d["t"] = self.timestep
        if self.masked:
            d["masked"] = True
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(reward=d["r"], state=list(d["s"]), action=d["a"],
                   done=d["done"], ret=d["R"], timestep=d.get("t"),
                   masked=d.get("masked", False))


@dataclass
class ExperiencePool:
    trajectories: list = field(default_factory=list)   # list[list[Step]]
    gamma: float = 0.95
    feature_stats: Optional[dict] = None
    provenance: dict = field(default_factory=dict)

    def num_steps(self):
        return sum(len(t) for t in self.trajectories)

    def all_steps(self):
        for traj in self.trajectories:
            yield from traj

    def validate(self, tol=1e-9):
        if not (0.0 < self.gamma <= 1.0):
            raise PoolError(f"gamma must be in (0,1], got {self.gamma}")
        for ti, traj in enumerate(self.trajectories):
            if not traj:
                raise PoolError(f"trajectory {ti} is empty")
            for si, step in enumerate(traj):
                if len(step.state) != STATE_DIM:
                    raise PoolError(f"trajectory {ti} step {si}: state dim != {STATE_DIM}")
                if any(not math.isfinite(x) for x in step.state):
                    raise PoolError(f"trajectory {ti} step {si}: non-finite state")
                want_done = 1 if si == len(traj) - 1 else 0
                if step.done != want_done:
                    raise PoolError(f"trajectory {ti} step {si}: done={step.done}, expected {want_done}")
            acc = 0.0
            for si in range(len(traj) - 1, -1, -1):
                acc = traj[si].reward + self.gamma * acc
                if abs(traj[si].ret - acc) > tol * max(1.0, abs(acc)):
                    raise PoolError(
                        f"trajectory {ti} step {si}: stored return {traj[si].ret} "
                        f"!= recomputed {acc}")
        return True

    # -------------------------------------------------------------- persist

    def to_dict(self):
        return {
            "format_version": POOL_FORMAT_VERSION,
            "gamma": self.gamma,
            "feature_stats": self.feature_stats,
            "provenance": self.provenance,
            "trajectories": [{"steps": [s.to_dict() for s in t]} for t in self.trajectories],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != POOL_FORMAT_VERSION:
            raise PoolError(f"unsupported pool format version {d.get('format_version')}")
        return cls(
            trajectories=[[Step.from_dict(s) for s in t["steps"]] for t in d["trajectories"]],
            gamma=d["gamma"],
            feature_stats=d.get("feature_stats"),
            provenance=d.get("provenance", {}),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ------------------------------------------------------------------ building


def record_state(rec: KernelLogRecord, drops_delta: int):
    """Raw 8-feature vector for one log record (probabilities rescaled to [0,1])."""
    return [
        float(rec.queue_type),
        float(rec.burst_allowance),
        rec.drop_probability / PROB_SCALE,
        float(rec.current_queue_delay),
        rec.accumulated_probability / PROB_SCALE,
        float(rec.length_in_bytes),
        float(drops_delta),
        float(rec.packet_length),
    ]


def trajectory_from_records(records, gamma):
    if not records:
        raise PoolError("empty record sequence")
    steps = []
    last_drops = {}
    for rec in records:
        prev = last_drops.get(rec.queue_type, rec.total_drops)
        delta = rec.total_drops - prev
        last_drops[rec.queue_type] = rec.total_drops
        qdelay_ms = rec.current_queue_delay // 1000
        steps.append(Step(
            reward=compute_reward(rec.packet_length, qdelay_ms),
            state=record_state(rec, delta),
            action=rec.dequeue_action,
            done=0,
        ))
    steps[-1].done = 1
    rets = returns_to_go([s.reward for s in steps], gamma)
    for s, r in zip(steps, rets):
        s.ret = r
    return steps


def build_pool(log_files, gamma=0.95) -> ExperiencePool:
    """One trajectory per .klog file, merged in sorted file-name order."""
    log_files = sorted(str(f) for f in log_files)
    if not log_files:
        raise PoolError("no log files given")
    pool = ExperiencePool(gamma=gamma)
    digest = hashlib.sha256()
    for path in log_files:
        records = read_klog(path)
        if not records:
            raise PoolError(f"{path}: empty log")
        pool.trajectories.append(trajectory_from_records(records, gamma))
        with open(path, "rb") as fh:
            digest.update(fh.read())
    pool.provenance = {"source_logs": log_files, "content_sha256": digest.hexdigest()}
    pool.validate()
    return pool


def build_pool_from_records(record_lists, gamma=0.95) -> ExperiencePool:
    pool = ExperiencePool(gamma=gamma)
    for records in record_lists:
        pool.trajectories.append(trajectory_from_records(records, gamma))
    pool.validate()
    return pool


# -------------------------------------------------------------- normalization


def compute_feature_stats(pool: ExperiencePool) -> dict:
    n = pool.num_steps()
    if n == 0:
        raise PoolError("empty pool")
    mean = [0.0] * STATE_DIM
    for s in pool.all_steps():
        for i in range(STATE_DIM):
            mean[i] += s.state[i]
    mean = [m / n for m in mean]
    var = [0.0] * STATE_DIM
    for s in pool.all_steps():
        for i in range(STATE_DIM):
            var[i] += (s.state[i] - mean[i]) ** 2
    std = [math.sqrt(v / n) for v in var]
    zero_variance = [sd < 1e-12 for sd in std]
    return {
        "features": list(STATE_FEATURES),
        "mean": mean,
        "std": [1.0 if z else sd for sd, z in zip(std, zero_variance)],
        "zero_variance": zero_variance,
    }


def normalize_state(state, stats):
    return [0.0 if z else (x - m) / sd
            for x, m, sd, z in zip(state, stats["mean"], stats["std"], stats["zero_variance"])]


def denormalize_state(state, stats):
    return [m if z else x * sd + m
            for x, m, sd, z in zip(state, stats["mean"], stats["std"], stats["zero_variance"])]


def normalize_states(pool: ExperiencePool):
    """Affine per-feature normalization; returns (new pool, stats).

    Zero-variance features map to 0 and are flagged in the stats.
    """
    stats = compute_feature_stats(pool)
    out = ExperiencePool(gamma=pool.gamma, feature_stats=stats,
                         provenance=dict(pool.provenance, normalized=True))
    for traj in pool.trajectories:
        out.trajectories.append([
            Step(reward=s.reward, state=normalize_state(s.state, stats),
                 action=s.action, done=s.done, ret=s.ret,
                 timestep=s.timestep, masked=s.masked)
            for s in traj
        ])
    return out, stats


# ---------------------------------------------------------------- augmentation


def augment(pool: ExperiencePool, jitter_range=0, noise_sigma=0.0,
            dropout_prob=0.0, seed=0) -> ExperiencePool:
    """Stochastic temporal augmentation: timestep jitter, state noise, dropout.

    Actions and returns are never touched; jitter shifts only the timestep
    index, noise perturbs only states, dropout marks steps as masked for the
    trainer.  The input pool is left untouched.
    """
    if noise_sigma < 0:
        raise PoolError("noise_sigma must be >= 0")
    if not (0.0 <= dropout_prob <= 1.0):
        raise PoolError("dropout_prob must be in [0,1]")
    if jitter_range < 0:
        raise PoolError("jitter_range must be >= 0")
    rng = random.Random(seed)
    out = ExperiencePool(gamma=pool.gamma, feature_stats=pool.feature_stats,
                         provenance=dict(pool.provenance, augmented=True))
    for traj in pool.trajectories:
        offset = rng.randint(0, jitter_range) if jitter_range else 0
        new_traj = []
        for idx, s in enumerate(traj):
            state = list(s.state)
            if noise_sigma > 0:
                state = [x + rng.gauss(0.0, noise_sigma) for x in state]
            masked = s.masked or (dropout_prob > 0 and rng.random() < dropout_prob)
            base_t = s.timestep if s.timestep is not None else idx
            new_traj.append(Step(reward=s.reward, state=state, action=s.action,
                                 done=s.done, ret=s.ret,
                                 timestep=base_t + offset if jitter_range else s.timestep,
                                 masked=masked))
        out.trajectories.append(new_traj)
    return out
