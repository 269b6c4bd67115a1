"""Closed-loop evaluation of AQM policies plus stability diagnostics.

A PolicyDriver decides, per packet arrival, whether to keep the built-in
rule decision or substitute a model prediction.  RuleBased keeps every rule
decision; LlmEvery(n) routes every n-th decision through a trained policy
model conditioned on the live decision history.

compare() reports robust deltas (median / IQR) and a two-sample KS statistic
between delay distributions.  lyapunov_drift and lipschitz_estimate are the
stability diagnostics used by the `diagnose` CLI command.
"""

from __future__ import annotations

import json
import time

import numpy as np

from .features import ACTION_MARK, STATE_DIM
from .model import load_checkpoint
from .pool import compute_reward, normalize_state, record_state
from .simulator import ScenarioConfig, World, run_scenario

STEADY_STATE_SKIP_US = 5_000_000   # discard the first 5 s of every run
UTIL_BIN_US = 100_000              # utilisation measured in 100 ms bins


class EvalError(RuntimeError):
    pass


# ------------------------------------------------------------------ drivers


class RuleBased:
    """Pass-through driver: every decision is the built-in AQM rule."""

    name = "rule"

    def hook(self, world, q, pkt, decision):
        return decision.action

    def finish(self):
        return {}


class LlmEvery:
    """Route every n-th AQM decision through the policy model.

    Keeps a rolling window of (return-target, state, action) history fed to
    the model exactly as during training: states are normalised with the
    checkpoint's feature statistics and the return channel is pinned to the
    training-time target return.  Model marks on not-ECN-capable packets are
    downgraded to drops by the simulator and counted here as violations.

    shadow=True runs (and counts) inference on schedule but always applies
    the rule action, so runs with different `every` traverse identical
    traces — useful for inference-cost measurements.
    """

    name = "llm"

    def __init__(self, checkpoint_path, every=10, shadow=False):
        if every < 1:
            raise EvalError(f"every must be >= 1, got {every}")
        self.every = every
        self.shadow = shadow
        self.model, self.feature_stats, extra = load_checkpoint(checkpoint_path)
        if self.feature_stats is None:
            raise EvalError("checkpoint has no feature statistics")
        self.target_return = float(extra.get("target_return", 1.0))
        self.window = int(extra.get("window", self.model.config.context_window))
        self._hist = []          # (ret, normalised state, action, timestep) per decision
        self._last_drops = {}
        self._count = 0
        self.model_decisions = 0
        self.overridden = 0      # model action != rule action
        self.violations = 0      # model marked a not-ECN-capable packet
        self.latencies = []      # seconds per model inference

    def hook(self, world, q, pkt, decision):
        raw = self._raw_state(q, pkt)
        norm = normalize_state(raw, self.feature_stats)
        self._count += 1
        action = decision.action
        if self._count % self.every == 0:
            predicted = self._infer(norm)
            self.model_decisions += 1
            if predicted != decision.action:
                self.overridden += 1
            if predicted == ACTION_MARK and not pkt.ecn_capable:
                self.violations += 1
            if not self.shadow:
                action = predicted
        self._hist.append([self.target_return, norm, action, self._count - 1])
        if len(self._hist) > self.window:
            self._hist.pop(0)
        return action

    def _raw_state(self, q, pkt):
        prev = self._last_drops.get(q.queue_type, q.total_drops)
        delta = q.total_drops - prev
        self._last_drops[q.queue_type] = q.total_drops
        return [
            float(q.queue_type),
            float(q.burst_allowance),
            float(q.drop_probability),
            float(q.current_queue_delay),
            float(q.accumulated_probability),
            float(q.length_bytes),
            float(delta),
            float(pkt.size_bytes),
        ]

    def _infer(self, norm_state):
        w = self.window
        hist = self._hist[-(w - 1):] if w > 1 else []
        n = len(hist) + 1
        R = np.zeros((1, w)); S = np.zeros((1, w, STATE_DIM))
        A = np.zeros((1, w)); T = np.zeros((1, w)); pad = np.zeros((1, w))
        off = w - n
        for i, (r, s, a, t) in enumerate(hist):
            R[0, off + i] = r; S[0, off + i] = s; A[0, off + i] = a
            T[0, off + i] = t; pad[0, off + i] = 1.0
        R[0, w - 1] = self.target_return
        S[0, w - 1] = norm_state
        T[0, w - 1] = self._count - 1
        pad[0, w - 1] = 1.0
        t0 = time.perf_counter()
        dist = self.model.predict(R, S, A, T, pad_mask=pad)[0]
        self.latencies.append(time.perf_counter() - t0)
        return dist.action

    def finish(self):
        lat = self.latencies or [0.0]
        return {
            "model_decisions": self.model_decisions,
            "overridden": self.overridden,
            "mark_violations": self.violations,
            "mean_latency_s": float(np.mean(lat)),
            "p95_latency_s": float(np.percentile(lat, 95)),
        }


# ------------------------------------------------------------------ metrics


def _summary(values):
    """Five-number-ish summary: median, IQR, Tukey whiskers, outlier count."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"count": 0, "median": 0.0, "q1": 0.0, "q3": 0.0, "iqr": 0.0,
                "lo_whisker": 0.0, "hi_whisker": 0.0, "outliers": 0,
                "mean": 0.0, "p95": 0.0, "p99": 0.0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo = v[v >= q1 - 1.5 * iqr].min()
    hi = v[v <= q3 + 1.5 * iqr].max()
    return {
        "count": int(v.size),
        "median": float(med), "q1": float(q1), "q3": float(q3),
        "iqr": float(iqr),
        "lo_whisker": float(lo), "hi_whisker": float(hi),
        "outliers": int(np.sum((v < lo) | (v > hi))),
        "mean": float(v.mean()),
        "p95": float(np.percentile(v, 95)),
        "p99": float(np.percentile(v, 99)),
    }


def _cdf(values, points=101):
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return {"x": [], "p": []}
    p = np.linspace(0, 1, points)
    return {"x": np.quantile(v, p).tolist(), "p": p.tolist()}


def utilization(delivered, duration_us, link_rate_bps, bin_us=UTIL_BIN_US,
                skip_us=STEADY_STATE_SKIP_US):
    """Per-bin link utilisation in [0, 1] over the steady-state interval."""
    nbins = max(1, (duration_us - skip_us) // bin_us)
    bins = np.zeros(nbins)
    for t, nbytes in delivered:
        if t < skip_us or t >= skip_us + nbins * bin_us:
            continue
        bins[(t - skip_us) // bin_us] += nbytes
    cap = link_rate_bps * bin_us / 8 / 1_000_000
    return bins / cap


def evaluate(scenario: ScenarioConfig, driver=None) -> dict:
    """Run one closed-loop episode and return a JSON-ready stats document."""
    driver = driver or RuleBased()
    world = run_scenario(scenario, decision_hook=driver.hook)
    return collect_stats(world, driver)


def collect_stats(world: World, driver) -> dict:
    # short calibration runs would otherwise fall entirely inside the skip
    skip = min(STEADY_STATE_SKIP_US, world.config.duration_us // 2)
    delay_ms = {0: [], 1: []}
    for t, qc, sojourn in world.qdelay_samples:
        if t >= skip:
            delay_ms[qc].append(sojourn / 1000.0)
    all_delay = delay_ms[0] + delay_ms[1]

    rewards = []
    for rec in world.records:
        rewards.append(compute_reward(rec.packet_length,
                                      rec.current_queue_delay // 1000))
    util = utilization(world.delivered, world.config.duration_us,
                       world.params.link_rate_bps, skip_us=skip)
    actions = [rec.dequeue_action for rec in world.records]
    n = max(1, len(actions))
    doc = {
        "header": {
            "driver": driver.name,
            "scenario": world.config.name,
            "seed": world.config.seed,
            "duration_us": world.config.duration_us,
            "steady_state_skip_us": skip,
        },
        "summary": {
            "delay_ms": _summary(all_delay),
            "classic_delay_ms": _summary(delay_ms[0]),
            "l4s_delay_ms": _summary(delay_ms[1]),
            "utilization": _summary(util),
            "reward": _summary(rewards),
        },
        "actions": {
            "enqueue_frac": actions.count(0) / n,
            "drop_frac": actions.count(1) / n,
            "mark_frac": actions.count(2) / n,
            "total": len(actions),
        },
        "cdf": {"delay_ms": _cdf(all_delay)},
        "driver": driver.finish(),
    }
    return doc


def save_stats(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_stats(path):
    with open(path) as fh:
        return json.load(fh)


# ------------------------------------------------------------------ compare


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic (max ECDF gap)."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise EvalError("KS statistic needs non-empty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.abs(fa - fb).max())


def compare(baseline: dict, candidate: dict) -> dict:
    """Robust deltas between two stats documents (candidate minus baseline)."""
    out = {"baseline": baseline["header"], "candidate": candidate["header"],
           "deltas": {}}
    for key in ("delay_ms", "classic_delay_ms", "l4s_delay_ms",
                "utilization", "reward"):
        b = baseline["summary"][key]
        c = candidate["summary"][key]
        rel = ((c["median"] - b["median"]) / b["median"]
               if b["median"] != 0 else 0.0)
        out["deltas"][key] = {
            "median": c["median"] - b["median"],
            "median_rel": rel,
            "iqr": c["iqr"] - b["iqr"],
        }
    bx, cx = baseline["cdf"]["delay_ms"]["x"], candidate["cdf"]["delay_ms"]["x"]
    out["ks_delay"] = ks_statistic(bx, cx) if bx and cx else 0.0
    return out


# ---------------------------------------------------------------- diagnose


def lyapunov_drift(delay_trace, target):
    """Drift of V(t) = (qdelay(t) - target)^2 along a delay trace.

    Returns per-step drifts V(t+1) - V(t), their mean, and the fraction of
    steps with negative drift.  A converging controller shows negative mean
    drift and a high negative fraction.
    """
    d = np.asarray(delay_trace, dtype=float)
    if d.size < 2:
        raise EvalError("need at least two delay samples")
    v = (d - float(target)) ** 2
    drifts = np.diff(v)
    return {
        "drifts": drifts.tolist(),
        "mean_drift": float(drifts.mean()),
        "negative_fraction": float(np.mean(drifts < 0)),
    }


def lipschitz_estimate(block, pairs):
    """Empirical Lipschitz constant of `block` over input pairs.

    `block` maps a 1-D numpy vector to a 1-D numpy vector; `pairs` is an
    iterable of (x, y) probe pairs.  Zero-distance pairs are skipped.
    """
    best = 0.0
    used = 0
    for x, y in pairs:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        dx = np.linalg.norm(x - y)
        if dx == 0:
            continue
        dy = np.linalg.norm(np.asarray(block(x), dtype=float)
                            - np.asarray(block(y), dtype=float))
        best = max(best, dy / dx)
        used += 1
    if used == 0:
        raise EvalError("all probe pairs had zero distance")
    return {"constant": best, "pairs_used": used, "expansive": best >= 1.0}


def diagnose(world_or_stats, target_ms) -> dict:
    """Bundle the stability diagnostics for a finished run."""
    if isinstance(world_or_stats, World):
        trace = [s / 1000.0 for t, qc, s in world_or_stats.qdelay_samples
                 if t >= STEADY_STATE_SKIP_US and qc == 0]
    else:
        trace = world_or_stats
    drift = lyapunov_drift(trace, target_ms)
    drift.pop("drifts")
    return {"lyapunov": drift, "target_ms": target_ms}
