"""Empirical probes and the component-ablation harness.

grad_second_moment estimates E||grad L||^2 over seeded re-initializations;
mi_plugin is the discrete plug-in mutual-information estimator; the
alignment score is the mean log-probability the model assigns to reference
actions.  None of the directional comparisons are hard-asserted: probes
report per-seed samples, a mean difference, and an exact sign-test p-value
so the direction stays an observation, not a baked-in assumption.
"""

import csv
import math
import time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .errors import InvalidArgument, NumericFailure
from .metrics import write_summary_json
from .model import EpisodeCache, ModelConfig, build_params, forward_step
from .navgraph import STOP, PathGraph
from .rng import substream
from .training import (TrainConfig, _observe, episode_loss, evaluate_policy,
                       rollout_student, rollout_teacher, train)

GRID_LABELS = ("----", "M---", "MG--", "MGL-", "MGLO")
PATHWAY_PREFIXES = ("obs.", "graph.")


@dataclass(frozen=True)
class GradStats:
    mean_sq_norm: float
    samples: tuple
    seeds: int
    failures: int = 0


@dataclass(frozen=True)
class AblationRow:
    label: str
    med: bool
    ge: bool
    ld: bool
    od: bool
    tl: float
    ne: float
    sr: float
    spl: float
    step_ms: float
    failed: bool = False


# ---------------------------------------------------------- gradient probe


def grad_second_moment(loss_builder, seeds, param_filter=None) -> GradStats:
    """Mean squared gradient norm over seeded trials.

    loss_builder(seed) must return (ParamStore, scalar loss Tensor) built
    from a fresh initialization.  param_filter restricts the norm to
    matching parameter names.  Non-finite samples are dropped with a
    warning and counted as failures.
    """
    seeds = tuple(seeds)
    if len(seeds) < 2:
        raise InvalidArgument("need at least 2 seeds")
    samples = []
    failures = 0
    for seed in seeds:
        store, loss = loss_builder(seed)
        store.zero_grad()
        nn.backward(loss)
        total = 0.0
        for name in store.names():
            if param_filter is not None and not param_filter(name):
                continue
            g = store.params[name].grad
            if g is not None:
                total += float(np.sum(g * g))
        if math.isfinite(total):
            samples.append(total)
        else:
            failures += 1
            warnings.warn(f"non-finite gradient sample for seed {seed}, excluded")
    if not samples:
        raise NumericFailure("all gradient samples were non-finite")
    return GradStats(mean_sq_norm=float(np.mean(samples)),
                     samples=tuple(samples), seeds=len(samples),
                     failures=failures)


def pathway_filter(name: str) -> bool:
    """Parameters on the observation/graph feature pathways."""
    return name.startswith(PATHWAY_PREFIXES)


def vln_loss_builder(data, mcfg: ModelConfig, lam: float = 0.2,
                     t_max: int = 15):
    """Builder running one mixed-forcing loss over the batch per seed."""
    data = list(data)
    if not data:
        raise InvalidArgument("empty episode batch")

    def build(seed):
        params = build_params(mcfg, seed)
        rng = substream(seed, "probe-student")
        total = None
        for env, ep in data:
            cache = EpisodeCache()
            tf = rollout_teacher(env, ep, params, mcfg, cache=cache)
            sf = rollout_student(env, ep, params, mcfg, rng, t_max,
                                 cache=cache)
            loss = episode_loss(tf, sf, lam)
            total = loss if total is None else nn.add(total, loss)
        return params, nn.scale(total, 1.0 / len(data))

    return build


# --------------------------------------------------- mutual information


def mi_plugin(x_samples, y_samples) -> float:
    """Plug-in estimate of I(X; Y) in nats from paired discrete samples."""
    xs = list(x_samples)
    ys = list(y_samples)
    if len(xs) != len(ys):
        raise InvalidArgument(f"length mismatch: {len(xs)} vs {len(ys)}")
    if not xs:
        raise InvalidArgument("empty sample series")
    n = len(xs)
    joint: dict = {}
    px: dict = {}
    py: dict = {}
    for x, y in zip(xs, ys):
        joint[(x, y)] = joint.get((x, y), 0) + 1
        px[x] = px.get(x, 0) + 1
        py[y] = py.get(y, 0) + 1
    mi = 0.0
    for (x, y), c in sorted(joint.items()):
        p_xy = c / n
        mi += p_xy * math.log(p_xy * n * n / (px[x] * py[y]))
    return max(0.0, mi)


def quantize_series(values, bins: int = 8):
    """Row vectors to discrete symbols: uniform per-dimension binning."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidArgument("expected a non-empty (n, d) array")
    if bins < 2:
        raise InvalidArgument("bins must be >= 2")
    lo = arr.min(axis=0)
    span = arr.max(axis=0) - lo
    span[span == 0.0] = 1.0
    idx = np.clip((arr - lo) / span * bins, 0, bins - 1).astype(int)
    weights = bins ** np.arange(arr.shape[1])
    return [int(v) for v in idx @ weights]


def cue_action_series(data, params, mcfg: ModelConfig, bins: int = 8,
                      dims: int = 2):
    """Paired (quantized key-detail cue, reference action) series.

    Walks each reference route under teacher forcing; the cue is the first
    `dims` entries of the key-detail vector (constant zero when the detail
    stages are disabled, making the MI exactly zero)."""
    cues = []
    actions = []
    for env, ep in data:
        pg = PathGraph(env.graph, ep.start, local_only=env.local_only)
        cache = EpisodeCache()
        gt = ep.gt_path
        for t in range(len(gt)):
            obs = _observe(env, pg.current, mcfg)
            feats, _ = forward_step(pg, obs, ep.instruction, params, mcfg,
                                    cache)
            cue = (feats.key_detail.data[:dims] if feats.key_detail is not None
                   else np.zeros(dims))
            cues.append(np.array(cue, dtype=np.float64))
            target = gt[t + 1] if t + 1 < len(gt) else STOP
            actions.append(int(target))
            pg.advance(target)
    return quantize_series(np.stack(cues), bins=bins), actions


# ------------------------------------------------------- alignment probe


def alignment_score(data, params, mcfg: ModelConfig) -> float:
    """Mean log-probability of reference actions under teacher forcing."""
    losses = []
    for env, ep in data:
        rec = rollout_teacher(env, ep, params, mcfg)
        losses.extend(float(s.loss.data) for s in rec.steps)
    if not losses:
        raise InvalidArgument("no supervised steps")
    return -float(np.mean(losses))


# ----------------------------------------------------------- sign testing


def sign_test(diffs) -> float:
    """Exact two-sided binomial sign test; zero differences are dropped."""
    pos = sum(1 for d in diffs if d > 0)
    neg = sum(1 for d in diffs if d < 0)
    n = pos + neg
    if n == 0:
        return 1.0
    k = min(pos, neg)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0 ** n
    return min(1.0, 2.0 * tail)


def make_probe(name: str, label_a: str, label_b: str, samples_a,
               samples_b) -> dict:
    """Paired-comparison report; direction is reported, never asserted."""
    a = [float(v) for v in samples_a]
    b = [float(v) for v in samples_b]
    if len(a) != len(b) or not a:
        raise InvalidArgument("probe needs equal-length non-empty samples")
    diffs = [x - y for x, y in zip(a, b)]
    return {"probe": name,
            "definition": "artifact-defined surrogate quantity",
            "variant_a": label_a,
            "variant_b": label_b,
            "samples": {"a": a, "b": b},
            "mean_diff": float(np.mean(diffs)),
            "sign_test_p": sign_test(diffs)}


def write_probe_json(path, probe: dict) -> None:
    write_summary_json(path, probe)


# ------------------------------------------------------- variant handling


def variant_config(base: ModelConfig, label: str) -> ModelConfig:
    """Four-character flag label (e.g. 'MG--') to a configured variant."""
    if len(label) != 4 or any(c not in (want, "-")
                              for c, want in zip(label, "MGLO")):
        raise InvalidArgument(f"bad variant label {label!r}")
    return replace(base, decouple=label[0] == "M", geo_embed=label[1] == "G",
                   loc_detail=label[2] == "L", obj_detail=label[3] == "O")


def grad_probe(data, seeds, base_mcfg: ModelConfig, lam: float = 0.2,
               t_max: int = 15) -> dict:
    """Squared gradient norm on the observation/graph pathways: decoupled
    geometric variant vs coupled baseline, paired by seed."""
    a = grad_second_moment(vln_loss_builder(data, variant_config(base_mcfg, "MG--"),
                                            lam, t_max), seeds, pathway_filter)
    b = grad_second_moment(vln_loss_builder(data, variant_config(base_mcfg, "----"),
                                            lam, t_max), seeds, pathway_filter)
    probe = make_probe("grad_second_moment", "MG--", "----", a.samples,
                       b.samples)
    probe["failures"] = {"a": a.failures, "b": b.failures}
    return probe


def detail_probe(train_data, eval_data, seeds, base_mcfg: ModelConfig,
                 train_cfg: TrainConfig | None = None) -> dict:
    """Alignment score with vs without key-detail stages; optional short
    training budget per seed, otherwise scored at initialization."""
    samples_a, samples_b = [], []
    mi_a, mi_b = [], []
    for seed in seeds:
        scores = {}
        for key, label in (("a", "MGLO"), ("b", "MG--")):
            mcfg = variant_config(base_mcfg, label)
            params = build_params(mcfg, seed)
            if train_cfg is not None:
                train(train_data, params, replace(train_cfg, seed=seed), mcfg)
            scores[key] = alignment_score(eval_data, params, mcfg)
            xs, ys = cue_action_series(eval_data, params, mcfg)
            (mi_a if key == "a" else mi_b).append(mi_plugin(xs, ys))
        samples_a.append(scores["a"])
        samples_b.append(scores["b"])
    probe = make_probe("alignment_score", "MGLO", "MG--", samples_a, samples_b)
    probe["mi_cue_action"] = {"a": mi_a, "b": mi_b}
    return probe


# -------------------------------------------------------- ablation harness


def time_forward_steps(data, params, mcfg: ModelConfig, t_max: int,
                       min_steps: int = 1000, warmup: int = 50) -> float:
    """Mean wall-clock milliseconds per forward_step, measured warm."""
    if min_steps < 1:
        raise InvalidArgument("min_steps must be >= 1")
    timed = 0
    spent = 0.0
    skipped = 0
    while timed < min_steps:
        for env, ep in data:
            pg = PathGraph(env.graph, ep.start, local_only=env.local_only)
            cache = EpisodeCache()
            for _ in range(t_max):
                obs = _observe(env, pg.current, mcfg)
                t0 = time.perf_counter()
                _, action = forward_step(pg, obs, ep.instruction, params,
                                         mcfg, cache)
                dt = time.perf_counter() - t0
                if skipped < warmup:
                    skipped += 1
                else:
                    timed += 1
                    spent += dt
                pg.advance(action)
                if pg.terminal:
                    break
    return spent / timed * 1000.0


def run_ablation_cell(label: str, train_data, eval_data, tcfg: TrainConfig,
                      base_mcfg: ModelConfig, seeds,
                      min_timing_steps: int = 1000):
    """One grid cell: train/evaluate a variant over every seed.

    Returns (AblationRow, per-seed metric dict); divergence on any seed
    yields a failed row with the metrics gathered so far in the sidecar.
    """
    seeds = tuple(seeds)
    if not seeds:
        raise InvalidArgument("need at least one seed")
    mcfg = variant_config(base_mcfg, label)
    per_seed: dict = {}
    timing_params = None
    for seed in seeds:
        params = build_params(mcfg, seed)
        try:
            train(train_data, params, replace(tcfg, seed=seed), mcfg)
            _, summary = evaluate_policy(eval_data, params, mcfg, tcfg.t_max)
        except NumericFailure as err:
            warnings.warn(f"variant {label} seed {seed} diverged: {err}")
            return (AblationRow(label=label, med=mcfg.decouple,
                                ge=mcfg.geo_embed, ld=mcfg.loc_detail,
                                od=mcfg.obj_detail, tl=math.nan, ne=math.nan,
                                sr=math.nan, spl=math.nan, step_ms=math.nan,
                                failed=True), per_seed)
        per_seed[str(seed)] = {k: summary[k] for k in ("TL", "NE", "SR", "SPL")}
        if timing_params is None:
            timing_params = params
    mean = {k: float(np.mean([per_seed[str(s)][k] for s in seeds]))
            for k in ("TL", "NE", "SR", "SPL")}
    ms = time_forward_steps(eval_data, timing_params, mcfg, tcfg.t_max,
                            min_steps=min_timing_steps)
    return (AblationRow(label=label, med=mcfg.decouple, ge=mcfg.geo_embed,
                        ld=mcfg.loc_detail, od=mcfg.obj_detail, tl=mean["TL"],
                        ne=mean["NE"], sr=mean["SR"], spl=mean["SPL"],
                        step_ms=ms), per_seed)


def run_ablation(train_data, eval_data, tcfg: TrainConfig,
                 base_mcfg: ModelConfig, seeds=(0,), grid=GRID_LABELS,
                 min_timing_steps: int = 1000):
    """Train/evaluate each variant with identical seeds and budget.

    Returns (rows, sidecar) where sidecar holds per-seed eval metrics.  A
    diverging variant yields a failed row and the grid continues.
    """
    rows = []
    sidecar: dict = {}
    for label in grid:
        row, per_seed = run_ablation_cell(label, train_data, eval_data, tcfg,
                                          base_mcfg, seeds, min_timing_steps)
        rows.append(row)
        sidecar[label] = per_seed
    return rows, sidecar


def write_ablation_csv(path, rows, comment: str | None = None) -> None:
    """Flag columns then TL, NE, SR, SPL (x100), per-step ms."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if comment is not None:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["variant", "MED", "GE", "LD", "OD", "TL", "NE",
                         "SR", "SPL", "time_ms", "failed"])
        for r in rows:
            writer.writerow([r.label, int(r.med), int(r.ge), int(r.ld),
                             int(r.od), f"{r.tl:.2f}", f"{r.ne:.2f}",
                             f"{r.sr * 100.0:.2f}", f"{r.spl * 100.0:.2f}",
                             f"{r.step_ms:.3f}", int(r.failed)])
