"""Mixed teacher/student-forcing training loop.

Per episode the loss is lam * TF + (1 - lam) * SF where TF supervises the
model along the reference route and SF supervises self-sampled rollouts
with recovery labels pointing at the nearest unvisited reference node.
Both rollouts share one autograd graph per episode so cached encodings
receive gradient from both terms.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import InvalidArgument, InvalidState, NumericFailure
from .metrics import EpisodeResult, aggregate, evaluate
from .model import EpisodeCache, ModelConfig, forward_step
from .navgraph import STOP, NavGraph, PathGraph
from .rng import substream
from .synthenv import Episode, LatentTable, render_observation

LOG_COLUMNS = ("iteration", "tf_loss", "sf_loss", "total_loss", "grad_norm",
               "eval_SR", "eval_SPL", "eval_nDTW")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.2
    t_max: int = 15
    lr: float = 1e-3
    iterations: int = 20000
    batch_size: int = 4
    seed: int = 0
    swap_lambda: bool = False
    clip: float = 5.0
    eval_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidArgument(f"lam must be in [0, 1], got {self.lam}")
        if self.t_max < 1:
            raise InvalidArgument("t_max must be >= 1")
        if self.lr <= 0 or self.clip <= 0:
            raise InvalidArgument("lr and clip must be > 0")
        if self.iterations < 0 or self.batch_size < 1 or self.eval_every < 0:
            raise InvalidArgument("bad iteration/batch/eval settings")


@dataclass(frozen=True)
class EnvBundle:
    """Everything needed to run an agent in one environment."""
    graph: NavGraph
    latents: LatentTable
    sigma: float = 0.0
    local_only: bool = False


@dataclass
class StepRecord:
    node: int
    order: tuple
    logits: nn.Tensor
    predicted: int
    supervision: int
    loss: nn.Tensor


@dataclass
class RolloutRecord:
    steps: list = field(default_factory=list)
    route: tuple = ()

    def mean_loss(self) -> nn.Tensor:
        if not self.steps:
            raise InvalidArgument("empty rollout record")
        total = self.steps[0].loss
        for s in self.steps[1:]:
            total = nn.add(total, s.loss)
        return nn.scale(total, 1.0 / len(self.steps))


def _observe(env: EnvBundle, node: int, mcfg: ModelConfig):
    return render_observation(env.graph, node, env.latents, env.sigma,
                              mcfg.view_grid)


def _supervised_step(pg: PathGraph, env: EnvBundle, episode: Episode, params,
                     mcfg: ModelConfig, cache, slot: int) -> StepRecord:
    obs = _observe(env, pg.current, mcfg)
    feats, predicted = forward_step(pg, obs, episode.instruction, params,
                                    mcfg, cache)
    sup = feats.order[slot] if slot < len(feats.order) else STOP
    return StepRecord(node=pg.current, order=feats.order, logits=feats.scores,
                      predicted=predicted, supervision=sup,
                      loss=nn.cross_entropy(feats.scores, slot))


def rollout_teacher(env: EnvBundle, episode: Episode, params,
                    mcfg: ModelConfig, cache: EpisodeCache | None = None,
                    t_max: int | None = None) -> RolloutRecord:
    """Walk the reference route, supervising each decision with its next hop
    and the final decision with STOP."""
    gt = episode.gt_path
    if t_max is not None and len(gt) > t_max:
        raise InvalidArgument(f"reference route length {len(gt)} exceeds t_max {t_max}")
    if episode.start != gt[0]:
        raise InvalidArgument("episode start disagrees with its reference route")
    pg = PathGraph(env.graph, episode.start, local_only=env.local_only)
    cache = cache if cache is not None else EpisodeCache()
    rec = RolloutRecord()
    for t in range(len(gt)):
        target = gt[t + 1] if t + 1 < len(gt) else STOP
        frontier = pg.frontier()
        if target == STOP:
            slot = len(frontier)
        elif target in frontier:
            slot = frontier.index(target)
        else:
            raise InvalidState(
                f"reference action {target} missing from frontier at node {pg.current}")
        rec.steps.append(_supervised_step(pg, env, episode, params, mcfg,
                                          cache, slot))
        pg.advance(target)
    rec.route = tuple(pg.route)
    return rec


def pseudo_label(pg: PathGraph, episode: Episode, env: NavGraph) -> int:
    """Recovery supervision after deviation, as a slot into frontier + [STOP].

    The target n* is the unvisited reference node nearest by geodesic
    (ties: earliest route position), or the goal once all are visited; the
    label is the first hop of the shortest route to n*.  A first hop
    outside the frontier falls back to the frontier node nearest n*; with
    no frontier at all only STOP remains.
    """
    frontier = pg.frontier()
    gt = episode.gt_path
    goal = gt[-1]
    visited = set(pg.visited)
    unvisited = [n for n in gt if n not in visited]
    if unvisited:
        n_star = min(unvisited,
                     key=lambda n: (env.geodesic(pg.current, n), gt.index(n)))
    else:
        n_star = goal
    if pg.current == n_star:
        return len(frontier)
    path = env.shortest_path(pg.current, n_star)
    if path is None:
        raise InvalidState(
            f"recovery target {n_star} unreachable from node {pg.current}")
    hop = path[1]
    if hop in frontier:
        return frontier.index(hop)
    if not frontier:
        return len(frontier)
    best = min(frontier, key=lambda f: (env.geodesic(f, n_star), f))
    return frontier.index(best)


def rollout_student(env: EnvBundle, episode: Episode, params,
                    mcfg: ModelConfig, rng: np.random.Generator,
                    t_max: int, cache: EpisodeCache | None = None) -> RolloutRecord:
    """Move by sampling the predicted action distribution; supervise each
    step with the recovery label.  Ends at a sampled STOP or after t_max."""
    pg = PathGraph(env.graph, episode.start, local_only=env.local_only)
    cache = cache if cache is not None else EpisodeCache()
    rec = RolloutRecord()
    for _ in range(t_max):
        slot = pseudo_label(pg, episode, env.graph)
        step = _supervised_step(pg, env, episode, params, mcfg, cache, slot)
        scores = step.logits.data
        if not np.all(np.isfinite(scores)):
            raise NumericFailure(
                f"non-finite action scores at node {pg.current}")
        p = np.exp(scores - scores.max())
        p /= p.sum()
        pick = int(rng.choice(p.size, p=p))
        action = step.order[pick] if pick < len(step.order) else STOP
        step.predicted = action
        rec.steps.append(step)
        pg.advance(action)
        if pg.terminal:
            break
    rec.route = tuple(pg.route)
    return rec


def episode_loss(tf: RolloutRecord, sf: RolloutRecord, lam: float,
                 swap_lambda: bool = False) -> nn.Tensor:
    """lam * mean(TF) + (1 - lam) * mean(SF); swap_lambda reverses the
    weighting."""
    if not 0.0 <= lam <= 1.0:
        raise InvalidArgument(f"lam must be in [0, 1], got {lam}")
    w_tf, w_sf = (1.0 - lam, lam) if swap_lambda else (lam, 1.0 - lam)
    return nn.add(nn.scale(tf.mean_loss(), w_tf),
                  nn.scale(sf.mean_loss(), w_sf))


# -------------------------------------------------------------- evaluation


def greedy_rollout(env: EnvBundle, episode: Episode, params,
                   mcfg: ModelConfig, t_max: int) -> list[int]:
    """Trajectory executed by always taking the argmax action."""
    pg = PathGraph(env.graph, episode.start, local_only=env.local_only)
    cache = EpisodeCache()
    for _ in range(t_max):
        obs = _observe(env, pg.current, mcfg)
        _, action = forward_step(pg, obs, episode.instruction, params, mcfg,
                                 cache)
        pg.advance(action)
        if pg.terminal:
            break
    return list(pg.route)


def teacher_accuracy(records) -> float:
    """Fraction of supervised steps whose argmax equals the supervision."""
    steps = [s for rec in records for s in rec.steps]
    if not steps:
        raise InvalidArgument("no steps to score")
    return sum(1.0 for s in steps if s.predicted == s.supervision) / len(steps)


def evaluate_policy(data, params, mcfg: ModelConfig, t_max: int):
    """Greedy rollout on every (EnvBundle, Episode) pair.

    Returns (rows, summary): per-episode MetricRows keyed ep000-style, and
    their aggregate.
    """
    rows = {}
    for i, (env, ep) in enumerate(data):
        route = greedy_rollout(env, ep, params, mcfg, t_max)
        rows[f"ep{i:03d}"] = evaluate(EpisodeResult(env.graph, tuple(route),
                                                    ep.gt_path))
    return rows, aggregate(rows.values())


# ----------------------------------------------------------------- training


def write_training_log(path, rows, comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if comment is not None:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row[c] if isinstance(row[c], (str, int))
                             else repr(float(row[c])) for c in LOG_COLUMNS])


def train(data, params, cfg: TrainConfig, mcfg: ModelConfig,
          eval_data=None, out_dir=None) -> list:
    """Optimize params in place over (EnvBundle, Episode) pairs.

    Returns the log rows (one dict per iteration); when out_dir is given
    also writes train_log.csv and params.ckpt there.  A non-finite loss
    aborts with the offending state dumped to abort.ckpt.
    """
    data = list(data)
    if not data:
        raise InvalidArgument("no training data")
    batch_rng = substream(cfg.seed, "train-batch")
    student_rng = substream(cfg.seed, "train-student")
    log: list = []

    for it in range(1, cfg.iterations + 1):
        idx = batch_rng.integers(len(data), size=cfg.batch_size)
        params.zero_grad()
        try:
            total = None
            tf_vals, sf_vals = [], []
            for j in idx:
                env, ep = data[int(j)]
                cache = EpisodeCache()
                tf = rollout_teacher(env, ep, params, mcfg, cache=cache,
                                     t_max=cfg.t_max)
                sf = rollout_student(env, ep, params, mcfg, student_rng,
                                     cfg.t_max, cache=cache)
                loss = episode_loss(tf, sf, cfg.lam, cfg.swap_lambda)
                tf_vals.append(float(tf.mean_loss().data))
                sf_vals.append(float(sf.mean_loss().data))
                total = loss if total is None else nn.add(total, loss)
            total = nn.scale(total, 1.0 / cfg.batch_size)
            total_val = float(total.data)
            if not math.isfinite(total_val):
                raise NumericFailure(
                    f"non-finite loss {total_val} at iteration {it}")
        except NumericFailure:
            if out_dir is not None:
                nn.save_checkpoint(f"{out_dir}/abort.ckpt", params)
            raise
        nn.backward(total)
        grad_norm = nn.clip_global_norm(params, cfg.clip)
        nn.optimizer_step(params, cfg.lr)

        row = {"iteration": it,
               "tf_loss": float(np.mean(tf_vals)),
               "sf_loss": float(np.mean(sf_vals)),
               "total_loss": total_val,
               "grad_norm": grad_norm,
               "eval_SR": "", "eval_SPL": "", "eval_nDTW": ""}
        if cfg.eval_every > 0 and it % cfg.eval_every == 0:
            _, summary = evaluate_policy(eval_data if eval_data is not None
                                         else data, params, mcfg, cfg.t_max)
            row["eval_SR"] = repr(summary["SR"])
            row["eval_SPL"] = repr(summary["SPL"])
            row["eval_nDTW"] = repr(summary["nDTW"])
        log.append(row)

    if out_dir is not None:
        write_training_log(f"{out_dir}/train_log.csv", log)
        nn.save_checkpoint(f"{out_dir}/params.ckpt", params)
    return log
