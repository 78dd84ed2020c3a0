"""Instruction-guided candidate scoring over a growing navigation graph.

Pipeline per decision step: embed the panorama (angular and visual blocks
separately, unless decoupling is disabled), build one geometric feature row
per frontier candidate plus a learned STOP row, let candidates attend over
the panorama, fuse with the encoded instruction, inject pooled room/object
cues through a single-key attention with residual, then self-attend across
candidates and score each row with an MLP.

Four independent flags (decouple, geo_embed, loc_detail, obj_detail) switch
stages off; disabled stages are bypassed entirely, never approximated with
zeroed weights, which keeps ablations exact.  ``stage_trace`` records which
stages actually execute so bypasses can be asserted.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import InvalidArgument, InvalidState, ShapeError
from .geometry import nearest_view, relative_pose, trig_embed
from .navgraph import STOP, PathGraph
from .synthenv import VOCAB_SIZE, Instruction, Observation, ViewGrid

_STAGE_TRACE: list | None = None


@contextmanager
def stage_trace():
    """Collect the names of pipeline stages that actually run."""
    global _STAGE_TRACE
    prev = _STAGE_TRACE
    _STAGE_TRACE = trace = []
    try:
        yield trace
    finally:
        _STAGE_TRACE = prev


def _record(stage: str) -> None:
    if _STAGE_TRACE is not None:
        _STAGE_TRACE.append(stage)


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions, view grid, and stage flags.

    The attention stack threads one width through graph, text, and
    cross-modal features, so those dims must agree with attn_dim; visual and
    key-detail widths are free.
    """
    n_headings: int = 12
    elevations: tuple[float, ...] = (-math.pi / 6, 0.0, math.pi / 6)
    vis_dim: int = 32
    graph_dim: int = 32
    text_dim: int = 32
    key_dim: int = 32
    cross_dim: int = 32
    attn_dim: int = 32
    heads: int = 2
    layers: int = 2
    vocab_size: int = VOCAB_SIZE
    decouple: bool = True
    geo_embed: bool = True
    loc_detail: bool = True
    obj_detail: bool = True
    deep: bool = False

    def __post_init__(self):
        dims = (self.vis_dim, self.graph_dim, self.text_dim, self.key_dim,
                self.cross_dim, self.attn_dim, self.heads, self.layers,
                self.vocab_size, self.n_headings)
        if any(d < 1 for d in dims):
            raise InvalidArgument("all dims/counts must be positive")
        if not (self.graph_dim == self.text_dim == self.cross_dim == self.attn_dim):
            raise InvalidArgument(
                "graph_dim, text_dim, cross_dim, and attn_dim must agree "
                f"(got {self.graph_dim}/{self.text_dim}/{self.cross_dim}/{self.attn_dim})")
        if self.attn_dim % self.heads:
            raise InvalidArgument(f"attn_dim {self.attn_dim} not divisible by heads {self.heads}")
        if not self.elevations:
            raise InvalidArgument("need at least one elevation")

    @property
    def k(self) -> int:
        return self.n_headings * len(self.elevations)

    @property
    def view_grid(self) -> ViewGrid:
        return ViewGrid(n_headings=self.n_headings, elevations=self.elevations)

    def flag_label(self) -> str:
        """Four-letter stage mask, dash for a disabled stage (e.g. 'MG--')."""
        return "".join(ch if on else "-" for ch, on in (
            ("M", self.decouple), ("G", self.geo_embed),
            ("L", self.loc_detail), ("O", self.obj_detail)))


TINY_CONFIG = ModelConfig(
    n_headings=4, elevations=(0.0,), vis_dim=10, graph_dim=8, text_dim=8,
    key_dim=8, cross_dim=8, attn_dim=8, heads=2, layers=1)


@dataclass
class StepFeatures:
    """Every intermediate the pipeline produced for one decision step."""
    obs_refined: nn.Tensor          # (K, graph_dim)
    cand_geo: nn.Tensor             # (N_c, graph_dim)
    instr_enc: nn.Tensor            # (M, text_dim)
    key_detail: nn.Tensor | None    # (key_dim,) or None when both detail flags off
    cross_modal: nn.Tensor          # (N_c, cross_dim)
    enhanced: nn.Tensor             # (N_c, cross_dim)
    scores: nn.Tensor               # (N_c,)
    order: list = field(default_factory=list)  # frontier ids; STOP is the extra last slot


# -------------------------------------------------------------- parameters


def _block_spec(prefix: str, dim: int, deep: bool) -> list:
    spec = [
        (f"{prefix}.attn.wq", (dim, dim)),
        (f"{prefix}.attn.wk", (dim, dim)),
        (f"{prefix}.attn.wv", (dim, dim)),
        (f"{prefix}.attn.wo", (dim, dim)),
        (f"{prefix}.mlp.w1", (dim, 2 * dim)),
        (f"{prefix}.mlp.b1", (2 * dim,)),
        (f"{prefix}.mlp.w2", (2 * dim, dim)),
        (f"{prefix}.mlp.b2", (dim,)),
    ]
    if deep:
        spec += [(f"{prefix}.ln1.g", (dim,)), (f"{prefix}.ln1.b", (dim,)),
                 (f"{prefix}.ln2.g", (dim,)), (f"{prefix}.ln2.b", (dim,))]
    return spec


def param_spec(cfg: ModelConfig) -> list:
    """(name, shape) pairs for every parameter the configured pipeline uses."""
    d = cfg.graph_dim
    spec: list = []
    if cfg.decouple:
        spec += [
            ("obs.ang.w", (4, d)), ("obs.ang.b", (d,)),
            ("obs.vis.w", (cfg.vis_dim, d)), ("obs.vis.b", (d,)),
            ("obs.fuse.w1", (2 * d, 2 * d)), ("obs.fuse.b1", (2 * d,)),
            ("obs.fuse.w2", (2 * d, d)), ("obs.fuse.b2", (d,)),
        ]
    else:
        spec += [("obs.coupled.w", (4 + cfg.vis_dim, d)), ("obs.coupled.b", (d,))]

    spec += [("graph.edge.w", (4, d)), ("graph.edge.b", (d,)),
             ("graph.stop", (1, d))]
    if cfg.geo_embed:
        spec += [("graph.pe.w", (3, d)), ("graph.pe.b", (d,))]

    for i in range(cfg.layers):
        spec += _block_spec(f"ogi.l{i}", cfg.attn_dim, cfg.deep)

    spec += [("txt.embed", (cfg.vocab_size, cfg.text_dim))]
    for i in range(cfg.layers):
        spec += _block_spec(f"txt.l{i}", cfg.attn_dim, cfg.deep)

    if cfg.loc_detail or cfg.obj_detail:
        spec += [
            ("kd.loc.w", (cfg.text_dim, cfg.key_dim)), ("kd.loc.b", (cfg.key_dim,)),
            ("kd.obj.w", (cfg.text_dim, cfg.key_dim)), ("kd.obj.b", (cfg.key_dim,)),
            ("kd.fuse.w", (2 * cfg.key_dim, cfg.key_dim)), ("kd.fuse.b", (cfg.key_dim,)),
            ("enh.wq", (cfg.cross_dim, cfg.attn_dim)),
            ("enh.wk", (cfg.key_dim, cfg.attn_dim)),
            ("enh.wv", (cfg.key_dim, cfg.cross_dim)),
        ]

    for i in range(cfg.layers):
        spec += _block_spec(f"cmf.l{i}", cfg.attn_dim, cfg.deep)

    spec += _block_spec("sel", cfg.cross_dim, cfg.deep)[:4]  # self-attention only
    spec += [("sel.mlp.w1", (cfg.cross_dim, cfg.cross_dim)),
             ("sel.mlp.b1", (cfg.cross_dim,)),
             ("sel.mlp.w2", (cfg.cross_dim, 1)), ("sel.mlp.b2", (1,))]
    return spec


def build_params(cfg: ModelConfig, seed: int) -> nn.ParamStore:
    store = nn.init_params(param_spec(cfg), seed)
    for name in store.names():
        if name.endswith(("ln1.g", "ln2.g")):
            store[name].data[:] = 1.0  # norm gains start at identity
    return store


def _decoder_block(h: nn.Tensor, kv: nn.Tensor, prefix: str,
                   params: nn.ParamStore, cfg: ModelConfig) -> nn.Tensor:
    a = nn.attention(h, kv, kv,
                     params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.wk"],
                     params[f"{prefix}.attn.wv"], params[f"{prefix}.attn.wo"],
                     cfg.heads)
    h = nn.add(h, a)
    if cfg.deep:
        h = nn.layer_norm(h, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    m = nn.mlp(h, [(params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]),
                   (params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])])
    h = nn.add(h, m)
    if cfg.deep:
        h = nn.layer_norm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return h


# ------------------------------------------------------------- observation


def decouple_observation(obs: Observation, params: nn.ParamStore,
                         cfg: ModelConfig) -> nn.Tensor:
    """Refined panorama rows; angular and visual blocks embedded separately.

    With decoupling off, one linear projection of the raw concatenated
    [angular, visual] rows is used instead (the coupled baseline).
    """
    if obs.visual.shape != (cfg.k, cfg.vis_dim):
        raise ShapeError(
            f"panorama shape {obs.visual.shape} != ({cfg.k}, {cfg.vis_dim})")
    ang = np.stack([np.asarray(trig_embed(h, e))
                    for h, e in zip(obs.headings, obs.elevations)])
    ang_t = nn.Tensor(ang)
    vis_t = nn.Tensor(obs.visual)
    if not cfg.decouple:
        _record("coupled")
        return nn.linear(nn.concat([ang_t, vis_t], axis=-1),
                         params["obs.coupled.w"], params["obs.coupled.b"])
    _record("decouple")
    e_a = nn.linear(ang_t, params["obs.ang.w"], params["obs.ang.b"])
    e_v = nn.linear(vis_t, params["obs.vis.w"], params["obs.vis.b"])
    return nn.mlp(nn.concat([e_a, e_v], axis=-1),
                  [(params["obs.fuse.w1"], params["obs.fuse.b1"]),
                   (params["obs.fuse.w2"], params["obs.fuse.b2"])])


# -------------------------------------------------------------- candidates


def geometric_pe(candidate_heading: float, view_headings,
                 params: nn.ParamStore, cfg: ModelConfig) -> nn.Tensor:
    """Positional embedding from the offset to the nearest panorama view.

    Input is [distance, sin(offset), cos(offset)]; disabled flag gives an
    exact zero vector without touching any parameter.
    """
    if not cfg.geo_embed:
        return nn.Tensor(np.zeros(cfg.graph_dim))
    _record("geometric-pe")
    idx, dist = nearest_view(candidate_heading, view_headings)
    off = candidate_heading - view_headings[idx]
    feats = nn.Tensor(np.array([dist, math.sin(off), math.cos(off)]))
    return nn.linear(feats, params["graph.pe.w"], params["graph.pe.b"])


def candidate_features(heading: float, elevation: float, pe: nn.Tensor,
                       params: nn.ParamStore) -> nn.Tensor:
    """Edge-direction row: projected trig embedding plus positional term."""
    base = nn.linear(nn.Tensor(np.asarray(trig_embed(heading, elevation))),
                     params["graph.edge.w"], params["graph.edge.b"])
    return nn.add(base, pe)


def stop_features(params: nn.ParamStore) -> nn.Tensor:
    return nn.reshape(params["graph.stop"], (params["graph.stop"].shape[1],))


def build_candidates(pg: PathGraph, obs: Observation, params: nn.ParamStore,
                     cfg: ModelConfig) -> tuple[nn.Tensor, list]:
    """One feature row per frontier node (sorted by id) plus the STOP row.

    A frontier node adjacent to the current node uses its edge direction;
    one attached elsewhere uses the straight-line direction to it.
    """
    graph = pg.graph
    order = pg.frontier()
    rows = []
    for c in order:
        if graph.has_edge(pg.current, c):
            pose = graph.edge_pose(pg.current, c)
        else:
            pose = relative_pose(graph.nodes[pg.current].pos, graph.nodes[c].pos)
        pe = geometric_pe(pose.heading, obs.headings, params, cfg)
        rows.append(candidate_features(pose.heading, pose.elevation, pe, params))
    rows.append(stop_features(params))
    return nn.stack_rows(rows), order


def observation_graph_interaction(f_g: nn.Tensor, f_o: nn.Tensor,
                                  params: nn.ParamStore, cfg: ModelConfig) -> nn.Tensor:
    """Candidates attend over panorama rows through the decoder stack."""
    h = f_g
    for i in range(cfg.layers):
        h = _decoder_block(h, f_o, f"ogi.l{i}", params, cfg)
    return h


# ------------------------------------------------------------- instruction


def sinusoid_table(m: int, dim: int) -> np.ndarray:
    """Fixed position signal: sin on even columns, cos on odd."""
    pos = np.arange(m)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def encode_instruction(ins: Instruction, params: nn.ParamStore,
                       cfg: ModelConfig) -> nn.Tensor:
    h = nn.embedding(list(ins.tokens), params["txt.embed"])
    h = nn.add(h, nn.Tensor(sinusoid_table(len(ins.tokens), cfg.text_dim)))
    for i in range(cfg.layers):
        h = _decoder_block(h, h, f"txt.l{i}", params, cfg)
    return h


def _masked_mean(f_i: nn.Tensor, mask) -> nn.Tensor:
    """Arithmetic mean of the masked rows (constant selector, so grads flow)."""
    idx = np.asarray(mask, dtype=bool)
    if idx.shape != (f_i.shape[0],):
        raise ShapeError(f"mask length {idx.shape} != token count {f_i.shape[0]}")
    n = int(idx.sum())
    if n == 0:
        return nn.Tensor(np.zeros(f_i.shape[1]))
    sel = np.zeros((1, f_i.shape[0]))
    sel[0, idx] = 1.0 / n
    return nn.reshape(nn.matmul(nn.Tensor(sel), f_i), (f_i.shape[1],))


def extract_key_detail(f_i: nn.Tensor, loc_mask, obj_mask,
                       params: nn.ParamStore, cfg: ModelConfig) -> nn.Tensor:
    """Pooled location/object cues, each projected then fused to one vector.

    A disabled flag (or an empty mask) zeroes that cue's pooled block; the
    projection bias still passes through, matching the ablation contract.
    """
    _record("key-detail")
    f_loc = (_masked_mean(f_i, loc_mask) if cfg.loc_detail
             else nn.Tensor(np.zeros(cfg.text_dim)))
    f_obj = (_masked_mean(f_i, obj_mask) if cfg.obj_detail
             else nn.Tensor(np.zeros(cfg.text_dim)))
    e_loc = nn.linear(f_loc, params["kd.loc.w"], params["kd.loc.b"])
    e_obj = nn.linear(f_obj, params["kd.obj.w"], params["kd.obj.b"])
    return nn.linear(nn.concat([e_loc, e_obj], axis=-1),
                     params["kd.fuse.w"], params["kd.fuse.b"])


def cross_modal_fusion(g_enh: nn.Tensor, f_i: nn.Tensor,
                       params: nn.ParamStore, cfg: ModelConfig) -> nn.Tensor:
    h = g_enh
    for i in range(cfg.layers):
        h = _decoder_block(h, f_i, f"cmf.l{i}", params, cfg)
    return h


# ----------------------------------------------------------------- scoring


def enhance_and_score(f_c: nn.Tensor, f_k: nn.Tensor | None,
                      params: nn.ParamStore, cfg: ModelConfig) -> tuple[nn.Tensor, nn.Tensor]:
    """Inject the key-detail row into each candidate, then score.

    The key detail enters as a single key/value attention row added
    residually.  With both detail flags off the injection is skipped and the
    cross-modal rows pass through untouched.  Scoring always runs: candidate
    self-attention with residual, then a per-row MLP.
    """
    if f_k is None:
        f_e = f_c
    else:
        _record("enhance-align")
        q = nn.matmul(f_c, params["enh.wq"])                      # (N_c, attn)
        k_row = nn.reshape(f_k, (1, f_k.shape[0]))
        k = nn.matmul(k_row, params["enh.wk"])                    # (1, attn)
        logits = nn.scale(nn.matmul(q, nn.transpose(k, (1, 0))),
                          1.0 / math.sqrt(cfg.attn_dim))          # (N_c, 1)
        weights = nn.softmax(logits, axis=-1)                     # single key: all ones
        align = nn.matmul(weights, nn.matmul(k_row, params["enh.wv"]))
        f_e = nn.add(f_c, align)

    att = nn.attention(f_e, f_e, f_e,
                       params["sel.attn.wq"], params["sel.attn.wk"],
                       params["sel.attn.wv"], params["sel.attn.wo"], cfg.heads)
    h = nn.add(f_e, att)
    scores = nn.mlp(h, [(params["sel.mlp.w1"], params["sel.mlp.b1"]),
                        (params["sel.mlp.w2"], params["sel.mlp.b2"])])
    return f_e, nn.reshape(scores, (scores.shape[0],))


def select_action(scores, frontier_order) -> int:
    """Highest-scoring candidate; ordering makes ties favor the lowest node
    id and give STOP (the last slot) lowest priority."""
    data = scores.data if isinstance(scores, nn.Tensor) else np.asarray(scores)
    if data.size == 0:
        raise InvalidState("no candidate scores")
    if data.shape != (len(frontier_order) + 1,):
        raise ShapeError(
            f"{data.shape[0]} scores for {len(frontier_order)} frontier nodes + STOP")
    best = int(np.argmax(data))
    return frontier_order[best] if best < len(frontier_order) else STOP


# ---------------------------------------------------------------- pipeline


class EpisodeCache:
    """Reuses instruction/panorama encodings inside one autograd graph.

    Valid only between backward passes: call reset() whenever a new loss
    graph starts, because encoded tensors belong to the previous graph.
    """

    def __init__(self):
        self.instr: nn.Tensor | None = None
        self.obs: dict[int, nn.Tensor] = {}

    def reset(self) -> None:
        self.instr = None
        self.obs.clear()


def forward_step(pg: PathGraph, obs: Observation, ins: Instruction,
                 params: nn.ParamStore, cfg: ModelConfig,
                 cache: EpisodeCache | None = None) -> tuple[StepFeatures, int]:
    """Run the full pipeline for one decision step."""
    if cache is not None and obs.node in cache.obs:
        f_o = cache.obs[obs.node]
    else:
        f_o = decouple_observation(obs, params, cfg)
        if cache is not None:
            cache.obs[obs.node] = f_o

    f_g, order = build_candidates(pg, obs, params, cfg)
    g_enh = observation_graph_interaction(f_g, f_o, params, cfg)

    if cache is not None and cache.instr is not None:
        f_i = cache.instr
    else:
        f_i = encode_instruction(ins, params, cfg)
        if cache is not None:
            cache.instr = f_i

    f_k = (extract_key_detail(f_i, ins.location_mask, ins.object_mask, params, cfg)
           if (cfg.loc_detail or cfg.obj_detail) else None)
    f_c = cross_modal_fusion(g_enh, f_i, params, cfg)
    f_e, scores = enhance_and_score(f_c, f_k, params, cfg)
    action = select_action(scores, order)
    feats = StepFeatures(obs_refined=f_o, cand_geo=f_g, instr_enc=f_i,
                         key_detail=f_k, cross_modal=f_c, enhanced=f_e,
                         scores=scores, order=order)
    return feats, action
