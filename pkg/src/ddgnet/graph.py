"""Discriminability-driven snippet graph.

Snippets are split into pseudo-action, pseudo-background and ambiguous
sets from two-stream attention.  Action and background snippets exchange
information inside their own subgraph; ambiguous snippets only *receive*
edges from discriminative ones, so nothing ambiguous ever reaches a
discriminative snippet.

Graph construction (partition, similarities, filtering, softmax) runs on
plain arrays and is a constant of the forward pass.  Graph inference and
the consistency loss run on tape variables so the GCN weights train.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ContractError, ShapeError, Var

log = logging.getLogger(__name__)

ACTION, BACKGROUND, AMBIGUOUS = "action", "background", "ambiguous"


@dataclass(frozen=True)
class DdgHyper:
    eta: float = 0.5
    theta: float = 0.8
    top_k: int = 10
    tau: float = 0.5
    layers: int = 2

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ContractError("eta must lie in (0, 1)")
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if self.layers < 1 or self.top_k < 1:
            raise ContractError("layers and top_k must be >= 1")


@dataclass(frozen=True)
class GraphOptions:
    """Ablation switches for graph inference."""

    enable_graph_avg: bool = True
    enable_gcn: bool = True
    disconnect_ambiguity: bool = True
    fuse_adjacency: bool = True

    @property
    def active(self) -> bool:
        return self.enable_graph_avg or self.enable_gcn


@dataclass
class SnippetPartition:
    """Disjoint, sorted, 0-based index sets covering range(T)."""

    action: np.ndarray
    background: np.ndarray
    ambiguous: np.ndarray

    @property
    def T(self) -> int:
        return len(self.action) + len(self.background) + len(self.ambiguous)

    def tags(self) -> list[str]:
        out = [AMBIGUOUS] * self.T
        for i in self.action:
            out[i] = ACTION
        for i in self.background:
            out[i] = BACKGROUND
        return out

    def validate(self, T: int | None = None) -> None:
        T = self.T if T is None else T
        allidx = np.concatenate([self.action, self.background, self.ambiguous])
        if len(allidx) != T or not np.array_equal(np.sort(allidx), np.arange(T)):
            raise ContractError("partition sets must be disjoint and cover every snippet")


def preclassify(ar, af, eta: float = 0.5) -> SnippetPartition:
    ar = np.asarray(ar, dtype=np.float64).ravel()
    af = np.asarray(af, dtype=np.float64).ravel()
    if ar.shape != af.shape:
        raise ShapeError(f"attention lengths differ: {ar.shape} vs {af.shape}")
    is_action = (ar > eta) & (af > eta)
    is_background = (ar < 1 - eta) & (af < 1 - eta) & ~is_action
    is_ambiguous = ~(is_action | is_background)
    return SnippetPartition(
        np.flatnonzero(is_action), np.flatnonzero(is_background), np.flatnonzero(is_ambiguous)
    )


def modal_adjacency(f) -> np.ndarray:
    """Cosine similarity between every pair of snippet columns."""
    f = nx.as_matrix(f, "features")
    norms = np.sqrt((f * f).sum(axis=0))
    zero = norms == 0
    if np.any(zero):
        log.warning("%d zero-norm snippet(s); their similarities are set to 0", int(zero.sum()))
    unit = f / np.where(zero, 1.0, norms)
    sim = unit.T @ unit
    sim = np.clip(0.5 * (sim + sim.T), -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return sim


def fuse_adjacency(arj, afj) -> np.ndarray:
    arj = nx.as_matrix(arj, "rgb adjacency")
    afj = nx.as_matrix(afj, "flow adjacency")
    if arj.shape != afj.shape:
        raise ShapeError(f"adjacency shapes differ: {arj.shape} vs {afj.shape}")
    return (arj + afj) / 2


def _column_softmax(values: np.ndarray, candidates: np.ndarray, self_pos: int | None,
                    theta: float, top_k: int) -> np.ndarray:
    """Filter one column and softmax over the survivors only.

    ``candidates`` are row positions allowed to connect (off-diagonal);
    among them, entries below ``theta`` drop out, then only the ``top_k``
    largest remain (ties broken by row position).  The self entry, if any,
    always survives.  Removed entries stay exactly zero.
    """
    out = np.zeros(len(values))
    cand = candidates[values[candidates] >= theta]
    if len(cand) > top_k:
        order = np.lexsort((cand, -values[cand]))
        cand = np.sort(cand[order[:top_k]])
    keep = cand if self_pos is None else np.append(cand, self_pos)
    if len(keep) == 0:
        return out
    v = values[keep]
    e = np.exp(v - v.max())
    out[keep] = e / e.sum()
    return out


@dataclass
class SubgraphSet:
    """Column-stochastic adjacencies with index maps back to snippet positions.

    ``action_adj`` has rows ``action_rows`` and columns ``partition.action``;
    with ambiguity disconnected the rows are the action set itself.  The
    background graph is laid out the same way.  ``ambiguous_adj`` is
    (T, |V_m|) over global row positions.
    """

    partition: SnippetPartition
    action_rows: np.ndarray
    action_adj: np.ndarray
    background_rows: np.ndarray
    background_adj: np.ndarray
    ambiguous_adj: np.ndarray
    survivors: np.ndarray = field(default=None)

    def blocks(self):
        """Row blocks of the ambiguous adjacency: (action, background, ambiguous)."""
        p, am = self.partition, self.ambiguous_adj
        return am[p.action], am[p.background], am[p.ambiguous]

    def column_sums(self) -> np.ndarray:
        return np.concatenate(
            [self.action_adj.sum(axis=0), self.background_adj.sum(axis=0), self.ambiguous_adj.sum(axis=0)]
        )


def _branch_graph(adj, cols, extra_rows, hyper):
    rows = np.concatenate([cols, extra_rows]).astype(np.intp)
    mat = np.zeros((len(rows), len(cols)))
    counts = []
    for j, c in enumerate(cols):
        values = adj[rows, c]
        cand = np.flatnonzero(rows != c)
        mat[:, j] = _column_softmax(values, cand, j, hyper.theta, hyper.top_k)
        counts.append(int(np.count_nonzero(mat[:, j])))
    return rows, mat, counts


def build_subgraphs(adj, part: SnippetPartition, hyper: DdgHyper,
                    disconnect_ambiguity: bool = True) -> SubgraphSet:
    """Mask, filter and column-normalise the three subgraphs."""
    adj = nx.as_matrix(adj, "adjacency")
    T = adj.shape[0]
    if adj.shape != (T, T):
        raise ShapeError(f"adjacency must be square, got {adj.shape}")
    part.validate(T)
    extra = part.ambiguous if not disconnect_ambiguity else np.empty(0, dtype=np.intp)
    a_rows, a_adj, a_cnt = _branch_graph(adj, part.action, extra, hyper)
    b_rows, b_adj, b_cnt = _branch_graph(adj, part.background, extra, hyper)

    is_amb = np.zeros(T, dtype=bool)
    is_amb[part.ambiguous] = True
    am = np.zeros((T, len(part.ambiguous)))
    m_cnt = []
    for j, c in enumerate(part.ambiguous):
        if disconnect_ambiguity:
            cand = np.flatnonzero(~is_amb)
        else:
            cand = np.flatnonzero(np.arange(T) != c)
        values = adj[:, c].copy()
        values[c] = 1.0
        am[:, j] = _column_softmax(values, cand, c, hyper.theta, hyper.top_k)
        m_cnt.append(int(np.count_nonzero(am[:, j])))

    survivors = np.zeros(T, dtype=np.int64)
    survivors[part.action] = a_cnt
    survivors[part.background] = b_cnt
    survivors[part.ambiguous] = m_cnt
    return SubgraphSet(part, a_rows, a_adj, b_rows, b_adj, am, survivors)


# ---------------------------------------------------------------- inference


def graph_average(fx: Var, ax) -> Var:
    ax = np.asarray(ax, dtype=np.float64)
    if fx.shape[1] != ax.shape[0]:
        raise ShapeError(f"features {fx.shape} do not match adjacency {ax.shape}")
    return fx @ ax


def gcn_forward(fx: Var, ax, weights, context: Var | None = None, slope: float = 0.2) -> Var:
    """Stacked graph convolutions ``F_l = LeakyReLU(W_l F_{l-1} A)``.

    ``context`` holds fixed extra row features appended below the running
    features at every layer (used only when ambiguity is left connected).
    """
    ax = np.asarray(ax, dtype=np.float64)
    h = fx
    for w in weights:
        if w.shape != (fx.shape[0], fx.shape[0]):
            raise ShapeError(f"GCN weight {w.shape} is not square in D={fx.shape[0]}")
        x = h if context is None else nx.concat([h, context], axis=1)
        if x.shape[1] != ax.shape[0]:
            raise ShapeError(f"features {x.shape} do not match adjacency {ax.shape}")
        h = nx.leaky_relu((w @ x) @ ax, slope)
    return h


def ambiguous_aggregate(fa_gcn: Var | None, fb_gcn: Var | None, fm: Var, blocks) -> Var:
    """``F_a^gcn A_ma + F_b^gcn A_mb + F_m A_mm``; empty branches are skipped."""
    a_ma, a_mb, a_mm = (np.asarray(b, dtype=np.float64) for b in blocks)
    if fm.shape[1] != a_mm.shape[0]:
        raise ShapeError(f"ambiguous features {fm.shape} do not match block {a_mm.shape}")
    out = fm @ a_mm
    for f, blk in ((fa_gcn, a_ma), (fb_gcn, a_mb)):
        if blk.shape[0] == 0:
            continue
        if f is None or f.shape[1] != blk.shape[0]:
            raise ShapeError(f"branch features do not match block {blk.shape}")
        out = out + f @ blk
    return out


def enhance(fx, fx_avg, fx_gcn):
    """Residual mix ``((F_avg + F_gcn)/2 + F)/2``."""
    for other in (fx_avg, fx_gcn):
        if other.shape != fx.shape:
            raise ShapeError(f"shape mismatch in enhance: {other.shape} vs {fx.shape}")
    return ((fx_avg + fx_gcn) * 0.5 + fx) * 0.5


def consistency_weight(x, tau: float = 0.5):
    """``exp(-(1/x - 1)/tau)``; equals 1 at x = 1 and increases on (0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("consistency weight is defined only for x > 0")
    if tau <= 0:
        raise ValueError("tau must be positive")
    out = np.exp(-(1.0 / x - 1.0) / tau)
    return float(out) if out.ndim == 0 else out


def feature_consistency_loss(part: SnippetPartition, att, gcn_feats: Var, avg_feats: Var,
                             tau: float = 0.5) -> Var:
    """Attention-weighted euclidean gap between GCN and graph-average features.

    ``gcn_feats`` and ``avg_feats`` are (D, T) in snippet order; only the
    action and background columns are read.  An empty set contributes 0.
    """
    att = np.asarray(att, dtype=np.float64).ravel()
    tape = gcn_feats.tape
    total = tape.const(np.zeros((1, 1)))
    for idx, x in ((part.action, att), (part.background, 1.0 - att)):
        if len(idx) == 0:
            continue
        w = consistency_weight(x[idx], tau)[None, :]
        gap = nx.col_norm(nx.take_cols(gcn_feats, idx) - nx.take_cols(avg_feats, idx))
        total = total + nx.mean(gap * w)
    return total


def _assemble(parts, index_sets, T: int) -> Var:
    """Concatenate column blocks and restore snippet order."""
    present = [(p, i) for p, i in zip(parts, index_sets) if len(i)]
    cat = nx.concat([p for p, _ in present], axis=1)
    order = np.concatenate([i for _, i in present])
    inverse = np.empty(T, dtype=np.intp)
    inverse[order] = np.arange(T)
    return nx.take_cols(cat, inverse)


@dataclass
class ModalityResult:
    enhanced: Var
    avg: Var | None
    gcn: Var | None


def infer_modality(f: Var, sub: SubgraphSet, weights_action, weights_background,
                   opts: GraphOptions) -> ModalityResult:
    """Graph average, GCN and residual enhancement for one stream."""
    part = sub.partition
    T = f.shape[1]
    sets = (part.action, part.background, part.ambiguous)
    fa, fb, fm = (nx.take_cols(f, idx) if len(idx) else None for idx in sets)
    connected = not opts.disconnect_ambiguity and fm is not None
    # graph averages feed the consistency loss even when not used for enhancement
    want_avg = opts.enable_graph_avg or opts.enable_gcn

    avg_parts, gcn_parts = [], []
    for own, adj, ws in ((fa, sub.action_adj, weights_action),
                         (fb, sub.background_adj, weights_background)):
        if own is None:
            avg_parts.append(None)
            gcn_parts.append(None)
            continue
        src = nx.concat([own, fm], axis=1) if connected else own
        avg_parts.append(graph_average(src, adj) if want_avg else None)
        gcn_parts.append(
            gcn_forward(own, adj, ws, context=fm if connected else None) if opts.enable_gcn else None
        )
    if fm is not None:
        avg_parts.append(graph_average(f, sub.ambiguous_adj) if want_avg else None)
        gcn_parts.append(
            ambiguous_aggregate(gcn_parts[0], gcn_parts[1], fm, sub.blocks()) if opts.enable_gcn else None
        )
    else:
        avg_parts.append(None)
        gcn_parts.append(None)

    enhanced = []
    for own, a, g in zip((fa, fb, fm), avg_parts, gcn_parts):
        if own is None:
            enhanced.append(None)
            continue
        if not opts.enable_graph_avg:
            a = g
        if not opts.enable_gcn:
            g = a
        enhanced.append(enhance(own, a, g))
    return ModalityResult(
        _assemble(enhanced, sets, T),
        _assemble(avg_parts, sets, T) if want_avg else None,
        _assemble(gcn_parts, sets, T) if opts.enable_gcn else None,
    )


@dataclass
class DdgResult:
    rgb: Var
    flow: Var
    loss_fc: Var
    partition: SnippetPartition
    subgraphs: dict


def ddg_forward(fr: Var, ff: Var, ar, af, params: dict[str, Var], hyper: DdgHyper,
                opts: GraphOptions = GraphOptions(), partition: SnippetPartition | None = None,
                subgraphs: dict | None = None) -> DdgResult:
    """Enhance both streams through the discriminability-driven graph.

    ``ar``/``af`` are the pre-classification attention values (constants).
    ``params`` must contain ``gcn.<modality>.<branch>.<layer>`` weights.
    A ``partition`` may be supplied to pin the pre-classification, and
    ``subgraphs`` (as returned in a previous result for the same features,
    partition and options) to skip graph construction.
    """
    if fr.shape != ff.shape:
        raise ShapeError(f"stream shapes differ: {fr.shape} vs {ff.shape}")
    T = fr.shape[1]
    ar = np.asarray(ar, dtype=np.float64).ravel()
    af = np.asarray(af, dtype=np.float64).ravel()
    if ar.shape != (T,) or af.shape != (T,):
        raise ShapeError("attention length does not match snippet count")
    part = partition if partition is not None else preclassify(ar, af, hyper.eta)
    part.validate(T)
    tape = fr.tape
    if not opts.active:
        zero = tape.const(np.zeros((1, 1)))
        return DdgResult(fr, ff, zero, part, {})

    if subgraphs:
        subs = subgraphs
    elif opts.fuse_adjacency:
        adj_r = modal_adjacency(fr.value)
        adj_f = modal_adjacency(ff.value)
        shared = build_subgraphs(fuse_adjacency(adj_r, adj_f), part, hyper, opts.disconnect_ambiguity)
        subs = {"rgb": shared, "flow": shared}
    else:
        adj_r = modal_adjacency(fr.value)
        adj_f = modal_adjacency(ff.value)
        subs = {
            "rgb": build_subgraphs(adj_r, part, hyper, opts.disconnect_ambiguity),
            "flow": build_subgraphs(adj_f, part, hyper, opts.disconnect_ambiguity),
        }

    fused_att = (ar + af) / 2
    loss = tape.const(np.zeros((1, 1)))
    outs = {}
    for m, f in (("rgb", fr), ("flow", ff)):
        wa = [params[f"gcn.{m}.action.{l}"] for l in range(hyper.layers)]
        wb = [params[f"gcn.{m}.background.{l}"] for l in range(hyper.layers)]
        res = infer_modality(f, subs[m], wa, wb, opts)
        outs[m] = res.enhanced
        if res.gcn is not None and res.avg is not None:
            loss = loss + feature_consistency_loss(part, fused_att, res.gcn, res.avg, hyper.tau)
    return DdgResult(outs["rgb"], outs["flow"], loss, part, subs)


def debug_dump(sub: SubgraphSet) -> str:
    """Plain-text description of one video's graph for inspection."""
    p = sub.partition
    lines = [
        f"T = {p.T}",
        f"action ({len(p.action)}): {' '.join(str(i + 1) for i in p.action)}",
        f"background ({len(p.background)}): {' '.join(str(i + 1) for i in p.background)}",
        f"ambiguous ({len(p.ambiguous)}): {' '.join(str(i + 1) for i in p.ambiguous)}",
        "snippet,tag,survivors",
    ]
    tags = p.tags()
    for t in range(p.T):
        lines.append(f"{t + 1},{tags[t]},{sub.survivors[t]}")
    sums = sub.column_sums()
    dev = float(np.max(np.abs(sums - 1.0))) if len(sums) else 0.0
    lines.append(f"columns checked: {len(sums)}; max |sum - 1| = {dev:.3e}; "
                 f"{'OK' if dev <= 1e-9 else 'FAIL'}")
    return "\n".join(lines) + "\n"
