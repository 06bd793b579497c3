"""One video through the full pipeline: raw attention, graph, CAS, loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import base_model as bm
from .graph import DdgHyper, GraphOptions, SnippetPartition, ddg_forward, preclassify
from .numerics import Tape, Var


@dataclass
class FrozenContext:
    """Quantities held constant within one step.

    The pre-classification attention and the partition derived from it
    receive no gradient; pinning them also lets a finite-difference check
    perturb parameters without flipping the discrete partition.
    """

    pre_rgb: np.ndarray
    pre_flow: np.ndarray
    partition: SnippetPartition
    # graph construction depends only on raw features and the partition
    subgraphs: dict | None = None


@dataclass
class VideoForward:
    att_rgb: Var
    att_flow: Var
    att: Var
    cas: Var
    cas_suppressed: Var
    loss_fc: Var
    context: FrozenContext
    subgraphs: dict
    loss_base: Var | None = None
    loss_terms: tuple = ()


def raw_attention(params: dict[str, np.ndarray], rgb: np.ndarray, flow: np.ndarray, kernel: int):
    """Attention of both streams on raw features, as plain arrays."""
    t = Tape()
    p = {k: t.const(v) for k, v in params.items() if k.startswith("att.")}
    ar = bm.attention_forward(t.const(rgb), p, "rgb", kernel).value
    af = bm.attention_forward(t.const(flow), p, "flow", kernel).value
    return ar, af


def make_context(params, rgb, flow, shape: bm.ModelShape, hyper: DdgHyper) -> FrozenContext:
    ar, af = raw_attention(params, rgb, flow, shape.attention_kernel)
    return FrozenContext(ar, af, preclassify(ar, af, hyper.eta))


def forward_video(tape: Tape, params: dict[str, Var], rgb: np.ndarray, flow: np.ndarray,
                  shape: bm.ModelShape, hyper: DdgHyper, opts: GraphOptions,
                  label=None, k_ratio: float = 0.125,
                  context: FrozenContext | None = None) -> VideoForward:
    fr = tape.const(rgb)
    ff = tape.const(flow)
    if context is None:
        raw = {k: v.value for k, v in params.items()}
        context = make_context(raw, rgb, flow, shape, hyper)
    res = ddg_forward(fr, ff, context.pre_rgb, context.pre_flow, params, hyper, opts,
                      partition=context.partition, subgraphs=context.subgraphs)
    context.subgraphs = res.subgraphs
    ar = bm.attention_forward(res.rgb, params, "rgb", shape.attention_kernel)
    af = bm.attention_forward(res.flow, params, "flow", shape.attention_kernel)
    att = bm.fuse_attention(ar, af)
    p = bm.cas_forward(res.rgb, res.flow, params, shape.fusion_kernel)
    pbar = bm.suppress_cas(p, att)
    out = VideoForward(ar, af, att, p, pbar, res.loss_fc, context, res.subgraphs)
    if label is not None:
        out.loss_terms = bm.base_loss_terms(p, pbar, label, k_ratio)
        out.loss_base = out.loss_terms[0] + out.loss_terms[1]
    return out
