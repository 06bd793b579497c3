"""Composite objective, Adam loop, checkpointing and gradient checks."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import base_model as bm
from .checkpoint import save_checkpoint
from .corpus import Video
from .graph import DdgHyper, GraphOptions, SnippetPartition
from .model import FrozenContext, forward_video, make_context
from .numerics import ContractError, Tape, Var, finite_diff_check

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "base_loss", "lfc", "total", "map_avg")


class NumericAbort(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 3.2
    learning_rate: float = 1e-3
    epochs: int = 100
    seed: int = 0
    k_ratio: float = 0.125
    hidden_dim: int = 32
    attention_kernel: int = 3
    fusion_kernel: int = 3
    hyper: DdgHyper = field(default_factory=DdgHyper)
    enable_graph_avg: bool = True
    enable_gcn: bool = True
    enable_lfc: bool = True
    disconnect_ambiguity: bool = True
    fuse_adjacency: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("loss weights must be non-negative")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")

    @property
    def graph_options(self) -> GraphOptions:
        return GraphOptions(self.enable_graph_avg, self.enable_gcn,
                            self.disconnect_ambiguity, self.fuse_adjacency)

    def model_shape(self, feature_dim: int, num_categories: int) -> bm.ModelShape:
        return bm.ModelShape(feature_dim, num_categories, self.hidden_dim,
                             self.attention_kernel, self.fusion_kernel, self.hyper.layers)


ABLATIONS = {
    "full": {},
    "no-graph": dict(enable_graph_avg=False, enable_gcn=False, enable_lfc=False),
    "avg-only": dict(enable_gcn=False, enable_lfc=False),
    "no-lfc": dict(enable_lfc=False),
    "no-fuse": dict(fuse_adjacency=False),
    "no-disconnect": dict(disconnect_ambiguity=False),
}


def apply_ablation(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in ABLATIONS:
        raise ContractError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return replace(cfg, **ABLATIONS[name])


def total_loss(base, lfc, lcl, cfg: TrainConfig):
    """``base + lambda1 * lfc + lambda2 * lcl``; works on floats and tape variables."""
    return base + lfc * cfg.lambda1 + lcl * cfg.lambda2


def zero_complementary(tape: Tape, fwd) -> float:
    """Default complementary-learning term: a constant zero."""
    return 0.0


@dataclass
class StepLoss:
    total: Var
    base: float
    lfc: float


def video_objective(tape: Tape, pv: dict[str, Var], video: Video, cfg: TrainConfig,
                    shape: bm.ModelShape, context: FrozenContext | None = None,
                    lcl_fn: Callable = zero_complementary):
    fwd = forward_video(tape, pv, video.rgb, video.flow, shape, cfg.hyper, cfg.graph_options,
                        label=video.label, k_ratio=cfg.k_ratio, context=context)
    lfc = fwd.loss_fc if cfg.enable_lfc else 0.0
    total = total_loss(fwd.loss_base, lfc, lcl_fn(tape, fwd), cfg)
    return total, fwd


def objective_terms(tape: Tape, pv: dict[str, Var], video: Video, cfg: TrainConfig,
                    shape: bm.ModelShape, context: FrozenContext | None = None) -> list[Var]:
    """The summands of the total loss, kept apart for finite differencing."""
    fwd = forward_video(tape, pv, video.rgb, video.flow, shape, cfg.hyper, cfg.graph_options,
                        label=video.label, k_ratio=cfg.k_ratio, context=context)
    terms = list(fwd.loss_terms)
    if cfg.enable_lfc and cfg.lambda1:
        terms.append(fwd.loss_fc * cfg.lambda1)
    return terms


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train_step(params, opt: Adam, video: Video, cfg: TrainConfig, shape: bm.ModelShape,
               lcl_fn: Callable = zero_complementary) -> tuple[float, float, float]:
    tape = Tape()
    pv = tape.watch(params)
    total, fwd = video_objective(tape, pv, video, cfg, shape, lcl_fn=lcl_fn)
    value = float(total.value.reshape(()))
    if not math.isfinite(value):
        raise NumericAbort(f"non-finite loss {value} on video {video.video_id}")
    grads = tape.backward(total)
    opt.step(params, grads)
    return value, float(fwd.loss_base.value.reshape(())), float(fwd.loss_fc.value.reshape(()))


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict]
    shape: bm.ModelShape


def train(corpus: Sequence[Video], cfg: TrainConfig, *, init: dict[str, np.ndarray] | None = None,
          checkpoint_path=None, log_path=None, eval_fn: Callable | None = None,
          eval_every: int = 0, lcl_fn: Callable = zero_complementary) -> TrainResult:
    """Train on one video per step; deterministic for a fixed ``cfg.seed``.

    ``eval_fn(params)`` (optional) returns an average mAP that is logged
    every ``eval_every`` epochs.  The metrics log is appended to.
    """
    if not corpus:
        raise ContractError("training corpus is empty")
    for v in corpus:
        if v.label is None or not np.any(v.label > 0):
            raise ContractError(f"video {v.video_id} has no positive label")
    D = corpus[0].rgb.shape[0]
    C = len(corpus[0].label)
    shape = cfg.model_shape(D, C)
    rng = np.random.default_rng(cfg.seed)
    params = bm.init_params(shape, rng) if init is None else {k: v.copy() for k, v in init.items()}
    opt = Adam(params, cfg.learning_rate)
    history = []
    writer = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = not log_path.exists() or log_path.stat().st_size == 0
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOG_COLUMNS)
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(corpus))
            sums = np.zeros(3)
            for i in order:
                sums += train_step(params, opt, corpus[i], cfg, shape, lcl_fn)
            total, base, lfc = sums / len(corpus)
            row = {"epoch": epoch, "base_loss": base, "lfc": lfc, "total": total, "map_avg": ""}
            if eval_fn is not None and eval_every and epoch % eval_every == 0:
                row["map_avg"] = eval_fn(params)
            history.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            log.debug("epoch %d total %.6f base %.6f lfc %.6f", epoch, total, base, lfc)
    finally:
        if writer is not None:
            fh.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params)
    return TrainResult(params, history, shape)


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# ---------------------------------------------------------------- grad check


def gradcheck_instance(T: int = 12, D: int = 8, C: int = 3, seed: int = 0):
    """A small clustered video with a mixed frozen partition.

    Features form an action cluster, a background cluster and blended
    snippets, so the similarity filter keeps edges in every subgraph.
    """
    if T > 16 or D > 8:
        raise ContractError("grad-check instances are limited to T <= 16, D <= 8")
    rng = np.random.default_rng(seed)
    kinds = np.array(([0, 1, 2] * T)[:T])
    rng.shuffle(kinds)
    streams = []
    for _ in range(2):
        act, bg = rng.standard_normal((2, D))
        mix = 0.5 * act + 0.5 * bg
        base = np.stack([(act, bg, mix)[k] for k in kinds], axis=1)
        streams.append(base + 0.1 * rng.standard_normal((D, T)))
    label = np.zeros(C)
    label[rng.integers(0, C)] = 1.0
    video = Video("gradcheck", streams[0], streams[1], [], label)
    part = SnippetPartition(np.flatnonzero(kinds == 0), np.flatnonzero(kinds == 1), np.flatnonzero(kinds == 2))
    pre = np.where(kinds == 0, 0.8, np.where(kinds == 1, 0.2, 0.5)) + 0.05 * rng.uniform(-1, 1, T)
    context = FrozenContext(pre[None, :].copy(), pre[None, :].copy(), part)
    return video, context


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    configs: dict

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(cfg: TrainConfig, T: int = 12, D: int = 8, C: int = 3, seed: int = 0,
               eps: float = 3e-4, tolerance: float = 1e-4, force_bug: bool = False,
               params: dict | None = None) -> GradCheckReport:
    """Analytic vs central-difference gradient of the total loss.

    Runs the given configuration and the no-graph baseline on the same
    instance.  Never mutates ``params``; no optimizer step is taken.
    """
    video, context = gradcheck_instance(T, D, C, seed)
    variants = {"given": cfg, "baseline": apply_ablation(cfg, "no-graph")}
    errors = {}
    for name, c in variants.items():
        shape = c.model_shape(D, C)
        p = bm.init_params(shape, np.random.default_rng(seed + 1)) if params is None else params
        ctx = replace(context, subgraphs=None)

        def loss_fn(tape, pv, c=c, shape=shape, ctx=ctx):
            return objective_terms(tape, pv, video, c, shape, context=ctx)

        hook = _corrupt if force_bug else None
        errors[name] = finite_diff_check(loss_fn, p, eps, grad_hook=hook)
    return GradCheckReport(max(errors.values()), tolerance, errors)


def _corrupt(grads):
    # negative control: a 1% error in one gradient entry
    out = dict(grads)
    k = sorted(out)[0]
    g = out[k].copy()
    g.flat[0] = g.flat[0] * 1.01 + 1e-3
    out[k] = g
    return out
