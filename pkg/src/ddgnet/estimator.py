"""scikit-learn style front end.

``X`` is a sequence of ``(rgb, flow)`` pairs, each a (D, T) array with
one column per snippet.  ``y`` is an (n_videos, C) multi-hot label
matrix.  Lengths T may differ between videos; D may not.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import base_model as bm
from .corpus import GroundTruthSegment, Video
from .evaluator import EvalSettings, evaluate_proposals, infer_video, localize
from .graph import DdgHyper, ddg_forward
from .model import make_context
from .numerics import Tape
from .trainer import TrainConfig, train


def check_videos(X, feature_dim: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Validate a sequence of (rgb, flow) pairs and return float64 copies."""
    if isinstance(X, np.ndarray) and X.ndim != 1 and X.dtype != object:
        raise ValueError("X must be a sequence of (rgb, flow) pairs, not a single array")
    out = []
    for i, pair in enumerate(X):
        if len(pair) != 2:
            raise ValueError(f"video {i}: expected an (rgb, flow) pair")
        rgb = check_array(pair[0], dtype=np.float64, ensure_min_features=1)
        flow = check_array(pair[1], dtype=np.float64, ensure_min_features=1)
        if rgb.shape != flow.shape:
            raise ValueError(f"video {i}: rgb {rgb.shape} and flow {flow.shape} differ")
        if feature_dim is not None and rgb.shape[0] != feature_dim:
            raise ValueError(f"video {i}: feature dim {rgb.shape[0]}, expected {feature_dim}")
        feature_dim = rgb.shape[0]
        out.append((rgb, flow))
    if not out:
        raise ValueError("X holds no videos")
    return out


def check_labels(y, n_videos: int) -> np.ndarray:
    y = check_array(y, dtype=np.float64)
    if y.shape[0] != n_videos:
        raise ValueError(f"{y.shape[0]} label rows for {n_videos} videos")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be multi-hot (0/1)")
    empty = np.flatnonzero(y.sum(axis=1) == 0)
    if len(empty):
        raise ValueError(f"video {int(empty[0])} has no positive label")
    return y


class DDGNetLocalizer(BaseEstimator, TransformerMixin):
    """Weakly supervised temporal action localizer with graph feature enhancement.

    ``fit`` trains from video-level labels only.  ``transform`` returns
    the graph-enhanced features, ``decision_function`` the video-level
    category scores and ``predict`` the localized segments.
    """

    def __init__(self, lambda1=1.0, lambda2=3.2, learning_rate=1e-3, epochs=100, random_state=0,
                 k_ratio=0.125, hidden_dim=32, eta=0.5, theta=0.8, top_k=10, tau=0.5, layers=2,
                 enable_graph_avg=True, enable_gcn=True, enable_lfc=True,
                 disconnect_ambiguity=True, fuse_adjacency=True):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.random_state = random_state
        self.k_ratio = k_ratio
        self.hidden_dim = hidden_dim
        self.eta = eta
        self.theta = theta
        self.top_k = top_k
        self.tau = tau
        self.layers = layers
        self.enable_graph_avg = enable_graph_avg
        self.enable_gcn = enable_gcn
        self.enable_lfc = enable_lfc
        self.disconnect_ambiguity = disconnect_ambiguity
        self.fuse_adjacency = fuse_adjacency

    def _config(self) -> TrainConfig:
        hyper = DdgHyper(self.eta, self.theta, self.top_k, self.tau, self.layers)
        return TrainConfig(self.lambda1, self.lambda2, self.learning_rate, self.epochs,
                           self.random_state, self.k_ratio, self.hidden_dim, hyper=hyper,
                           enable_graph_avg=self.enable_graph_avg, enable_gcn=self.enable_gcn,
                           enable_lfc=self.enable_lfc,
                           disconnect_ambiguity=self.disconnect_ambiguity,
                           fuse_adjacency=self.fuse_adjacency)

    def fit(self, X, y):
        videos = check_videos(X)
        y = check_labels(y, len(videos))
        corpus = [Video(f"v{i:05d}", r, f, [], lab) for i, ((r, f), lab) in enumerate(zip(videos, y))]
        result = train(corpus, self._config())
        self.params_ = result.params
        self.shape_ = result.shape
        self.history_ = result.history
        self.n_features_in_ = result.shape.feature_dim
        self.n_classes_ = result.shape.num_categories
        return self

    def _videos(self, X):
        check_is_fitted(self, "params_")
        return [Video(f"v{i:05d}", r, f) for i, (r, f) in enumerate(check_videos(X, self.n_features_in_))]

    def transform(self, X):
        """Graph-enhanced (rgb, flow) features per video."""
        cfg = self._config()
        return [_enhanced_features(self.params_, v, cfg, self.shape_) for v in self._videos(X)]

    def decision_function(self, X) -> np.ndarray:
        """Video-level category probabilities, shape (n_videos, C)."""
        cfg = self._config()
        rows = []
        for v in self._videos(X):
            fwd = infer_video(self.params_, v, cfg, self.shape_)
            rows.append(bm.video_scores(fwd.cas_suppressed, cfg.k_ratio)[:-1])
        return np.array(rows)

    def predict(self, X, settings: EvalSettings = EvalSettings()) -> list[list[tuple]]:
        """Per video, ``(start, end, category, confidence)`` segments (1-based, inclusive)."""
        cfg = self._config()
        out = []
        for v in self._videos(X):
            props, _ = localize(self.params_, v, cfg, self.shape_, settings)
            out.append([(p.start, p.end, p.category, p.confidence) for p in props])
        return out

    def score(self, X, y, settings: EvalSettings = EvalSettings()) -> float:
        """Average mAP over ``settings.iou_thresholds``.

        ``y`` holds, per video, a list of ``(start, end, category)`` segments.
        """
        videos = self._videos(X)
        if len(y) != len(videos):
            raise ValueError(f"{len(y)} annotation lists for {len(videos)} videos")
        cfg = self._config()
        proposals, gt = [], {}
        for v, segs in zip(videos, y):
            props, _ = localize(self.params_, v, cfg, self.shape_, settings)
            proposals += props
            gt[v.video_id] = [GroundTruthSegment(int(s), int(e), int(c)) for s, e, c in segs]
        return evaluate_proposals(proposals, gt, settings.iou_thresholds).average


def _enhanced_features(params, video: Video, cfg: TrainConfig, shape: bm.ModelShape):
    ctx = make_context(params, video.rgb, video.flow, shape, cfg.hyper)
    tape = Tape()
    pv = {k: tape.const(v) for k, v in params.items()}
    res = ddg_forward(tape.const(video.rgb), tape.const(video.flow), ctx.pre_rgb, ctx.pre_flow,
                      pv, cfg.hyper, cfg.graph_options, partition=ctx.partition)
    return res.rgb.value, res.flow.value
