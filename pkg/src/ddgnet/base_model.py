"""Two-stream attention and classification backbone.

Every snippet sequence is stored as a (D, T) matrix: one column per
snippet.  Parameter names are flat strings so a parameter set can be
written straight to a checkpoint:

    att.<modality>.w1 / .b1 / .w2 / .b2   attention convs, per modality
    fuse.w / fuse.b                        fusion conv over the 2D concat
    cls.w / cls.b                          1-span classifier to C+1 logits
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, ShapeError, Tape, Var

MODALITIES = ("rgb", "flow")


@dataclass(frozen=True)
class ModelShape:
    feature_dim: int
    num_categories: int
    hidden_dim: int = 32
    attention_kernel: int = 3
    fusion_kernel: int = 3
    gcn_layers: int = 2

    def __post_init__(self):
        if self.feature_dim < 1 or self.num_categories < 1 or self.hidden_dim < 1:
            raise ContractError("feature_dim, num_categories and hidden_dim must be positive")
        for k in (self.attention_kernel, self.fusion_kernel):
            if k < 1 or k % 2 == 0:
                raise ContractError("kernel spans must be positive odd numbers")
        if self.gcn_layers < 1:
            raise ContractError("gcn_layers must be >= 1")


def expected_shapes(shape: ModelShape) -> dict[str, tuple[int, int]]:
    D, H, C = shape.feature_dim, shape.hidden_dim, shape.num_categories
    ka, kf = shape.attention_kernel, shape.fusion_kernel
    out = {}
    for m in MODALITIES:
        out[f"att.{m}.w1"] = (H, D * ka)
        out[f"att.{m}.b1"] = (H, 1)
        out[f"att.{m}.w2"] = (1, H * ka)
        out[f"att.{m}.b2"] = (1, 1)
    out["fuse.w"] = (D, 2 * D * kf)
    out["fuse.b"] = (D, 1)
    out["cls.w"] = (C + 1, D)
    out["cls.b"] = (C + 1, 1)
    for m in MODALITIES:
        for branch in ("action", "background"):
            for layer in range(shape.gcn_layers):
                out[f"gcn.{m}.{branch}.{layer}"] = (D, D)
    return out


def init_params(shape: ModelShape, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    Names are visited in sorted order so a seed fully determines the result.
    """
    params = {}
    for name, (rows, cols) in sorted(expected_shapes(shape).items()):
        if name.split(".")[-1].startswith("b"):
            params[name] = np.zeros((rows, cols))
        else:
            bound = 1.0 / math.sqrt(cols)
            params[name] = rng.uniform(-bound, bound, size=(rows, cols))
    return params


def attention_forward(f: Var, params: dict[str, Var], modality: str, kernel: int = 3) -> Var:
    """Per-snippet action weight in (0, 1), shape (1, T)."""
    h = nx.conv1d(f, params[f"att.{modality}.w1"], params[f"att.{modality}.b1"], kernel)
    h = nx.leaky_relu(h, 0.2)
    logits = nx.conv1d(h, params[f"att.{modality}.w2"], params[f"att.{modality}.b2"], kernel)
    return nx.sigmoid(logits)


def fuse_attention(ar: Var, af: Var) -> Var:
    if ar.shape != af.shape:
        raise ShapeError(f"attention shapes differ: {ar.shape} vs {af.shape}")
    return (ar + af) * 0.5


def cas_forward(fr: Var, ff: Var, params: dict[str, Var], fusion_kernel: int = 3) -> Var:
    """Class activation sequence of shape (C+1, T); the last row is background."""
    if fr.shape != ff.shape:
        raise ShapeError(f"stream shapes differ: {fr.shape} vs {ff.shape}")
    x = nx.concat([fr, ff], axis=0)
    h = nx.leaky_relu(nx.conv1d(x, params["fuse.w"], params["fuse.b"], fusion_kernel), 0.2)
    return params["cls.w"] @ h + params["cls.b"]


def suppress_cas(p: Var, a: Var) -> Var:
    if a.shape != (1, p.shape[1]):
        raise ShapeError(f"attention shape {a.shape} does not match CAS {p.shape}")
    return p * a


def topk_count(T: int, k_ratio: float) -> int:
    if not 0 < k_ratio <= 1:
        raise ContractError("k_ratio must lie in (0, 1]")
    return max(1, math.ceil(k_ratio * T - 1e-12))


def video_logits(pbar: Var, k_ratio: float) -> Var:
    """Mean of the top ceil(k_ratio*T) snippet logits per category, shape (C+1, 1)."""
    v = pbar.value
    k = topk_count(v.shape[1], k_ratio)
    # selection is a discrete choice: treated as a constant index set
    order = np.argsort(-v, axis=1, kind="stable")[:, :k]
    pbar.tape.record_branch(np.sort(order, axis=1))
    rows = np.arange(v.shape[0])[:, None]
    return nx.mean(nx.index(pbar, (rows, order)), axis=1)


def video_scores(pbar: Var, k_ratio: float) -> np.ndarray:
    """Softmax over the C+1 top-k pooled logits, returned as a flat array."""
    z = video_logits(pbar, k_ratio).value[:, 0]
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _mil_term(pbar: Var, target: np.ndarray, k_ratio: float) -> Var:
    logp = nx.log_softmax(video_logits(pbar, k_ratio), axis=0)
    t = target / target.sum()
    pos = t > 0
    # cross-entropy minus the target's own entropy: zero at a perfect fit
    offset = float((t[pos] * np.log(t[pos])).sum())
    return offset - nx.vsum(logp * t[:, None])


def base_loss(p: Var, pbar: Var, label, k_ratio: float = 0.125) -> Var:
    """Two-term top-k multiple-instance loss.

    The raw CAS is matched to the label with background marked present;
    the attention-suppressed CAS is matched with background marked absent.
    """
    fg, bg = base_loss_terms(p, pbar, label, k_ratio)
    return fg + bg


def base_loss_terms(p: Var, pbar: Var, label, k_ratio: float = 0.125) -> tuple[Var, Var]:
    label = np.asarray(label, dtype=np.float64).ravel()
    C = p.shape[0] - 1
    if label.shape != (C,):
        raise ShapeError(f"label length {label.shape} does not match {C} categories")
    if not np.any(label > 0):
        raise ContractError("video label has no positive category")
    with_bg = np.append(label, 1.0)
    without_bg = np.append(label, 0.0)
    return _mil_term(p, with_bg, k_ratio), _mil_term(pbar, without_bg, k_ratio)


def watch_or_const(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(nx.as_matrix(x))
