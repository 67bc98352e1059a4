"""Visual-text fusion, query selection, tri-modal decoder and set-prediction loss."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import functional as F
from .autodiff.nn import LayerNorm, Linear, MLP, Module, MultiHeadAttention, Parameter
from .autodiff.tensor import (Tensor, abs_, as_tensor, concat, exp, log_sigmoid, masked_fill, max_, mean,
                              sigmoid, softplus, stack, sum_, take_rows, tanh)
from .garf import l2norm
from .geometry import OrientedBox9

log = logging.getLogger(__name__)

SIZE_FLOOR = 1e-4


@dataclass
class HeadConfig:
    channels: int = 32
    heads: int = 4
    dec_layers: int = 2
    n_queries: int = 16
    proj_dim: int = 32
    tau: float = 0.07
    use_image_branch: bool = True
    n_classes: int = 12

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    center_sigma: float = 0.5

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class QuerySet:
    queries: Tensor
    anchors: np.ndarray
    scores: np.ndarray
    indices: np.ndarray


@dataclass
class LayerOutput:
    logits: Tensor        # (B, K) text alignment, or (B, K, n_classes) for detection
    boxes: Tensor         # (B, K, 9) raw box regressions
    center: Tensor        # (B, K) center-score logits


# -- fusion and selection ----------------------------------------------------

def similarity_logits(vis: Tensor, txt: Tensor, scale: Tensor, pad_mask: Optional[np.ndarray]) -> Tensor:
    """cos(vis_n, txt_l) * scale over (..., N, D) x (..., L, D) -> (..., N, L); pads -> -inf."""
    sim = l2norm(vis) @ l2norm(txt).swapaxes(-1, -2)
    sim = sim * scale
    if pad_mask is not None:
        sim = masked_fill(sim, np.asarray(pad_mask)[..., None, :], -np.inf)
    return sim


def topk_select(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, best first; ties go to the lower index."""
    n = len(scores)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        log.warning("requested %d queries from %d voxels; selecting all", k, n)
        k = n
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")[:k]


def positional_input(anchors: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(anchors, dtype=dtype))


class DecoderLayer(Module):
    """Self-attn -> 3D cross-attn -> text cross-attn -> 2D image cross-attn -> MLP,
    each sub-block pre-norm residual."""

    def __init__(self, c: int, heads: int, rng, use_image_branch: bool = True, use_text: bool = True):
        self.ln_self = LayerNorm(c)
        self.self_attn = MultiHeadAttention(c, heads, rng)
        self.ln_3d = LayerNorm(c)
        self.attn_3d = MultiHeadAttention(c, heads, rng)
        if use_text:
            self.ln_text = LayerNorm(c)
            self.attn_text = MultiHeadAttention(c, heads, rng)
        self.use_text = use_text
        if use_image_branch:
            self.ln_img = LayerNorm(c)
            self.attn_img = MultiHeadAttention(c, heads, rng)
        self.use_image_branch = use_image_branch
        self.ln_mlp = LayerNorm(c)
        self.mlp = MLP(c, 4 * c, c, rng)

    def forward(self, q, qpos, voxel_feats, text=None, text_mask=None, image=None):
        h = self.ln_self(q) + qpos
        q = q + self.self_attn(h)
        q = q + self.attn_3d(self.ln_3d(q) + qpos, voxel_feats)
        if self.use_text and text is not None:
            q = q + self.attn_text(self.ln_text(q), text, text_mask)
        if self.use_image_branch and image is not None:
            q = q + self.attn_img(self.ln_img(q), image)
        return q + self.mlp(self.ln_mlp(q))


class GroundingHead(Module):
    def __init__(self, cfg: HeadConfig, d_text: int, rng, task: str = "ground"):
        c = cfg.channels
        self.cfg = cfg
        self.task = task
        self.pos = MLP(3, c, c, rng)
        self.layers = [DecoderLayer(c, cfg.heads, rng, cfg.use_image_branch, task == "ground")
                       for _ in range(cfg.dec_layers)]
        self.norm = LayerNorm(c)
        self.box = MLP(c, c, 9, rng)
        self.center = Linear(c, 1, rng)
        if task == "ground":
            self.text_ctx = Linear(d_text, c, rng)
            self.vis_proj = Linear(c, cfg.proj_dim, rng)
            self.text_proj = Linear(d_text, cfg.proj_dim, rng)
            self.query_proj = Linear(c, cfg.proj_dim, rng)
            self.log_scale = Parameter(np.full((1,), math.log(1.0 / cfg.tau), dtype=self.pos.fc1.weight.dtype))
        else:
            self.objectness = Linear(c, 1, rng)
            self.cls = Linear(c, cfg.n_classes, rng)

    # fusion and selection steps -------------------------------------------
    def visual_text_fuse(self, voxel_feats: Tensor, text_feats: Tensor, pad_mask: np.ndarray) -> Tensor:
        """(N, C) voxels x (B, L, D2) tokens -> (B, N, L) similarity logits."""
        return similarity_logits(self.vis_proj(voxel_feats), self.text_proj(text_feats), exp(self.log_scale), pad_mask)

    def select(self, voxel_feats: Tensor, centers: np.ndarray, scores: np.ndarray) -> QuerySet:
        idx = topk_select(scores, self.cfg.n_queries)
        anchors = centers[idx]
        q = take_rows(voxel_feats, idx)
        return QuerySet(q, anchors, scores[idx], idx)

    def forward(self, voxel_feats: Tensor, centers: np.ndarray, text_feats: Optional[Tensor] = None,
                text_mask: Optional[np.ndarray] = None, image: Optional[Tensor] = None):
        """Returns (per-layer LayerOutput list, anchors (B, K, 3), voxel logits (B, N) or None).

        The voxel logits are each voxel's best token similarity; they drive the
        Top-K selection and are supervised by :func:`selection_loss`.
        """
        dtype = voxel_feats.dtype
        vpos = self.pos(positional_input(centers, dtype))
        if self.task == "ground":
            b = text_feats.shape[0]
            sims = self.visual_text_fuse(voxel_feats, text_feats, text_mask)            # (B, N, L)
            voxel_logits = max_(sims, axis=-1)                              # (B, N)
            voxel_scores = voxel_logits.data
            sets = [self.select(voxel_feats, centers, voxel_scores[i]) for i in range(b)]
            text = self.text_ctx(text_feats)
            tproj = l2norm(self.text_proj(text_feats))
        else:
            b = 1
            obj = self.objectness(voxel_feats)                                    # (N, 1)
            sets = [self.select(voxel_feats, centers, obj.data[:, 0])]
            text = None
            voxel_logits = None
        q = stack([s.queries for s in sets], axis=0)                        # (B, K, C)
        anchors = np.stack([s.anchors for s in sets])
        qpos = self.pos(positional_input(anchors, dtype))
        q = q + qpos
        memory = voxel_feats + vpos
        img = None if image is None else image
        outs: List[LayerOutput] = []
        for layer in self.layers:
            q = layer(q, qpos, memory, text, text_mask, img)
            h = self.norm(q)
            boxes = self.box(h)
            center = sum_(self.center(h), axis=-1)
            if self.task == "ground":
                sim = l2norm(self.query_proj(h)) @ tproj.swapaxes(-1, -2)    # (B, K, L)
                sim = masked_fill(sim * exp(self.log_scale), text_mask[:, None, :], -np.inf)
                logits = max_(sim, axis=-1)
            else:
                sel = np.stack([s.indices for s in sets])
                logits = self.cls(h) + take_rows(obj, sel)
            outs.append(LayerOutput(logits, boxes, center))
        return outs, anchors, voxel_logits


# -- boxes --------------------------------------------------------------------

def decode_box_tensor(raw: Tensor, anchor) -> Tensor:
    """Differentiable raw 9-vector -> (center, size, angles) 9-vector."""
    anchor = np.asarray(anchor, dtype=raw.dtype)
    center = raw[..., 0:3] + anchor
    size = softplus(raw[..., 3:6]) + SIZE_FLOOR
    angles = tanh(raw[..., 6:9]) * math.pi
    return concat([center, size, angles], axis=-1)


def decode_box(raw, anchor) -> OrientedBox9:
    raw = np.asarray(raw.data if isinstance(raw, Tensor) else raw, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    size = np.logaddexp(0.0, raw[3:6]) + SIZE_FLOOR
    return OrientedBox9(anchor + raw[:3], size, math.pi * np.tanh(raw[6:9]))


def encode_box(box: OrientedBox9, anchor) -> np.ndarray:
    """Inverse of :func:`decode_box`: the raw regression target for ``box`` at ``anchor``."""
    s = np.maximum(box.size - SIZE_FLOOR, 1e-6)
    size_raw = s + np.log(-np.expm1(-s))
    ang = np.clip(box.rotation / math.pi, -1 + 1e-6, 1 - 1e-6)
    return np.concatenate([box.center - np.asarray(anchor), size_raw, np.arctanh(ang)])


# -- matching -----------------------------------------------------------------

def hungarian(cost) -> list:
    """Minimum-cost one-to-one assignment of min(n, m) pairs.

    Among optimal assignments the lexicographically smallest one is returned,
    where the assignment is read as the partner sequence of the smaller side in
    index order. Returns sorted (row, col) pairs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    flip = n > m
    c = cost.T if flip else cost
    r = c.shape[0]
    ri, ci = linear_sum_assignment(c)
    best = c[ri, ci].sum()
    tol = 1e-9 * max(1.0, abs(best))

    chosen: List[int] = []
    used = np.zeros(c.shape[1], dtype=bool)
    acc = 0.0
    for i in range(r):
        for j in np.flatnonzero(~used):
            rest_rows = np.arange(i + 1, r)
            rest_cols = np.flatnonzero(~used & (np.arange(c.shape[1]) != j))
            if len(rest_rows):
                sub = c[np.ix_(rest_rows, rest_cols)]
                a, b = linear_sum_assignment(sub)
                rest = sub[a, b].sum()
            else:
                rest = 0.0
            if acc + c[i, j] + rest <= best + tol:
                chosen.append(int(j))
                used[j] = True
                acc += c[i, j]
                break
    pairs = [(j, i) for i, j in enumerate(chosen)] if flip else [(i, j) for i, j in enumerate(chosen)]
    return sorted(pairs)


# -- losses -------------------------------------------------------------------

def focal_loss(logits: Tensor, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise sigmoid focal loss."""
    t = np.asarray(targets, dtype=logits.dtype)
    p = sigmoid(logits)
    p_t = p * t + (1.0 - p) * (1.0 - t)
    log_p_t = log_sigmoid(logits) * t + log_sigmoid(-logits) * (1.0 - t)
    alpha_t = alpha * t + (1 - alpha) * (1 - t)
    mod = (1.0 - p_t) ** gamma if gamma else 1.0
    return -(alpha_t * mod * log_p_t) if gamma else -(alpha_t * log_p_t)


@dataclass
class Target:
    boxes: List[OrientedBox9]
    labels: List[int] = field(default_factory=list)


def _box_cost(raw: np.ndarray, anchors: np.ndarray, targets: Target):
    k = raw.shape[0]
    l1 = np.zeros((k, len(targets.boxes)))
    dist = np.zeros((k, len(targets.boxes)))
    for j, box in enumerate(targets.boxes):
        enc = np.stack([encode_box(box, a) for a in anchors])
        l1[:, j] = np.abs(raw - enc).sum(axis=1)
        dist[:, j] = np.linalg.norm(anchors + raw[:, :3] - box.center, axis=1)
    return l1, dist


def selection_loss(voxel_logits: Tensor, centers: np.ndarray, targets: Sequence[Target],
                   weights: LossWeights = LossWeights(), margin: float = 0.0) -> Tensor:
    """Focal loss on per-voxel text similarity: voxels inside a target box are
    positive (the nearest voxel when none is inside), all others negative.
    Summed over voxels, divided by the positive count, averaged over items."""
    terms = []
    for b, tgt in enumerate(targets):
        pos = np.zeros(len(centers))
        for box in tgt.boxes:
            inside = box.contains(centers, eps=margin)
            if not inside.any():
                inside[np.argmin(np.linalg.norm(centers - box.center, axis=1))] = True
            pos[inside] = 1.0
        fl = sum_(focal_loss(voxel_logits[b], pos, weights.focal_alpha, weights.focal_gamma))
        terms.append(fl * (1.0 / max(1.0, pos.sum())))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def match_loss(layers: Sequence[LayerOutput], anchors: np.ndarray, targets: Sequence[Target],
               weights: LossWeights = LossWeights(), voxel_logits: Optional[Tensor] = None,
               voxel_centers: Optional[np.ndarray] = None) -> tuple:
    """Set-prediction loss averaged over decoder layers (deep supervision) and batch items.

    Each layer is matched independently with the Hungarian algorithm. When
    ``voxel_logits`` are given, the selection term joins the classification
    part. Returns (total Tensor, dict of floats {"cls", "box", "center",
    "select", "total"}).
    """
    totals, parts = [], {"cls": 0.0, "box": 0.0, "center": 0.0}
    for out in layers:
        for b, tgt in enumerate(targets):
            cls_t, box_t, ctr_t = _item_loss(out, b, anchors[b], tgt, weights)
            item = cls_t * weights.alpha + box_t * weights.beta + ctr_t * weights.gamma
            totals.append(item)
            parts["cls"] += cls_t.item()
            parts["box"] += box_t.item()
            parts["center"] += ctr_t.item()
    n = len(totals)
    total = totals[0]
    for t in totals[1:]:
        total = total + t
    total = total * (1.0 / n)
    parts = {k: v / n for k, v in parts.items()}
    parts["select"] = 0.0
    if voxel_logits is not None:
        sel = selection_loss(voxel_logits, voxel_centers, targets, weights)
        total = total + sel * weights.alpha
        parts["select"] = sel.item()
        parts["cls"] += parts["select"]
    parts["total"] = total.item()
    return total, parts


def _item_loss(out: LayerOutput, b: int, anchors: np.ndarray, tgt: Target, w: LossWeights):
    logits = out.logits[b]
    raw = out.boxes[b]
    center = out.center[b]
    k = raw.shape[0]
    n_t = len(tgt.boxes)
    detect = logits.ndim == 2
    if n_t == 0:
        cls_loss = sum_(focal_loss(logits, np.zeros(logits.shape), w.focal_alpha, w.focal_gamma))
        zero = Tensor(np.zeros((), dtype=raw.dtype))
        ctr = mean(F.bce_with_logits(center, np.zeros(k)))
        return cls_loss, zero, ctr

    prob = 1.0 / (1.0 + np.exp(-logits.data.astype(np.float64)))
    if detect:
        cls_cost = -prob[:, tgt.labels]
    else:
        cls_cost = -np.repeat(prob[:, None], n_t, axis=1)
    l1, dist = _box_cost(raw.data.astype(np.float64), anchors, tgt)
    cost = w.alpha * cls_cost + w.beta * l1 + w.gamma * dist
    pairs = hungarian(cost)
    qi = np.array([p[0] for p in pairs], dtype=np.int64)
    ti = np.array([p[1] for p in pairs], dtype=np.int64)

    cls_target = np.zeros(logits.shape)
    if detect:
        cls_target[qi, np.asarray(tgt.labels)[ti]] = 1.0
    else:
        cls_target[qi] = 1.0
    cls_loss = sum_(focal_loss(logits, cls_target, w.focal_alpha, w.focal_gamma)) * (1.0 / n_t)

    enc = np.stack([encode_box(tgt.boxes[t], anchors[q]) for q, t in zip(qi, ti)])
    box_loss = sum_(abs_(take_rows(raw, qi) - enc.astype(raw.dtype))) * (1.0 / n_t)

    ctr_target = np.zeros(k)
    gt_centers = np.stack([tgt.boxes[t].center for t in ti])
    d2 = ((anchors[qi] - gt_centers) ** 2).sum(axis=1)
    ctr_target[qi] = np.exp(-d2 / (2 * w.center_sigma ** 2))
    ctr_loss = mean(F.bce_with_logits(center, ctr_target))
    return cls_loss, box_loss, ctr_loss


def query_scores(out: LayerOutput) -> np.ndarray:
    """Per-query confidence = sigmoid(center) * sigmoid(alignment) (max class for detection)."""
    ctr = 1.0 / (1.0 + np.exp(-out.center.data.astype(np.float64)))
    lg = out.logits.data.astype(np.float64)
    if lg.ndim == 3:
        lg = lg.max(axis=-1)
    return ctr * (1.0 / (1.0 + np.exp(-lg)))
