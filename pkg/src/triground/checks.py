"""Finite-difference gradient suites in double precision.

``op`` covers every differentiable primitive, ``module`` the composed blocks
(adapter, GARF toy, decoder layer, head + loss), ``e2e`` the full desk-scale
grounding loss with respect to every trainable parameter.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from .autodiff import functional as F
from .autodiff import tensor as T
from .autodiff.gradcheck import grad_check
from .autodiff.tensor import Tensor, default_dtype

OP_TOL = 1e-6
MODULE_TOL = 1e-4
ADAPTER_TOL = 1e-6
E2E_COORDS = 200


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


Case = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], Dict[str, Tensor]]]


def _p(rng, *shape, low=None, high=None):
    if low is not None:
        return Tensor(rng.uniform(low, high, shape), requires_grad=True)
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    """Scalarize with fixed random weights so every output entry matters."""
    w = rng.normal(size=out.shape)
    return T.sum_(out * w)


def _unary(fn, low=None, high=None):
    def case(rng):
        x = _p(rng, 3, 4, low=low, high=high)
        w = rng.normal(size=(3, 4))
        return (lambda: T.sum_(fn(x) * w)), {"x": x}
    return case


def _binary(fn, b_shape=(4,), positive_b=False):
    def case(rng):
        a = _p(rng, 3, 4)
        b = _p(rng, *b_shape, low=0.5, high=2.0) if positive_b else _p(rng, *b_shape)
        w = rng.normal(size=(3, 4))
        return (lambda: T.sum_(fn(a, b) * w)), {"a": a, "b": b}
    return case


def _matmul(rng):
    a, b = _p(rng, 4, 5), _p(rng, 5, 3)
    w = rng.normal(size=(4, 3))
    return (lambda: T.sum_((a @ b) * w)), {"a": a, "b": b}


def _batched_matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 2)
    w = rng.normal(size=(2, 3, 2))
    return (lambda: T.sum_((a @ b) * w)), {"a": a, "b": b}


def _reduce(fn):
    def case(rng):
        x = _p(rng, 3, 5)
        w = rng.normal(size=(3,))
        return (lambda: T.sum_(fn(x) * w)), {"x": x}
    return case


def _softmax(rng):
    x = _p(rng, 3, 5)
    w = rng.normal(size=(3, 5))
    return (lambda: T.sum_(F.softmax(x, -1) * w)), {"x": x}


def _log_softmax(rng):
    x = _p(rng, 3, 5)
    w = rng.normal(size=(3, 5))
    return (lambda: T.sum_(F.log_softmax(x, -1) * w)), {"x": x}


def _layer_norm(rng):
    x, g, b = _p(rng, 2, 3, 6), _p(rng, 6), _p(rng, 6)
    w = rng.normal(size=(2, 3, 6))
    return (lambda: T.sum_(F.layer_norm(x, g, b) * w)), {"x": x, "g": g, "b": b}


def _batch_norm(rng):
    x, g, b = _p(rng, 8, 4), _p(rng, 4), _p(rng, 4)
    w = rng.normal(size=(8, 4))

    def f():
        rm, rv = np.zeros(4), np.ones(4)
        return T.sum_(F.batch_norm(x, g, b, rm, rv, True) * w)
    return f, {"x": x, "g": g, "b": b}


def _conv2d(rng):
    x, k, b = _p(rng, 2, 3, 8, 8), _p(rng, 4, 3, 3, 3), _p(rng, 4)
    w = rng.normal(size=(2, 4, 4, 4))
    return (lambda: T.sum_(F.conv2d(x, k, b, stride=2, padding=1) * w)), {"x": x, "k": k, "b": b}


def _avg_pool(rng):
    x = _p(rng, 2, 3, 5, 5)
    w = rng.normal(size=(2, 3, 3, 3))
    return (lambda: T.sum_(F.avg_pool2d(x, 2) * w)), {"x": x}


def _attention(rng):
    q, k, v = _p(rng, 2, 3, 8), _p(rng, 2, 4, 8), _p(rng, 2, 4, 8)
    mask = np.array([[False, False, True, False], [False, False, False, False]])
    w = rng.normal(size=(2, 3, 8))
    return (lambda: T.sum_(F.attention(q, k, v, 2, mask) * w)), {"q": q, "k": k, "v": v}


def _indexing(rng):
    x = _p(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])
    w1, w2, w3 = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), rng.normal(size=(6, 3))

    def f():
        a = T.sum_(T.take_rows(x, idx) * w1)
        b = T.sum_(x[1:3] * w2)
        c = T.sum_(T.scatter_rows(x, np.array([5, 0, 5, 1, 2]), 6) * w3)
        return a + b + c
    return f, {"x": x}


def _structure(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 3)
    cond = np.array([[True, False, True], [False, False, True]])
    w = rng.normal(size=(4, 3))
    ws = rng.normal(size=(2, 2, 3))

    def f():
        c = T.sum_(T.concat([a, b], axis=0) * w)
        s = T.sum_(T.stack([a, b], axis=0) * ws)
        wh = T.sum_(T.where(cond, a, b) * ws[0])
        mf = T.sum_(T.masked_fill(a, cond, 0.0) * ws[1])
        r = T.sum_(T.transpose(T.reshape(a, (3, 2)), (1, 0)) * ws[0])
        return c + s + wh + mf + r
    return f, {"a": a, "b": b}


def _bce(rng):
    x = _p(rng, 6)
    t = rng.uniform(0, 1, 6)
    return (lambda: T.sum_(F.bce_with_logits(x, t))), {"x": x}


def _linear(rng):
    x, wt, b = _p(rng, 3, 4), _p(rng, 4, 5), _p(rng, 5)
    w = rng.normal(size=(3, 5))
    return (lambda: T.sum_(F.linear(x, wt, b) * w)), {"x": x, "w": wt, "b": b}


OP_CASES: Dict[str, Case] = {
    "add": _binary(T.add), "sub": _binary(T.sub), "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True), "maximum": _binary(T.maximum, b_shape=(3, 4)),
    "neg": _unary(T.neg), "power": _unary(lambda x: T.power(x, 3.0)),
    "exp": _unary(T.exp), "log": _unary(T.log, 0.5, 2.0), "sqrt": _unary(T.sqrt, 0.5, 2.0),
    "abs": _unary(T.abs_, 0.2, 1.0), "tanh": _unary(T.tanh), "sigmoid": _unary(T.sigmoid),
    "relu": _unary(T.relu, 0.1, 1.0), "gelu": _unary(T.gelu), "softplus": _unary(T.softplus),
    "log_sigmoid": _unary(T.log_sigmoid),
    "sum": _reduce(lambda x: T.sum_(x, axis=1)), "mean": _reduce(lambda x: T.mean(x, axis=1)),
    "max": _reduce(lambda x: T.max_(x, axis=1)),
    "matmul": _matmul, "batched_matmul": _batched_matmul, "linear": _linear,
    "softmax": _softmax, "log_softmax": _log_softmax, "layer_norm": _layer_norm, "batch_norm": _batch_norm,
    "conv2d": _conv2d, "avg_pool2d": _avg_pool, "attention": _attention,
    "indexing": _indexing, "structure": _structure, "bce_with_logits": _bce,
}


def _run(name: str, case: Case, tol: float, seed: int, max_coords=None) -> CheckResult:
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        f, params = case(rng)
        rep = grad_check(f, params, h=1e-5, max_coords=max_coords, seed=seed)
    return CheckResult(name, rep.max_rel_err, tol, rep.n_checked)


def op_suite(seed: int = 0) -> List[CheckResult]:
    return [_run(n, c, OP_TOL, seed) for n, c in OP_CASES.items()]


# -- module level ---------------------------------------------------------------

def _adapter_case(rng):
    from .encoder import Adapter
    ad = Adapter(8, 4, rng)
    ad.w2.data = rng.normal(0, 0.5, ad.w2.shape)
    ad.b2.data = rng.normal(0, 0.5, ad.b2.shape)
    x = _p(rng, 2, 3, 8)
    w = rng.normal(size=(2, 3, 8))
    params = dict(ad.named_parameters())
    params["x"] = x
    return (lambda: T.sum_(ad(x) * w)), params


def garf_toy(rng, dtype=np.float64):
    """A 5-voxel, 2-view GARF instance with a single pyramid level."""
    from .garf import Garf, GarfConfig, SparseTensor3D
    from .scenes import make_camera
    cfg = GarfConfig(voxel_size=0.25, raw_channels=4, stem_channels=4, prop_channels=4, channels=4, levels=1,
                     apif_reduction=2, prune_ratio=0.75)
    garf = Garf(cfg, 8, rng).to(dtype)
    coords = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 1], [3, 2, 1], [2, 3, 0]])
    raw = SparseTensor3D(coords, Tensor(rng.normal(size=(5, 4)).astype(dtype)), cfg.voxel_size)
    centers = rng.uniform(0, 1, (4, 3))
    point_feats = Tensor(rng.normal(size=(4, 8)).astype(dtype), requires_grad=True)
    tap = Tensor(rng.normal(size=(2, 17, 8)).astype(dtype), requires_grad=True)
    views = [make_camera((3.0, 0.5, 1.0), (0.4, 0.4, 0.2), 32), make_camera((0.5, 3.0, 1.5), (0.4, 0.4, 0.2), 32)]
    return garf, raw, point_feats, centers, [tap], views


def _garf_case(rng):
    garf, raw, point_feats, centers, taps, views = garf_toy(rng)
    garf.train()
    w = rng.normal(size=(4, 4))

    def f():
        fused, fmap = garf(raw, point_feats, centers, taps, views)
        return T.sum_(fused.feats * w[:fused.feats.shape[0]]) + T.mean(fmap * fmap)
    params = dict(garf.named_parameters())
    params.update(point_feats=point_feats, tap=taps[0])
    return f, params


def _decoder_case(rng):
    from .head import DecoderLayer
    layer = DecoderLayer(8, 2, rng, True)
    q, qpos = _p(rng, 2, 3, 8), Tensor(rng.normal(size=(2, 3, 8)))
    mem, text, img = _p(rng, 5, 8), _p(rng, 2, 4, 8), _p(rng, 6, 8)
    mask = np.array([[False, False, False, True], [False, False, False, False]])
    w = rng.normal(size=(2, 3, 8))
    params = dict(layer.named_parameters())
    params.update(q=q, mem=mem, text=text, img=img)
    return (lambda: T.sum_(layer(q, qpos, mem, text, mask, img) * w)), params


def head_toy(rng, dtype=np.float64):
    """Grounding head over 6 voxels with 4 queries and a 2-target loss."""
    from .head import GroundingHead, HeadConfig, Target
    from .geometry import OrientedBox9
    cfg = HeadConfig(channels=8, heads=2, dec_layers=2, n_queries=4, proj_dim=8)
    head = GroundingHead(cfg, 8, rng, "ground").to(dtype)
    voxel_feats = Tensor(rng.normal(size=(6, 8)).astype(dtype), requires_grad=True)
    centers = rng.uniform(-1, 1, (6, 3))
    text_feats = Tensor(rng.normal(size=(1, 5, 8)).astype(dtype), requires_grad=True)
    mask = np.array([[False, False, False, False, True]])
    image = Tensor(rng.normal(size=(7, 8)).astype(dtype), requires_grad=True)
    targets = [Target([OrientedBox9(centers[1] + 0.1, (0.5, 0.4, 0.6), (0.3, 0.05, -0.1)),
                       OrientedBox9(centers[4] - 0.1, (0.7, 0.3, 0.5), (-0.6, 0.0, 0.1))])]
    return head, voxel_feats, centers, text_feats, mask, image, targets


def _head_case(rng):
    from .head import match_loss
    head, voxel_feats, centers, text_feats, mask, image, targets = head_toy(rng)

    def f():
        outs, anchors, vlog = head(voxel_feats, centers, text_feats, mask, image)
        return match_loss(outs, anchors, targets, voxel_logits=vlog, voxel_centers=centers)[0]
    params = dict(head.named_parameters())
    params.update(voxel_feats=voxel_feats, text_feats=text_feats, image=image)
    return f, params


def _decode_case(rng):
    from .head import decode_box_tensor
    raw = _p(rng, 3, 9)
    anchor = rng.normal(size=(3, 3))
    w = rng.normal(size=(3, 9))
    return (lambda: T.sum_(decode_box_tensor(raw, anchor) * w)), {"raw": raw}


MODULE_CASES: Dict[str, Tuple[Case, float]] = {
    "adapter": (_adapter_case, ADAPTER_TOL),
    "decode_box": (_decode_case, OP_TOL),
    "garf": (_garf_case, MODULE_TOL),
    "decoder_layer": (_decoder_case, MODULE_TOL),
    "head_loss": (_head_case, MODULE_TOL),
}


def module_suite(seed: int = 0) -> List[CheckResult]:
    return [_run(n, c, tol, seed) for n, (c, tol) in MODULE_CASES.items()]


# -- end to end -------------------------------------------------------------------

def e2e_check(seed: int = 0, coords: int = E2E_COORDS) -> CheckResult:
    """Desk-scale grounding loss vs all trainable parameters, sampled coordinates."""
    from .model import GroundingModel, default_config, prepare_scene
    from .scenes import GenConfig, generate_scene
    from .train import scene_targets

    cfg = default_config()
    scene = generate_scene(seed, GenConfig.from_dict(cfg["data"]))
    with default_dtype(np.float64):
        model = GroundingModel(cfg).to(np.float64)
        rng = np.random.default_rng(seed)
        for name, p in model.named_parameters():
            if name.endswith(("w2", "b2")) and ".adapters." in name:
                p.data = rng.normal(0, 0.05, p.shape)
        model.train()
        inputs = prepare_scene(scene.views, cfg, dtype=np.float64)
        prompts, targets = scene_targets(scene, "ground")

        def f():
            return model.loss(model(inputs, prompts), targets)[0]
        params = {k: p for k, p in model.named_parameters() if not p.frozen}
        rep = grad_check(f, params, h=1e-5, max_coords=coords, seed=seed)
    return CheckResult("e2e_grounding_loss", rep.max_rel_err, MODULE_TOL, rep.n_checked)


def run_scope(scope: str, seed: int = 0) -> List[CheckResult]:
    if scope == "op":
        return op_suite(seed)
    if scope == "module":
        return module_suite(seed)
    if scope == "e2e":
        return [e2e_check(seed)]
    raise ValueError(f"unknown gradcheck scope {scope!r}")
