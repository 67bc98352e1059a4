"""End-to-end wiring: encoder -> GARF (or token fusion) -> grounding head."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .autodiff.nn import Module
from .encoder import EncoderConfig, PointPatchSet, PointTokenizer, UnifiedEncoder, load_config, param_report
from .garf import FusedScene, Garf, GarfConfig, SparseTensor3D, TokenFusion, flatten_map, voxelize
from .geometry import CameraView, PointCloud, unproject
from .autodiff.tensor import Tensor
from .head import GroundingHead, HeadConfig, LayerOutput, LossWeights, Target, match_loss

TABLE_GROUPS = {"encoder": "Encoder", "point_tokenizer": "Encoder", "garf": "Fusion", "fusion": "Fusion",
                "head": "Decoder"}


def default_config() -> dict:
    return load_config("desk.json")


def merge_config(base: dict, override: Optional[dict]) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = v
    return out


def tap_layers(layers: int, n: int) -> List[int]:
    """The last ``n`` odd (1-indexed) layers, or the last ``n`` layers when there
    are not enough odd ones."""
    odd = [i for i in range(1, layers + 1) if i % 2 == 1]
    if len(odd) >= n:
        return odd[-n:]
    return list(range(layers - n + 1, layers + 1))


@dataclass
class SceneInputs:
    """Model-ready, parameter-independent view of one scene."""

    views: List[CameraView]
    images: np.ndarray          # (1, V, 3, H, W)
    cloud: PointCloud
    patches: PointPatchSet
    voxels: SparseTensor3D


def sample_cloud(views: Sequence[CameraView], n_points: int, seed: int) -> PointCloud:
    clouds = [unproject(v) for v in views]
    pos = np.concatenate([c.positions for c in clouds])
    col = np.concatenate([c.colors for c in clouds]) if all(c.colors is not None for c in clouds) else None
    if len(pos) > n_points:
        pick = np.sort(np.random.default_rng(seed).choice(len(pos), n_points, replace=False))
        pos = pos[pick]
        col = col[pick] if col is not None else None
    return PointCloud(pos, col)


def prepare_scene(views: Sequence[CameraView], cfg: dict, seed: int = 0, dtype=np.float32) -> SceneInputs:
    enc = EncoderConfig.from_dict(cfg["encoder"])
    gcfg = GarfConfig.from_dict(cfg["garf"])
    n_points = cfg.get("model", {}).get("n_points", 2048)
    cloud = sample_cloud(views, n_points, seed)
    patches = PointPatchSet.build(cloud, enc.n_groups, enc.group_k, seed)
    voxels = voxelize(cloud, gcfg.voxel_size, dtype=dtype)
    images = np.stack([np.transpose(v.rgb, (2, 0, 1)) for v in views])[None].astype(dtype)
    return SceneInputs(list(views), images, cloud, patches, voxels)


@dataclass
class ModelOutput:
    layers: List[LayerOutput]
    anchors: np.ndarray
    fused: FusedScene
    voxel_logits: Optional[Tensor] = None

    @property
    def last(self) -> LayerOutput:
        return self.layers[-1]


class GroundingModel(Module):
    def __init__(self, cfg: dict, task: str = "ground"):
        self.cfg = cfg
        self.task = task
        enc_cfg = EncoderConfig.from_dict(cfg["encoder"])
        gcfg = GarfConfig.from_dict(cfg["garf"])
        hcfg = HeadConfig.from_dict(cfg["head"])
        mcfg = cfg.get("model", {})
        self.use_garf = mcfg.get("use_garf", True)
        seed = mcfg.get("seed", 0)
        rng = np.random.default_rng([seed, 2])
        self.encoder = UnifiedEncoder(enc_cfg, with_text=(task == "ground"))
        self.point_tokenizer = PointTokenizer(enc_cfg.d_model, rng)
        if self.use_garf:
            self.garf = Garf(gcfg, enc_cfg.d_model, rng)
            self.taps = tap_layers(enc_cfg.layers, gcfg.levels)
        else:
            self.fusion = TokenFusion(enc_cfg.d_model, hcfg.channels, rng)
            self.taps = []
        self.head = GroundingHead(hcfg, enc_cfg.text_d_model, rng, task)
        self.loss_weights = LossWeights.from_dict(cfg.get("loss", {}))

    def features(self, inputs: SceneInputs, prompts: Optional[Sequence[str]] = None, use_adapters: bool = True,
                 return_bundle: bool = False):
        """Everything up to the decoder: (FusedScene, text seq or None, image context, extras)."""
        enc = self.encoder
        img_seq = enc.tokenize_images(inputs.images)
        img_out, taps = enc.encode(img_seq, taps=self.taps, use_adapters=use_adapters)
        pts_seq = self.point_tokenizer([inputs.patches])
        pts_out, _ = enc.encode(pts_seq, use_adapters=use_adapters)
        point_feats = pts_out.tokens[0]
        centers = inputs.patches.centers
        extras = {"image_tokens": img_out.tokens, "point_tokens": point_feats, "taps": taps}
        if self.use_garf:
            res = self.garf(inputs.voxels, point_feats, centers, [taps[i] for i in self.taps], inputs.views,
                            return_bundle=return_bundle)
            fused, fmap = res[0], res[1]
            if return_bundle:
                extras["bundle"] = res[2]
            image_ctx = flatten_map(fmap)
        else:
            fused, image_ctx = self.fusion(point_feats, centers, img_out.tokens)
        text = None
        if self.task == "ground":
            txt_seq = enc.tokenize_text(list(prompts))
            text, _ = enc.encode(txt_seq, use_adapters=use_adapters)
        return fused, text, image_ctx, extras

    def forward(self, inputs: SceneInputs, prompts: Optional[Sequence[str]] = None,
                use_adapters: bool = True) -> "ModelOutput":
        fused, text, image_ctx, _ = self.features(inputs, prompts, use_adapters)
        image = image_ctx if self.head.cfg.use_image_branch else None
        if text is not None:
            outs, anchors, vlog = self.head(fused.feats, fused.centers, text.tokens, text.pad_mask, image)
        else:
            outs, anchors, vlog = self.head(fused.feats, fused.centers, None, None, image)
        return ModelOutput(outs, anchors, fused, vlog)

    def loss(self, out: "ModelOutput", targets: Sequence[Target]):
        return match_loss(out.layers, out.anchors, targets, self.loss_weights, out.voxel_logits, out.fused.centers)

    def report(self) -> dict:
        rep = param_report(self)
        rep["groups"] = param_report(self, TABLE_GROUPS)["modules"]
        return rep


def save_config(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
