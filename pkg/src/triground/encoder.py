"""Shared frozen transformer encoder with per-modality residual adapters.

Images and point clouds run through the *same* visual transformer weights;
text runs through a separate text transformer. Every parameter of both
transformers is frozen except the adapters, which sit after odd-numbered
blocks (1-indexed) and are instantiated separately per modality.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import LayerNorm, Linear, MLP, Module, MultiHeadAttention, Parameter, _alloc
from .autodiff.tensor import Tensor, concat, gelu, max_, reshape, take_rows, transpose
from .geometry import PointCloud

MODALITIES = ("image", "point", "text")
BOS, EOS, PAD = 256, 257, 258
VOCAB = 259


@dataclass
class EncoderConfig:
    d_model: int = 32
    layers: int = 4
    heads: int = 4
    image_size: int = 32
    patch_size: int = 8
    text_d_model: int = 32
    text_layers: int = 4
    text_heads: int = 4
    text_max_len: int = 32
    adapter_bottleneck: int = 8
    adapter_layers: List[int] = field(default_factory=lambda: [1, 3])
    n_groups: int = 64
    group_k: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        bad = [i for i in self.adapter_layers if i < 1 or i % 2 == 0]
        if bad:
            raise ValueError(f"adapter layers must be odd and 1-indexed, got {bad}")
        if max(self.adapter_layers, default=0) > min(self.layers, self.text_layers):
            raise ValueError("adapter layer index exceeds the number of transformer layers")
        if self.d_model % self.heads or self.text_d_model % self.text_heads:
            raise ValueError("model dim must be divisible by the number of heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def image_tokens(self) -> int:
        return self.grid ** 2 + 1

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> dict:
    """Read a JSON config file; a bare name resolves to a shipped preset."""
    p = Path(path)
    if not p.exists():
        shipped = Path(__file__).parent / "configs" / p.name
        if not shipped.exists():
            shipped = Path(__file__).parent / "configs" / f"{p.name}.json"
        p = shipped
    return json.loads(p.read_text())


@dataclass
class TokenSequence:
    tokens: Tensor
    kind: str
    pad_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.pad_mask is None:
            self.pad_mask = np.zeros(self.tokens.shape[:2], dtype=bool)


# -- point grouping ---------------------------------------------------------

def fps(points: np.ndarray, m: int, seed: Optional[int] = 0, start: Optional[int] = None) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    s = len(points)
    if m > s:
        raise ValueError(f"cannot sample {m} centers from {s} points")
    if start is None:
        start = int(np.random.default_rng(seed).integers(s))
    idx = np.empty(m, dtype=np.int64)
    idx[0] = start
    dist = np.sum((points - points[start]) ** 2, axis=1)
    for i in range(1, m):
        j = int(np.argmax(dist))
        idx[i] = j
        np.minimum(dist, np.sum((points - points[j]) ** 2, axis=1), out=dist)
    return idx


def knn(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to each center (stable: lower index wins ties)."""
    d = ((centers[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


@dataclass
class PointPatchSet:
    centers: np.ndarray
    groups: np.ndarray
    local: np.ndarray
    colors: Optional[np.ndarray] = None

    def features(self) -> np.ndarray:
        """(M, K, 6): center-normalized xyz followed by rgb (zeros without colors)."""
        rgb = self.colors if self.colors is not None else np.zeros_like(self.local)
        return np.concatenate([self.local, rgb], axis=-1)

    @classmethod
    def build(cls, pc: PointCloud, m: int, k: int, seed: int = 0) -> "PointPatchSet":
        pts = pc.positions
        if len(pts) < m:
            raise ValueError(f"point cloud has {len(pts)} points but {m} groups were requested; resample the cloud")
        centers_idx = fps(pts, m, seed)
        centers = pts[centers_idx]
        groups = knn(pts, centers, min(k, len(pts)))
        local = pts[groups] - centers[:, None, :]
        colors = pc.colors[groups] if pc.colors is not None else None
        return cls(centers, groups, local, colors)


class PointTokenizer(Module):
    """Shared MLP over center-normalized neighbors, max-pooled per group, plus a
    learned embedding of the group center."""

    def __init__(self, d_model: int, rng):
        self.group_mlp = MLP(6, d_model, d_model, rng)
        self.pos_mlp = MLP(3, d_model, d_model, rng)

    def forward(self, patches: Sequence[PointPatchSet], use_pos: bool = True) -> TokenSequence:
        local = np.stack([p.features() for p in patches])
        centers = np.stack([p.centers for p in patches])
        feats = self.group_mlp(Tensor(local.astype(self.group_mlp.fc1.weight.dtype)))
        tokens = max_(feats, axis=2)
        if use_pos:
            tokens = tokens + self.pos_mlp(Tensor(centers.astype(tokens.dtype)))
        return TokenSequence(tokens, "point")


# -- transformer ------------------------------------------------------------

class Adapter(Module):
    """x + W2 gelu(W1 x + b1) + b2, with W2 and b2 zero at init (identity map)."""

    def __init__(self, d_model: int, bottleneck: int, rng):
        self.w1 = Parameter(_alloc((d_model, bottleneck), rng, 0.02))
        self.b1 = Parameter(_alloc((bottleneck,), None, 0.0))
        self.w2 = Parameter(_alloc((bottleneck, d_model), None, 0.0))
        self.b2 = Parameter(_alloc((d_model,), None, 0.0))

    def forward(self, x):
        h = gelu(F.linear(x, self.w1, self.b1))
        return x + F.linear(h, self.w2, self.b2)


class Block(Module):
    def __init__(self, d: int, heads: int, rng):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, 4 * d, d, rng)

    def forward(self, x, mask=None):
        h = self.ln1(x)
        x = x + self.attn(h, mask=mask)
        return x + self.mlp(self.ln2(x))


class Transformer(Module):
    """Pre-norm blocks with modality-keyed adapters after the listed (1-indexed) blocks."""

    def __init__(self, d: int, layers: int, heads: int, modalities: Sequence[str], adapter_layers: Sequence[int],
                 bottleneck: int, rng, adapter_rng):
        self.ln_pre = LayerNorm(d)
        self.blocks = [Block(d, heads, rng) for _ in range(layers)]
        self.ln_post = LayerNorm(d)
        self.adapter_layers = list(adapter_layers)
        self.adapters = _AdapterBank(modalities, self.adapter_layers, d, bottleneck, adapter_rng)

    def forward(self, x, modality: str, mask=None, taps: Sequence[int] = (), use_adapters: bool = True):
        bank = self.adapters.get(modality)
        out_taps: Dict[int, Tensor] = {}
        x = self.ln_pre(x)
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, mask)
            if use_adapters and i in self.adapter_layers:
                x = bank[self.adapter_layers.index(i)](x)
            if i in taps:
                out_taps[i] = x
        return self.ln_post(x), out_taps


class _AdapterBank(Module):
    def __init__(self, modalities, layers, d, bottleneck, rng):
        for m in modalities:
            setattr(self, m, [Adapter(d, bottleneck, rng) for _ in layers])

    def get(self, modality: str):
        mods = self.__dict__.get("_modules", {})
        if modality not in mods:
            raise ValueError(f"unknown modality {modality!r} for this transformer")
        return mods[modality]


class VisualEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng, adapter_rng):
        d, ps = cfg.d_model, cfg.patch_size
        self.cfg = cfg
        self.patch = Parameter(_alloc((d, 3, ps, ps), rng, 1.0 / np.sqrt(3 * ps * ps)), frozen=True)
        self.cls = Parameter(_alloc((d,), rng, 0.02), frozen=True)
        self.pos = Parameter(_alloc((cfg.image_tokens, d), rng, 0.02), frozen=True)
        self.transformer = Transformer(d, cfg.layers, cfg.heads, ("image", "point"), cfg.adapter_layers,
                                       cfg.adapter_bottleneck, rng, adapter_rng)


class TextEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng, adapter_rng):
        d = cfg.text_d_model
        self.embed = Parameter(_alloc((VOCAB, d), rng, 0.02 * 10), frozen=True)
        self.pos = Parameter(_alloc((cfg.text_max_len, d), rng, 0.02), frozen=True)
        self.transformer = Transformer(d, cfg.text_layers, cfg.text_heads, ("text",), cfg.adapter_layers,
                                       cfg.adapter_bottleneck, rng, adapter_rng)


class UnifiedEncoder(Module):
    """Frozen visual + text transformers; only adapters are trainable."""

    def __init__(self, cfg: EncoderConfig, with_text: bool = True):
        rng = np.random.default_rng(cfg.seed)
        adapter_rng = np.random.default_rng([cfg.seed, 1])
        self.cfg = cfg
        self.visual = VisualEncoder(cfg, rng, adapter_rng)
        self.text = TextEncoder(cfg, rng, adapter_rng) if with_text else None
        self.freeze(True)
        for name, p in self.named_parameters():
            if ".adapters." in name:
                p.freeze(False)

    def tokenize_images(self, views: np.ndarray) -> TokenSequence:
        """(B, Nums, 3, H, W) -> (B*Nums, L, D) with a class token and 2D positions."""
        views = np.asarray(views)
        if views.ndim != 5:
            raise ValueError(f"expected views of shape (B, Nums, C, H, W), got {views.shape}")
        b, n, c, h, w = views.shape
        size = self.cfg.image_size
        if (h, w) != (size, size) or c != 3:
            raise ValueError(f"images must be 3x{size}x{size}, got {c}x{h}x{w}")
        flat = Tensor(views.reshape(b * n, c, h, w).astype(self.visual.patch.dtype))
        ps = self.cfg.patch_size
        patches = F.conv2d(flat, self.visual.patch, None, stride=ps)
        bn, d = patches.shape[:2]
        tokens = transpose(reshape(patches, (bn, d, -1)), (0, 2, 1))
        cls = reshape(self.visual.cls, (1, 1, d)) * np.ones((bn, 1, 1), dtype=tokens.dtype)
        tokens = concat([cls, tokens], axis=1) + self.visual.pos
        return TokenSequence(tokens, "image")

    def tokenize_text(self, prompts: Sequence[str]) -> TokenSequence:
        ids = np.stack([encode_bytes(p, self.cfg.text_max_len) for p in prompts])
        tokens = take_rows(self.text.embed, ids) + self.text.pos
        return TokenSequence(tokens, "text", ids == PAD)

    def encode(self, seq: TokenSequence, taps: Sequence[int] = (), use_adapters: bool = True):
        """Run the modality's transformer; returns (TokenSequence, {layer: tap tensor})."""
        if seq.kind in ("image", "point"):
            tr = self.visual.transformer
        elif seq.kind == "text":
            if self.text is None:
                raise ValueError("this encoder was built without a text branch")
            tr = self.text.transformer
        else:
            raise ValueError(f"unknown modality {seq.kind!r}")
        mask = seq.pad_mask if seq.pad_mask is not None and seq.pad_mask.any() else None
        out, tapped = tr(seq.tokens, seq.kind, mask, taps, use_adapters)
        return TokenSequence(out, seq.kind, seq.pad_mask), tapped


def encode_bytes(prompt: str, max_len: int) -> np.ndarray:
    """[BOS, bytes..., EOS, PAD...] truncated/padded to ``max_len``."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    body = list(prompt.encode("utf-8"))[:max_len - 2]
    ids = [BOS] + body + [EOS]
    return np.array(ids + [PAD] * (max_len - len(ids)), dtype=np.int64)


def decode_bytes(ids) -> str:
    body = [int(i) for i in ids if int(i) < 256]
    return bytes(body).decode("utf-8", errors="replace")


# -- parameter accounting ----------------------------------------------------

def adapter_closed_form(cfg: EncoderConfig, with_text: bool = True) -> int:
    per = lambda d: 2 * d * cfg.adapter_bottleneck + cfg.adapter_bottleneck + d  # noqa: E731
    mods = [cfg.d_model, cfg.d_model] + ([cfg.text_d_model] if with_text else [])
    return len(cfg.adapter_layers) * sum(per(d) for d in mods)


def param_report(model: Module, groups: Optional[Dict[str, str]] = None) -> dict:
    """Exact trainable/frozen counts, overall and per top-level submodule.

    ``groups`` optionally maps top-level submodule names to table groups
    (e.g. "Encoder", "Decoder", "Other").
    """
    rows: Dict[str, Dict[str, int]] = {}
    trainable = frozen = 0
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        key = groups.get(top, top) if groups else top
        row = rows.setdefault(key, {"trainable": 0, "frozen": 0})
        n = int(np.prod(p.shape))
        if p.frozen:
            row["frozen"] += n
            frozen += n
        else:
            row["trainable"] += n
            trainable += n
    return {"trainable": trainable, "frozen": frozen, "total": trainable + frozen, "modules": rows}
