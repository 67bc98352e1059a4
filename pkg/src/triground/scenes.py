"""Synthetic RGB-D scenes of colored cuboids with templated referring expressions.

Scenes are rendered by ray casting against oriented boxes, so depth and color
are consistent across views (including occlusion). On disk a scene is a
directory holding ``meta.json`` plus raw little-endian float32 images.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .geometry import DEFAULT_NEAR, CameraView, OrientedBox9, iou9, look_at, ray_box_depth

CATEGORIES = ("chair", "table", "sofa", "bed", "cabinet", "desk", "shelf", "lamp",
              "box", "monitor", "stool", "plant")
NOMINAL_SIZES = {
    "chair": (0.5, 0.5, 0.9), "table": (1.2, 0.8, 0.75), "sofa": (1.5, 0.8, 0.8), "bed": (1.7, 1.1, 0.5),
    "cabinet": (0.8, 0.45, 1.1), "desk": (1.3, 0.65, 0.75), "shelf": (0.9, 0.3, 1.6), "lamp": (0.3, 0.3, 1.4),
    "box": (0.45, 0.45, 0.45), "monitor": (0.6, 0.15, 0.45), "stool": (0.38, 0.38, 0.5), "plant": (0.4, 0.4, 1.0),
}
CATEGORY_GROUPS = {"head": (0, 1, 2, 3), "common": (4, 5, 6, 7), "tail": (8, 9, 10, 11)}
GROUP_WEIGHTS = {"head": 0.55, "common": 0.3, "tail": 0.15}
COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
RGB = np.array([(0.85, 0.15, 0.12), (0.15, 0.7, 0.2), (0.15, 0.3, 0.9),
                (0.95, 0.85, 0.15), (0.6, 0.2, 0.75), (0.98, 0.55, 0.1)])
LIGHT = np.array([0.4, -0.3, 0.87]) / np.linalg.norm([0.4, -0.3, 0.87])
HARD_DISTRACTORS = 3
META = "meta.json"
FORMAT = "triground-scene"


def category_group(category: int) -> str:
    for name, members in CATEGORY_GROUPS.items():
        if category in members:
            return name
    raise ValueError(f"unknown category id {category}")


class SceneFormatError(ValueError):
    pass


class SizeMismatchError(SceneFormatError):
    pass


class MissingFileError(SceneFormatError, FileNotFoundError):
    pass


class ManifestError(SceneFormatError):
    pass


class PlacementError(RuntimeError):
    pass


@dataclass
class GenConfig:
    image_size: int = 32
    n_views: int = 4
    room_half: float = 2.0
    min_objects: int = 3
    max_objects: int = 5
    ring_radius: float = 3.4
    camera_height: float = 1.8
    look_height: float = 0.4
    focal_scale: float = 0.8
    size_jitter: float = 0.2
    max_tilt: float = 0.2
    max_prompts: int = 4
    max_tries: int = 1000
    lr_margin: float = 0.25

    @classmethod
    def from_dict(cls, d: Optional[dict], **overrides) -> "GenConfig":
        d = dict(d or {})
        if "views_train" in d and "n_views" not in d:
            d["n_views"] = d["views_train"]
        d.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class SceneObject:
    box: OrientedBox9
    category: int
    color: int

    @property
    def name(self) -> str:
        return f"{COLORS[self.color]} {CATEGORIES[self.category]}"


@dataclass
class Prompt:
    text: str
    target: int
    view_dependent: bool
    n_distractors: int

    @property
    def hard(self) -> bool:
        return self.n_distractors > HARD_DISTRACTORS


@dataclass
class Scene:
    id: str
    views: List[CameraView]
    objects: List[SceneObject]
    prompts: List[Prompt] = field(default_factory=list)

    def __post_init__(self):
        for p in self.prompts:
            if not 0 <= p.target < len(self.objects):
                raise ValueError(f"prompt {p.text!r} targets missing object {p.target}")


# -- rendering ----------------------------------------------------------------

def make_camera(eye, target, image_size: int, focal_scale: float = 0.8) -> CameraView:
    R, t = look_at(eye, target)
    f = focal_scale * image_size
    c = (image_size - 1) / 2
    return CameraView(f, f, c, c, R, t, width=image_size, height=image_size)


def render(objects: Sequence[SceneObject], cam: CameraView):
    """Ray-cast ``objects``; returns (rgb H x W x 3, depth H x W) as float32.

    Rays have unit camera-z component, so the hit parameter is the pixel's depth.
    """
    h, w = cam.height, cam.width
    vs, us = np.mgrid[0:h, 0:w]
    d_cam = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones((h, w))], axis=-1).reshape(-1, 3)
    d_world = d_cam @ cam.R
    origin = cam.position
    depth = np.full(h * w, np.inf)
    rgb = np.zeros((h * w, 3))
    for obj in objects:
        t, normal = ray_box_depth(origin, d_world, obj.box)
        closer = t < depth
        depth[closer] = t[closer]
        shade = 0.55 + 0.45 * np.abs(normal[closer] @ LIGHT)
        rgb[closer] = RGB[obj.color] * shade[:, None]
    depth[~np.isfinite(depth)] = 0.0
    return rgb.reshape(h, w, 3).astype(np.float32), depth.reshape(h, w).astype(np.float32)


def ring_cameras(cfg: GenConfig, phase: float) -> List[CameraView]:
    cams = []
    for i in range(cfg.n_views):
        a = phase + 2 * np.pi * i / cfg.n_views
        eye = (cfg.ring_radius * np.cos(a), cfg.ring_radius * np.sin(a), cfg.camera_height)
        cams.append(make_camera(eye, (0.0, 0.0, cfg.look_height), cfg.image_size, cfg.focal_scale))
    return cams


# -- generation ---------------------------------------------------------------

def _sample_category(rng) -> int:
    groups = list(CATEGORY_GROUPS)
    g = groups[rng.choice(len(groups), p=[GROUP_WEIGHTS[k] for k in groups])]
    return int(rng.choice(CATEGORY_GROUPS[g]))


def _try_layout(rng, cfg: GenConfig, specs, tries: int) -> Optional[List[SceneObject]]:
    placed: List[SceneObject] = []
    for cat, color in specs:
        base = np.array(NOMINAL_SIZES[CATEGORIES[cat]])
        for _ in range(tries):
            size = base * rng.uniform(1 - cfg.size_jitter, 1 + cfg.size_jitter, 3)
            yaw = rng.uniform(-np.pi / 2, np.pi / 2)
            tilt = rng.uniform(-cfg.max_tilt, cfg.max_tilt, 2)
            reach = cfg.room_half - 0.5 * np.hypot(size[0], size[1])
            if reach <= 0:
                continue
            xy = rng.uniform(-reach, reach, 2)
            box = OrientedBox9((xy[0], xy[1], size[2] / 2), size, (yaw, tilt[0], tilt[1]))
            if all(iou9(box, o.box, samples=2048) < 0.01 for o in placed):
                placed.append(SceneObject(box, cat, color))
                break
        else:
            return None
    return placed


def _place_objects(rng, cfg: GenConfig, n: int) -> List[SceneObject]:
    """Rejection sampling; a stuck layout is restarted, ``max_tries`` rejections
    of one object over all restarts is an error."""
    specs = [(_sample_category(rng), int(rng.integers(len(COLORS)))) for _ in range(n)]
    restarts = 5
    for _ in range(restarts):
        placed = _try_layout(rng, cfg, specs, max(1, cfg.max_tries // restarts))
        if placed is not None:
            return placed
    raise PlacementError(f"could not place {n} objects after {cfg.max_tries} tries; "
                         "use fewer objects or a larger room")


def _nearest_other(objects: Sequence[SceneObject], i: int) -> int:
    d = [np.inf if j == i else np.linalg.norm(o.box.center - objects[i].box.center) for j, o in enumerate(objects)]
    return int(np.argmin(d))


def make_prompts(objects: Sequence[SceneObject], view0: CameraView, margin: float = 0.25) -> List[Prompt]:
    """Every unambiguous templated expression for the scene, in a fixed order.

    Distractors are the other objects matching every attribute the prompt
    names: none for a unique color and category, the rest of the category for
    a spatial prompt.
    """
    out: List[Prompt] = []
    cats = [o.category for o in objects]
    pairs = [(o.color, o.category) for o in objects]
    for i, obj in enumerate(objects):
        distract = pairs.count(pairs[i]) - 1
        if distract == 0:
            out.append(Prompt(f"the {obj.name}", i, False, distract))
            if len(objects) > 1:
                j = _nearest_other(objects, i)
                out.append(Prompt(f"the {obj.name} near the {objects[j].name}", i, False, distract))
    cam = np.stack([view0.R @ o.box.center + view0.t for o in objects])
    for cat in sorted(set(cats)):
        members = [i for i, c in enumerate(cats) if c == cat]
        if len(members) < 2:
            continue
        name = CATEGORIES[cat]
        for word, key, pick in (("on the left", 0, np.argmin), ("on the right", 0, np.argmax),
                                ("in front", 2, np.argmin)):
            vals = cam[members, key]
            best = int(pick(vals))
            others = np.delete(vals, best)
            if np.min(np.abs(others - vals[best])) >= margin:
                out.append(Prompt(f"the {name} {word}", members[best], True, len(members) - 1))
    return out


def generate_scene(seed, cfg: Optional[GenConfig] = None, scene_id: Optional[str] = None) -> Scene:
    """Deterministic scene for ``seed`` (an int or a sequence of ints)."""
    cfg = cfg or GenConfig()
    rng = np.random.default_rng(seed)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = _place_objects(rng, cfg, n)
    views = ring_cameras(cfg, float(rng.uniform(0, 2 * np.pi)))
    for v in views:
        v.rgb, v.depth = render(objects, v)
    prompts = make_prompts(objects, views[0], cfg.lr_margin)
    if len(prompts) > cfg.max_prompts:
        pick = np.sort(rng.choice(len(prompts), cfg.max_prompts, replace=False))
        prompts = [prompts[i] for i in pick]
    if scene_id is None:
        scene_id = "scene_" + "_".join(str(s) for s in np.atleast_1d(seed))
    return Scene(scene_id, views, objects, prompts)


# -- serialization ------------------------------------------------------------

def _view_meta(v: CameraView) -> dict:
    return {"fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy, "R": v.R.tolist(), "t": v.t.tolist(),
            "near": v.near, "width": v.width, "height": v.height}


def save_scene(scene: Scene, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT,
        "version": 1,
        "id": scene.id,
        "views": [_view_meta(v) for v in scene.views],
        "objects": [{"box": o.box.to_vector().tolist(), "category": o.category, "color": o.color}
                    for o in scene.objects],
        "prompts": [asdict(p) for p in scene.prompts],
    }
    for i, v in enumerate(scene.views):
        (path / f"rgb_{i}.f32").write_bytes(np.ascontiguousarray(v.rgb, dtype="<f4").tobytes())
        (path / f"depth_{i}.f32").write_bytes(np.ascontiguousarray(v.depth, dtype="<f4").tobytes())
    (path / META).write_text(json.dumps(meta, indent=1) + "\n")
    return path


def _read_raw(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(f"missing image file {path}")
    data = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(data) != expected:
        raise SizeMismatchError(f"{path.name}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def load_scene(path) -> Scene:
    path = Path(path)
    mpath = path / META
    if not mpath.exists():
        raise MissingFileError(f"missing manifest {mpath}")
    try:
        meta = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{mpath}: not valid JSON ({e})") from e
    try:
        views = []
        for i, vm in enumerate(meta["views"]):
            h, w = int(vm["height"]), int(vm["width"])
            rgb = _read_raw(path / f"rgb_{i}.f32", (h, w, 3))
            depth = _read_raw(path / f"depth_{i}.f32", (h, w))
            views.append(CameraView(vm["fx"], vm["fy"], vm["cx"], vm["cy"], np.array(vm["R"]), np.array(vm["t"]),
                                    rgb, depth, vm.get("near", DEFAULT_NEAR), w, h))
        objects = [SceneObject(OrientedBox9.from_vector(o["box"]), int(o["category"]), int(o["color"]))
                   for o in meta["objects"]]
        prompts = [Prompt(p["text"], int(p["target"]), bool(p["view_dependent"]), int(p["n_distractors"]))
                   for p in meta["prompts"]]
        return Scene(str(meta["id"]), views, objects, prompts)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, SceneFormatError):
            raise
        raise ManifestError(f"{mpath}: malformed manifest ({e!r})") from e


DATASET = "dataset.json"


def _generate_retrying(seed: List[int], cfg: GenConfig, name: str, attempts: int = 20):
    """A crowded draw moves on to the next sub-seed, deterministically."""
    for k in range(attempts):
        used = list(seed) + [k] if k else list(seed)
        try:
            return generate_scene(used, cfg, name), used
        except PlacementError:
            continue
    raise PlacementError(f"no placeable layout for {name} in {attempts} draws; use fewer objects")


def generate_dataset(out, seed: int, count: int, cfg: Optional[GenConfig] = None) -> List[Path]:
    cfg = cfg or GenConfig()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    names, seeds = [], []
    for i in range(count):
        name = f"scene_{i:04d}"
        scene, used = _generate_retrying([seed, i], cfg, name)
        save_scene(scene, out / name)
        names.append(name)
        seeds.append(used)
    info = {"seed": seed, "count": count, "config": asdict(cfg), "scenes": names, "scene_seeds": seeds}
    (out / DATASET).write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    return [out / n for n in names]


def load_dataset(path) -> List[Scene]:
    path = Path(path)
    if (path / META).exists():
        return [load_scene(path)]
    index = path / DATASET
    if index.exists():
        names = json.loads(index.read_text())["scenes"]
    else:
        names = sorted(p.name for p in path.iterdir() if (p / META).exists())
    if not names:
        raise MissingFileError(f"no scenes found under {path}")
    return [load_scene(path / n) for n in names]
