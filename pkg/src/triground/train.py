"""Training loop: seeded shuffling, full-pipeline forward, match loss, AdamW on
trainable parameters only, JSON-lines metrics, checkpoint and parameter report."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .autodiff.optim import AdamW, ParamStore
from .head import Target
from .model import GroundingModel, SceneInputs, prepare_scene, save_config
from .scenes import Scene

log = logging.getLogger(__name__)

TASKS = ("ground", "detect")
METRICS = "metrics.jsonl"
REPORT = "param_report.json"
CONFIG = "config.json"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 12
    lr: float = 2e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-5
    seed: int = 0
    max_prompts: int = 4

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "TrainConfig":
        d = dict(d or {})
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainResult:
    model: GroundingModel
    history: List[dict] = field(default_factory=list)
    frozen_before: str = ""
    frozen_after: str = ""
    optimizer: Optional[AdamW] = None

    def epoch_losses(self) -> List[float]:
        by_epoch: Dict[int, List[float]] = {}
        for rec in self.history:
            by_epoch.setdefault(rec["epoch"], []).append(rec["total"])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def scene_targets(scene: Scene, task: str, max_prompts: Optional[int] = None):
    """(prompts, targets) for one scene; detection has a single all-object target."""
    if task == "ground":
        prompts = scene.prompts[:max_prompts] if max_prompts else scene.prompts
        return [p.text for p in prompts], [Target([scene.objects[p.target].box]) for p in prompts]
    if task == "detect":
        return None, [Target([o.box for o in scene.objects], [o.category for o in scene.objects])]
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def _head_tensors(output):
    # matching needs finite costs, so these are checked before the loss
    for k, layer in enumerate(output.layers):
        for name in ("logits", "boxes", "center"):
            yield f"layer {k} {name}", getattr(layer, name)


def prepare_all(scenes: Sequence[Scene], cfg: dict) -> List[SceneInputs]:
    return [prepare_scene(s.views, cfg, seed=i) for i, s in enumerate(scenes)]


def train(scenes: Sequence[Scene], task: str, cfg: dict, out: Optional[Path] = None,
          inputs: Optional[List[SceneInputs]] = None, model: Optional[GroundingModel] = None,
          on_step: Optional[Callable[[dict], None]] = None, optimizer: Optional[AdamW] = None) -> TrainResult:
    """Train on ``scenes``; writes metrics, checkpoint and reports under ``out`` if given.

    Passing back ``model`` and ``optimizer`` from an earlier result continues that run.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    tcfg = TrainConfig.from_dict(cfg.get("train"))
    if task == "ground":
        usable = [i for i, s in enumerate(scenes) if s.prompts]
        if not usable:
            raise ValueError("no scene has a prompt to ground")
    else:
        usable = list(range(len(scenes)))
    inputs = inputs if inputs is not None else prepare_all(scenes, cfg)
    model = model or GroundingModel(cfg, task)
    model.train()
    store = ParamStore.from_module(model)
    opt = optimizer or AdamW(store, lr=tcfg.lr, betas=tcfg.betas, weight_decay=tcfg.weight_decay)
    store = opt.store
    rng = np.random.default_rng(tcfg.seed)
    result = TrainResult(model, frozen_before=store.frozen_digest(), optimizer=opt)

    sink = None
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        sink = (out / METRICS).open("w")
    try:
        step = 0
        for epoch in range(tcfg.epochs):
            for i in rng.permutation(usable):
                scene = scenes[i]
                prompts, targets = scene_targets(scene, task, tcfg.max_prompts)
                store.zero_grad()
                output = model(inputs[i], prompts)
                where = f"epoch {epoch} step {step} (scene {scene.id})"
                bad = [name for name, t in _head_tensors(output) if not np.all(np.isfinite(t.data))]
                if bad:
                    raise TrainingDiverged(f"non-finite {', '.join(bad)} at {where}; loss not computed")
                loss, parts = model.loss(output, targets)
                if not math.isfinite(parts["total"]):
                    raise TrainingDiverged(f"non-finite loss at {where}: {parts}")
                loss.backward()
                opt.step()
                rec = {"epoch": epoch, "step": step, "scene": scene.id, "lr": tcfg.lr,
                       **{k: round(float(v), 8) for k, v in parts.items()}}
                result.history.append(rec)
                if sink is not None:
                    sink.write(json.dumps(rec, sort_keys=True) + "\n")
                if on_step is not None:
                    on_step(rec)
                step += 1
            log.info("epoch %d mean loss %.4f", epoch, result.epoch_losses()[-1])
    finally:
        if sink is not None:
            sink.close()
    model.eval()
    result.frozen_after = store.frozen_digest()
    if out is not None:
        write_artifacts(result, cfg, task, out)
    return result


def write_artifacts(result: TrainResult, cfg: dict, task: str, out: Path) -> None:
    from .report import plot_loss_curve

    save_checkpoint(result.model, out / "checkpoint")
    save_config({**cfg, "task": task}, out / CONFIG)
    rep = result.model.report()
    rep["frozen_digest_before"] = result.frozen_before
    rep["frozen_digest_after"] = result.frozen_after
    (out / REPORT).write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
    plot_loss_curve(result.history, out / "loss_curve.png")


def load_trained(run_dir) -> tuple:
    """(model, config, task) from a training output directory."""
    run_dir = Path(run_dir)
    cfg = json.loads((run_dir / CONFIG).read_text())
    task = cfg.pop("task", "ground")
    model = GroundingModel(cfg, task)
    load_checkpoint(model, run_dir / "checkpoint")
    model.eval()
    return model, cfg, task
