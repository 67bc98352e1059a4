"""Fixed synthetic benchmarks: the training-set overfit run and seeded ablations."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median
from typing import Dict, List, Optional, Sequence

from .evaluate import evaluate
from .model import default_config, merge_config
from .scenes import GenConfig, Scene, generate_dataset, load_dataset
from .train import prepare_all, train

log = logging.getLogger(__name__)

VARIANTS = {
    "full": {},
    "no_garf": {"model": {"use_garf": False}},
    "no_image_branch": {"head": {"use_image_branch": False}},
}


def make_split(seed: int, count: int, cfg: dict, split: str = "train", out: Optional[Path] = None) -> List[Scene]:
    """Generate (and round-trip through disk when ``out`` is given) a benchmark split."""
    data = dict(cfg.get("data", {}))
    views = data.get("views_eval") if split == "eval" else None
    gen = GenConfig.from_dict(data, n_views=views)
    if out is None:
        import tempfile
        with tempfile.TemporaryDirectory() as tmp:
            generate_dataset(Path(tmp), seed, count, gen)
            return load_dataset(Path(tmp))
    generate_dataset(out, seed, count, gen)
    return load_dataset(out)


@dataclass
class OverfitResult:
    ap25: float
    initial_loss: float
    final_loss: float
    epochs: int
    seconds: float
    epoch_losses: List[float] = field(default_factory=list)

    @property
    def loss_ratio(self) -> float:
        return self.final_loss / self.initial_loss


def overfit(n_scenes: int = 8, max_epochs: int = 300, data_seed: int = 1000, cfg: Optional[dict] = None,
            target_ap: float = 0.9, check_every: int = 10) -> OverfitResult:
    """Train on ``n_scenes`` and score on the same scenes; stops early once both goals are met."""
    cfg = copy.deepcopy(cfg or default_config())
    scenes = make_split(data_seed, n_scenes, cfg)
    inputs = prepare_all(scenes, cfg)
    t0 = time.perf_counter()
    model, opt, history, ap = None, None, [], 0.0
    done = 0
    while done < max_epochs:
        chunk = min(check_every, max_epochs - done)
        run_cfg = merge_config(cfg, {"train": {"epochs": chunk, "seed": cfg["train"].get("seed", 0) + done}})
        res = train(scenes, "ground", run_cfg, inputs=inputs, model=model, optimizer=opt)
        model, opt = res.model, res.optimizer
        history += [{**r, "epoch": r["epoch"] + done} for r in res.history]
        done += chunk
        result, _ = evaluate(model, scenes, cfg, "ground", inputs)
        ap = result.ap25
        losses = _epoch_means(history)
        log.info("overfit epoch %d loss %.4f AP@0.25 %.3f", done, losses[-1], ap)
        if ap >= target_ap and losses[-1] <= 0.1 * losses[0]:
            break
    losses = _epoch_means(history)
    return OverfitResult(ap, losses[0], losses[-1], done, time.perf_counter() - t0, losses)


def _epoch_means(history: Sequence[dict]) -> List[float]:
    by: Dict[int, List[float]] = {}
    for r in history:
        by.setdefault(r["epoch"], []).append(r["total"])
    return [sum(v) / len(v) for _, v in sorted(by.items())]


@dataclass
class AblationRun:
    variant: str
    seed: int
    ap25: float
    ap50: float
    final_loss: float
    seconds: float


def ablation(variants: Sequence[str] = ("full", "no_garf", "no_image_branch"), seeds: Sequence[int] = (0, 1, 2),
             n_train: int = 64, n_eval: int = 16, epochs: int = 40, train_seed: int = 2000, eval_seed: int = 3000,
             cfg: Optional[dict] = None, out: Optional[Path] = None) -> List[AblationRun]:
    """Equal-budget comparison on a fixed benchmark; each seed sets both init and shuffling."""
    base = copy.deepcopy(cfg or default_config())
    train_scenes = make_split(train_seed, n_train, base, "train")
    eval_scenes = make_split(eval_seed, n_eval, base, "eval")
    train_inputs = prepare_all(train_scenes, base)
    eval_inputs = prepare_all(eval_scenes, base)
    runs = []
    for name in variants:
        for seed in seeds:
            run_cfg = merge_config(base, VARIANTS[name])
            run_cfg = merge_config(run_cfg, {"train": {"epochs": epochs, "seed": seed}, "model": {"seed": seed}})
            t0 = time.perf_counter()
            res = train(train_scenes, "ground", run_cfg, inputs=train_inputs)
            result, _ = evaluate(res.model, eval_scenes, run_cfg, "ground", eval_inputs)
            run = AblationRun(name, seed, result.ap25, result.ap50, res.epoch_losses()[-1], time.perf_counter() - t0)
            log.info("%s", run)
            runs.append(run)
    if out is not None:
        write_ablation(runs, out)
    return runs


def medians(runs: Sequence[AblationRun]) -> Dict[str, float]:
    table: Dict[str, List[float]] = {}
    for r in runs:
        table.setdefault(r.variant, []).append(r.ap25)
    return {k: median(v) for k, v in table.items()}


def write_ablation(runs: Sequence[AblationRun], out) -> List[Path]:
    from dataclasses import asdict

    from .report import plot_ablation
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    js = out / "ablation.json"
    js.write_text(json.dumps({"runs": [asdict(r) for r in runs], "median_ap25": medians(runs)},
                             indent=1, sort_keys=True) + "\n")
    table: Dict[str, List[float]] = {}
    for r in runs:
        table.setdefault(r.variant, []).append(r.ap25)
    png = plot_ablation(table, out / "ablation.png", "eval AP@0.25 per seed")
    return [js, png]
