"""IoU-thresholded evaluation for grounding (top-1 accuracy) and detection (per-category AP)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff.tensor import no_grad
from .geometry import OrientedBox9, iou9
from .head import decode_box, query_scores
from .model import GroundingModel, SceneInputs, prepare_scene
from .scenes import CATEGORIES, CATEGORY_GROUPS, Scene, category_group

THRESHOLDS = (0.25, 0.5)
DETECT_MIN_SCORE = 0.1
SPLITS = ("easy", "hard", "view_indep", "view_dep")


@dataclass
class Metrics:
    ap25: float = 0.0
    ap50: float = 0.0
    ar25: float = 0.0
    ar50: float = 0.0
    n: int = 0


@dataclass
class EvalResult:
    task: str
    overall: Metrics
    splits: Dict[str, Metrics] = field(default_factory=dict)
    groups: Dict[str, Metrics] = field(default_factory=dict)
    per_category: Dict[str, Metrics] = field(default_factory=dict)

    @property
    def ap25(self) -> float:
        return self.overall.ap25

    @property
    def ap50(self) -> float:
        return self.overall.ap50

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self) -> List[tuple]:
        """Flat (section, name, ap25, ap50, ar25, ar50, n) rows for tabular export."""
        out = [("overall", "all", *_vals(self.overall))]
        out += [("split", k, *_vals(v)) for k, v in self.splits.items()]
        out += [("group", k, *_vals(v)) for k, v in self.groups.items()]
        out += [("category", k, *_vals(v)) for k, v in self.per_category.items()]
        return out


def _vals(m: Metrics) -> tuple:
    return m.ap25, m.ap50, m.ar25, m.ar50, m.n


# -- predictions --------------------------------------------------------------

@dataclass
class GroundingPrediction:
    scene: str
    prompt: int
    box: List[float]
    score: float
    candidates: List[List[float]] = field(default_factory=list)   # [box9..., score] per query


@dataclass
class Detection:
    scene: str
    box: List[float]
    score: float
    label: int


def predict_grounding(model: GroundingModel, scene: Scene, inputs: SceneInputs) -> List[GroundingPrediction]:
    """Top-1 box per prompt: the query maximizing center score x alignment score."""
    if not scene.prompts:
        return []
    with no_grad():
        out = model(inputs, [p.text for p in scene.prompts])
    scores = query_scores(out.last)
    raw = out.last.boxes.data
    preds = []
    for b, _ in enumerate(scene.prompts):
        order = np.argsort(-scores[b], kind="stable")
        cands = [list(decode_box(raw[b, q], out.anchors[b, q]).to_vector()) + [float(scores[b, q])] for q in order]
        preds.append(GroundingPrediction(scene.id, b, cands[0][:9], cands[0][9], cands))
    return preds


def predict_detection(model: GroundingModel, scene: Scene, inputs: SceneInputs,
                      min_score: float = DETECT_MIN_SCORE) -> List[Detection]:
    with no_grad():
        out = model(inputs)
    last = out.last
    ctr = 1.0 / (1.0 + np.exp(-last.center.data[0].astype(np.float64)))
    prob = 1.0 / (1.0 + np.exp(-last.logits.data[0].astype(np.float64)))
    dets = []
    for q in range(prob.shape[0]):
        label = int(np.argmax(prob[q]))
        score = float(ctr[q] * prob[q, label])
        if score > min_score:
            box = decode_box(last.boxes.data[0, q], out.anchors[0, q])
            dets.append(Detection(scene.id, list(box.to_vector()), score, label))
    return dets


# -- metrics ------------------------------------------------------------------

def average_precision(scores: Sequence[float], tp: Sequence[bool], n_gt: int) -> tuple:
    """All-point interpolated AP and final recall for one ranked list."""
    if n_gt == 0:
        return 0.0, 0.0
    if len(scores) == 0:
        return 0.0, 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(tp, dtype=np.float64)[order]
    ctp = np.cumsum(hits)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(hits) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1])), float(recall[-1])


def greedy_match(dets: Sequence[Detection], gts: Sequence[OrientedBox9], thr: float) -> List[bool]:
    """Highest score first; each GT matched at most once (best remaining IoU)."""
    used = np.zeros(len(gts), dtype=bool)
    tp = [False] * len(dets)
    for i in np.argsort([-d.score for d in dets], kind="stable"):
        box = OrientedBox9.from_vector(dets[i].box)
        best, best_j = thr, -1
        for j, g in enumerate(gts):
            if used[j]:
                continue
            iou = iou9(box, g)
            if iou >= best:
                best, best_j = iou, j
        if best_j >= 0:
            used[best_j] = True
            tp[i] = True
    return tp


def grounding_metrics(scenes: Sequence[Scene], preds: Sequence[GroundingPrediction]) -> EvalResult:
    by_key = {(p.scene, p.prompt): p for p in preds}
    records = []
    for s in scenes:
        for i, prompt in enumerate(s.prompts):
            tgt = s.objects[prompt.target]
            p = by_key.get((s.id, i))
            hit = {t: False for t in THRESHOLDS}
            reach = {t: False for t in THRESHOLDS}
            if p is not None:
                top = iou9(OrientedBox9.from_vector(p.box), tgt.box)
                cands = p.candidates or [list(p.box) + [p.score]]
                best = max(iou9(OrientedBox9.from_vector(c[:9]), tgt.box) for c in cands)
                best = max(best, top)
                hit = {t: top >= t for t in THRESHOLDS}
                reach = {t: best >= t for t in THRESHOLDS}
            records.append(dict(hit=hit, reach=reach, hard=prompt.hard, dep=prompt.view_dependent,
                                group=category_group(tgt.category), cat=CATEGORIES[tgt.category]))

    def agg(rs) -> Metrics:
        if not rs:
            return Metrics()
        return Metrics(ap25=float(np.mean([r["hit"][0.25] for r in rs])),
                       ap50=float(np.mean([r["hit"][0.5] for r in rs])),
                       ar25=float(np.mean([r["reach"][0.25] for r in rs])),
                       ar50=float(np.mean([r["reach"][0.5] for r in rs])), n=len(rs))

    splits = {"easy": agg([r for r in records if not r["hard"]]),
              "hard": agg([r for r in records if r["hard"]]),
              "view_indep": agg([r for r in records if not r["dep"]]),
              "view_dep": agg([r for r in records if r["dep"]])}
    groups = {g: agg([r for r in records if r["group"] == g]) for g in CATEGORY_GROUPS}
    cats = {c: agg([r for r in records if r["cat"] == c]) for c in CATEGORIES
            if any(r["cat"] == c for r in records)}
    return EvalResult("ground", agg(records), splits, groups, cats)


def detection_metrics(scenes: Sequence[Scene], dets: Sequence[Detection]) -> EvalResult:
    per_cat: Dict[str, Metrics] = {}
    for c, name in enumerate(CATEGORIES):
        n_gt = sum(1 for s in scenes for o in s.objects if o.category == c)
        if n_gt == 0:
            continue
        m = Metrics(n=n_gt)
        for thr in THRESHOLDS:
            scores, tps = [], []
            for s in scenes:
                ds = [d for d in dets if d.scene == s.id and d.label == c]
                gts = [o.box for o in s.objects if o.category == c]
                scores += [d.score for d in ds]
                tps += greedy_match(ds, gts, thr)
            ap, ar = average_precision(scores, tps, n_gt)
            key = "25" if thr == 0.25 else "50"
            setattr(m, "ap" + key, ap)
            setattr(m, "ar" + key, ar)
        per_cat[name] = m

    def mean_of(ms: List[Metrics]) -> Metrics:
        if not ms:
            return Metrics()
        return Metrics(*(float(np.mean([getattr(m, f) for m in ms])) for f in ("ap25", "ap50", "ar25", "ar50")),
                       n=sum(m.n for m in ms))

    groups = {g: mean_of([per_cat[CATEGORIES[c]] for c in members if CATEGORIES[c] in per_cat])
              for g, members in CATEGORY_GROUPS.items()}
    return EvalResult("detect", mean_of(list(per_cat.values())), {}, groups, per_cat)


# -- driver -------------------------------------------------------------------

def predict(model: GroundingModel, scenes: Sequence[Scene], cfg: dict, task: str,
            inputs: Optional[List[SceneInputs]] = None) -> list:
    model.eval()
    inputs = inputs if inputs is not None else [prepare_scene(s.views, cfg, seed=i) for i, s in enumerate(scenes)]
    preds: list = []
    for s, inp in zip(scenes, inputs):
        preds += predict_grounding(model, s, inp) if task == "ground" else predict_detection(model, s, inp)
    return preds


def score(scenes: Sequence[Scene], preds: list, task: str) -> EvalResult:
    return grounding_metrics(scenes, preds) if task == "ground" else detection_metrics(scenes, preds)


def evaluate(model: GroundingModel, scenes: Sequence[Scene], cfg: dict, task: str,
             inputs: Optional[List[SceneInputs]] = None) -> tuple:
    """(EvalResult, predictions)."""
    preds = predict(model, scenes, cfg, task, inputs)
    return score(scenes, preds, task), preds


def write_predictions(preds: list, path) -> None:
    with Path(path).open("w") as fh:
        for p in preds:
            fh.write(json.dumps(asdict(p), sort_keys=True) + "\n")


def read_predictions(path, task: str) -> list:
    cls = GroundingPrediction if task == "ground" else Detection
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append(cls(**{k: v for k, v in rec.items() if k in cls.__dataclass_fields__}))
    return out


def oracle_predictions(scenes: Sequence[Scene], task: str) -> list:
    """Ground-truth boxes as predictions with score 1 (an evaluation fixture)."""
    if task == "ground":
        return [GroundingPrediction(s.id, i, list(s.objects[p.target].box.to_vector()), 1.0)
                for s in scenes for i, p in enumerate(s.prompts)]
    return [Detection(s.id, list(o.box.to_vector()), 1.0, o.category) for s in scenes for o in s.objects]
