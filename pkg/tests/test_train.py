import json
import math

import numpy as np
import pytest

from triground.autodiff.optim import ParamStore
from triground.model import GroundingModel, merge_config
from triground.scenes import GenConfig, generate_scene
from triground.train import METRICS, REPORT, TrainingDiverged, load_trained, scene_targets, train


@pytest.fixture(scope="module")
def scenes(desk_cfg):
    cfg = GenConfig.from_dict(desk_cfg["data"], n_views=2)
    return [generate_scene(s, cfg) for s in (21, 22)]


def small(desk_cfg, **train):
    return merge_config(desk_cfg, {"train": {"epochs": 1, "max_prompts": 2, **train}})


def test_zero_lr_keeps_trainable(scenes, desk_cfg):
    cfg = small(desk_cfg, lr=0.0, weight_decay=0.0)
    model = GroundingModel(cfg, "ground")
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    train(scenes, "ground", cfg, model=model)
    for n, p in model.named_parameters():
        np.testing.assert_array_equal(p.data, before[n], err_msg=n)


def test_frozen_backbone_untouched(scenes, desk_cfg, tmp_path):
    res = train(scenes, "ground", small(desk_cfg), out=tmp_path)
    assert res.frozen_before == res.frozen_after
    assert res.frozen_after == ParamStore.from_module(res.model).frozen_digest()
    rep = json.loads((tmp_path / REPORT).read_text())
    assert rep["frozen_digest_before"] == rep["frozen_digest_after"]
    assert (tmp_path / "loss_curve.png").stat().st_size > 0


def test_metrics_log(scenes, desk_cfg, tmp_path):
    res = train(scenes, "ground", small(desk_cfg, epochs=2), out=tmp_path)
    recs = [json.loads(line) for line in (tmp_path / METRICS).read_text().splitlines()]
    assert len(recs) == 4 and [r["step"] for r in recs] == [0, 1, 2, 3]
    for r in recs:
        assert {"cls", "box", "center", "select", "total", "epoch", "scene"} <= set(r)
        assert math.isfinite(r["total"])
    assert len(res.epoch_losses()) == 2


def test_deterministic(scenes, desk_cfg):
    a = train(scenes, "ground", small(desk_cfg)).history
    b = train(scenes, "ground", small(desk_cfg)).history
    assert a == b


def test_checkpoint_reload(scenes, desk_cfg, tmp_path):
    res = train(scenes, "ground", small(desk_cfg), out=tmp_path)
    model, cfg, task = load_trained(tmp_path)
    assert task == "ground"
    for (n, p), (_, q) in zip(res.model.named_parameters(), model.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=n)


def test_detection_runs(scenes, desk_cfg):
    res = train(scenes, "detect", small(desk_cfg))
    assert all(math.isfinite(r["total"]) for r in res.history)
    _, targets = scene_targets(scenes[0], "detect")
    assert len(targets[0].boxes) == len(scenes[0].objects)


def test_non_finite_loss_aborts(scenes, desk_cfg):
    cfg = small(desk_cfg)
    model = GroundingModel(cfg, "ground")
    model.head.log_scale.data[...] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0 step 0"):
        train(scenes, "ground", cfg, model=model)


def test_errors(scenes, desk_cfg):
    with pytest.raises(ValueError):
        train([], "ground", desk_cfg)
    with pytest.raises(ValueError):
        train(scenes, "segment", desk_cfg)
