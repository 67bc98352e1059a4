"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest
from test_cli import same_tree
from test_encoder import backbone_closed_form
import test_garf
from test_head import brute_force

from triground import bench
from triground.autodiff import Tensor, default_dtype
from triground.checks import run_scope
from triground.cli import main, params_table
from triground.encoder import EncoderConfig, adapter_closed_form, load_config
from triground.garf import APIF, SparseTensor3D, sparse_conv3d
from triground.geometry import CameraView, OrientedBox9, iou9, look_at, project
from triground.head import hungarian
from triground.model import GroundingModel, merge_config, prepare_scene
from triground.scenes import GenConfig, generate_scene
from triground.train import train

PRIMITIVE_TOL, COMPOSED_TOL = 1e-6, 1e-4
COMPOSED = {"garf", "decoder_layer", "head_loss"}


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})")
        return ok
    return emit


def test_adapter_identity_at_init(verdict, desk_cfg):
    t0 = time.perf_counter()
    model = GroundingModel(desk_cfg, "ground")
    scene = generate_scene(5, GenConfig.from_dict(desk_cfg["data"]))
    inputs = prepare_scene(scene.views, desk_cfg)
    prompts = [p.text for p in scene.prompts]
    on = model.features(inputs, prompts, use_adapters=True)
    off = model.features(inputs, prompts, use_adapters=False)
    diffs = [np.abs(on[0].feats.data - off[0].feats.data).max(),
             np.abs(on[1].tokens.data - off[1].tokens.data).max()]
    diffs += [np.abs(on[3][k].data - off[3][k].data).max() for k in ("image_tokens", "point_tokens")]
    a, b = model(inputs, prompts, use_adapters=True), model(inputs, prompts, use_adapters=False)
    for la, lb in zip(a.layers, b.layers):
        diffs += [np.abs(getattr(la, k).data - getattr(lb, k).data).max() for k in ("logits", "boxes", "center")]
    worst, secs = float(max(diffs)), time.perf_counter() - t0
    ok = worst <= 1e-6 and secs < 10
    assert verdict(1, "adapter identity at init", ok, f"max abs diff {worst:.2e}, {secs:.1f}s")


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_scope("op") + run_scope("module")
    secs = time.perf_counter() - t0
    bad = [r.name for r in results
           if r.max_rel_err > (COMPOSED_TOL if r.name in COMPOSED else PRIMITIVE_TOL)]
    prim = max(r.max_rel_err for r in results if r.name not in COMPOSED)
    comp = max(r.max_rel_err for r in results if r.name in COMPOSED)
    ok = not bad and secs < 300
    assert verdict(2, "gradient suite", ok, f"{len(results)} checks, primitives max {prim:.1e}, "
                   f"composed max {comp:.1e}, {secs:.0f}s" + (f", failed {bad}" if bad else ""))


class _Stop(Exception):
    pass


def test_frozen_backbone_invariance(verdict, desk_cfg):
    t0 = time.perf_counter()
    cfg = merge_config(desk_cfg, {"train": {"epochs": 20}})
    scenes = [generate_scene(s, GenConfig.from_dict(cfg["data"])) for s in range(40, 44)]
    model = GroundingModel(cfg, "ground")
    frozen = {n: p.data.tobytes() for n, p in model.named_parameters() if p.frozen}
    trainable = {n: p.data.copy() for n, p in model.named_parameters() if not p.frozen}
    steps = []

    def stop_at_50(rec):
        steps.append(rec["step"])
        if len(steps) == 50:
            raise _Stop

    with pytest.raises(_Stop):
        train(scenes, "ground", cfg, model=model, on_step=stop_at_50)
    same = all(p.data.tobytes() == frozen[n] for n, p in model.named_parameters() if p.frozen)
    moved = sum(not np.array_equal(p.data, trainable[n]) for n, p in model.named_parameters() if not p.frozen)
    secs = time.perf_counter() - t0
    ok = same and len(steps) == 50 and moved > 0 and secs < 120
    assert verdict(3, "frozen backbone invariance", ok, f"{len(frozen)} frozen tensors byte-identical={same}, "
                   f"{moved} trainable tensors moved, {len(steps)} steps, {secs:.0f}s")


def test_parameter_accounting(verdict, capsys):
    checks = []
    for preset in ("desk.json", "paper_scale.json"):
        cfg = load_config(preset)
        ecfg = EncoderConfig.from_dict(cfg["encoder"])
        enc = params_table(cfg)["modules"]["encoder"]
        d, dt, ps = ecfg.d_model, ecfg.text_d_model, ecfg.patch_size
        frozen = (backbone_closed_form(d, ecfg.layers) + d * 3 * ps * ps + d + ecfg.image_tokens * d
                  + backbone_closed_form(dt, ecfg.text_layers) + 259 * dt + ecfg.text_max_len * dt)
        checks.append(enc["trainable"] == adapter_closed_form(ecfg) and enc["frozen"] == frozen)
        if preset == "desk.json":
            frac = enc["trainable"] / (enc["trainable"] + enc["frozen"])
    assert main(["params", "--config", "desk.json"]) == 0
    out = capsys.readouterr().out
    desk = params_table(load_config("desk.json"))
    checks.append(f"{desk['trainable']:,}" in out and f"{desk['frozen']:,}" in out)
    ok = all(checks) and frac < 0.10
    assert verdict(4, "parameter accounting", ok, f"closed forms match {checks}, "
                   f"desk encoder trainable fraction {100 * frac:.2f}%")


def _mc_iou(a, b, n, rng):
    inside = 0
    for _ in range(n // 10 ** 6):
        local = rng.uniform(-0.5, 0.5, (10 ** 6, 3)) * a.size
        inside += int(b.contains(local @ a.R.T + a.center).sum())
    inter = a.volume * inside / n
    return inter / (a.volume + b.volume - inter)


def test_oracle_equivalences(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    notes = {}

    worst = 0.0
    for _ in range(100):
        R, t = look_at(rng.uniform(-3, 3, 3) + [0, 0, 4.0], rng.uniform(-0.5, 0.5, 3))
        cam = CameraView(16.0, 16.0, 16.0, 16.0, R, t, width=32, height=32)
        x = rng.uniform(-1, 1, (20, 3))
        p = project(x, cam)
        for i, xi in enumerate(x):
            c = [sum(R[r][k] * xi[k] for k in range(3)) + t[r] for r in range(3)]
            if p.visible[i]:
                worst = max(worst, abs(p.u[i] - (16 * c[0] / c[2] + 16)), abs(p.v[i] - (16 * c[1] / c[2] + 16)))
    notes["projection"] = worst <= 1e-5

    worst = 0.0
    for stride, n in ((1, 3), (2, 20)):
        coords = np.unique(rng.integers(-3, 4, (60, 3)), axis=0)[:n] if stride == 2 else \
            np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
        feats, w = rng.normal(size=(n, 4)), rng.normal(size=(27, 4, 3))
        out = sparse_conv3d(SparseTensor3D(coords, Tensor(feats), 0.1), Tensor(w), stride=stride)
        ref_c, ref = test_garf.dense_conv_oracle(coords, feats, w, stride)
        assert np.array_equal(out.coords, ref_c)
        worst = max(worst, np.abs(out.feats.data - ref).max())
    notes["sparse_conv"] = worst <= 1e-5

    with default_dtype(np.float64):
        apif = APIF(4, 4, rng)
    for p in apif.parameters():
        p.data = rng.normal(size=p.shape)
    fs, fp = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    got = apif(Tensor(fs), Tensor(fp))[0].data
    notes["apif"] = np.abs(got - test_garf.TestAPIF().scalar_oracle(apif, fs, fp)).max() <= 1e-6

    notes["hungarian"] = all(hungarian(c) == brute_force(c)[0]
                             for c in (rng.integers(0, 4, (6, 6)).astype(float) for _ in range(200)))

    exact = True
    for _ in range(50):
        # dyadic boxes keep the analytic overlap exact in floating point
        ca, cb = rng.integers(-8, 8, 3) / 8, rng.integers(-8, 8, 3) / 8
        sa, sb = rng.integers(1, 8, 3) / 4, rng.integers(1, 8, 3) / 4
        ov = np.maximum(0, np.minimum(ca + sa / 2, cb + sb / 2) - np.maximum(ca - sa / 2, cb - sb / 2))
        inter = float(np.prod(ov))
        exact &= iou9(OrientedBox9(ca, sa), OrientedBox9(cb, sb)) == inter / (np.prod(sa) + np.prod(sb) - inter)
    notes["iou_axis_aligned"] = bool(exact)

    pairs = [(OrientedBox9((0, 0, 0), (1, 1, 1)), OrientedBox9((0, 0, 0), (1, 1, 1), (math.pi / 4, 0, 0))),
             (OrientedBox9((0, 0, 0), (1.2, 0.6, 0.8), (0.3, 0.1, -0.2)),
              OrientedBox9((0.3, 0.1, 0.05), (0.9, 0.9, 0.5), (-0.5, 0, 0.15)))]
    mc = np.random.default_rng(20261015)
    notes["iou_oriented"] = all(abs(iou9(a, b) - _mc_iou(a, b, 10 ** 7, mc)) <= 0.02 for a, b in pairs)

    secs = time.perf_counter() - t0
    ok = all(notes.values()) and secs < 300
    assert verdict(5, "oracle equivalences", ok, ", ".join(f"{k}={v}" for k, v in notes.items()) + f", {secs:.0f}s")


def test_overfit(verdict):
    res = bench.overfit()
    ok = res.ap25 >= 0.9 and res.loss_ratio <= 0.1 and res.epochs <= 300 and res.seconds <= 900
    assert verdict(6, "overfit 8 scenes", ok, f"AP@0.25 {res.ap25:.3f} after {res.epochs} epochs, "
                   f"loss {res.initial_loss:.2f} -> {res.final_loss:.2f} (ratio {res.loss_ratio:.3f}), "
                   f"{res.seconds:.0f}s")


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    t0 = time.perf_counter()
    runs = bench.ablation(out=tmp_path_factory.mktemp("ablation"))
    return runs, time.perf_counter() - t0


def _ablation_verdict(verdict, number, title, runs, secs, other):
    med = bench.medians(runs)
    per = {v: [r.ap25 for r in runs if r.variant == v] for v in ("full", other)}
    secs_pair = sum(r.seconds for r in runs if r.variant in ("full", other))
    ok = med["full"] >= med[other] and secs <= 45 * 60
    return verdict(number, title, ok, f"median AP@0.25 full {med['full']:.4f} vs {other} {med[other]:.4f}; "
                   f"per seed {per}; {secs_pair / 60:.1f} min training+eval for this pair, "
                   f"{secs / 60:.1f} min whole sweep")


def test_garf_ablation(verdict, ablation):
    runs, secs = ablation
    assert _ablation_verdict(verdict, 7, "GARF ablation direction", runs, secs, "no_garf")


def test_image_branch_ablation(verdict, ablation):
    runs, secs = ablation
    assert _ablation_verdict(verdict, 8, "decoder image-branch ablation direction", runs, secs, "no_image_branch")


def test_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    codes = []
    for name in ("a", "b"):
        root = tmp_path / name
        codes.append(main(["gen", "--seed", "9", "--count", "3", "--out", str(root / "data"), "--views", "2"]))
        codes.append(main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--epochs", "2",
                           "--seed", "3"]))
        codes.append(main(["eval", "--data", str(root / "data"), "--ckpt", str(root / "run"),
                           "--report", str(root / "eval" / "report.json")]))
    same = {part: same_tree(tmp_path / "a" / part, tmp_path / "b" / part) for part in ("data", "run", "eval")}
    secs = time.perf_counter() - t0
    ok = all(c == 0 for c in codes) and all(same.values()) and secs < 600
    assert verdict(9, "determinism", ok, f"byte-identical {same}, {secs:.0f}s")
