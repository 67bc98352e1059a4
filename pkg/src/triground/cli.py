"""Command line interface. Exit codes: 0 success, 1 usage error, 2 runtime error."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from threadpoolctl import threadpool_limits

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(path: Optional[str]) -> dict:
    from .encoder import load_config
    try:
        return load_config(path or "desk.json")
    except FileNotFoundError as e:
        raise UsageError(f"config not found: {path}") from e


def cmd_gen(args) -> int:
    from .scenes import GenConfig, generate_dataset
    cfg = _config(args.config)
    data = dict(cfg.get("data", {}))
    views = args.views
    if views is None and args.split == "eval":
        views = data.get("views_eval")
    gen = GenConfig.from_dict(data, n_views=views)
    paths = generate_dataset(args.out, args.seed, args.count, gen)
    print(f"wrote {len(paths)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import merge_config
    from .scenes import load_dataset
    from .train import train
    cfg = _config(args.config)
    over = {}
    if args.epochs is not None:
        over["train"] = {"epochs": args.epochs}
    if args.seed is not None:
        over.setdefault("train", {})["seed"] = args.seed
        over["model"] = {"seed": args.seed}
    cfg = merge_config(cfg, over)
    scenes = load_dataset(args.data)
    res = train(scenes, args.task, cfg, Path(args.out))
    losses = res.epoch_losses()
    print(f"trained {len(losses)} epochs on {len(scenes)} scenes; "
          f"loss {losses[0]:.4f} -> {losses[-1]:.4f}; checkpoint in {Path(args.out) / 'checkpoint'}")
    return EXIT_OK


def _run_dir(ckpt: str) -> Path:
    from .train import CONFIG
    p = Path(ckpt)
    for cand in (p, p.parent):
        if (cand / CONFIG).exists():
            return cand
    raise UsageError(f"{ckpt} is not a training output directory (no {CONFIG})")


def cmd_eval(args) -> int:
    from .evaluate import evaluate, oracle_predictions, read_predictions, score, write_predictions
    from .report import write_report
    from .scenes import load_dataset
    from .train import load_trained
    scenes = load_dataset(args.data)
    if args.predictions:
        task = args.task or "ground"
        preds = read_predictions(args.predictions, task)
        result = score(scenes, preds, task)
    elif args.oracle:
        task = args.task or "ground"
        preds = oracle_predictions(scenes, task)
        result = score(scenes, preds, task)
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt (or --predictions / --oracle)")
        model, cfg, trained_task = load_trained(_run_dir(args.ckpt))
        task = args.task or trained_task
        if task != trained_task:
            raise UsageError(f"checkpoint was trained for {trained_task!r}, not {task!r}")
        result, preds = evaluate(model, scenes, cfg, task)
    report = Path(args.report)
    files = write_report(result, report)
    write_predictions(preds, report.with_suffix(".predictions.jsonl"))
    o = result.overall
    print(f"task={task} n={o.n}")
    print(f"AP@0.25={o.ap25:.4f} AP@0.5={o.ap50:.4f} AR@0.25={o.ar25:.4f} AR@0.5={o.ar50:.4f}")
    for name, m in result.splits.items():
        print(f"  {name:<10} n={m.n:<4d} AP@0.25={m.ap25:.4f} AP@0.5={m.ap50:.4f}")
    print("report: " + ", ".join(str(f) for f in files))
    return EXIT_OK


def cmd_ground(args) -> int:
    from .evaluate import predict_grounding
    from .model import prepare_scene
    from .scenes import load_dataset
    from .train import load_trained
    scenes = load_dataset(args.data)
    if not 0 <= args.scene < len(scenes):
        raise UsageError(f"--scene must be in [0, {len(scenes)})")
    scene = scenes[args.scene]
    if not 0 <= args.prompt_index < len(scene.prompts):
        raise UsageError(f"--prompt-index must be in [0, {len(scene.prompts)}) for {scene.id}")
    model, cfg, task = load_trained(_run_dir(args.ckpt))
    if task != "ground":
        raise UsageError("this checkpoint was trained for detection")
    pred = predict_grounding(model, scene, prepare_scene(scene.views, cfg, seed=args.scene))[args.prompt_index]
    rec = {"scene": scene.id, "prompt": scene.prompts[args.prompt_index].text,
           "box": [round(v, 6) for v in pred.box], "score": round(pred.score, 6)}
    print(json.dumps(rec))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_scope
    results = run_scope(args.scope, args.seed)
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<22} max_rel_err={r.max_rel_err:.3e} "
              f"tol={r.tol:.0e} coords={r.n_checked}")
    return EXIT_OK if ok else EXIT_RUNTIME


def params_table(cfg: dict, task: str = "ground") -> dict:
    """Exact parameter report without allocating weights."""
    from .autodiff.nn import shape_only
    from .encoder import EncoderConfig, adapter_closed_form
    from .model import GroundingModel
    with shape_only():
        model = GroundingModel(cfg, task)
    rep = model.report()
    rep["encoder_adapter_closed_form"] = adapter_closed_form(EncoderConfig.from_dict(cfg["encoder"]),
                                                             with_text=(task == "ground"))
    return rep


def cmd_params(args) -> int:
    cfg = _config(args.config)
    rep = params_table(cfg, args.task)
    print(f"{'group':<10}{'trainable':>14}{'frozen':>14}{'total':>14}")
    for name, row in rep["groups"].items():
        print(f"{name:<10}{row['trainable']:>14,}{row['frozen']:>14,}{row['trainable'] + row['frozen']:>14,}")
    print(f"{'all':<10}{rep['trainable']:>14,}{rep['frozen']:>14,}{rep['total']:>14,}")
    enc = rep["modules"]["encoder"]
    frac = enc["trainable"] / (enc["trainable"] + enc["frozen"])
    print(f"encoder adapters: {enc['trainable']:,} (closed form {rep['encoder_adapter_closed_form']:,}); "
          f"encoder trainable fraction {100 * frac:.2f}%")
    print(f"overall trainable fraction {100 * rep['trainable'] / rep['total']:.2f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="triground", description="Tri-modal 3D visual grounding on synthetic RGB-D scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON config or preset name (default desk.json)")
    g.add_argument("--split", choices=("train", "eval"), default="train", help="selects the view count preset")
    g.add_argument("--views", type=int, help="override the number of views per scene")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--task", choices=("ground", "detect"), default="ground")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int, help="override the training and init seeds")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write a report")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", help="training output directory")
    e.add_argument("--task", choices=("ground", "detect"))
    e.add_argument("--report", required=True, help="JSON report path; CSV/PNG/predictions are written beside it")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--predictions", help="score an existing predictions file instead of a checkpoint")
    src.add_argument("--oracle", action="store_true", help="score ground truth as predictions")
    e.set_defaults(func=cmd_eval)

    gr = sub.add_parser("ground", help="print the grounded box for one prompt")
    gr.add_argument("--data", required=True)
    gr.add_argument("--ckpt", required=True)
    gr.add_argument("--prompt-index", type=int, required=True)
    gr.add_argument("--scene", type=int, default=0, help="scene index within the dataset")
    gr.set_defaults(func=cmd_ground)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--scope", choices=("op", "module", "e2e"), required=True)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    pa = sub.add_parser("params", help="trainable/frozen parameter report")
    pa.add_argument("--config")
    pa.add_argument("--task", choices=("ground", "detect"), default="ground")
    pa.set_defaults(func=cmd_params)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"triground: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"triground: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
