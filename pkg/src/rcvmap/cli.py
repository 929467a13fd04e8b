"""Command-line entry point: ``rcvmap {gen-data,train,eval,infer,render}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .errors import ConfigurationError, ContractError
from .evalkit import predictions_from_output, table_csv
from .map_model import VectorizedMap
from .netcore import images_to_tensor
from .render import MapDocumentError, read_map_document, render_svg
from .synthworld import SceneParams, export_dataset, load_images, make_sample
from .training import (
    DataConfig,
    OptimConfig,
    RunConfig,
    TrainingError,
    eval_report,
    evaluate_model,
    load_checkpoint,
    load_split,
    runs_root,
    train,
)

log = logging.getLogger("rcvmap")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    params = SceneParams()
    if args.params:
        params = SceneParams.from_dict(json.loads(Path(args.params).read_text()))
    if args.lanes:
        params = replace(params, lanes_per_approach=tuple(args.lanes))
    if args.image_size:
        params = replace(params, image_size=(args.image_size, args.image_size))
    samples = [make_sample(args.seed + k, params) for k in range(args.n_scenes)]
    manifest = export_dataset(samples, args.out, params, args.split_ratio)
    split = manifest["split"]
    print(
        f"wrote {len(manifest['scene_ids'])} scenes to {args.out} "
        f"(train {len(split['train'])}, val {len(split['val'])})"
    )
    print(Path(args.out) / "manifest.json")
    return 0


def build_run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    model = cfg.model
    if args.preset:
        model = replace(model, preset=args.preset)
    if args.neck:
        model = replace(model, neck_mode=args.neck)
    if args.image_size:
        model = replace(model, image_size=(args.image_size, args.image_size))
    data = cfg.data
    for key in ("dataset", "split", "seed"):
        val = getattr(args, key)
        if val is not None:
            data = replace(data, **{"dataset_dir" if key == "dataset" else key: val})
    if args.single_view:
        data = replace(data, single_view=True)
    optim = cfg.optim
    for key in ("lr", "steps", "epochs", "batch_size", "checkpoint_every"):
        val = getattr(args, key)
        if val is not None:
            optim = replace(optim, **{key: val})
    cfg = replace(cfg, model=model, data=data, optim=optim)
    if args.run_id:
        cfg = replace(cfg, run_id=args.run_id)
    if args.per_gt_argmin:
        cfg = replace(cfg, one_to_one=False)
    return cfg


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    run_dir = runs_root() / cfg.run_id

    def progress(rec):
        if rec["step"] % 50 == 0:
            log.info("step %d lr %.2e total %.4f", rec["step"], rec["lr"], rec["total"])

    state = train(cfg, run_dir, resume=args.resume, on_step=progress)
    print(f"trained {cfg.run_id} to step {state.step}; final loss {state.trace[-1]['total']:.5f}")
    print(run_dir / "checkpoints" / "last.pt")
    return 0


def _eval_dir(checkpoint: Path) -> Path:
    # runs/<id>/checkpoints/last.pt -> runs/<id>
    return checkpoint.resolve().parent.parent


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    cfg, state = load_checkpoint(checkpoint)
    dataset = args.dataset or cfg.data.dataset_dir
    split = args.split or "val"
    single_view = cfg.data.single_view
    scenes = load_split(dataset, split, single_view)
    eval_cfg = cfg.eval
    if args.thresholds:
        eval_cfg = replace(eval_cfg, thresholds=tuple(args.thresholds))
    breakdown, fps = evaluate_model(state.model, scenes, eval_cfg, gt_bypass=args.gt_as_predictions)
    report = eval_report(replace(cfg, eval=eval_cfg), breakdown, len(scenes), split, fps)
    timing = {"scenes_per_second": report.pop("scenes_per_second")}
    out_dir = Path(args.out) if args.out else _eval_dir(checkpoint) / "reports"
    tag = f"eval_{split}" + ("_gt" if args.gt_as_predictions else "")
    _write_json(out_dir / f"{tag}.json", report)
    _write_json(out_dir / f"{tag}_timing.json", timing)
    (out_dir / f"{tag}_table.csv").write_text(table_csv([(cfg.run_id, breakdown.table_row())]))
    row = breakdown.table_row()
    print(
        f"{cfg.run_id} [{split}] AP_ped {row['AP_ped']:.3f} AP_divider {row['AP_divider']:.3f} "
        f"AP_boundary {row['AP_boundary']:.3f} mAP {row['mAP']:.3f} ({fps:.1f} scenes/s)"
    )
    print(out_dir / f"{tag}.json")
    return 0


def cmd_infer(args) -> int:
    cfg, state = load_checkpoint(Path(args.checkpoint))
    single_view = args.single_view or cfg.data.single_view
    views = [0] if single_view else range(4)
    scene_dir = Path(args.scene_dir)
    try:
        images = load_images(scene_dir, views)
    except FileNotFoundError as exc:
        raise ContractError(str(exc)) from exc
    x = images_to_tensor(images).unsqueeze(0)
    state.model.eval()
    with torch.no_grad():
        out = state.model(x).final
    floor = cfg.eval.confidence_floor if args.confidence_floor is None else args.confidence_floor
    scored = predictions_from_output(
        out.class_logits[0].double().numpy(), out.points[0].double().numpy(), cfg.eval.range, floor
    )
    vmap = VectorizedMap(tuple(s.element for s in scored), cfg.eval.range, scene_dir.name)
    doc = vmap.to_dict()
    doc["scores"] = [s.score for s in scored]
    out_path = Path(args.out) if args.out else runs_root() / cfg.run_id / "predictions" / f"{scene_dir.name}.json"
    _write_json(out_path, doc)
    print(f"{len(scored)} elements -> {out_path}")
    return 0


def cmd_render(args) -> int:
    maps = [read_map_document(p) for p in args.maps]
    titles = args.titles or [Path(p).stem for p in args.maps]
    svg = render_svg(maps, titles)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rcvmap", description="Roadside multi-camera vectorized mapping toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and export synthetic intersection scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-scenes", type=int, default=8)
    g.add_argument("--out", required=True)
    g.add_argument("--split-ratio", type=float, default=0.75)
    g.add_argument("--params", help="scene parameter document")
    g.add_argument("--lanes", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.add_argument("--image-size", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="run config document")
    t.add_argument("--dataset")
    t.add_argument("--split")
    t.add_argument("--seed", type=int)
    t.add_argument("--preset", choices=["nano", "tiny"])
    t.add_argument("--neck", choices=["fpn", "panet"])
    t.add_argument("--image-size", type=int)
    t.add_argument("--single-view", action="store_true")
    t.add_argument("--lr", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--run-id")
    t.add_argument("--per-gt-argmin", action="store_true", help="independent argmin matching per GT element")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset")
    e.add_argument("--split", help="train | val | all (default val)")
    e.add_argument("--thresholds", type=float, nargs="+")
    e.add_argument("--gt-as-predictions", action="store_true", help="debug: score GT against itself")
    e.add_argument("--out", help="report directory")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict a map for one scene directory")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scene-dir", required=True)
    i.add_argument("--single-view", action="store_true")
    i.add_argument("--confidence-floor", type=float)
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("render", help="render map documents to SVG")
    r.add_argument("maps", nargs="+", help="one map, or ground truth then prediction")
    r.add_argument("--titles", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ContractError, MapDocumentError, TrainingError, OSError, ValueError) as exc:
        print(f"rcvmap {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
