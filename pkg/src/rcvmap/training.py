"""Run configuration, training loop, checkpoints and evaluation runs."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, ContractError
from .evalkit import ApBreakdown, EvalConfig, evaluate, gt_as_predictions, predictions_from_output
from .map_model import VectorizedMap
from .matching import LossReport, LossWeights, Targets, total_loss
from .netcore import MapNet, ModelConfig, build_model, images_to_tensor
from .synthworld import load_images, load_manifest, load_map

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
RUNS_ENV = "RCVMAP_RUNS"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DataConfig:
    dataset_dir: str = "data"
    split: str = "train"
    seed: int = 0
    single_view: bool = False


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    schedule: str = "cosine"  # cosine | constant
    warmup_steps: int = 50
    min_lr_ratio: float = 0.01
    steps: int = 3000
    epochs: int | None = None  # converted to steps when set
    batch_size: int = 2
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    checkpoint_every: int = 500
    log_every: int = 1

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigurationError("steps must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be at least 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run_id: str = "run"
    one_to_one: bool = True

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "weights": asdict(self.weights),
            "eval": self.eval.to_dict(),
            "data": asdict(self.data),
            "optim": asdict(self.optim),
            "run_id": self.run_id,
            "one_to_one": self.one_to_one,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            model=ModelConfig.from_dict(d.get("model", {"image_size": (128, 128)})),
            weights=LossWeights(**d.get("weights", {})),
            eval=EvalConfig.from_dict(d["eval"]) if "eval" in d else EvalConfig(),
            data=DataConfig(**d.get("data", {})),
            optim=OptimConfig(**d.get("optim", {})),
            run_id=d.get("run_id", "run"),
            one_to_one=d.get("one_to_one", True),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


# ------------------------------------------------------------------ data


@dataclass
class SceneSet:
    ids: list[str]
    images: torch.Tensor  # (S, V, 3, H, W)
    maps: list[VectorizedMap]

    def __len__(self) -> int:
        return len(self.ids)

    def targets(self, idx: Sequence[int]) -> list[Targets]:
        return [Targets.from_map(self.maps[i]) for i in idx]


def load_split(dataset_dir, split: str = "train", single_view: bool = False) -> SceneSet:
    dataset_dir = Path(dataset_dir)
    if not (dataset_dir / "manifest.json").exists():
        raise ConfigurationError(f"no dataset manifest under {dataset_dir}")
    manifest = load_manifest(dataset_dir)
    if split == "all":
        ids = list(manifest["scene_ids"])
    elif split in manifest["split"]:
        ids = list(manifest["split"][split])
    else:
        raise ConfigurationError(f"unknown split {split!r}")
    if not ids:
        raise ConfigurationError(f"split {split!r} of {dataset_dir} is empty")
    views = [0] if single_view else range(4)
    images = torch.stack([images_to_tensor(load_images(dataset_dir / sid, views)) for sid in ids])
    maps = [load_map(dataset_dir / sid / "annotation.json") for sid in ids]
    return SceneSet(ids, images, maps)


def batch_order(n_scenes: int, batch_size: int, seed: int, step: int) -> list[int]:
    """Scene indices for ``step``: a seeded reshuffle every pass over the data."""
    per_epoch = max(1, math.ceil(n_scenes / batch_size))
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n_scenes)
    idx = perm[pos * batch_size : (pos + 1) * batch_size]
    if len(idx) < batch_size:  # pad the last batch of an epoch from the start
        idx = np.concatenate([idx, perm[: batch_size - len(idx)]])
    return [int(i) for i in idx]


def learning_rate(optim: OptimConfig, step: int) -> float:
    if step < optim.warmup_steps:
        return optim.lr * (step + 1) / optim.warmup_steps
    if optim.schedule == "constant":
        return optim.lr
    t = (step - optim.warmup_steps) / max(1, optim.steps - optim.warmup_steps)
    t = min(max(t, 0.0), 1.0)
    floor = optim.min_lr_ratio
    return optim.lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * t)))


# ----------------------------------------------------------- checkpoints


@dataclass
class TrainState:
    step: int
    model: MapNet
    optimizer: torch.optim.Optimizer
    best_map: float = float("nan")
    trace: list[dict] = field(default_factory=list)


def make_optimizer(model: torch.nn.Module, optim: OptimConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.dim() < 2 or name.endswith("embed") else decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": optim.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=optim.lr,
    )


def save_checkpoint(path, cfg: RunConfig, state: TrainState) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": cfg.to_dict(),
            "step": state.step,
            "model": state.model.state_dict(),
            "optimizer": state.optimizer.state_dict(),
            "best_map": state.best_map,
            "trace": state.trace,
        },
        tmp,
    )
    os.replace(tmp, path)


def load_checkpoint(path, expect: RunConfig | None = None) -> tuple[RunConfig, TrainState]:
    """Restore a run; ``expect`` must agree with the stored model config if given."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {blob.get('format_version')}")
    cfg = RunConfig.from_dict(blob["config"])
    if expect is not None and expect.model != cfg.model:
        raise ConfigurationError("checkpoint model config does not match the requested config")
    model = MapNet(cfg.model)
    model.load_state_dict(blob["model"])
    opt = make_optimizer(model, cfg.optim if expect is None else expect.optim)
    opt.load_state_dict(blob["optimizer"])
    return cfg, TrainState(blob["step"], model, opt, blob.get("best_map", float("nan")), list(blob["trace"]))


# ---------------------------------------------------------------- training


def _forward_loss(model, images, targets, cfg: RunConfig) -> LossReport:
    out = model(images)
    return total_loss(out.layers, targets, cfg.weights, cfg.one_to_one)


def train(
    cfg: RunConfig,
    run_dir=None,
    resume: bool = False,
    scenes: SceneSet | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainState:
    """Optimise the model on ``cfg.data``; writes config, log and checkpoints to ``run_dir``.

    Everything random (initialisation, batch order) derives from
    ``cfg.data.seed``, so equal configs give identical loss traces.
    """
    torch.use_deterministic_algorithms(True)
    run_dir = Path(run_dir) if run_dir is not None else runs_root() / cfg.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    scenes = scenes or load_split(cfg.data.dataset_dir, cfg.data.split, cfg.data.single_view)
    optim = cfg.optim
    if optim.epochs is not None:
        optim = replace(optim, steps=optim.epochs * math.ceil(len(scenes) / optim.batch_size))
        cfg = replace(cfg, optim=optim)
    cfg.save(run_dir / "config.json")

    latest = ckpt_dir / "last.pt"
    if resume and latest.exists():
        _, state = load_checkpoint(latest, cfg)
        log.info("resumed %s at step %d", cfg.run_id, state.step)
    else:
        model = build_model(cfg.model, seed=cfg.data.seed)
        state = TrainState(0, model, make_optimizer(model, optim))
    model, opt = state.model, state.optimizer
    model.train()
    log_path = run_dir / "train_log.jsonl"
    mode = "a" if resume and state.step > 0 else "w"
    with open(log_path, mode) as logf:
        while state.step < optim.steps:
            step = state.step
            idx = batch_order(len(scenes), optim.batch_size, cfg.data.seed, step)
            lr = learning_rate(optim, step)
            for g in opt.param_groups:
                g["lr"] = lr
            report = _forward_loss(model, scenes.images[idx], scenes.targets(idx), cfg)
            if not math.isfinite(report.total):
                dump = run_dir / f"nan_step{step}.json"
                dump.write_text(json.dumps({"step": step, "batch_scene_ids": [scenes.ids[i] for i in idx]}))
                raise TrainingError(
                    f"non-finite loss at step {step} on scenes {[scenes.ids[i] for i in idx]} (see {dump})"
                )
            opt.zero_grad(set_to_none=True)
            report.loss.backward()
            if optim.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), optim.grad_clip)
            opt.step()
            rec = report.record(step, lr)
            state.trace.append(rec)
            if step % optim.log_every == 0:
                logf.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
            state.step += 1
            if optim.checkpoint_every and state.step % optim.checkpoint_every == 0:
                logf.flush()
                save_checkpoint(latest, cfg, state)
    save_checkpoint(latest, cfg, state)
    save_checkpoint(ckpt_dir / f"step{state.step:06d}.pt", cfg, state)
    return state


# -------------------------------------------------------------- evaluation


@torch.no_grad()
def predict(model: MapNet, images: torch.Tensor, batch_size: int = 4):
    """Raw (class_logits, points) numpy arrays for a (S, V, 3, H, W) stack."""
    model.eval()
    logits, points = [], []
    for s in range(0, len(images), batch_size):
        out = model(images[s : s + batch_size]).final
        logits.append(out.class_logits.double().numpy())
        points.append(out.points.double().numpy())
    return np.concatenate(logits), np.concatenate(points)


def evaluate_model(
    model: MapNet, scenes: SceneSet, eval_cfg: EvalConfig, gt_bypass: bool = False
) -> tuple[ApBreakdown, float]:
    """AP breakdown over ``scenes`` and throughput in scenes per second."""
    t0 = time.perf_counter()
    if gt_bypass:
        preds = [gt_as_predictions(m) for m in scenes.maps]
    else:
        logits, points = predict(model, scenes.images)
        preds = [
            predictions_from_output(logits[i], points[i], eval_cfg.range, eval_cfg.confidence_floor)
            for i in range(len(scenes))
        ]
    elapsed = time.perf_counter() - t0
    return evaluate(preds, scenes.maps, eval_cfg), len(scenes) / max(elapsed, 1e-9)


def eval_report(cfg: RunConfig, breakdown: ApBreakdown, n_scenes: int, split: str, fps: float) -> dict:
    return {
        **breakdown.to_dict(),
        "table_row": breakdown.table_row(),
        "n_scenes": n_scenes,
        "split": split,
        "scenes_per_second": fps,
        "config": cfg.to_dict(),
    }
