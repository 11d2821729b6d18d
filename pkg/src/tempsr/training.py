"""Optimization loop: Adam, late learning-rate drop, checkpoints, finetuning.

Determinism contract: initialization, batch order, and augmentation derive
from (seed, epoch) alone, so an interrupted run resumed from a checkpoint
reproduces the uninterrupted run bit-for-bit at 64-bit precision. Gradient
state travels with the checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as datamod
from . import model as mdl
from .autodiff import Tensor
from .losses import ShiftSearchConfig, l1_registered, registered_nll
from .metrics import cpsnr


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, curve=None):
        super().__init__(message)
        self.curve = curve or []


@dataclass
class TrainConfig:
    loss: str = "nll"              # "nll" | "l1"
    lr: float = 1e-4
    lr_final: float = 2e-5
    epochs: int = 1
    batch: int = 24
    seed: int = 0
    eval_interval: int = 0         # steps between validation passes, 0 = off
    finetune_t: int = 0            # 0 = keep the training frame count
    frames: int = 9                # frames per scene fed to the model
    lr_drop_fraction: float = 0.1  # final fraction of epochs at lr_final
    clip_norm: float = 0.0         # 0 = no gradient clipping
    divergence_factor: float = 1e3
    dtype: str = "float32"

    def validate(self) -> None:
        if self.loss not in ("nll", "l1"):
            raise ValueError(f"loss must be 'nll' or 'l1', got {self.loss!r}")
        if self.lr_final > self.lr:
            raise ValueError("lr_final must not exceed lr")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
            t=0,
        )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place on params and state."""
    state.t += 1
    b1t = 1.0 - beta1**state.t
    b2t = 1.0 - beta2**state.t
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"NaN/Inf gradient for parameter {name!r} at step {state.t}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * (grad * grad)
        update = lr * (m / b1t) / (np.sqrt(v / b2t) + eps)
        params[name].data = params[name].data - update
    # moments of parameters without gradients this step still decay
    for name in state.m:
        if name not in grads:
            state.m[name] *= beta1
            state.v[name] *= beta2


# ---------------------------------------------------------------------------
# training data


@dataclass
class TrainingExample:
    scene_id: str
    index: int
    lr: np.ndarray        # [T,1,s,s] normalized float
    hr: np.ndarray        # [1,rs,rs] normalized float
    hr_mask: np.ndarray   # [1,rs,rs] float 0/1


@dataclass
class TrainingSet:
    examples: list[TrainingExample]
    stats: datamod.NormalizationStats
    frames: int


def prepare_training_set(scenes, frames: int, stats: datamod.NormalizationStats | None = None,
                         patch_size: int | None = None, reg_shift: int = 4,
                         clearance_threshold: float = 0.15) -> TrainingSet:
    """Clearance-filter, pick frames, register, normalize, cut patches."""
    processed = []
    for scene in scenes:
        filtered = datamod.filter_clearance(scene, threshold=clearance_threshold)
        if filtered is None:
            continue
        selected = datamod.select_frames(filtered, t=frames)
        registered, _ = datamod.register_translational(selected, max_shift=reg_shift)
        processed.append(registered)
    if not processed:
        raise datamod.DatasetError("no scenes survive clearance filtering")
    if stats is None:
        stats = datamod.compute_stats(processed)
    examples = []
    for scene in processed:
        size = patch_size or scene.lr_frames[0].shape[0]
        for patch in datamod.extract_patches(scene, size=size):
            examples.append(_patch_to_example(patch, stats))
    return TrainingSet(examples=examples, stats=stats, frames=frames)


def _patch_to_example(patch: datamod.PatchRecord, stats) -> TrainingExample:
    lr = datamod.normalize(patch.lr, stats, dtype=np.float64)[:, None, :, :]
    hr = datamod.normalize(patch.hr, stats, dtype=np.float64)[None, :, :]
    return TrainingExample(
        scene_id=patch.scene_id,
        index=patch.index,
        lr=lr,
        hr=hr,
        hr_mask=patch.hr_mask[None, :, :].astype(np.float64),
    )


def _rotate_example(ex: TrainingExample, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if k % 4 == 0:
        return ex.lr, ex.hr, ex.hr_mask
    return (
        np.rot90(ex.lr, k, axes=(2, 3)).copy(),
        np.rot90(ex.hr, k, axes=(1, 2)).copy(),
        np.rot90(ex.hr_mask, k, axes=(1, 2)).copy(),
    )


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))


def _epoch_plan(n_examples: int, batch: int, seed: int, epoch: int):
    """Deterministic batches for one epoch: (indices, rotations) pairs."""
    rng = _epoch_rng(seed, epoch)
    order = rng.permutation(n_examples)
    rotations = rng.integers(0, 4, size=n_examples)
    n_batches = n_examples // batch
    plan = []
    for i in range(n_batches):
        sel = order[i * batch : (i + 1) * batch]
        plan.append((sel, rotations[i * batch : (i + 1) * batch]))
    return plan


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    model_config: mdl.ModelConfig
    adam: AdamState
    curve: list[tuple[int, float, float]] = field(default_factory=list)  # step, loss, lr
    eval_history: list[tuple[int, float]] = field(default_factory=list)  # step, val cPSNR
    step: int = 0


def _frozen_prefixes(cfg: TrainConfig) -> tuple[str, ...]:
    # the L1 arm trains the same SR capacity: its uncertainty head stays frozen
    return ("unc_head.",) if cfg.loss == "l1" else ()


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    drop_at = math.ceil(cfg.epochs * (1.0 - cfg.lr_drop_fraction))
    return cfg.lr_final if epoch >= drop_at else cfg.lr


def train_step(params, model_cfg, batch_lr, batch_hr, batch_mask, train_cfg: TrainConfig,
               shift_cfg: ShiftSearchConfig) -> tuple[float, dict[str, np.ndarray]]:
    """One forward/backward pass; returns (loss value, gradients by name)."""
    out = mdl.forward(batch_lr, params, model_cfg)
    if train_cfg.loss == "nll":
        loss = registered_nll(out.sr, out.delta, batch_hr, batch_mask, shift_cfg)
    else:
        loss = l1_registered(out.sr, batch_hr, batch_mask, shift_cfg)
    for p in params.values():
        p.zero_grad()
    loss.backward()
    frozen = _frozen_prefixes(train_cfg)
    grads = {
        name: p.grad
        for name, p in params.items()
        if p.grad is not None and not name.startswith(frozen)
    }
    if train_cfg.clip_norm > 0:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > train_cfg.clip_norm:
            scale = train_cfg.clip_norm / total
            grads = {n: g * scale for n, g in grads.items()}
    return float(loss.data), grads


def evaluate_scenes(params, model_cfg: mdl.ModelConfig, scenes, stats, frames: int,
                    shift_cfg: ShiftSearchConfig | None = None, reg_shift: int = 4) -> float:
    """Mean validation cPSNR of the model over full scenes."""
    shift_cfg = shift_cfg or ShiftSearchConfig()
    values = []
    for scene in scenes:
        sr = infer_scene(params, model_cfg, scene, stats, frames, reg_shift=reg_shift).sr_image
        values.append(cpsnr(sr, scene.hr.astype(np.float64), scene.hr_mask.astype(np.float64), shift_cfg).value_db)
    return float(np.mean(values))


@dataclass
class SceneInference:
    sr_image: np.ndarray      # denormalized 16-bit-scale float [rH,rW]
    delta_map: np.ndarray     # log-scale uncertainty [rH,rW] (normalized units)


def infer_scene(params, model_cfg: mdl.ModelConfig, scene, stats, frames: int,
                reg_shift: int = 4, clearance_threshold: float = 0.15) -> SceneInference:
    filtered = datamod.filter_clearance(scene, threshold=clearance_threshold) or scene
    selected = datamod.select_frames(filtered, t=frames)
    registered, _ = datamod.register_translational(selected, max_shift=reg_shift)
    lr = datamod.normalize(np.stack(registered.lr_frames), stats, dtype=model_cfg.np_dtype)
    out = mdl.forward(lr[None, :, None, :, :], params, model_cfg)
    sr = datamod.denormalize(out.sr.data[0, 0], stats)
    return SceneInference(sr_image=sr, delta_map=out.delta.data[0, 0].astype(np.float64))


def train(model_cfg: mdl.ModelConfig, train_set: TrainingSet, train_cfg: TrainConfig,
          val_scenes=None, shift_cfg: ShiftSearchConfig | None = None,
          checkpoint_dir=None, resume_from=None, start_params=None) -> TrainResult:
    """Run the optimization; deterministic given the seed.

    ``resume_from`` continues a checkpoint directory exactly; ``start_params``
    (exclusive with resume) warm-starts from given parameters at step 0.
    """
    train_cfg.validate()
    model_cfg.validate()
    shift_cfg = shift_cfg or ShiftSearchConfig()
    if not train_set.examples:
        raise datamod.DatasetError("empty training stream")

    if resume_from is not None:
        params, loaded_model_cfg, adam, _, start_step = load_checkpoint(resume_from)
        model_cfg = loaded_model_cfg
    else:
        params = start_params if start_params is not None else mdl.init_params(model_cfg, seed=train_cfg.seed)
        adam = AdamState.for_params(params)
        start_step = 0

    if model_cfg.dtype != train_cfg.dtype:
        model_cfg = replace(model_cfg, dtype=train_cfg.dtype)
    dtype = train_cfg.np_dtype
    for p in params.values():
        p.data = p.data.astype(dtype, copy=False)
    for store in (adam.m, adam.v):
        for name in store:
            store[name] = store[name].astype(dtype, copy=False)

    n = len(train_set.examples)
    steps_per_epoch = n // train_cfg.batch
    if steps_per_epoch == 0:
        raise datamod.DatasetError(
            f"batch size {train_cfg.batch} exceeds the {n} available examples"
        )
    total_steps = steps_per_epoch * train_cfg.epochs
    result = TrainResult(params=params, model_config=model_cfg, adam=adam, step=start_step)

    initial_loss = None
    for step in range(start_step, total_steps):
        epoch = step // steps_per_epoch
        pos = step % steps_per_epoch
        plan = _epoch_plan(n, train_cfg.batch, train_cfg.seed, epoch)
        sel, rots = plan[pos]
        lrs, hrs, masks = [], [], []
        for idx, k in zip(sel, rots):
            lr_a, hr_a, m_a = _rotate_example(train_set.examples[idx], int(k))
            lrs.append(lr_a)
            hrs.append(hr_a)
            masks.append(m_a)
        batch_lr = np.stack(lrs).astype(dtype)
        batch_hr = np.stack(hrs).astype(dtype)
        batch_mask = np.stack(masks).astype(dtype)

        lr_now = _lr_at(train_cfg, epoch)
        loss_value, grads = train_step(params, model_cfg, batch_lr, batch_hr, batch_mask,
                                       train_cfg, shift_cfg)
        if initial_loss is None:
            initial_loss = abs(loss_value) + 1e-12
        if not math.isfinite(loss_value) or abs(loss_value) > train_cfg.divergence_factor * initial_loss:
            raise TrainingDivergedError(
                f"loss {loss_value} at step {step} exceeds {train_cfg.divergence_factor}x initial",
                curve=result.curve,
            )
        adam_step(params, grads, adam, lr=lr_now)
        result.curve.append((step, loss_value, lr_now))
        result.step = step + 1

        if val_scenes and train_cfg.eval_interval and (step + 1) % train_cfg.eval_interval == 0:
            score = evaluate_scenes(params, model_cfg, val_scenes, train_set.stats,
                                    train_set.frames, shift_cfg)
            result.eval_history.append((step + 1, score))

    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, result, train_cfg)
    return result


def finetune_frame_count(checkpoint_dir, scenes, t_target: int, steps: int,
                         train_cfg: TrainConfig | None = None,
                         stats=None) -> TrainResult:
    """Continue training from a checkpoint with the target frame count.

    Runs at the final learning rate with fresh optimizer moments (a short
    adaptation pass, not an exact resume).
    """
    params, model_cfg, _, saved_cfg, _ = load_checkpoint(checkpoint_dir)
    cfg = train_cfg or saved_cfg
    train_set = prepare_training_set(scenes, frames=t_target, stats=stats)
    steps_per_epoch = max(1, len(train_set.examples) // cfg.batch)
    epochs = max(1, math.ceil(steps / steps_per_epoch))
    cfg = replace(cfg, epochs=epochs, lr=cfg.lr_final, lr_final=cfg.lr_final,
                  finetune_t=t_target, frames=t_target)
    return train(model_cfg, train_set, cfg, start_params=params)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, result: TrainResult, train_cfg: TrainConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mdl.save_params(directory / "params.tsra", result.params, result.model_config)
    optim_tensors: dict[str, np.ndarray] = {}
    for name, arr in result.adam.m.items():
        optim_tensors[f"m.{name}"] = arr
    for name, arr in result.adam.v.items():
        optim_tensors[f"v.{name}"] = arr
    header = f"t={result.adam.t}\nstep={result.step}\n"
    mdl.write_archive(directory / "optim.tsra", header, optim_tensors)
    (directory / "train_config.txt").write_text(mdl.config_to_text(train_cfg))
    write_curve(directory / "loss_curve.csv", result.curve)


def write_curve(path, curve) -> None:
    lines = ["step,loss,lr"]
    lines += [f"{s},{loss!r},{lr!r}" for s, loss, lr in curve]
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(directory):
    directory = Path(directory)
    params, model_cfg = mdl.load_params(directory / "params.tsra")
    header, optim_tensors = mdl.read_archive(directory / "optim.tsra")
    meta = {k: int(v) for k, v in
            (line.split("=") for line in header.strip().splitlines() if "=" in line)}
    adam = AdamState(
        m={n[2:]: a for n, a in optim_tensors.items() if n.startswith("m.")},
        v={n[2:]: a for n, a in optim_tensors.items() if n.startswith("v.")},
        t=meta.get("t", 0),
    )
    train_cfg = mdl.config_from_text((directory / "train_config.txt").read_text(), TrainConfig)
    return params, model_cfg, adam, train_cfg, meta.get("step", 0)
