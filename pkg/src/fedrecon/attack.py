"""Two-stage gradient-difference reconstruction, prior initialization, and
the single-stage baseline.

Stage I fits virtual pixels N_r to the post-unlearning gradient at theta_u.
Stage II concatenates freshly initialized N_f (leading rows) with N_r,
matches the pre-unlearning gradient at theta_star over the union batch, and
updates only the N_f slice: the N_r rows of the pixel gradient are zeroed
after backpropagation, so with the default fixed-step update the anchored
rows are bit-identical before and after (the adaptive optimizer preserves
this: zero gradient means zero moments means zero step).

`dlg_baseline` runs one stage against the pre-unlearning gradient over the
whole batch with nothing frozen.
"""
from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import LabeledDataset, write_image_grid
from .engine import match_loss_and_data_grad
from .errors import AttackDivergedError, ConfigError
from .fedsim import CapturedPair, UnlearnScenario
from .metrics import score_batch
from .seeds import child_rng, child_seed

MODES = ("dragd", "dragdp", "dlg_baseline")
INITS = ("uniform_noise", "public_prior", "cpl_tile")


@dataclass
class AttackConfig:
    eta_r: float = 0.05
    eta_f: float = 0.05
    iterations: int = 300
    mode: str = "dragd"
    freeze_part: bool = True
    init: str = "uniform_noise"
    clamp_pixels: bool = True
    labels_known: bool = True
    loss_mode: str = "sq_euclid"   # sq_euclid | cosine
    optimizer: str = "gd"          # gd (fixed-step, the update rule as written) | adam
    seed: int = 0

    def validate(self) -> None:
        if self.eta_r <= 0 or self.eta_f <= 0:
            raise ConfigError("learning rates must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}, got {self.init!r}")
        if self.mode == "dragdp" and self.init != "public_prior":
            raise ConfigError("dragdp requires init='public_prior'")
        if self.loss_mode not in ("sq_euclid", "cosine"):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class AttackState:
    nr_pixels: np.ndarray
    nr_labels: np.ndarray
    nf_pixels: np.ndarray | None = None
    nf_labels: np.ndarray | None = None
    loss_history_step1: list = field(default_factory=list)
    loss_history_step2: list = field(default_factory=list)


@dataclass
class AttackResult:
    state: AttackState
    config: AttackConfig
    metrics: dict            # set name -> list of per-image metric rows
    iterations_run: int
    wall_seconds: float


class _Stepper:
    """x <- x - eta * g, or the bias-corrected adaptive variant."""

    def __init__(self, shape, eta: float, kind: str):
        self.eta = eta
        self.kind = kind
        self.t = 0
        if kind == "adam":
            self.m = np.zeros(shape)
            self.v = np.zeros(shape)

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        if self.kind == "gd":
            return x - self.eta * g
        self.m = 0.9 * self.m + 0.1 * g
        self.v = 0.999 * self.v + 0.001 * g * g
        mhat = self.m / (1.0 - 0.9**self.t)
        vhat = self.v / (1.0 - 0.999**self.t)
        return x - self.eta * mhat / (np.sqrt(vhat) + 1e-8)


def init_virtual(
    shape: tuple,
    labels: np.ndarray,
    init: str,
    public_pool: LabeledDataset | None,
    seed: int,
) -> np.ndarray:
    """Starting pixels for a virtual batch of the given shape."""
    rng = child_rng(seed, "init", init)
    if init == "uniform_noise":
        return rng.uniform(0.0, 1.0, shape)
    if init == "cpl_tile":
        _, c, h, w = shape
        qh, qw = (h + 1) // 2, (w + 1) // 2
        quadrant = rng.uniform(0.0, 1.0, (shape[0], c, qh, qw))
        tiled = np.tile(quadrant, (1, 1, 2, 2))
        return tiled[:, :, :h, :w]
    if public_pool is None or len(public_pool) == 0:
        raise ConfigError("public_prior init needs a nonempty public pool")
    if public_pool.sample_shape != tuple(shape[1:]):
        raise ConfigError(
            f"public pool images {public_pool.sample_shape} do not match {tuple(shape[1:])}"
        )
    out = np.empty(shape)
    taken = np.zeros(len(public_pool), dtype=bool)
    for i, label in enumerate(np.asarray(labels)):
        candidates = np.flatnonzero((public_pool.labels == label) & ~taken)
        if candidates.size == 0:
            candidates = np.flatnonzero(~taken)
            if candidates.size == 0:
                raise ConfigError("public pool exhausted")
            warnings.warn(f"public pool lacks label {int(label)}; using any-label sample")
        pick = int(candidates[0])
        taken[pick] = True
        out[i] = public_pool.images[pick]
    return out


def _run_stage(
    model,
    x0: np.ndarray,
    labels: np.ndarray,
    target,
    config: AttackConfig,
    eta: float,
    update_mask: np.ndarray | None,
    history: list,
) -> np.ndarray:
    x = x0.copy()
    stepper = _Stepper(x.shape, eta, config.optimizer)
    for it in range(config.iterations):
        loss, dx = match_loss_and_data_grad(
            model, x, labels, target, update_mask=update_mask, loss_mode=config.loss_mode
        )
        if not np.isfinite(loss):
            raise AttackDivergedError(
                f"match loss became non-finite at iteration {it}; the learning rate is too high"
            )
        history.append(loss)
        x = stepper.step(x, dx)
        if config.clamp_pixels:
            x = np.clip(x, 0.0, 1.0)
        if update_mask is not None:
            # masked rows see exactly-zero gradients; restoring keeps them
            # bit-identical even with clamping off and pixels out of range
            x[~update_mask] = x0[~update_mask]
    return x


def _run_joint_label_stage(model, x0, batch, target, config: AttackConfig, history: list):
    """Label-recovery exploration: optimize pixels and soft label logits."""
    from .engine import joint_match_loss_and_grads

    num_classes = model.spec.num_classes
    rng = child_rng(config.seed, "labels")
    label_logits = 0.1 * rng.standard_normal((batch, num_classes))
    x = x0.copy()
    step_x = _Stepper(x.shape, config.eta_f, config.optimizer)
    step_l = _Stepper(label_logits.shape, config.eta_f, config.optimizer)
    for it in range(config.iterations):
        loss, dx, dll = joint_match_loss_and_grads(model, x, label_logits, target)
        if not np.isfinite(loss):
            raise AttackDivergedError(
                f"match loss became non-finite at iteration {it}; the learning rate is too high"
            )
        history.append(loss)
        x = step_x.step(x, dx)
        label_logits = step_l.step(label_logits, dll)
        if config.clamp_pixels:
            x = np.clip(x, 0.0, 1.0)
    return x, label_logits.argmax(axis=1).astype(np.int64)


def reconstruct_remaining(pair: CapturedPair, config: AttackConfig, dr_shape: tuple, dr_labels) -> AttackState:
    """Stage I: fit N_r to the post-unlearning gradient at theta_u."""
    config.validate()
    if dr_shape[0] < 1:
        raise ConfigError("the remaining set must hold at least one sample")
    labels = np.asarray(dr_labels, dtype=np.int64)
    nr0 = init_virtual(dr_shape, labels, "uniform_noise", None, child_seed(config.seed, "attack", "nr"))
    state = AttackState(nr_pixels=nr0, nr_labels=labels)
    state.nr_pixels = _run_stage(
        pair.theta_u, nr0, labels, pair.g_post, config, config.eta_r, None, state.loss_history_step1
    )
    return state


def reconstruct_forgotten(
    pair: CapturedPair,
    config: AttackConfig,
    state: AttackState,
    df_shape: tuple,
    df_labels,
    public_pool: LabeledDataset | None = None,
) -> AttackState:
    """Stage II: anchor N_r, fit the leading N_f slice to the pre-unlearning gradient."""
    config.validate()
    labels_f = np.asarray(df_labels, dtype=np.int64)
    if df_shape[0] != labels_f.size:
        raise ConfigError("N_f batch size must equal the forgotten set size")
    nf0 = init_virtual(
        df_shape, labels_f, config.init, public_pool, child_seed(config.seed, "attack", "nf")
    )
    union0 = np.concatenate([nf0, state.nr_pixels])
    union_labels = np.concatenate([labels_f, state.nr_labels])
    mask = None
    if config.freeze_part:
        mask = np.concatenate(
            [np.ones(df_shape[0], dtype=bool), np.zeros(state.nr_pixels.shape[0], dtype=bool)]
        )
    union = _run_stage(
        pair.theta_star,
        union0,
        union_labels,
        pair.g_pre,
        config,
        config.eta_f,
        mask,
        state.loss_history_step2,
    )
    state.nf_pixels = union[: df_shape[0]]
    state.nf_labels = labels_f
    state.nr_pixels = union[df_shape[0] :]
    return state


def run_attack(
    pair: CapturedPair,
    config: AttackConfig,
    scenario: UnlearnScenario,
    ground_truth: LabeledDataset | None = None,
    public_pool: LabeledDataset | None = None,
    step1_state: AttackState | None = None,
) -> AttackResult:
    """Full pipeline for one mode; metrics only when ground truth is given."""
    config.validate()
    t0 = time.perf_counter()
    forget = scenario.forget_set()
    remain = scenario.remain_set()

    if config.mode == "dlg_baseline":
        union_x, union_y = scenario.union_batch()
        labels = union_y
        x0 = init_virtual(union_x.shape, labels, config.init, public_pool, child_seed(config.seed, "attack", "dlg"))
        state = AttackState(nr_pixels=np.empty((0, *union_x.shape[1:])), nr_labels=np.empty(0, dtype=np.int64))
        if config.labels_known:
            recon = _run_stage(
                pair.theta_star, x0, labels, pair.g_pre, config, config.eta_f, None, state.loss_history_step1
            )
            state.nf_labels = labels
        else:
            recon, recovered = _run_joint_label_stage(
                pair.theta_star, x0, labels.size, pair.g_pre, config, state.loss_history_step1
            )
            state.nf_labels = recovered
        state.nf_pixels = recon
        iterations = config.iterations
    else:
        if step1_state is not None:
            state = AttackState(
                nr_pixels=step1_state.nr_pixels.copy(),
                nr_labels=step1_state.nr_labels.copy(),
                loss_history_step1=list(step1_state.loss_history_step1),
            )
        else:
            state = reconstruct_remaining(
                pair, config, remain.images.shape, remain.labels
            )
        state = reconstruct_forgotten(
            pair, config, state, forget.images.shape, forget.labels, public_pool
        )
        iterations = len(state.loss_history_step1) + len(state.loss_history_step2)

    metrics: dict = {}
    if ground_truth is not None:
        gt_forget = ground_truth.subset(scenario.forget_indices)
        gt_remain = ground_truth.subset(scenario.remain_indices)
        if config.mode == "dlg_baseline":
            union_truth_x = np.concatenate([gt_forget.images, gt_remain.images])
            union_truth_y = np.concatenate([gt_forget.labels, gt_remain.labels])
            metrics["full"] = score_batch(
                state.nf_pixels, union_truth_x, state.nf_labels, union_truth_y
            )
        else:
            metrics["dr"] = score_batch(
                state.nr_pixels, gt_remain.images, state.nr_labels, gt_remain.labels
            )
            metrics["df"] = score_batch(
                state.nf_pixels, gt_forget.images, state.nf_labels, gt_forget.labels
            )
    return AttackResult(
        state=state,
        config=config,
        metrics=metrics,
        iterations_run=iterations,
        wall_seconds=time.perf_counter() - t0,
    )


# ----------------------------------------------------------------- artifacts


def _fmt(v: float) -> str:
    return format(v, ".17g")


def persist_result(result: AttackResult, directory, grid_cols: int = 4) -> None:
    """Loss CSV, per-image metrics CSV, reconstruction grids, run manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = result.state

    with open(directory / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss_step1", "loss_step2"])
        n = max(len(state.loss_history_step1), len(state.loss_history_step2))
        for i in range(n):
            s1 = _fmt(state.loss_history_step1[i]) if i < len(state.loss_history_step1) else ""
            s2 = _fmt(state.loss_history_step2[i]) if i < len(state.loss_history_step2) else ""
            writer.writerow([i, s1, s2])

    with open(directory / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "set", "mse", "psnr", "ssim"])
        for set_name in sorted(result.metrics):
            for row in result.metrics[set_name]:
                writer.writerow(
                    [row["index"], set_name, _fmt(row["mse"]), _fmt(row["psnr"]), _fmt(row["ssim"])]
                )

    if state.nf_pixels is not None and state.nf_pixels.shape[0]:
        name = "recon_full" if result.config.mode == "dlg_baseline" else "recon_df"
        _write_grid(state.nf_pixels, directory / name, grid_cols)
    if state.nr_pixels.shape[0]:
        _write_grid(state.nr_pixels, directory / "recon_dr", grid_cols)

    manifest = {
        "config": {
            "eta_r": result.config.eta_r,
            "eta_f": result.config.eta_f,
            "iterations": result.config.iterations,
            "mode": result.config.mode,
            "freeze_part": result.config.freeze_part,
            "init": result.config.init,
            "clamp_pixels": result.config.clamp_pixels,
            "labels_known": result.config.labels_known,
            "loss_mode": result.config.loss_mode,
            "optimizer": result.config.optimizer,
            "seed": result.config.seed,
        },
        "iterations_run": result.iterations_run,
        "wall_seconds": result.wall_seconds,
        "sets_scored": sorted(result.metrics),
        "nr_sha256": _sha256(state.nr_pixels),
        "nf_sha256": _sha256(state.nf_pixels) if state.nf_pixels is not None else None,
    }
    (directory / "run.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _sha256(arr: np.ndarray) -> str:
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _write_grid(images: np.ndarray, stem: Path, cols: int) -> None:
    suffix = ".ppm" if images.shape[1] == 3 else ".pgm"
    write_image_grid(images, stem.with_suffix(suffix), cols)
