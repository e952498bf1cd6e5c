"""Flow-matching objective, AdamW, condition dropout and the two-stage freezing protocol."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .conditioning import Vocabulary, encode_text, pool_frames
from .model import (
    AUDIO_ADAPTER,
    BACKBONE,
    PACA,
    ModelConfig,
    ModelInputs,
    ModelParams,
    forward,
    init_params,
    prompt_windows,
)
from .synthworld import SyntheticSample

log = logging.getLogger(__name__)

STAGE_TAGS = {1: (AUDIO_ADAPTER,), 2: (BACKBONE, AUDIO_ADAPTER, PACA)}


class TrainingError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


class InjectionError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("adapter injection failed: " + "; ".join(problems))


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 2
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    dropout_text: float = 0.1
    dropout_audio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise TrainingError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("dropout_text", "dropout_audio"):
            p = getattr(self, name)
            if not 0 <= p < 1:
                raise TrainingError(f"{name} must lie in [0, 1), got {p}")
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise TrainingError("steps >= 0, batch >= 1 and lr > 0 required")


# ---------------------------------------------------------------------------
# flow path


def interpolate(x0, x1, t):
    """x_t = (1 - t) x0 + t x1.  ``t`` is a scalar or one value per batch element."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise TrainingError(f"x0 {x0.shape} and x1 {x1.shape} differ")
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise TrainingError("t outside [0, 1]")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1 - t) * x0 + t * x1


def target_velocity(x0, x1):
    """v = x1 - x0 (points from data towards noise)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise TrainingError(f"x0 {x0.shape} and x1 {x1.shape} differ")
    return x1 - x0


# ---------------------------------------------------------------------------
# data


@dataclass
class EncodedSample:
    """A training sample with its text and audio already turned into arrays."""

    x0: np.ndarray
    ref: np.ndarray
    audio: np.ndarray  # (F, audio_dim) frame-pooled features
    ids: np.ndarray
    tags: np.ndarray
    caption_ids: np.ndarray
    prompt: object


def encode_samples(samples: Sequence[SyntheticSample], vocab: Vocabulary, cfg: ModelConfig) -> list[EncodedSample]:
    out = []
    for s in samples:
        seq = encode_text(s.prompt, vocab)
        cap = np.array(vocab.encode(s.caption), dtype=np.int64)
        if seq.ids.max() >= cfg.vocab:
            raise TrainingError(f"vocabulary of {len(vocab)} exceeds model vocab {cfg.vocab}")
        out.append(
            EncodedSample(
                x0=s.x0,
                ref=s.ref,
                audio=pool_frames(s.audio.features, cfg.F),
                ids=seq.ids,
                tags=seq.tags,
                caption_ids=cap,
                prompt=s.prompt,
            )
        )
    return out


def build_inputs(
    batch: Sequence[EncodedSample],
    x: np.ndarray,
    t: np.ndarray,
    cfg: ModelConfig,
    brief: bool = False,
    drop_text=None,
    drop_audio=None,
) -> ModelInputs:
    """Stack samples into model inputs.  ``brief`` swaps in the short caption."""
    rows = [(s.caption_ids, np.zeros_like(s.caption_ids)) if brief else (s.ids, s.tags) for s in batch]
    M = max(len(r[0]) for r in rows)
    B = len(batch)
    ids = np.zeros((B, M), dtype=np.int64)
    tags = np.zeros((B, M), dtype=np.int64)
    mask = np.zeros((B, M), dtype=bool)
    for b, (i, g) in enumerate(rows):
        ids[b, : len(i)] = i
        tags[b, : len(g)] = g
        mask[b, : len(i)] = True
    return ModelInputs(
        x=x,
        t=np.asarray(t, dtype=np.float64),
        token_ids=ids,
        tags=tags,
        token_mask=mask,
        audio=np.stack([s.audio for s in batch]),
        ref=np.stack([s.ref for s in batch]),
        drop_text=None if drop_text is None else np.asarray(drop_text, dtype=bool),
        drop_audio=None if drop_audio is None else np.asarray(drop_audio, dtype=bool),
        windows=prompt_windows([s.prompt for s in batch], cfg.k_max),
    )


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    params: ModelParams
    stage: int
    trainable: list[str]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    rng: np.random.Generator
    step: int = 0
    adam_t: int = 0


def trainable_names(params: ModelParams, stage: int) -> list[str]:
    if stage not in STAGE_TAGS:
        raise TrainingError(f"unknown stage {stage}")
    return [n for n in params.arrays if params.tags[n] in STAGE_TAGS[stage]]


def set_stage(state: TrainState, stage: int) -> TrainState:
    """Switch the trainable set and rebuild optimizer moments for it."""
    names = trainable_names(state.params, stage)
    state.stage = stage
    state.trainable = names
    state.m = {n: np.zeros_like(state.params.arrays[n]) for n in names}
    state.v = {n: np.zeros_like(state.params.arrays[n]) for n in names}
    state.adam_t = 0
    return state


def new_state(params: ModelParams, stage: int, seed: int) -> TrainState:
    state = TrainState(params=params, stage=stage, trainable=[], m={}, v={}, rng=np.random.default_rng(seed))
    return set_stage(state, stage)


def adamw_update(state: TrainState, grads: dict[str, np.ndarray], cfg: TrainConfig) -> None:
    state.adam_t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1**state.adam_t
    c2 = 1 - b2**state.adam_t
    for n in state.trainable:
        g = grads[n]
        p = state.params.arrays[n]
        m = state.m[n]
        v = state.v[n]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if p.ndim >= 2 and cfg.weight_decay:
            p -= cfg.lr * cfg.weight_decay * p
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + 1e-8)


def _param_norms(params: ModelParams) -> dict[str, float]:
    return {n: float(np.linalg.norm(a)) for n, a in params.arrays.items()}


def train_step(
    state: TrainState,
    batch: Sequence[EncodedSample],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    predict: Callable | None = None,
) -> tuple[TrainState, float, float]:
    """One optimizer step on ``batch``; returns (state, loss, grad_norm).

    ``predict(params, inputs, x0, x1)`` replaces the model forward when given;
    it must return a Tensor shaped like x0.
    """
    if cfg.stage != state.stage:
        raise TrainingError(f"state is in stage {state.stage}, config asks for stage {cfg.stage}")
    B = len(batch)
    x0 = np.stack([s.x0 for s in batch])
    rng = state.rng
    t = rng.uniform(0.0, 1.0, size=B)
    x1 = rng.normal(size=x0.shape)
    drop_text = rng.uniform(size=B) < cfg.dropout_text
    drop_audio = rng.uniform(size=B) < cfg.dropout_audio
    inputs = build_inputs(
        batch, interpolate(x0, x1, t), t, model_cfg, brief=state.stage == 1,
        drop_text=drop_text, drop_audio=drop_audio,
    )
    leaves = state.params.leaves(state.trainable)
    if predict is None:
        v_pred = forward(model_cfg, leaves, inputs)
    else:
        v_pred = predict(leaves, inputs, x0, x1)
    loss = ad.mse(v_pred, target_velocity(x0, x1))
    value = float(loss.data)
    if not math.isfinite(value):
        norms = _param_norms(state.params)
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:5]
        raise NumericalError(
            f"non-finite loss at step {state.step}: t={np.round(t, 4).tolist()} largest param norms={worst}"
        )
    tr = [leaves[n] for n in state.trainable]
    grads = dict(zip(state.trainable, ad.backward(loss, tr)))
    gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if not math.isfinite(gnorm):
        raise NumericalError(f"non-finite gradient at step {state.step}")
    adamw_update(state, grads, cfg)
    state.step += 1
    return state, value, gnorm


def batch_indices(rng: np.random.Generator, n: int, batch: int) -> np.ndarray:
    return rng.choice(n, size=batch, replace=n < batch)


def train(
    state: TrainState,
    data: Sequence[EncodedSample],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    on_step: Callable[[int, float, float, float], None] | None = None,
    timing: bool = False,
) -> list[float]:
    """Run ``cfg.steps`` steps.  ``on_step(step, loss, grad_norm, seconds)`` after each."""
    if not data:
        raise TrainingError("empty training set")
    losses = []
    start = time.perf_counter()
    for _ in range(cfg.steps):
        idx = batch_indices(state.rng, len(data), cfg.batch)
        _, loss, gnorm = train_step(state, [data[i] for i in idx], cfg, model_cfg)
        losses.append(loss)
        if on_step is not None:
            on_step(state.step, loss, gnorm, time.perf_counter() - start if timing else float("nan"))
        if state.step % 100 == 0:
            log.info("stage %d step %d loss %.5f grad %.3f", state.stage, state.step, loss, gnorm)
    return losses


# ---------------------------------------------------------------------------
# adapter transfer


def extract_audio_adapter(params: ModelParams) -> dict[str, np.ndarray]:
    return {n: params.arrays[n].copy() for n in params.names(AUDIO_ADAPTER)}


def inject_audio_adapter(target: ModelParams, adapter: dict[str, np.ndarray]) -> ModelParams:
    """Copy adapter arrays into a copy of ``target`` by name; nothing else changes."""
    problems = []
    expected = set(target.names(AUDIO_ADAPTER))
    for n in sorted(expected - set(adapter)):
        problems.append(f"{n}: missing from adapter")
    for n in sorted(set(adapter) - expected):
        problems.append(f"{n}: not an audio-adapter array of the target")
    for n in sorted(expected & set(adapter)):
        if adapter[n].shape != target.arrays[n].shape:
            problems.append(f"{n}: shape {adapter[n].shape} != {target.arrays[n].shape}")
    if problems:
        raise InjectionError(problems)
    out = target.copy()
    for n, a in adapter.items():
        out.arrays[n] = np.array(a, dtype=np.float64)
    return out


def stage2_start(model_cfg: ModelConfig, init_seed: int, adapter: dict | None, stage1_params: ModelParams | None = None) -> ModelParams:
    """Fresh backbone from ``init_seed`` (or the stage-1 backbone) plus the injected adapter."""
    base = stage1_params.copy() if stage1_params is not None else init_params(model_cfg, init_seed)
    return base if adapter is None else inject_audio_adapter(base, adapter)
