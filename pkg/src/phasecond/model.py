"""Miniature diffusion transformer with phase-aware text and depth-scaled audio conditioning."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .conditioning import AUDIO_FEATURES

BACKBONE = "backbone"
AUDIO_ADAPTER = "audio_adapter"
PACA = "paca"
TAGS = (BACKBONE, AUDIO_ADAPTER, PACA)

TIME_FREQS = 64
FRAME_FREQS = 16
MASK_VALUE = -1e30


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    L: int = 6
    D: int = 64
    N: int = 16
    F: int = 16
    heads: int = 4
    gamma: float = 1.5
    k_max: int = 8
    vocab: int = 128
    audio_dim: int = AUDIO_FEATURES
    mlp_ratio: int = 4
    # ablation switches
    phase_embeddings: bool = True
    audio_schedule: str = "progressive"  # or "constant"
    hard_mask: bool = False

    def __post_init__(self):
        if self.L < 2:
            raise ModelError(f"L must be >= 2, got {self.L}")
        if not self.gamma > 1:
            raise ModelError(f"gamma must exceed 1, got {self.gamma}")
        if self.D % self.heads:
            raise ModelError(f"D={self.D} not divisible by heads={self.heads}")
        if self.audio_schedule not in ("progressive", "constant"):
            raise ModelError(f"unknown audio schedule {self.audio_schedule!r}")
        for name in ("D", "N", "F", "heads", "k_max", "vocab", "audio_dim", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.D // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def modality_scale(layer: int, L: int, gamma: float) -> float:
    """Audio residual weight (layer / L) ** gamma for 1-based ``layer``."""
    if not 1 <= layer <= L:
        raise ModelError(f"layer {layer} outside 1..{L}")
    if not gamma > 1:
        raise ModelError(f"gamma must exceed 1, got {gamma}")
    return (layer / L) ** gamma


def frame_times(F: int) -> np.ndarray:
    if F == 1:
        return np.zeros(1)
    return np.arange(F) / (F - 1)


def frame_features(tau: np.ndarray, n: int = FRAME_FREQS) -> np.ndarray:
    """cos/sin(pi k tau) for k = 1..n: smooth features of normalized frame time."""
    args = np.pi * np.asarray(tau, dtype=np.float64)[:, None] * np.arange(1, n + 1)[None, :]
    feats = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    # sin(pi k) and friends come out as ~1e-16; make them the exact zeros they are
    feats[np.abs(feats) < 1e-12] = 0.0
    return feats


def sinusoid(values: np.ndarray, freqs: int = TIME_FREQS) -> np.ndarray:
    """cos/sin features of ``values`` in [0, 1] (scaled by 1000), width 2*freqs."""
    values = np.asarray(values, dtype=np.float64) * 1000.0
    w = np.exp(-math.log(10000.0) * np.arange(freqs) / freqs)
    args = values[:, None] * w[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """Named float64 arrays, each tagged backbone / audio_adapter / paca."""

    arrays: dict[str, np.ndarray]
    tags: dict[str, str]

    def __post_init__(self):
        if set(self.arrays) != set(self.tags):
            raise ModelError("every array needs exactly one tag")
        bad = {t for t in self.tags.values() if t not in TAGS}
        if bad:
            raise ModelError(f"unknown tags {bad}")

    def names(self, tag: str | None = None) -> list[str]:
        return [n for n in self.arrays if tag is None or self.tags[n] == tag]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, dict(self.tags))

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def leaves(self, trainable=None) -> dict[str, ad.Tensor]:
        """Tensors for a forward pass; only names in ``trainable`` track gradients."""
        trainable = set(self.arrays) if trainable is None else set(trainable)
        return {
            k: ad.Tensor(v, requires_grad=k in trainable, name=k) for k, v in self.arrays.items()
        }


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    tags: dict[str, str] = {}
    D, H = cfg.D, cfg.D * cfg.mlp_ratio
    resid = 1.0 / math.sqrt(2 * cfg.L)

    def put(name, value, tag=BACKBONE):
        arrays[name] = np.asarray(value, dtype=np.float64)
        tags[name] = tag

    def dense(name, fan_in, fan_out, tag=BACKBONE, gain=1.0, zero=False, bias=True):
        w = np.zeros((fan_in, fan_out)) if zero else rng.normal(0.0, gain / math.sqrt(fan_in), (fan_in, fan_out))
        put(name + ".w", w, tag)
        if bias:
            put(name + ".b", np.zeros(fan_out), tag)

    def norm(name, tag=BACKBONE):
        put(name + ".g", np.ones(D), tag)
        put(name + ".b", np.zeros(D), tag)

    put("embed.tokens", rng.normal(0.0, 1.0, (cfg.vocab, D)))
    put("embed.null_text", np.zeros(D))
    dense("in", D, D)
    dense("ref", D, D)
    put("pos.spatial", rng.normal(0.0, 0.1, (cfg.N, D)))
    dense("time", 2 * TIME_FREQS, D, gain=0.5)
    dense("frame", 2 * FRAME_FREQS, D)
    dense("audio.proj", cfg.audio_dim, D, AUDIO_ADAPTER)
    put("audio.null", np.zeros(D), AUDIO_ADAPTER)
    put("phase.table", np.zeros((cfg.k_max + 1, D)), PACA)
    for l in range(1, cfg.L + 1):
        p = f"blocks.{l}."
        norm(p + "norm1")
        # key biases shift every score of a query equally and cancel in the softmax
        for m in "qkv":
            dense(p + "self." + m, D, D, bias=m != "k")
        dense(p + "self.o", D, D, gain=resid)
        norm(p + "norm2")
        for m in "qkv":
            dense(p + "text." + m, D, D, bias=m != "k")
        dense(p + "text.o", D, D, gain=resid)
        norm(p + "norm3", AUDIO_ADAPTER)
        for m in "qkv":
            dense(p + "audio." + m, D, D, AUDIO_ADAPTER, bias=m != "k")
        dense(p + "audio.o", D, D, AUDIO_ADAPTER, zero=True)
        norm(p + "norm4")
        dense(p + "ffn.1", D, H)
        dense(p + "ffn.2", H, D, gain=resid)
    norm("out.norm")
    dense("out", D, D)
    return ModelParams(arrays, tags)


# ---------------------------------------------------------------------------
# inputs


@dataclass
class ModelInputs:
    """A batch of conditioning and noisy latents.

    Text tokens are padded to a common length; ``token_mask`` marks real ones.
    ``windows[b, k]`` is phase k's normalized window (only read in hard-mask mode).
    """

    x: np.ndarray  # (B, F, N, D)
    t: np.ndarray  # (B,)
    token_ids: np.ndarray  # (B, M)
    tags: np.ndarray  # (B, M)
    token_mask: np.ndarray  # (B, M) bool
    audio: np.ndarray  # (B, F, audio_dim) frame-pooled features
    ref: np.ndarray  # (B, N, D)
    drop_text: np.ndarray = None  # (B,) bool
    drop_audio: np.ndarray = None  # (B,) bool
    windows: np.ndarray | None = None  # (B, k_max + 1, 2)

    def __post_init__(self):
        B = self.x.shape[0]
        if self.drop_text is None:
            self.drop_text = np.zeros(B, dtype=bool)
        if self.drop_audio is None:
            self.drop_audio = np.zeros(B, dtype=bool)

    @property
    def batch(self) -> int:
        return self.x.shape[0]

    def replace(self, **kw) -> "ModelInputs":
        d = dict(self.__dict__)
        d.update(kw)
        return ModelInputs(**d)


def pad_sequences(seqs, k_max: int = 8):
    """Stack PhaseTokenSequences into (ids, tags, mask) arrays."""
    M = max(len(s) for s in seqs)
    B = len(seqs)
    ids = np.zeros((B, M), dtype=np.int64)
    tags = np.zeros((B, M), dtype=np.int64)
    mask = np.zeros((B, M), dtype=bool)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s.ids
        tags[b, : len(s)] = s.tags
        mask[b, : len(s)] = True
    return ids, tags, mask


def prompt_windows(prompts, k_max: int) -> np.ndarray:
    w = np.full((len(prompts), k_max + 1, 2), np.nan)
    for b, p in enumerate(prompts):
        for ph in p.phases:
            w[b, ph.index] = (ph.start, ph.end)
    return w


# ---------------------------------------------------------------------------
# forward


def _check(cfg: ModelConfig, inp: ModelInputs):
    B = inp.batch
    expect = {
        "x": (B, cfg.F, cfg.N, cfg.D),
        "t": (B,),
        "audio": (B, cfg.F, cfg.audio_dim),
        "ref": (B, cfg.N, cfg.D),
    }
    for name, shape in expect.items():
        got = np.shape(getattr(inp, name))
        if got != shape:
            raise ModelError(f"{name} has shape {got}, expected {shape}")
    if inp.token_ids.shape != inp.tags.shape or inp.token_ids.shape != inp.token_mask.shape:
        raise ModelError("token ids, tags and mask must share a shape")
    if inp.token_ids.ndim != 2 or inp.token_ids.shape[0] != B or inp.token_ids.shape[1] == 0:
        raise ModelError(f"token ids must be (B, M) with M >= 1, got {inp.token_ids.shape}")
    if not (inp.token_mask.any(axis=1) | inp.drop_text).all():
        raise ModelError("a sample has no text tokens")
    if np.any((inp.t < 0) | (inp.t > 1)):
        raise ModelError("flow time outside [0, 1]")
    if inp.tags.max() > cfg.k_max:
        raise ModelError(f"phase tag {inp.tags.max()} exceeds k_max={cfg.k_max}")
    if inp.token_ids.max() >= cfg.vocab:
        raise ModelError(f"token id {inp.token_ids.max()} outside vocabulary of {cfg.vocab}")


def _linear(P, name, x):
    y = ad.matmul(x, P[name + ".w"])
    b = P.get(name + ".b")
    return y if b is None else ad.add(y, b)


def _norm(P, name, x):
    return ad.layer_norm(x, P[name + ".g"], P[name + ".b"])


def _heads(x: ad.Tensor, H: int, transpose: bool = False) -> ad.Tensor:
    B, T, D = x.shape
    x = ad.reshape(x, (B, T, H, D // H))
    return ad.permute(x, (0, 2, 3, 1) if transpose else (0, 2, 1, 3))


def attention(q, k, v, heads: int, bias: np.ndarray | None = None):
    """Multi-head softmax attention; returns (output, probabilities)."""
    B, Tq, D = q.shape
    s = ad.scale(ad.matmul(_heads(q, heads), _heads(k, heads, transpose=True)), 1.0 / math.sqrt(D // heads))
    if bias is not None:
        s = ad.add(s, ad.constant(np.broadcast_to(bias, s.shape)))
    p = ad.softmax_rows(s)
    o = ad.permute(ad.matmul(p, _heads(v, heads)), (0, 2, 1, 3))
    return ad.reshape(o, (B, Tq, D)), p


def _text_bias(cfg: ModelConfig, inp: ModelInputs, mask: np.ndarray, tags: np.ndarray):
    B, M = mask.shape
    allowed = np.broadcast_to(mask[:, None, :], (B, cfg.F, M)).copy()
    if cfg.hard_mask and inp.windows is not None:
        tau = frame_times(cfg.F)
        for b in range(B):
            for m in range(M):
                k = tags[b, m]
                if k == 0 or not mask[b, m]:
                    continue
                start, end = inp.windows[b, k]
                last = end >= np.nanmax(inp.windows[b, :, 1])
                inside = (tau >= start) & ((tau < end) | (last & (tau <= end)))
                allowed[b, :, m] &= inside
    bias = np.where(allowed, 0.0, MASK_VALUE)
    # frames -> tokens: every spatial token of frame f shares the row
    bias = np.repeat(bias, cfg.N, axis=1)
    return bias[:, None, :, :]


def forward(cfg: ModelConfig, params: Mapping[str, ad.Tensor], inp: ModelInputs, record: dict | None = None):
    """Velocity prediction, shape (B, F, N, D).

    With ``record`` given, post-softmax text cross-attention probabilities of
    every block are stored under ``record[layer]`` as (B, heads, F*N, M).
    """
    _check(cfg, inp)
    P = {k: (v if isinstance(v, ad.Tensor) else ad.constant(v)) for k, v in params.items()}
    B, F, N, D = inp.x.shape
    T = F * N
    H = cfg.heads
    frame_of = np.repeat(np.arange(F), N)  # token -> frame
    spatial_of = np.tile(np.arange(N), F)

    h = _linear(P, "in", ad.constant(inp.x.reshape(B, T, D)))
    temb = _linear(P, "time", ad.constant(sinusoid(inp.t)))
    h = ad.add(h, ad.gather(temb, np.repeat(np.arange(B), T).reshape(B, T)))
    femb = _linear(P, "frame", ad.constant(frame_features(frame_times(F))))
    h = ad.add(h, ad.gather(femb, np.broadcast_to(frame_of, (B, T))))
    h = ad.add(h, ad.gather(P["pos.spatial"], np.broadcast_to(spatial_of, (B, T))))
    ref = _linear(P, "ref", ad.constant(inp.ref))
    ref = ad.add(ref, ad.gather(P["pos.spatial"], np.broadcast_to(np.arange(N), (B, N))))

    # text context C' (with learned null token for dropped samples)
    M = inp.token_ids.shape[1]
    ctx = ad.gather(P["embed.tokens"], inp.token_ids)
    if cfg.phase_embeddings:
        ctx = ad.add(ctx, ad.gather(P["phase.table"], inp.tags))
    mask = inp.token_mask.copy()
    tags = inp.tags
    if inp.drop_text.any():
        rows = ad.concat([ad.reshape(ctx, (B * M, D)), ad.reshape(P["embed.null_text"], (1, D))], axis=0)
        idx = np.arange(B * M).reshape(B, M)
        idx[inp.drop_text, 0] = B * M
        ctx = ad.gather(rows, idx)
        mask[inp.drop_text] = False
        mask[inp.drop_text, 0] = True
        tags = tags.copy()
        tags[inp.drop_text] = 0
    text_bias = _text_bias(cfg, inp, mask, tags)

    # audio tokens A, one per frame
    audio = _linear(P, "audio.proj", ad.constant(inp.audio))
    if inp.drop_audio.any():
        rows = ad.concat([ad.reshape(audio, (B * F, D)), ad.reshape(P["audio.null"], (1, D))], axis=0)
        idx = np.arange(B * F).reshape(B, F)
        idx[inp.drop_audio] = B * F
        audio = ad.gather(rows, idx)
    audio_rows = np.arange(B)[:, None] * F + frame_of[None, :]  # (B, T)
    head_sum = np.kron(np.eye(H), np.ones((cfg.head_dim, 1)))  # (D, H)

    for l in range(1, cfg.L + 1):
        p = f"blocks.{l}."
        # self-attention: latent queries, latent + read-only reference keys/values
        xn = _norm(P, p + "norm1", h)
        rn = _norm(P, p + "norm1", ref)
        kv = ad.concat([xn, rn], axis=1)
        o, _ = attention(_linear(P, p + "self.q", xn), _linear(P, p + "self.k", kv), _linear(P, p + "self.v", kv), H)
        h = ad.add(h, _linear(P, p + "self.o", o))

        # phase-aware text cross-attention
        xn = _norm(P, p + "norm2", h)
        o, probs = attention(
            _linear(P, p + "text.q", xn), _linear(P, p + "text.k", ctx), _linear(P, p + "text.v", ctx), H, text_bias
        )
        if record is not None:
            record[l] = probs.data
        h = ad.add(h, _linear(P, p + "text.o", o))

        # frame-wise audio cross-attention, residual scaled by depth
        xn = _norm(P, p + "norm3", h)
        q = _linear(P, p + "audio.q", xn)
        k = ad.gather(ad.reshape(_linear(P, p + "audio.k", audio), (B * F, D)), audio_rows)
        v = ad.gather(ad.reshape(_linear(P, p + "audio.v", audio), (B * F, D)), audio_rows)
        s = ad.scale(ad.matmul(ad.mul(q, k), ad.constant(head_sum)), 1.0 / math.sqrt(cfg.head_dim))
        w = ad.softmax_rows(ad.reshape(s, (B, T, H, 1)))  # one key per frame
        o = ad.mul(ad.matmul(ad.reshape(w, (B, T, H)), ad.constant(head_sum.T)), v)
        r = _linear(P, p + "audio.o", o)
        f_l = 1.0 if cfg.audio_schedule == "constant" else modality_scale(l, cfg.L, cfg.gamma)
        h = ad.add(h, ad.scale(r, f_l))

        xn = _norm(P, p + "norm4", h)
        h = ad.add(h, _linear(P, p + "ffn.2", ad.gelu(_linear(P, p + "ffn.1", xn))))

    out = _linear(P, "out", _norm(P, "out.norm", h))
    return ad.reshape(out, (B, F, N, D))


# ---------------------------------------------------------------------------
# attention probe


def block_mass(probs: np.ndarray, tags: np.ndarray, mask: np.ndarray, F: int, K: int) -> np.ndarray:
    """Per-frame attention mass on each block, (F, K+1), from one sample's probabilities.

    ``probs`` is (heads, F*N, M); mass is averaged over heads and the frame's
    spatial queries, then summed over the tokens of each block.
    """
    heads, T, M = probs.shape
    per_frame = probs.reshape(heads, F, T // F, M).mean(axis=(0, 2))  # (F, M)
    out = np.zeros((F, K + 1))
    for k in range(K + 1):
        sel = (tags == k) & mask
        out[:, k] = per_frame[:, sel].sum(axis=1)
    return out


def attention_probe(cfg: ModelConfig, params, inp: ModelInputs, layers, K: int | None = None) -> dict[int, np.ndarray]:
    """Text cross-attention mass per layer: {layer: (B, F, K+1)}, rows summing to 1."""
    layers = list(layers)
    for l in layers:
        if not 1 <= l <= cfg.L:
            raise ModelError(f"layer {l} outside 1..{cfg.L}")
    record: dict = {}
    forward(cfg, params, inp, record=record)
    K = int(inp.tags.max()) if K is None else K
    out = {}
    for l in layers:
        probs = record[l]
        out[l] = np.stack(
            [block_mass(probs[b], inp.tags[b], inp.token_mask[b], cfg.F, K) for b in range(inp.batch)]
        )
    return out
