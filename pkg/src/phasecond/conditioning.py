"""Text and audio conditioning: tokenization, phase tags, audio pooling."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .prompt import StructuredPrompt

PAD_ID = 0
UNK_ID = 1
_WORD_RE = re.compile(r"[a-z0-9]+")


class ConditioningError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Word to id map.  Ids 0 and 1 are padding and unknown."""

    def __init__(self, words):
        self.words: list[str] = []
        self._ids: dict[str, int] = {}
        for w in words:
            w = w.strip().lower()
            if not w or w in self._ids:
                continue
            self._ids[w] = len(self.words) + 2
            self.words.append(w)

    def __len__(self) -> int:
        return len(self.words) + 2

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id(self, word: str) -> int:
        return self._ids.get(word.lower(), UNK_ID)

    def encode(self, text: str) -> list[int]:
        return [self.id(w) for w in tokenize(text)]

    @classmethod
    def load(cls, path) -> "Vocabulary":
        # line i (0-based) holds the word with id i + 2
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(w + "\n" for w in self.words)


@dataclass
class PhaseTokenSequence:
    ids: np.ndarray  # (M,) int
    tags: np.ndarray  # (M,) int, 0 = base block
    embedded: ad.Tensor | None = None  # C, (M, D) before phase embeddings

    def __len__(self) -> int:
        return len(self.ids)


def encode_text(
    p: StructuredPrompt,
    vocab: Vocabulary,
    embed: ad.Tensor | None = None,
    phase_tags: bool = True,
) -> PhaseTokenSequence:
    """Tokenize base then each phase in order, tagging tokens with their block.

    ``phase_tags=False`` flattens everything into one global prompt (all tags 0).
    """
    if p.phases and not p.normalized:
        raise ConditioningError("encode_text needs a normalized prompt")
    ids: list[int] = vocab.encode(p.base)
    tags: list[int] = [0] * len(ids)
    for ph in p.phases:
        chunk = vocab.encode(ph.text)
        ids += chunk
        tags += [ph.index if phase_tags else 0] * len(chunk)
    if not ids:
        raise ConditioningError("prompt produced no tokens")
    seq = PhaseTokenSequence(np.array(ids, dtype=np.int64), np.array(tags, dtype=np.int64))
    if embed is not None:
        seq.embedded = ad.gather(embed, seq.ids)
    return seq


def apply_phase_embeddings(c: ad.Tensor, tags, table: ad.Tensor) -> ad.Tensor:
    """C' = C + E[tag] per token."""
    tags = np.asarray(tags)
    if tags.size and tags.max() >= table.shape[0]:
        raise ConditioningError(f"phase tag {tags.max()} outside table with {table.shape[0]} rows")
    if tags.min(initial=0) < 0:
        raise ConditioningError("negative phase tag")
    return ad.add(c, ad.gather(table, tags))


@dataclass
class AudioTrack:
    envelope: np.ndarray  # (T_a,)
    features: np.ndarray  # (T_a, D_a)

    @classmethod
    def from_envelope(cls, envelope) -> "AudioTrack":
        env = np.asarray(envelope, dtype=np.float64)
        return cls(env, audio_features(env))


AUDIO_FEATURES = 4


def audio_features(envelope: np.ndarray) -> np.ndarray:
    """Raw per-sample features of an amplitude envelope."""
    env = np.asarray(envelope, dtype=np.float64)
    diff = np.diff(env, prepend=env[:1])
    return np.stack([env, env * env, diff, np.abs(diff)], axis=1)


def _bins(length: int, frames: int) -> np.ndarray:
    if length < frames:
        raise ConditioningError(f"audio has {length} samples, fewer than {frames} frames")
    return (np.arange(frames + 1) * length) // frames


def pool_frames(values: np.ndarray, frames: int) -> np.ndarray:
    """Mean over ``frames`` equal bins along axis 0."""
    values = np.asarray(values, dtype=np.float64)
    edges = _bins(values.shape[0], frames)
    return np.stack([values[a:b].mean(axis=0) for a, b in zip(edges[:-1], edges[1:])])


def project_audio(track: AudioTrack, frames: int, weight: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    """Frame tokens A (frames x D): pooled features, linearly projected."""
    pooled = pool_frames(track.features, frames)
    return ad.add(ad.matmul(ad.constant(pooled), weight), bias)
