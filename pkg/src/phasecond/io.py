"""Deterministic on-disk container for named float64 arrays.

Layout::

    PHASECOND-ARRAYS\n
    <8-byte little-endian header length>
    <header: UTF-8 JSON, sorted keys>
    <payload: little-endian float64 arrays, manifest order>

The header carries ``version``, ``kind``, free-form ``meta``, ``payload_bytes``
and a ``manifest`` of ``{name, shape, tag}`` entries.  Identical inputs give
identical bytes, so files can be compared with ``cmp``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import TAGS, ModelConfig, ModelParams

MAGIC = b"PHASECOND-ARRAYS\n"
VERSION = 1


class FormatError(ValueError):
    """File is not a readable container."""


class CompatibilityError(ValueError):
    """File is readable but does not fit the requested use."""


@dataclass
class Container:
    kind: str
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    tags: dict[str, str | None] = field(default_factory=dict)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


def encode(c: Container) -> bytes:
    manifest = []
    chunks = []
    for name, a in c.arrays.items():
        a = np.asarray(a, dtype="<f8", order="C")
        manifest.append({"name": name, "shape": list(a.shape), "tag": c.tags.get(name)})
        chunks.append(a.tobytes())
    payload = b"".join(chunks)
    header = _canonical(
        {"version": VERSION, "kind": c.kind, "meta": c.meta, "manifest": manifest, "payload_bytes": len(payload)}
    )
    return MAGIC + struct.pack("<Q", len(header)) + header + payload


def decode(blob: bytes, source: str = "<bytes>") -> Container:
    if not blob.startswith(MAGIC):
        raise FormatError(f"{source}: not a phasecond array file")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise FormatError(f"{source}: truncated header")
    (n,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(blob[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}: bad header ({e})") from None
    pos += n
    if header.get("version") != VERSION:
        raise CompatibilityError(f"{source}: format version {header.get('version')} != {VERSION}")
    manifest = header["manifest"]
    declared = sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in manifest)
    payload = blob[pos:]
    if declared != header["payload_bytes"] or declared != len(payload):
        raise FormatError(
            f"{source}: manifest declares {declared} bytes, header {header['payload_bytes']}, payload has {len(payload)}"
        )
    arrays, tags = {}, {}
    off = 0
    for e in manifest:
        size = 8 * int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(payload[off : off + size], dtype="<f8").reshape(tuple(e["shape"])).astype(np.float64)
        tags[e["name"]] = e["tag"]
        off += size
    return Container(header["kind"], arrays, header["meta"], tags)


def save(path, c: Container) -> None:
    Path(path).write_bytes(encode(c))


def load(path, kind: str | None = None) -> Container:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror}") from None
    c = decode(blob, str(path))
    if kind is not None and c.kind != kind:
        raise CompatibilityError(f"{path}: expected a {kind} file, found {c.kind}")
    return c


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(_canonical(cfg.to_dict())).hexdigest()[:16]


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, stage: int, step: int, extra: dict | None = None) -> None:
    meta = {"config_hash": config_hash(cfg), "model": cfg.to_dict(), "stage": stage, "step": step, **(extra or {})}
    save(path, Container("checkpoint", dict(params.arrays), meta, dict(params.tags)))


def save_adapter(path, adapter: Mapping[str, np.ndarray], cfg: ModelConfig, step: int) -> None:
    from .model import AUDIO_ADAPTER

    meta = {"config_hash": config_hash(cfg), "model": cfg.to_dict(), "stage": 1, "step": step}
    save(path, Container("adapter", dict(adapter), meta, {n: AUDIO_ADAPTER for n in adapter}))


def _check_hash(c: Container, cfg: ModelConfig | None, force: bool, path) -> None:
    if cfg is None or force:
        return
    want = config_hash(cfg)
    got = c.meta.get("config_hash")
    if got != want:
        raise CompatibilityError(f"{path}: config hash {got} does not match current config {want} (use --force)")


def load_checkpoint(path, cfg: ModelConfig | None = None, force: bool = False) -> tuple[ModelParams, dict]:
    c = load(path, "checkpoint")
    _check_hash(c, cfg, force, path)
    bad = {n: t for n, t in c.tags.items() if t not in TAGS}
    if bad:
        raise FormatError(f"{path}: arrays without a valid component tag: {sorted(bad)}")
    return ModelParams(c.arrays, c.tags), c.meta


def load_adapter(path, cfg: ModelConfig | None = None, force: bool = False) -> tuple[dict[str, np.ndarray], dict]:
    c = load(path)
    if c.kind not in ("adapter", "checkpoint"):
        raise CompatibilityError(f"{path}: expected an adapter file, found {c.kind}")
    _check_hash(c, cfg, force, path)
    if c.kind == "checkpoint":
        from .training import extract_audio_adapter

        return extract_audio_adapter(ModelParams(c.arrays, c.tags)), c.meta
    return c.arrays, c.meta


def model_config_from(meta: dict) -> ModelConfig:
    return ModelConfig(**meta["model"])


# ---------------------------------------------------------------------------
# latents and samples


def save_latent(path, latent: np.ndarray, prompt_text: str, meta: dict | None = None) -> None:
    save(path, Container("latent", {"latent": latent}, {"prompt": prompt_text, **(meta or {})}))


def load_latent(path) -> tuple[np.ndarray, dict]:
    c = load(path, "latent")
    return c.arrays["latent"], c.meta


def save_sample(path, sample) -> None:
    meta = {
        "seed": sample.seed,
        "prompt": sample.prompt_text,
        "caption": sample.caption,
        "schedule": [[a, [s, e]] for a, (s, e) in sample.schedule],
    }
    arrays = {"x0": sample.x0, "envelope": sample.audio.envelope, "ref": sample.ref}
    save(path, Container("sample", arrays, meta))


def load_sample(path):
    from .conditioning import AudioTrack
    from .prompt import parse_prompt, validate_and_normalize
    from .synthworld import DEFAULT_DURATION, SyntheticSample

    c = load(path, "sample")
    m = c.meta
    prompt = validate_and_normalize(parse_prompt(m["prompt"]), DEFAULT_DURATION)
    return SyntheticSample(
        x0=c.arrays["x0"],
        audio=AudioTrack.from_envelope(c.arrays["envelope"]),
        prompt=prompt,
        prompt_text=m["prompt"],
        caption=m["caption"],
        schedule=[(int(a), (float(s), float(e))) for a, (s, e) in m["schedule"]],
        ref=c.arrays["ref"],
        seed=int(m["seed"]),
    )
