"""Synthetic latent-space world with measurable actions and lip motion.

Channel 0 of every token is a lip proxy: the audio envelope pooled to the
frame.  Channels ``1..D_act`` hold the action subspace, where each action has
a unit signature; active actions add ``ramp(f) * signature``.  Remaining
channels carry a static per-sample appearance field, which is also what the
reference latent contains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conditioning import AudioTrack, Vocabulary, pool_frames, tokenize
from .model import frame_times
from .prompt import StructuredPrompt, parse_prompt, phase_at, validate_and_normalize

ACTION_NAMES = (
    "waves", "nods", "points", "claps", "shrugs", "bows", "salutes", "stretches",
    "crosses", "raises", "spins", "leans", "tilts", "kneels", "jumps", "beckons",
)
BASE_PROMPTS = (
    "a woman in business attire speaking professionally",
    "a man speaking",
    "a young presenter talking calmly in a bright studio",
    "an older man in a grey suit speaking warmly",
    "a smiling woman talking to the camera at home",
    "a teacher explaining a lesson in a classroom",
    "a calm narrator speaking in a quiet office",
    "a cheerful host talking outdoors in a park",
)
BRIEF_CAPTION = "a speaker talking"
PHASE_TEMPLATE = "performs {}"
SAMPLES_PER_FRAME = 16
DEFAULT_DURATION = 4.0
DEFAULT_THETA_HIT = 0.5


class SynthError(ValueError):
    pass


def default_vocabulary() -> Vocabulary:
    words: list[str] = []
    for text in BASE_PROMPTS + (BRIEF_CAPTION, PHASE_TEMPLATE.format("")):
        words += tokenize(text)
    words += list(ACTION_NAMES)
    return Vocabulary(words)


@dataclass
class ActionSchema:
    """Orthonormal action signatures living in channels ``1..d_act``."""

    signatures: np.ndarray  # (A_total, D); zero outside the action channels
    names: tuple[str, ...]
    d_act: int

    @property
    def n_actions(self) -> int:
        return len(self.names)

    @property
    def channels(self) -> slice:
        return slice(1, 1 + self.d_act)

    def signature(self, action: int) -> np.ndarray:
        """Unit signature of 1-based ``action`` restricted to the action channels."""
        return self.signatures[action - 1, self.channels]

    def action_id(self, name: str) -> int:
        return self.names.index(name) + 1

    @classmethod
    def build(cls, D: int, n_actions: int = 16, d_act: int | None = None, seed: int = 0) -> "ActionSchema":
        d_act = n_actions if d_act is None else d_act
        if d_act < n_actions:
            raise SynthError(f"{n_actions} orthonormal signatures need d_act >= {n_actions}")
        if d_act + 1 > D:
            raise SynthError(f"action subspace of {d_act} channels plus lip channel exceeds D={D}")
        if n_actions > len(ACTION_NAMES):
            raise SynthError(f"at most {len(ACTION_NAMES)} named actions")
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.normal(size=(d_act, d_act)))
        q = q * np.sign(np.diag(r))
        sig = np.zeros((n_actions, D))
        sig[:, 1 : 1 + d_act] = q[:, :n_actions].T
        return cls(sig, ACTION_NAMES[:n_actions], d_act)


@dataclass
class SyntheticSample:
    x0: np.ndarray  # (F, N, D)
    audio: AudioTrack
    prompt: StructuredPrompt  # normalized
    prompt_text: str
    caption: str
    schedule: list[tuple[int, tuple[float, float]]]  # (action id, normalized window)
    ref: np.ndarray  # (N, D)
    seed: int = 0

    @property
    def K(self) -> int:
        return len(self.schedule)

    @property
    def F(self) -> int:
        return self.x0.shape[0]


def heldout_combo(actions) -> bool:
    """Ordered action tuples reserved for evaluation (16 of the 240 ordered pairs)."""
    if not actions:
        return False
    h = 0
    for a in actions:
        h = (h * 31 + int(a)) % 1_000_003
    return h % 8 == 0


def envelope(rng: np.random.Generator, length: int, frames: int = 16) -> np.ndarray:
    """Positive sum of 2-4 sinusoids at distinct whole cycle counts per clip.

    Whole cycles keep different samples' frame-pooled envelopes close to
    orthogonal; each further component is weaker by a factor 0.3.
    """
    s = np.arange(length) / length
    top = max(1, min(7, (frames - 1) // 2))
    n = min(int(rng.integers(2, 5)), top)
    env = np.full(length, 0.2)
    for i, cycles in enumerate(rng.choice(np.arange(1, top + 1), size=n, replace=False)):
        amp = rng.uniform(0.3, 0.6) * 0.3**i
        env += amp * 0.5 * (1 + np.sin(2 * math.pi * cycles * s + rng.uniform(0, 2 * math.pi)))
    return env


def ramp(tau: np.ndarray, start: float, end: float, F: int) -> np.ndarray:
    """Activation profile of a window: 0.5 at an edge, 1 from one frame inside on."""
    d = np.minimum(tau - start, end - tau) * (F - 1)
    return np.where(d >= 0, np.clip((d + 1.0) / 2.0, 0.0, 1.0), 0.0)


def _seconds(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def gen_sample(
    seed: int,
    schema: ActionSchema,
    F: int = 16,
    K: int = 2,
    N: int = 16,
    D: int = 64,
    duration: float = DEFAULT_DURATION,
    noise: float = 0.02,
    appearance: float = 0.1,
    split: str = "any",
    k_max: int = 8,
) -> SyntheticSample:
    """Deterministic labeled sample.  ``split`` picks train / eval action combos."""
    if K < 0 or K > min(k_max, schema.n_actions):
        raise SynthError(f"K={K} outside 0..{min(k_max, schema.n_actions)}")
    if schema.signatures.shape[1] != D:
        raise SynthError("schema width does not match D")
    if split not in ("any", "train", "eval"):
        raise SynthError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, 7919])

    actions = tuple(int(a) + 1 for a in rng.permutation(schema.n_actions)[:K])
    while K and split != "any" and heldout_combo(actions) != (split == "eval"):
        actions = tuple(int(a) + 1 for a in rng.permutation(schema.n_actions)[:K])

    # interior boundaries jittered by up to 10% of a segment, rounded to 0.01 s
    cuts = [0.0]
    for i in range(1, K):
        b = (i + rng.uniform(-0.1, 0.1)) / K * duration
        cuts.append(float(_seconds(b)))
    cuts.append(duration)
    base = BASE_PROMPTS[rng.integers(len(BASE_PROMPTS))]
    lines = [f"Base: {base}"]
    for k, a in enumerate(actions, start=1):
        lines.append(
            f"Phase-{k} [{_seconds(cuts[k - 1])}-{_seconds(cuts[k])}s]: "
            + PHASE_TEMPLATE.format(schema.names[a - 1])
        )
    text = "\n".join(lines) + "\n"
    prompt = validate_and_normalize(parse_prompt(text), duration)

    env = envelope(rng, SAMPLES_PER_FRAME * F, F)
    audio = AudioTrack.from_envelope(env)
    lip = pool_frames(env, F)

    tau = frame_times(F)
    x0 = np.zeros((F, N, D))
    x0[:, :, 0] = lip[:, None]
    schedule = []
    for ph, a in zip(prompt.phases, actions):
        r = ramp(tau, ph.start, ph.end, F)
        x0 += r[:, None, None] * schema.signatures[a - 1][None, None, :]
        schedule.append((a, (ph.start, ph.end)))
    reserved = 1 + schema.d_act
    x0[:, :, :reserved] += noise * rng.normal(size=(F, N, reserved))
    look = np.zeros((N, D))
    look[:, reserved:] = appearance * rng.normal(size=(N, D - reserved))
    x0 += look[None]
    return SyntheticSample(
        x0=x0,
        audio=audio,
        prompt=prompt,
        prompt_text=text,
        caption=BRIEF_CAPTION,
        schedule=schedule,
        ref=look,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# metrics


def detect_action(x: np.ndarray, schema: ActionSchema, action: int) -> np.ndarray:
    """Per-frame mean projection of the action channels onto the action's signature."""
    x = np.asarray(x)
    return (x[:, :, schema.channels] @ schema.signature(action)).mean(axis=1)


def window_frames(prompt: StructuredPrompt, index: int, F: int) -> np.ndarray:
    tau = frame_times(F)
    return np.array([phase_at(prompt, t) == index for t in tau])


def _phase_actions(prompt: StructuredPrompt, schema: ActionSchema) -> list[tuple[int, int]]:
    """(phase index, action id) from the phase texts."""
    out = []
    for ph in prompt.phases:
        words = [w for w in tokenize(ph.text) if w in schema.names]
        if not words:
            raise SynthError(f"phase {ph.index} names no known action: {ph.text!r}")
        out.append((ph.index, schema.action_id(words[-1])))
    return out


def phase_hits(x, prompt: StructuredPrompt, schema: ActionSchema, theta_hit: float = DEFAULT_THETA_HIT) -> list[bool]:
    if theta_hit <= 0:
        raise SynthError("theta_hit must be positive")
    F = np.shape(x)[0]
    hits = []
    for index, action in _phase_actions(prompt, schema):
        act = detect_action(x, schema, action)
        inside = window_frames(prompt, index, F)
        mean_in = act[inside].mean() if inside.any() else 0.0
        mean_out = act[~inside].mean() if (~inside).any() else 0.0
        hits.append(bool(mean_in >= theta_hit and mean_in >= 2 * mean_out))
    return hits


def eval_hit_at_segment(x, prompt, schema, theta_hit: float = DEFAULT_THETA_HIT) -> float | None:
    """Fraction of phases whose action shows up in its window; None when K = 0."""
    if prompt.K == 0:
        return None
    hits = phase_hits(x, prompt, schema, theta_hit)
    return sum(hits) / len(hits)


def eval_temporal_correctness(x, prompt, schema) -> float:
    """Mean IoU between half-peak activation frames and each phase window."""
    if prompt.K == 0:
        raise SynthError("temporal correctness needs at least one phase")
    F = np.shape(x)[0]
    scores = []
    for index, action in _phase_actions(prompt, schema):
        act = detect_action(x, schema, action)
        peak = act.max()
        if peak <= 0:
            scores.append(0.0)
            continue
        detected = act >= 0.5 * peak
        window = window_frames(prompt, index, F)
        union = (detected | window).sum()
        scores.append(float((detected & window).sum() / union) if union else 0.0)
    return float(np.mean(scores))


def pearson(a, b) -> float | None:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if den == 0.0:
        return None
    return float(np.clip((a * b).sum() / den, -1.0, 1.0))


def eval_lip_corr(x, audio: AudioTrack) -> float | None:
    """Pearson r between the frame-pooled envelope and mean channel 0; None if undefined."""
    x = np.asarray(x)
    F = x.shape[0]
    if F < 3:
        raise SynthError("lip correlation needs at least 3 frames")
    return pearson(pool_frames(audio.envelope, F), x[:, :, 0].mean(axis=1))


def concentration(mass: np.ndarray, prompt: StructuredPrompt) -> float:
    """Mean over phases of (attention mass on the phase inside its window - outside).

    ``mass`` is (F, K+1) from the attention probe.
    """
    F = mass.shape[0]
    vals = []
    for ph in prompt.phases:
        inside = window_frames(prompt, ph.index, F)
        if inside.all() or not inside.any():
            continue
        col = mass[:, ph.index]
        vals.append(col[inside].mean() - col[~inside].mean())
    return float(np.mean(vals)) if vals else 0.0
