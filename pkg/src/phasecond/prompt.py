"""Structured prompts: one base description plus time-anchored phase blocks.

File format (UTF-8, line oriented)::

    Base: A woman in business attire speaking professionally
    Phase-1 [0-2s]: Gestures outward with open palm
    Phase-2 [2-4s]: Points downward to emphasize detail

Blank lines and ``#`` comments are ignored.  The ``[0-2s]`` anchor is
metadata; only the description text is ever tokenized.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

MAX_PHASES = 8

_BASE_RE = re.compile(r"^Base\s*:(.*)$")
_PHASE_RE = re.compile(r"^Phase-(\S*?)\s*\[([^\]]*)\]\s*:(.*)$")
_WINDOW_RE = re.compile(r"^\s*(-?[0-9]*\.?[0-9]+)\s*-\s*(-?[0-9]*\.?[0-9]+)\s*s\s*$")


@dataclass(frozen=True)
class Diagnostic:
    line: int
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.message} at line {self.line}"


class PromptError(ValueError):
    """Base class for prompt errors."""


class PromptParseError(PromptError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


class OverlapError(PromptError):
    pass


class RangeError(PromptError):
    pass


@dataclass(frozen=True)
class PhaseBlock:
    index: int
    text: str
    start: float
    end: float

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise PromptError(f"phase {self.index}: need 0 <= start < end, got [{self.start}, {self.end}]")
        if not self.text.strip():
            raise PromptError(f"phase {self.index}: empty text")


@dataclass(frozen=True)
class StructuredPrompt:
    """Base text plus phases.  Windows are seconds until normalized."""

    base: str
    phases: tuple[PhaseBlock, ...] = field(default_factory=tuple)
    duration: float | None = None
    normalized: bool = False

    @property
    def K(self) -> int:
        return len(self.phases)

    def phase(self, index: int) -> PhaseBlock:
        for ph in self.phases:
            if ph.index == index:
                return ph
        raise KeyError(index)


def _number(s: str) -> str:
    x = float(s)
    return str(int(x)) if x.is_integer() else repr(x)


def parse_prompt(source: str) -> StructuredPrompt:
    """Parse prompt text.  All problems are collected; the first one leads the message."""
    diags: list[Diagnostic] = []
    base: str | None = None
    phases: list[PhaseBlock] = []
    seen: set[int] = set()
    first_content = True

    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _BASE_RE.match(line)
        if m:
            if base is not None:
                diags.append(Diagnostic(lineno, "duplicate-base", "duplicate Base line"))
            elif not first_content:
                diags.append(Diagnostic(lineno, "base-order", "Base line must come before phases"))
            text = m.group(1).strip()
            if not text:
                diags.append(Diagnostic(lineno, "empty-text", "empty Base text"))
            base = text
            first_content = False
            continue
        first_content = False
        m = _PHASE_RE.match(line)
        if not m:
            diags.append(Diagnostic(lineno, "syntax", f"unrecognised line {line!r}"))
            continue
        k_str, window, text = m.group(1), m.group(2), m.group(3).strip()
        if not k_str.isdigit() or int(k_str) < 1:
            diags.append(Diagnostic(lineno, "bad-index", f"phase index {k_str!r} is not a positive integer"))
            continue
        k = int(k_str)
        wm = _WINDOW_RE.match(window)
        if not wm:
            if re.match(r"^\s*-", window):
                diags.append(Diagnostic(lineno, "negative-window", "window start is negative"))
            else:
                diags.append(Diagnostic(lineno, "malformed-window", f"malformed window [{window}]"))
            continue
        start, end = float(wm.group(1)), float(wm.group(2))
        if start < 0 or end < 0:
            diags.append(Diagnostic(lineno, "negative-window", "window bound is negative"))
            continue
        if start >= end:
            diags.append(Diagnostic(lineno, "window-order", "window start >= end"))
            continue
        if not text:
            diags.append(Diagnostic(lineno, "empty-text", f"empty text for phase {k}"))
            continue
        if k in seen:
            diags.append(Diagnostic(lineno, "duplicate-phase", f"duplicate phase index {k}"))
            continue
        if k != len(phases) + 1:
            diags.append(Diagnostic(lineno, "phase-order", f"phase index {k} out of sequence, expected {len(phases) + 1}"))
            continue
        if k > MAX_PHASES:
            diags.append(Diagnostic(lineno, "too-many-phases", f"more than {MAX_PHASES} phases"))
            continue
        seen.add(k)
        phases.append(PhaseBlock(k, text, start, end))

    if base is None:
        diags.append(Diagnostic(1, "missing-base", "missing Base line"))
    if diags:
        raise PromptParseError(diags)
    return StructuredPrompt(base=base, phases=tuple(phases))


def serialize_prompt(p: StructuredPrompt) -> str:
    """Render back to the file format (windows in seconds)."""
    factor = p.duration if p.normalized else 1.0
    lines = [f"Base: {p.base}"]
    for ph in p.phases:
        lines.append(f"Phase-{ph.index} [{_number(ph.start * factor)}-{_number(ph.end * factor)}s]: {ph.text}")
    return "\n".join(lines) + "\n"


def validate_and_normalize(p: StructuredPrompt, duration: float) -> StructuredPrompt:
    """Sort phases by start, check range and overlap, divide windows by ``duration``."""
    if not duration > 0:
        raise PromptError(f"duration must be positive, got {duration}")
    if p.normalized:
        raise PromptError("prompt is already normalized")
    phases = sorted(p.phases, key=lambda ph: ph.start)
    for ph in phases:
        if ph.end > duration:
            raise RangeError(f"phase {ph.index} window [{ph.start}, {ph.end}] exceeds duration {duration}")
    for a, b in zip(phases, phases[1:]):
        if a.end > b.start:
            raise OverlapError(
                f"phase {a.index} [{a.start}, {a.end}] overlaps phase {b.index} [{b.start}, {b.end}]"
            )
    scaled = tuple(replace(ph, start=ph.start / duration, end=ph.end / duration) for ph in phases)
    return StructuredPrompt(base=p.base, phases=scaled, duration=float(duration), normalized=True)


def phase_at(p: StructuredPrompt, tau: float) -> int | None:
    """Index of the phase whose window holds ``tau``, or None in a gap.

    Windows are half-open ``[start, end)``; the last phase also owns its end.
    """
    if not p.normalized:
        raise PromptError("phase_at needs a normalized prompt")
    for i, ph in enumerate(p.phases):
        last = i == len(p.phases) - 1
        if ph.start <= tau < ph.end or (last and tau == ph.end):
            return ph.index
    return None


def load_prompt(path) -> StructuredPrompt:
    with open(path, encoding="utf-8") as fh:
        return parse_prompt(fh.read())
