import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phasecond.conditioning import pool_frames
from phasecond.model import frame_times
from phasecond.prompt import parse_prompt, validate_and_normalize
from phasecond.synthworld import (
    DEFAULT_THETA_HIT,
    ActionSchema,
    SynthError,
    concentration,
    detect_action,
    eval_hit_at_segment,
    eval_lip_corr,
    eval_temporal_correctness,
    gen_sample,
    heldout_combo,
    ramp,
    window_frames,
)

SCHEMA = ActionSchema.build(64)


@pytest.fixture(scope="module")
def samples():
    return [gen_sample(s, SCHEMA) for s in range(100)]


def test_signatures_are_orthonormal():
    S = SCHEMA.signatures
    assert np.max(np.abs(S @ S.T - np.eye(16))) < 1e-10
    assert not np.any(S[:, 0]) and not np.any(S[:, 17:])


def test_schema_guards():
    with pytest.raises(SynthError):
        ActionSchema.build(16)
    with pytest.raises(SynthError):
        ActionSchema.build(64, n_actions=16, d_act=8)


def test_same_seed_same_sample():
    a, b = gen_sample(11, SCHEMA), gen_sample(11, SCHEMA)
    assert np.array_equal(a.x0, b.x0) and a.prompt_text == b.prompt_text
    assert np.array_equal(a.audio.envelope, b.audio.envelope)


def test_talking_only_sample():
    s = gen_sample(3, SCHEMA, K=0)
    assert s.prompt.K == 0 and s.schedule == []
    acts = np.stack([detect_action(s.x0, SCHEMA, a) for a in range(1, 17)])
    assert np.abs(acts).max() < 0.05
    assert eval_lip_corr(s.x0, s.audio) > 0.99
    assert eval_hit_at_segment(s.x0, s.prompt, SCHEMA) is None


def test_k_too_large():
    with pytest.raises(SynthError):
        gen_sample(0, SCHEMA, K=9)


def test_two_phase_sample_has_two_disjoint_activity_windows():
    s = gen_sample(5, SCHEMA, K=2)
    (a1, w1), (a2, w2) = s.schedule
    assert a1 != a2 and w1[1] == w2[0]
    tau = frame_times(16)
    act1 = detect_action(s.x0, SCHEMA, a1)
    act2 = detect_action(s.x0, SCHEMA, a2)
    on1, on2 = act1 > 0.25, act2 > 0.25
    assert np.array_equal(on1, (tau >= w1[0]) & (tau < w1[1]) | (np.abs(act1) > 0.25) & on1)
    assert not np.any(on1 & on2 & (act1 > 0.75) & (act2 > 0.75))
    # ramps: value 1 one frame inside, 0 outside
    assert np.allclose(ramp(tau, 0.25, 0.75, 16)[(tau > 0.25 + 1 / 15) & (tau < 0.75 - 1 / 15)], 1.0)
    assert np.all(ramp(tau, 0.25, 0.75, 16)[(tau < 0.25) | (tau > 0.75)] == 0)


def test_ground_truth_activation_matches_ramp(samples):
    noise_sd = 0.02 / np.sqrt(16)
    for s in samples[:20]:
        tau = frame_times(16)
        for a, (start, end) in s.schedule:
            expected = ramp(tau, start, end, 16)
            assert np.max(np.abs(detect_action(s.x0, SCHEMA, a) - expected)) < 6 * noise_sd


def test_orthogonal_action_reads_zero(samples):
    s = samples[0]
    used = {a for a, _ in s.schedule}
    other = next(a for a in range(1, 17) if a not in used)
    assert np.abs(detect_action(s.x0, SCHEMA, other)).max() < 0.05


def test_prompts_parse_cleanly_and_match_schedule(samples):
    for s in samples:
        p = validate_and_normalize(parse_prompt(s.prompt_text), 4.0)
        assert p == s.prompt
        assert [(ph.start, ph.end) for ph in p.phases] == [w for _, w in s.schedule]
        assert all(ph.text == f"performs {SCHEMA.names[a - 1]}" for ph, (a, _) in zip(p.phases, s.schedule))


def test_window_jitter_is_bounded(samples):
    cuts = [s.schedule[0][1][1] for s in samples]
    assert min(cuts) >= 0.45 - 1e-9 and max(cuts) <= 0.55 + 1e-9
    assert len(set(cuts)) > 10


def test_ground_truth_oracle(samples):
    hs = [eval_hit_at_segment(s.x0, s.prompt, SCHEMA) for s in samples]
    ious = [eval_temporal_correctness(s.x0, s.prompt, SCHEMA) for s in samples]
    rs = [eval_lip_corr(s.x0, s.audio) for s in samples]
    assert min(hs) == 1.0
    assert min(ious) >= 0.8
    assert min(rs) >= 0.99


def test_shuffled_audio_oracle(samples):
    rs = [abs(eval_lip_corr(s.x0, samples[(i + 1) % 100].audio)) for i, s in enumerate(samples)]
    assert np.mean(rs) < 0.2


def test_theta_hit_separates_truth_from_noise(samples):
    # inside-window mean of pure N(0,1) latents has sd 1/sqrt(N * frames_inside)
    worst_sd = 0.0
    for s in samples:
        for ph in s.prompt.phases:
            n_in = window_frames(s.prompt, ph.index, 16).sum()
            worst_sd = max(worst_sd, 1 / np.sqrt(16 * n_in))
    assert DEFAULT_THETA_HIT >= 5 * worst_sd
    plateau_floor = min(
        detect_action(s.x0, SCHEMA, a)[window_frames(s.prompt, k, 16)].mean()
        for s in samples
        for k, (a, _) in enumerate(s.schedule, start=1)
    )
    assert plateau_floor >= DEFAULT_THETA_HIT + 0.2
    rng = np.random.default_rng(0)
    noise_hits = [eval_hit_at_segment(rng.normal(size=(16, 16, 64)), s.prompt, SCHEMA) for s in samples]
    assert np.mean(noise_hits) == 0.0


def test_metric_examples(samples):
    s = samples[0]
    assert eval_hit_at_segment(np.zeros_like(s.x0), s.prompt, SCHEMA) == 0.0
    # keep only the first phase's action
    x = s.x0.copy()
    a2 = s.schedule[1][0]
    x[:, :, SCHEMA.channels] -= np.einsum("f,c->fc", detect_action(x, SCHEMA, a2), SCHEMA.signature(a2))[:, None, :]
    assert eval_hit_at_segment(x, s.prompt, SCHEMA) == 0.5


def test_iou_cases():
    p = validate_and_normalize(parse_prompt("Base: a\nPhase-1 [0-2s]: performs waves\nPhase-2 [2-4s]: performs nods"), 4.0)
    tau = frame_times(16)
    sig1, sig2 = SCHEMA.signatures[0], SCHEMA.signatures[1]
    x = np.zeros((16, 4, 64))
    # each action placed in the other's window: IoU 0
    x += ((tau >= 0.5)[:, None, None] * sig1) + ((tau < 0.5)[:, None, None] * sig2)
    assert eval_temporal_correctness(x, p, SCHEMA) == 0.0
    # active everywhere: IoU = window share of frames
    x = np.ones((16, 4, 1)) * (sig1 + sig2)
    expected = np.mean([window_frames(p, k, 16).mean() for k in (1, 2)])
    assert eval_temporal_correctness(x, p, SCHEMA) == pytest.approx(expected)
    assert eval_temporal_correctness(np.zeros((16, 4, 64)), p, SCHEMA) == 0.0


def test_lip_correlation_edge_cases(samples):
    s = samples[0]
    x = np.zeros_like(s.x0)
    x[:, :, 0] = pool_frames(s.audio.envelope, 16)[:, None]
    assert eval_lip_corr(x, s.audio) == pytest.approx(1.0, abs=1e-12)
    assert eval_lip_corr(np.zeros_like(s.x0), s.audio) is None
    with pytest.raises(SynthError):
        eval_lip_corr(np.zeros((2, 4, 64)), s.audio)


def test_splits_partition_action_combos():
    for seed in range(60):
        tr = gen_sample(seed, SCHEMA, split="train")
        ev = gen_sample(seed, SCHEMA, split="eval")
        assert not heldout_combo([a for a, _ in tr.schedule])
        assert heldout_combo([a for a, _ in ev.schedule])


def test_heldout_pairs():
    pairs = [(a, b) for a in range(1, 17) for b in range(1, 17) if a != b]
    held = [p for p in pairs if heldout_combo(p)]
    assert len(held) == 16
    assert all((b - a) % 8 == 0 for a, b in held)


def test_concentration_cases():
    p = validate_and_normalize(parse_prompt("Base: a\nPhase-1 [0-2s]: performs waves\nPhase-2 [2-4s]: performs nods"), 4.0)
    w1, w2 = window_frames(p, 1, 16), window_frames(p, 2, 16)
    focused = np.zeros((16, 3))
    focused[w1, 1] = 1.0
    focused[w2, 2] = 1.0
    assert concentration(focused, p) == 1.0
    assert concentration(np.full((16, 3), 1 / 3), p) == 0.0
    assert concentration(focused[:, [0, 2, 1]], p) == -1.0
    base_only = validate_and_normalize(parse_prompt("Base: a"), 4.0)
    assert concentration(np.ones((16, 1)), base_only) == 0.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (16, 2, 64), elements=st.floats(-100, 100)), st.integers(0, 50))
def test_metric_bounds(x, seed):
    s = gen_sample(seed, SCHEMA, N=2)
    h = eval_hit_at_segment(x, s.prompt, SCHEMA)
    iou = eval_temporal_correctness(x, s.prompt, SCHEMA)
    r = eval_lip_corr(x, s.audio)
    assert 0 <= h <= 1 and 0 <= iou <= 1
    assert r is None or -1 <= r <= 1
