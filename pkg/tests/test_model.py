import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phasecond import autodiff as ad
from phasecond.model import (
    AUDIO_ADAPTER,
    BACKBONE,
    PACA,
    ModelConfig,
    ModelError,
    ModelInputs,
    attention,
    attention_probe,
    forward,
    frame_times,
    init_params,
    modality_scale,
)

CFG = ModelConfig(L=2, D=8, N=3, F=4, heads=2, k_max=3, vocab=20)


def make_inputs(cfg=CFG, B=2, seed=0, M=6):
    rng = np.random.default_rng(seed)
    tags = np.tile(np.array([0, 0, 1, 1, 2, 2])[:M], (B, 1))
    return ModelInputs(
        x=rng.normal(size=(B, cfg.F, cfg.N, cfg.D)),
        t=rng.uniform(size=B),
        token_ids=rng.integers(2, cfg.vocab, size=(B, M)),
        tags=tags,
        token_mask=np.ones((B, M), bool),
        audio=rng.normal(size=(B, cfg.F, cfg.audio_dim)),
        ref=rng.normal(size=(B, cfg.N, cfg.D)),
        windows=np.tile(np.array([[np.nan, np.nan], [0.0, 0.5], [0.5, 1.0], [np.nan, np.nan]]), (B, 1, 1)),
    )


def run(cfg, params, inp):
    return forward(cfg, params.arrays, inp).data


def test_modality_scale_examples():
    assert modality_scale(30, 30, 1.5) == 1.0
    assert abs(modality_scale(15, 30, 1.5) - 0.353553) < 1e-6
    assert abs(modality_scale(15, 30, 1.5) - 1 / (2 * math.sqrt(2))) < 1e-15
    assert abs(modality_scale(1, 30, 1.5) - 0.006086) < 1e-6


def test_modality_scale_errors():
    with pytest.raises(ModelError):
        modality_scale(0, 6, 1.5)
    with pytest.raises(ModelError):
        modality_scale(7, 6, 1.5)
    with pytest.raises(ModelError):
        modality_scale(3, 6, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(1.0, 4.0, exclude_min=True), st.integers(2, 64))
def test_modality_scale_increasing(gamma, L):
    vals = [modality_scale(l, L, gamma) for l in range(1, L + 1)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 1.0


def test_config_invariants():
    with pytest.raises(ModelError):
        ModelConfig(L=1)
    with pytest.raises(ModelError):
        ModelConfig(gamma=1.0)
    with pytest.raises(ModelError):
        ModelConfig(D=10, heads=4)


def test_frame_times():
    assert np.array_equal(frame_times(1), [0.0])
    assert np.array_equal(frame_times(5), [0, 0.25, 0.5, 0.75, 1.0])


def test_tag_partition_and_zero_inits():
    p = init_params(ModelConfig())
    assert set(p.tags.values()) == {BACKBONE, AUDIO_ADAPTER, PACA}
    assert p.names(PACA) == ["phase.table"]
    assert not np.any(p.arrays["phase.table"])
    adapter = p.names(AUDIO_ADAPTER)
    assert "audio.proj.w" in adapter and "audio.null" in adapter
    assert all(n.startswith(("audio.", "blocks.")) for n in adapter)
    assert all(".audio." in n or ".norm3." in n for n in adapter if n.startswith("blocks."))
    assert not np.any(p.arrays["embed.null_text"]) and not np.any(p.arrays["audio.null"])


def test_init_is_seeded():
    a, b = init_params(CFG, 3), init_params(CFG, 3)
    assert all(np.array_equal(a.arrays[n], b.arrays[n]) for n in a.arrays)
    c = init_params(CFG, 4)
    assert not np.array_equal(a.arrays["in.w"], c.arrays["in.w"])


def test_forward_shape_and_determinism():
    p = init_params(CFG)
    inp = make_inputs()
    out = run(CFG, p, inp)
    assert out.shape == inp.x.shape
    assert np.array_equal(out, run(CFG, p, inp))


def test_zero_phase_table_matches_disabled_embeddings():
    p = init_params(CFG)
    flat = ModelConfig(**{**CFG.to_dict(), "phase_embeddings": False})
    inp = make_inputs()
    assert np.array_equal(run(CFG, p, inp), run(flat, p, inp))


def test_zero_phase_table_ignores_tag_permutation():
    p = init_params(CFG)
    inp = make_inputs()
    perm = inp.replace(tags=np.array([[2, 1, 0, 2, 1, 0]] * 2))
    assert np.array_equal(run(CFG, p, inp), run(CFG, p, perm))


def test_trained_phase_table_uses_tags():
    p = init_params(CFG)
    p.arrays["phase.table"][:] = np.random.default_rng(0).normal(size=p.arrays["phase.table"].shape)
    inp = make_inputs()
    perm = inp.replace(tags=np.array([[2, 1, 0, 2, 1, 0]] * 2))
    assert not np.array_equal(run(CFG, p, inp), run(CFG, p, perm))


def test_zero_audio_output_means_audio_is_ignored():
    p = init_params(CFG)
    inp = make_inputs()
    other = inp.replace(audio=np.random.default_rng(9).normal(size=inp.audio.shape))
    assert np.array_equal(run(CFG, p, inp), run(CFG, p, other))
    p.arrays["blocks.2.audio.o.w"][:] = 0.1
    assert not np.array_equal(run(CFG, p, inp), run(CFG, p, other))


def test_reference_conditions_output():
    p = init_params(CFG)
    inp = make_inputs()
    other = inp.replace(ref=inp.ref + 1.0)
    assert not np.array_equal(run(CFG, p, inp), run(CFG, p, other))


def test_dropped_text_ignores_tokens():
    p = init_params(CFG)
    inp = make_inputs().replace(drop_text=np.array([True, True]))
    other = inp.replace(token_ids=np.full_like(inp.token_ids, 5))
    assert np.array_equal(run(CFG, p, inp), run(CFG, p, other))


def test_dropped_audio_ignores_audio():
    p = init_params(CFG)
    p.arrays["blocks.2.audio.o.w"][:] = 0.1
    inp = make_inputs().replace(drop_audio=np.array([True, True]))
    other = inp.replace(audio=inp.audio + 3.0)
    assert np.array_equal(run(CFG, p, inp), run(CFG, p, other))


def test_batch_elements_are_independent():
    p = init_params(CFG)
    inp = make_inputs(B=2)
    one = ModelInputs(**{k: (v[:1] if isinstance(v, np.ndarray) else v) for k, v in inp.__dict__.items()})
    assert np.allclose(run(CFG, p, inp)[:1], run(CFG, p, one), atol=1e-12)


def test_input_validation():
    p = init_params(CFG)
    inp = make_inputs()
    with pytest.raises(ModelError):
        run(CFG, p, inp.replace(t=np.array([0.5, 1.5])))
    with pytest.raises(ModelError):
        run(CFG, p, inp.replace(x=inp.x[:, :2]))
    with pytest.raises(ModelError):
        run(CFG, p, inp.replace(tags=inp.tags + 5))
    with pytest.raises(ModelError):
        run(CFG, p, inp.replace(token_mask=np.zeros_like(inp.token_mask)))


def _naive_attention(q, k, v, heads):
    T, D = q.shape
    dh = D // heads
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(T):
            scores = [sum(q[i, sl][c] * k[j, sl][c] for c in range(dh)) / math.sqrt(dh) for j in range(k.shape[0])]
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            z = sum(w)
            for j in range(k.shape[0]):
                out[i, sl] += w[j] / z * v[j, sl]
    return out


def test_attention_matches_naive_oracle():
    rng = np.random.default_rng(5)
    q, k, v = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 4, 8)), rng.normal(size=(1, 4, 8))
    out, probs = attention(ad.constant(q), ad.constant(k), ad.constant(v), heads=2)
    assert np.allclose(out.data[0], _naive_attention(q[0], k[0], v[0], 2), atol=1e-10)
    assert np.allclose(probs.data.sum(-1), 1.0, atol=1e-12)


def test_attention_single_and_duplicate_keys():
    rng = np.random.default_rng(6)
    q = rng.normal(size=(1, 3, 4))
    v1 = rng.normal(size=(1, 1, 4))
    out, _ = attention(ad.constant(q), ad.constant(rng.normal(size=(1, 1, 4))), ad.constant(v1), heads=1)
    assert np.allclose(out.data, np.broadcast_to(v1, (1, 3, 4)), atol=1e-15)
    key = rng.normal(size=(1, 1, 4))
    vals = rng.normal(size=(1, 2, 4))
    out, _ = attention(ad.constant(q), ad.constant(np.repeat(key, 2, axis=1)), ad.constant(vals), heads=1)
    assert np.allclose(out.data, np.broadcast_to(vals.mean(axis=1, keepdims=True), (1, 3, 4)), atol=1e-14)


def test_probe_rows_sum_to_one_and_layer_guard():
    p = init_params(CFG)
    inp = make_inputs()
    mass = attention_probe(CFG, p.arrays, inp, [1, 2])
    for l in (1, 2):
        assert mass[l].shape == (2, CFG.F, 3)
        assert np.allclose(mass[l].sum(axis=-1), 1.0, atol=1e-9)
    with pytest.raises(ModelError):
        attention_probe(CFG, p.arrays, inp, [3])


def test_probe_at_init_identical_phases_get_identical_mass():
    p = init_params(CFG)
    inp = make_inputs()
    ids = inp.token_ids.copy()
    ids[:, 4:6] = ids[:, 2:4]  # phase 2 repeats phase 1's words
    mass = attention_probe(CFG, p.arrays, inp.replace(token_ids=ids), [1, 2])
    for l in (1, 2):
        assert np.allclose(mass[l][:, :, 1], mass[l][:, :, 2], atol=1e-12)


def test_hard_mask_confines_phase_attention():
    cfg = ModelConfig(**{**CFG.to_dict(), "hard_mask": True})
    p = init_params(cfg)
    mass = attention_probe(cfg, p.arrays, make_inputs(cfg), [1])[1]
    tau = frame_times(cfg.F)
    assert np.all(mass[:, tau < 0.5, 2] == 0)
    assert np.all(mass[:, tau >= 0.5, 1] == 0)


def test_forward_gradients_pass_grad_check():
    cfg = ModelConfig(L=2, D=8, N=4, F=2, heads=2, k_max=2, vocab=12, mlp_ratio=2)
    params = init_params(cfg, 0)
    rng = np.random.default_rng(1)
    for v in params.arrays.values():
        v += rng.normal(0, 0.3, v.shape)
    inp = make_inputs(cfg, B=2, M=6)
    inp = inp.replace(drop_text=np.array([False, True]), drop_audio=np.array([True, False]))
    target = rng.normal(size=inp.x.shape)
    leaves = params.leaves()
    names = ["blocks.1.text.q.w", "blocks.2.audio.o.w", "phase.table", "embed.null_text", "audio.null", "frame.w"]
    r = ad.grad_check(
        lambda: ad.scale(ad.mse(forward(cfg, leaves, inp), target), float(target.size)),
        [leaves[n] for n in names],
        epsilon=1e-4,
    )
    assert r.reliable and float(r) < 1e-4
