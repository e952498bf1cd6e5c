import numpy as np
import pytest

from phasecond import autodiff as ad
from phasecond.conditioning import (
    PAD_ID,
    UNK_ID,
    AudioTrack,
    ConditioningError,
    Vocabulary,
    apply_phase_embeddings,
    audio_features,
    encode_text,
    pool_frames,
    project_audio,
    tokenize,
)
from phasecond.prompt import parse_prompt, validate_and_normalize
from phasecond.synthworld import default_vocabulary

EXAMPLE = """Base: A woman in business attire speaking professionally
Phase-1 [0-2s]: Gestures outward with open palm
Phase-2 [2-4s]: Points downward to emphasize detail
"""


def norm(text):
    return validate_and_normalize(parse_prompt(text), 4.0)


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("Hello, World! it's 4pm") == ["hello", "world", "it", "s", "4pm"]


def test_vocabulary_reserved_ids_and_density():
    v = Vocabulary(["b", "a", "b"])
    assert len(v) == 4
    assert v.id("b") == 2 and v.id("a") == 3
    assert v.id("zzz") == UNK_ID
    assert PAD_ID == 0
    ids = sorted(v.id(w) for w in v.words)
    assert ids == list(range(2, len(v)))


def test_vocabulary_file_round_trip(tmp_path):
    v = default_vocabulary()
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text(encoding="utf-8").splitlines()
    assert v.id(lines[0]) == 2  # 0-based line i holds id i + 2
    assert Vocabulary.load(tmp_path / "vocab.txt").words == v.words


def test_base_only_tags_are_zero():
    seq = encode_text(norm("Base: a man speaking"), default_vocabulary())
    assert np.all(seq.tags == 0) and len(seq) == 3


def test_example_tag_layout():
    v = Vocabulary(tokenize(EXAMPLE))
    seq = encode_text(norm(EXAMPLE), v)
    base, p1, p2 = (len(tokenize(t)) for t in (
        "A woman in business attire speaking professionally",
        "Gestures outward with open palm",
        "Points downward to emphasize detail",
    ))
    assert seq.tags.tolist() == [0] * base + [1] * p1 + [2] * p2
    assert len(seq) == base + p1 + p2


def test_unknown_word_keeps_phase_tag():
    seq = encode_text(norm("Base: a man speaking\nPhase-1 [0-4s]: performs flibbertigibbet"), default_vocabulary())
    assert seq.ids[-1] == UNK_ID and seq.tags[-1] == 1


def test_flat_encoding_drops_tags():
    seq = encode_text(norm(EXAMPLE), default_vocabulary(), phase_tags=False)
    assert np.all(seq.tags == 0)


def test_empty_token_stream_is_an_error():
    with pytest.raises(ConditioningError):
        encode_text(norm("Base: !!!"), default_vocabulary())


def test_embedded_tokens():
    v = default_vocabulary()
    table = ad.constant(np.random.default_rng(0).normal(size=(len(v), 8)))
    seq = encode_text(norm("Base: a man speaking"), v, embed=table)
    assert np.array_equal(seq.embedded.data, table.data[seq.ids])


def test_phase_embeddings_examples():
    rng = np.random.default_rng(0)
    c = ad.constant(rng.normal(size=(5, 4)))
    zero = ad.constant(np.zeros((3, 4)))
    assert np.array_equal(apply_phase_embeddings(c, [0, 1, 1, 2, 0], zero).data, c.data)
    v = rng.normal(size=4)
    table = np.zeros((3, 4))
    table[1] = v
    out = apply_phase_embeddings(c, [1] * 5, ad.constant(table)).data
    assert np.array_equal(out, c.data + v)
    out = apply_phase_embeddings(c, [0, 1, 0, 1, 0], ad.constant(table)).data
    assert np.array_equal(out[[1, 3]], c.data[[1, 3]] + v)
    assert np.array_equal(out[[0, 2, 4]], c.data[[0, 2, 4]])


def test_phase_embedding_tag_out_of_range():
    with pytest.raises(ConditioningError):
        apply_phase_embeddings(ad.constant(np.zeros((2, 4))), [0, 3], ad.constant(np.zeros((3, 4))))


def test_phase_table_gradient_sums_tagged_tokens():
    rng = np.random.default_rng(2)
    c = ad.constant(rng.normal(size=(6, 4)))
    table = ad.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    tags = np.array([0, 1, 1, 2, 2, 2])
    w = rng.normal(size=(6, 4))
    loss = ad.sum_all(ad.mul(apply_phase_embeddings(c, tags, table), ad.constant(w)))
    (g,) = ad.backward(loss, [table])
    for k in range(3):
        assert np.allclose(g[k], w[tags == k].sum(axis=0), atol=1e-14)
    r = ad.grad_check(lambda: ad.sum_all(ad.mul(apply_phase_embeddings(c, tags, table), ad.constant(w))), [table])
    assert float(r) < 1e-6


def test_pooling_cases():
    assert np.array_equal(pool_frames(np.ones(64), 16), np.ones(16))
    x = np.arange(16.0)
    assert np.array_equal(pool_frames(x, 16), x)
    step = np.r_[np.zeros(128), np.ones(128)]
    pooled = pool_frames(step, 16)
    assert np.array_equal(pooled, np.r_[np.zeros(8), np.ones(8)])
    with pytest.raises(ConditioningError):
        pool_frames(np.ones(8), 16)


def test_project_audio_shapes_and_constant_tokens():
    track = AudioTrack.from_envelope(np.full(64, 0.3))
    rng = np.random.default_rng(0)
    w = ad.constant(rng.normal(size=(4, 8)))
    b = ad.constant(rng.normal(size=8))
    A = project_audio(track, 16, w, b).data
    assert A.shape == (16, 8)
    assert np.allclose(A, A[0], atol=0)
    assert audio_features(track.envelope).shape == (64, 4)
