import math

import numpy as np
import pytest

from roundrefine import diffcore as dc
from roundrefine.datagen import generate_episode
from roundrefine.model import (
    ROUND0,
    ConditioningContext,
    ModelConfig,
    Policy,
    RoundOutput,
    bernoulli_entropy,
    categorical_entropy,
    strip_reasoning,
)
from roundrefine.vocab import DEFAULT_VOCAB

from conftest import TINY


def _frames(n, seed=0):
    return np.stack([generate_episode(seed + i, "success").frames for i in range(n)])


def _randomize(pol, scale=0.3, seed=0):
    rng = np.random.default_rng(seed)
    for p in pol.params.params.values():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)
    return pol


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden=63, attn_heads=2)
    with pytest.raises(ValueError):
        ModelConfig(dropout=1.0)
    assert ModelConfig().source_len == 2 + 12 + 12


def test_context_tokens():
    v = DEFAULT_VOCAB
    assert ROUND0.tokens() == [v.id("<cond_none>"), v.id("<sep>")]
    ctx = ConditioningContext("failure", tuple(range(10, 30)))
    toks = ctx.tokens(max_reasoning_len=12)
    assert toks[:2] == [v.id("<cond_failure>"), v.id("<sep>")] and toks[2:] == list(range(10, 22))
    with pytest.raises(ValueError):
        ConditioningContext("maybe")
    with pytest.raises(ValueError):
        ConditioningContext("none", None, "sing")


def test_strip_reasoning():
    assert strip_reasoning((7, 8, 1, 9)) == (7, 8)
    assert strip_reasoning((7, 2, 8)) == (7, 8)
    assert strip_reasoning(()) == ()


def test_entropies():
    assert abs(float(bernoulli_entropy(0.5)) - math.log(2)) <= 1e-12
    assert float(bernoulli_entropy(0.0)) == 0.0 and float(bernoulli_entropy(1.0)) == 0.0
    assert abs(float(categorical_entropy(np.full(40, 1 / 40))) - math.log(40)) < 1e-12
    assert float(categorical_entropy(np.eye(5)[2])) == 0.0


def test_round_output_label_threshold():
    assert RoundOutput.build(0.5, (), np.zeros((0, 40))).det_label == "failure"
    assert RoundOutput.build(0.4999, (), np.zeros((0, 40))).det_label == "success"
    o = RoundOutput.build(0.9, (10, 11, 1), np.full((3, 40), 1 / 40))
    assert o.next_context() == ConditioningContext("failure", (10, 11), "both")
    assert abs(o.H_reason - math.log(40)) < 1e-12


def test_untrained_classifier_outputs_half():
    pol = Policy(seed=0)
    out = pol.predict_batch(_frames(4), [ROUND0] * 4, 0.7, [np.random.default_rng(i) for i in range(4)])
    assert all(o.det_prob == 0.5 for o in out)
    assert all(abs(o.H_det - math.log(2)) < 1e-12 for o in out)


def test_encode_shape_and_error():
    pol = Policy(TINY)
    assert pol.encode(_frames(3)).shape == (3, 12, 8)
    with pytest.raises(dc.ShapeError):
        pol.encode(np.zeros((2, 11, 16)))


def test_cached_decoding_matches_full_decoder():
    pol = _randomize(Policy(TINY, seed=1))
    frames = _frames(3)
    ctx = [ROUND0, ConditioningContext("success", (8, 9, 10)), ConditioningContext("failure", (12,))]
    with dc.no_grad():
        src, mask = pol.build_source(pol.encode(frames), ctx)
        decoded = pol.decode_source(src, mask, 0.0, [None] * 3)
        for b, (toks, dists) in enumerate(decoded):
            inp = np.array([[pol.vocab.bos, *toks[:-1]]])
            probs = dc.softmax(pol.decoder_logits(src[b : b + 1], mask[b : b + 1], inp)).data[0]
            assert np.array_equal(np.argmax(probs, axis=-1), np.array(toks))
            assert np.all(dists.sum(axis=-1) == 1.0) and np.all(dists.max(axis=-1) == 1.0)


def test_sampled_step_distribution_matches_model_distribution():
    pol = _randomize(Policy(TINY, seed=2), scale=0.5)
    n = 10_000
    frames = np.repeat(_frames(1), n, axis=0)
    rngs = [np.random.default_rng(i) for i in range(n)]
    with dc.no_grad():
        src, mask = pol.build_source(pol.encode(frames), [ROUND0] * n)
        decoded = pol.decode_source(src, mask, 0.7, rngs)
    p = decoded[0][1][0]
    first = np.array([d[0][0] for d in decoded])
    counts = np.bincount(first, minlength=len(p))
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1)


def test_temperature_zero_is_deterministic_and_zero_entropy():
    pol = _randomize(Policy(TINY, seed=4))
    a = pol.predict_round(_frames(1)[0], ROUND0, 0.0, np.random.default_rng(0))
    b = pol.predict_round(_frames(1)[0], ROUND0, 0.0, np.random.default_rng(99))
    assert a.reasoning == b.reasoning and a.H_reason == 0.0


def test_per_row_rng_streams_are_independent_of_batch():
    pol = _randomize(Policy(TINY, seed=5))
    frames = _frames(3)
    ctx = [ROUND0, ConditioningContext("failure", (9, 10, 11, 12)), ROUND0]
    batch = pol.predict_batch(frames, ctx, 0.7, [np.random.default_rng(i) for i in range(3)])
    alone = pol.predict_batch(frames[1:2], ctx[1:2], 0.7, [np.random.default_rng(1)])[0]
    assert batch[1].reasoning == alone.reasoning
    assert abs(batch[1].det_prob - alone.det_prob) < 1e-12


def test_reasoning_length_bounded():
    pol = _randomize(Policy(TINY, seed=6), scale=1.0)
    outs = pol.predict_batch(_frames(20), [ROUND0] * 20, 1.0, [np.random.default_rng(i) for i in range(20)])
    assert all(1 <= len(o.reasoning) <= 13 for o in outs)


def test_teacher_inputs_validation():
    pol = Policy(TINY)
    with pytest.raises(ValueError):
        pol.teacher_inputs([[10, 11]])
    inp, tgt, mask = pol.teacher_inputs([[10, 1], [10, 11, 1]])
    assert inp[0, 0] == pol.vocab.bos and list(tgt[1]) == [10, 11, 1] and mask.sum() == 5


def test_loss_terms_sparse_rows_have_no_ntp():
    pol = Policy(TINY)
    bce, ntp, rows = pol.loss_terms(_frames(3), [ROUND0] * 3, [0, 1, 0], [None, [10, 1], None], rng=np.random.default_rng(0))
    assert bce.shape == (3,) and list(rows) == [1] and ntp.shape == (1,)
    bce, ntp, rows = pol.loss_terms(_frames(2), [ROUND0] * 2, [0, 1], [None, None], rng=np.random.default_rng(0))
    assert ntp is None and rows.size == 0


def test_save_load_and_copy(tmp_path):
    pol = _randomize(Policy(TINY, seed=7))
    pol.save(tmp_path / "m.ckpt")
    back = Policy.load(tmp_path / "m.ckpt", TINY)
    assert back.params.checksum() == pol.params.checksum()
    cp = pol.copy()
    cp.params["lm_head.W"].data[:] = 0
    assert pol.params.checksum() != cp.params.checksum()


def test_parameter_groups():
    pol = Policy()
    groups = pol.params.groups
    assert {n for n, g in groups.items() if g == "encoder"} == {n for n in groups if n.startswith("enc.")}
    assert 100_000 < pol.params.num_values() < 200_000
