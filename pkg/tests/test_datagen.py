import json

import numpy as np
import pytest

from roundrefine.datagen import (
    EP_LEN,
    FAILURE_MODES,
    FRAME_DIM,
    NOISE_STD,
    SIGNATURE_COEF,
    DatasetFormatError,
    DatasetManifest,
    Episode,
    InvariantViolation,
    base_ramp,
    dataset_checksum,
    generate_dataset,
    generate_episode,
    linear_probe_accuracy,
    load_all,
    load_dataset,
    render_reasoning,
    write_dataset,
)
from roundrefine.vocab import PREFIXES, SUCCESS_TEMPLATE


def test_signatures_unit_norm_and_low_cosine():
    sig = np.stack([m.signature for m in FAILURE_MODES])
    assert np.allclose(np.linalg.norm(sig, axis=1), 1.0, atol=1e-12)
    cos = sig @ sig.T
    off = cos[~np.eye(len(sig), dtype=bool)]
    assert np.max(np.abs(off)) <= 0.5


def test_base_ramp_values():
    b = base_ramp()
    assert b.shape == (EP_LEN, FRAME_DIM)
    assert np.all(b[5] == 5 / EP_LEN)


def test_success_and_failure_share_noise_for_same_seed():
    s = generate_episode(7, "success")
    f = generate_episode(7, "failure", 2)
    diff = f.frames - s.frames
    assert np.allclose(diff[:6], 0.0, atol=0)
    assert np.allclose(diff[6:], SIGNATURE_COEF * FAILURE_MODES[2].signature, atol=1e-12)
    assert s.label == "success" and s.failure_mode is None


def test_signature_recovered_by_monte_carlo_mean():
    # independent oracle: average residual over many episodes of one mode
    res = np.stack([generate_episode(10_000 + i, "failure", 4).frames[9] - base_ramp()[9] for i in range(1000)])
    assert np.all(np.abs(res.mean(axis=0) - 0.8 * FAILURE_MODES[4].signature) <= 0.01)
    # the noise standard deviation should match too (sample std, 1000 draws)
    assert abs(res.std(axis=0).mean() - NOISE_STD) < 0.005


def test_generate_episode_deterministic():
    a, b = generate_episode(99, "failure", 3, split="dense"), generate_episode(99, "failure", 3, split="dense")
    assert a == b


def test_render_reasoning_forms():
    assert render_reasoning(None) == SUCCESS_TEMPLATE
    r = render_reasoning(3, np.random.default_rng(0))
    assert r[:3] in PREFIXES and r[3:] == FAILURE_MODES[3].template


def test_generate_episode_rejects_bad_arguments():
    with pytest.raises(ValueError):
        generate_episode(0, "failure")
    with pytest.raises(ValueError):
        generate_episode(0, "success", 1)
    with pytest.raises(ValueError):
        generate_episode(0, "failure", 8)
    with pytest.raises(ValueError):
        generate_episode(0, "maybe")


def test_split_counts_balance_and_reasoning_presence():
    data = generate_dataset(DatasetManifest(seed=5, counts={"sparse": 40, "dense": 20, "test": 30}))
    assert {k: len(v) for k, v in data.items()} == {"sparse": 40, "dense": 20, "test": 30}
    for split, eps in data.items():
        assert sum(e.is_failure for e in eps) == len(eps) // 2
        for e in eps:
            e.validate()
            assert (e.reasoning is None) == (split == "sparse")


def test_test_split_must_be_balanced():
    m = DatasetManifest(success_fraction={"sparse": 0.5, "dense": 0.5, "test": 0.3})
    with pytest.raises(ValueError):
        m.validate()


def test_with_ratio_fixes_sparse_count():
    for r, dense in ((2, 1000), (5, 400), (10, 200), (30, 67)):
        m = DatasetManifest.with_ratio(r)
        assert m.counts["sparse"] == 2000 and m.counts["dense"] == dense


def test_linear_probe_separates_benchmark():
    data = generate_dataset(DatasetManifest(seed=1, counts={"sparse": 1000, "dense": 2, "test": 2}))
    assert linear_probe_accuracy(data["sparse"]) >= 0.95


def test_write_load_roundtrip_and_checksum(tmp_path):
    m = DatasetManifest(seed=2, counts={"sparse": 6, "dense": 4, "test": 4})
    data = generate_dataset(m, tmp_path / "a")
    generate_dataset(m, tmp_path / "b")
    assert dataset_checksum(tmp_path / "a") == dataset_checksum(tmp_path / "b")
    loaded = load_all(tmp_path / "a")
    for split in data:
        assert loaded[split] == data[split]


def _write_split(tmp_path, recs):
    p = tmp_path / "test.jsonl"
    p.write_text("".join(json.dumps(r) + "\n" for r in recs))
    return tmp_path


def test_loader_reports_line_of_malformed_json(tmp_path):
    ok = generate_episode(1, "success").to_record()
    (tmp_path / "test.jsonl").write_text(json.dumps(ok) + "\n{broken\n")
    with pytest.raises(DatasetFormatError) as ei:
        load_dataset(tmp_path, "test")
    assert "2" in str(ei.value)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda r: r.update(frames=r["frames"][:5]),
        lambda r: r.update(label="failure"),
        lambda r: r.update(reasoning=["zebra"]),
        lambda r: r.pop("reasoning"),
        lambda r: r.update(split="sparse"),
    ],
)
def test_loader_invariant_violations_name_episode(tmp_path, mutate):
    rec = generate_episode(1, "success", episode_id="ep-x").to_record()
    mutate(rec)
    _write_split(tmp_path, [rec])
    with pytest.raises((InvariantViolation, DatasetFormatError)) as ei:
        load_dataset(tmp_path, "test")
    assert "ep-x" in str(ei.value) or "line 1" in str(ei.value) or ":1" in str(ei.value)


def test_loader_rejects_duplicate_ids(tmp_path):
    rec = generate_episode(1, "success", episode_id="dup").to_record()
    _write_split(tmp_path, [rec, rec])
    with pytest.raises(InvariantViolation, match="dup"):
        load_dataset(tmp_path, "test")


def test_loader_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path, "test")


def test_episode_record_roundtrip():
    e = generate_episode(4, "failure", 6, split="dense", episode_id="z")
    assert Episode.from_record(json.loads(json.dumps(e.to_record()))) == e


def test_write_dataset_does_not_mutate_input(tmp_path):
    m = DatasetManifest(seed=3, counts={"sparse": 2, "dense": 2, "test": 2})
    data = generate_dataset(m)
    before = {k: [e.to_record() for e in v] for k, v in data.items()}
    write_dataset(data, m, tmp_path)
    assert {k: [e.to_record() for e in v] for k, v in data.items()} == before
