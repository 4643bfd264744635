"""Meta-splits, episode sampling, task encoding and FSEP replay files."""

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fshgr.data import Catalog, Recording, RecordKey, SynthSpec, exercise_for_gesture, synthesize
from fshgr.episodes import (
    CROSS_SUBJECT,
    SAME_SUBJECT,
    SPLITS,
    WindowPool,
    build_meta_split,
    check_feasible,
    decode_labels,
    encode_task,
    episodes_from_replay,
    normalize_scenario,
    read_replay,
    sample_episode,
    sample_episodes,
    scenario_partition,
    write_replay,
)
from fshgr.errors import FormatError, ParameterError, SamplingError
from fshgr.preprocessing import PreprocessConfig, butterworth_lowpass, fit_prep_stats
from fshgr.tensor import Tensor

FULL_DB2 = [(s, g, r) for s in range(1, 41) for g in range(0, 50) for r in range(1, 7)]


@pytest.fixture(scope="module")
def recs():
    spec = SynthSpec(n_subjects=6, n_gestures=7, duration_s=1.0)
    return {r.key: r for r in synthesize(spec, seed=2)}


@pytest.fixture(scope="module")
def split(recs):
    return build_meta_split(recs, "new-subjects")


# --- meta-splits -------------------------------------------------------------------


def test_new_subjects_27_5_8():
    parts = scenario_partition(FULL_DB2, "new-subjects")
    subjects = [sorted({k.subject for k in parts[s]}) for s in SPLITS]
    assert subjects == [list(range(1, 28)), list(range(28, 33)), list(range(33, 41))]


def test_new_repetitions_sets():
    parts = scenario_partition(FULL_DB2, "new-repetitions")
    assert {k.repetition for k in parts["meta_train"]} == {1, 3, 4, 6}
    assert {k.repetition for k in parts["meta_test"]} == {2, 5}
    assert parts["meta_val"] == []
    assert {k.subject for k in parts["meta_train"]} == {k.subject for k in parts["meta_test"]} == set(range(1, 41))


def test_new_gestures_34_6_9():
    parts = scenario_partition(FULL_DB2, "new-gestures")
    gestures = [sorted({k.gesture for k in parts[s]} - {0}) for s in SPLITS]
    assert gestures == [list(range(1, 35)), list(range(35, 41)), list(range(41, 50))]
    assert round(34 / 49, 2) == 0.69 and round(6 / 49, 2) == 0.12
    assert all(k.gesture != 0 for s in ("meta_val", "meta_test") for k in parts[s])


@pytest.mark.parametrize("scenario,field", [("new-subjects", "subject"), ("new-gestures", "gesture"), ("new-repetitions", "repetition")])
def test_split_disjointness(scenario, field):
    parts = scenario_partition(FULL_DB2, scenario)
    values = [{getattr(k, field) for k in parts[s]} - ({0} if field == "gesture" else set()) for s in SPLITS]
    for i in range(3):
        for j in range(i + 1, 3):
            assert values[i].isdisjoint(values[j])


def test_scenario_names():
    assert normalize_scenario("NewSubjects") == "new-subjects"
    assert normalize_scenario("new_repetitions") == "new-repetitions"
    with pytest.raises(ParameterError, match="unknown scenario"):
        normalize_scenario("new-days")


def test_missing_repetitions_error():
    with pytest.raises(SamplingError, match="repetitions"):
        scenario_partition([(1, 1, 1), (1, 1, 3)], "new-repetitions")
    with pytest.raises(SamplingError):
        scenario_partition([(1, 1, 1), (2, 1, 1)], "new-subjects")


def test_meta_split_stats_from_train_only(recs, split):
    prep = PreprocessConfig()
    train_keys = scenario_partition(list(recs), "new-subjects")["meta_train"]
    expected = fit_prep_stats([butterworth_lowpass(recs[k].samples, prep.fs, prep.cutoff_hz) for k in train_keys], prep)
    np.testing.assert_array_equal(split.stats.scale.maxs, expected.scale.maxs)
    np.testing.assert_array_equal(split.stats.minmax.mins, expected.minmax.mins)
    assert split.meta_train.subjects() == [1, 2, 3, 4]
    assert split.meta_val.subjects() == [5] and split.meta_test.subjects() == [6]
    assert not split.val_from_train


def test_unseen_split_clamps_at_most_one_percent(split):
    assert split.clamped["meta_train"] == 0.0
    assert split.clamped["meta_val"] <= 0.01 and split.clamped["meta_test"] <= 0.01


def test_new_repetitions_val_from_train(recs):
    ms = build_meta_split(recs, "new-repetitions")
    assert ms.val_from_train and ms.meta_val is ms.meta_train
    assert {k.repetition for k in ms.meta_test.keys} == {2, 5}


def test_rest_excluded_by_default(recs):
    extra = dict(recs)
    for s in range(1, 7):
        for r in range(1, 7):
            x = np.random.default_rng([s, r]).standard_normal((2000, 12)).astype(np.float32) * 0.01
            extra[RecordKey(s, 0, r)] = Recording(s, 0, r, "B", 2000.0, x)
    assert 0 not in build_meta_split(extra, "new-subjects").meta_train.gestures()
    assert 0 in build_meta_split(extra, "new-subjects", include_rest=True).meta_train.gestures()


def test_sampling_rate_mismatch(recs):
    k = next(iter(recs))
    bad = dict(recs)
    bad[k] = Recording(k.subject, k.gesture, k.repetition, exercise_for_gesture(k.gesture), 1000.0, recs[k].samples)
    with pytest.raises(ParameterError, match="Hz"):
        build_meta_split(bad, "new-subjects")


# --- sampling --------------------------------------------------------------------


def _check_episode(ep, pool, n, k):
    assert ep.support_ids.shape == (n * k,) and len(ep.provenance) == n * k + 1
    assert ep.query_id not in set(ep.support_ids.tolist())
    assert sorted(Counter(ep.support_labels.tolist()).items()) == [(c, k) for c in range(n)]
    assert len(set(ep.slot_gestures)) == n
    # slot labels and provenance agree
    for (s, g, r, w), wid, slot in zip(ep.provenance, ep.support_ids, ep.support_labels):
        assert pool.provenance(int(wid)) == (s, g, r, w)
        assert ep.slot_gestures[slot] == g
    assert ep.provenance[-1][1] == ep.slot_gestures[ep.query_label]


def test_five_way_one_shot_has_six_elements(split):
    ep = sample_episode(split.meta_train, 5, 1, rng=np.random.default_rng(0))
    assert ep.windows.shape == (6, 400, 12)
    _check_episode(ep, split.meta_train, 5, 1)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 7), k=st.integers(1, 5), seed=st.integers(0, 10_000), cross=st.booleans())
def test_episode_structure(split, n, k, seed, cross):
    mode = CROSS_SUBJECT if cross else SAME_SUBJECT
    ep = sample_episode(split.meta_train, n, k, mode, np.random.default_rng(seed), materialize=False)
    _check_episode(ep, split.meta_train, n, k)
    if mode == SAME_SUBJECT:
        assert len({p[0] for p in ep.provenance}) == 1


def test_cross_subject_mixes_subjects(split):
    eps = sample_episodes(split.meta_train, 200, 5, 1, CROSS_SUBJECT, seed=1, materialize=False)
    assert any(len({p[0] for p in ep.provenance}) > 1 for ep in eps)


def test_query_slot_uniform_over_10k(split):
    eps = sample_episodes(split.meta_train, 10_000, 5, 1, seed=3, materialize=False)
    freq = np.bincount([ep.query_label for ep in eps], minlength=5) / len(eps)
    assert np.all(np.abs(freq - 0.2) <= 0.02), freq


def test_gesture_slot_uniform_chi_square(split):
    eps = sample_episodes(split.meta_train, 10_000, 5, 1, seed=4, materialize=False)
    slots = [ep.slot_gestures.index(3) for ep in eps if 3 in ep.slot_gestures]
    observed = np.bincount(slots, minlength=5)
    expected = len(slots) / 5
    chi2 = float(np.sum((observed - expected) ** 2 / expected))
    assert len(slots) > 1000
    assert chi2 < 18.47  # 0.999 quantile, 4 degrees of freedom


def test_no_label_shuffle_orders_by_gesture(split):
    for seed in range(20):
        ep = sample_episode(split.meta_train, 5, 1, rng=np.random.default_rng(seed), label_shuffle=False, materialize=False)
        assert ep.slot_gestures == sorted(ep.slot_gestures)


def test_worker_count_invariance(split):
    a = sample_episodes(split.meta_train, 200, 5, 2, seed=9, workers=1)
    b = sample_episodes(split.meta_train, 200, 5, 2, seed=9, workers=3)
    assert [ep.provenance for ep in a] == [ep.provenance for ep in b]
    assert all(x.windows.tobytes() == y.windows.tobytes() for x, y in zip(a, b))


def test_stream_is_chunk_stable(split):
    short = sample_episodes(split.meta_train, 64, 5, 1, seed=5, materialize=False)
    long = sample_episodes(split.meta_train, 200, 5, 1, seed=5, materialize=False)
    assert [ep.provenance for ep in short] == [ep.provenance for ep in long[:64]]


def test_infeasible_pool_names_class(recs):
    ms = build_meta_split(recs, "new-repetitions")
    pool = ms.meta_train.restrict(gestures={1, 2, 3})
    with pytest.raises(SamplingError, match="gestures"):
        check_feasible(pool, 5, 1)
    keys = [k for k in ms.meta_test.keys if k.subject == 1 and k.repetition == 2]
    sig = {k: ms.meta_test.signals[ms.meta_test.keys.index(k)][:500] for k in keys}
    tiny = WindowPool(sig, 400, 100, "tiny")
    with pytest.raises(SamplingError, match=r"gesture \d+ has only 2 windows \(need 3\)"):
        check_feasible(tiny, 5, 2)
    with pytest.raises(ParameterError):
        check_feasible(pool, 2, 1, mode="bogus")


# --- encoding ----------------------------------------------------------------------


def _embed_128(windows):
    w = np.asarray(windows)
    return Tensor(np.repeat(w.mean(axis=(-2, -1), keepdims=False)[..., None], 128, axis=-1))


def test_encoded_shape_and_label_blocks(split):
    ep = sample_episode(split.meta_train, 5, 1, rng=np.random.default_rng(7))
    enc = encode_task(ep, _embed_128, 5).data
    assert enc.shape == (133, 6)
    labels = enc[128:]
    np.testing.assert_array_equal(labels[:, -1], 0.0)
    np.testing.assert_array_equal(labels[:, :-1].sum(axis=0), 1.0)
    assert set(np.unique(labels)) <= {0.0, 1.0}
    np.testing.assert_array_equal(decode_labels(enc, 5), ep.support_labels)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 6), k=st.integers(1, 4), seed=st.integers(0, 1000))
def test_label_decoding_inverts_encoding(split, n, k, seed):
    ep = sample_episode(split.meta_train, n, k, rng=np.random.default_rng(seed))
    enc = encode_task(ep, _embed_128, n)
    assert enc.shape == (128 + n, n * k + 1)
    np.testing.assert_array_equal(decode_labels(enc, n), ep.support_labels)


def test_encode_requires_windows(split):
    ep = sample_episode(split.meta_train, 5, 1, rng=np.random.default_rng(0), materialize=False)
    with pytest.raises(ParameterError):
        encode_task(ep, _embed_128, 5)


# --- replay ------------------------------------------------------------------------


def test_replay_round_trip(tmp_path, split):
    eps = sample_episodes(split.meta_test, 70, 5, 1, seed=12)
    write_replay(tmp_path / "r.fsep", eps, seed=12, n_way=5, k_shot=1)
    replay = read_replay(tmp_path / "r.fsep")
    assert (replay.seed, replay.n_way, replay.k_shot, replay.mode, len(replay.episodes)) == (12, 5, 1, SAME_SUBJECT, 70)
    back = episodes_from_replay(split.meta_test, replay)
    for a, b in zip(eps, back):
        np.testing.assert_array_equal(a.support_ids, b.support_ids)
        np.testing.assert_array_equal(a.support_labels, b.support_labels)
        assert (a.query_id, a.query_label, a.provenance) == (b.query_id, b.query_label, b.provenance)
        assert a.windows.tobytes() == b.windows.tobytes()


def test_replay_errors(tmp_path, split):
    eps = sample_episodes(split.meta_test, 3, 5, 1, seed=0)
    write_replay(tmp_path / "r.fsep", eps, seed=0, n_way=5, k_shot=1)
    raw = (tmp_path / "r.fsep").read_bytes()
    (tmp_path / "t.fsep").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="does not match"):
        read_replay(tmp_path / "t.fsep")
    (tmp_path / "m.fsep").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="offset 0"):
        read_replay(tmp_path / "m.fsep")
    with pytest.raises(SamplingError):
        episodes_from_replay(split.meta_train, read_replay(tmp_path / "r.fsep"))


def test_catalog_backed_meta_split(tmp_path, recs):
    from fshgr.data import build_catalog, write_recording, recording_path

    for k, r in recs.items():
        write_recording(recording_path(tmp_path, k), r)
    from_files = build_meta_split(build_catalog(tmp_path), "new-subjects")
    from_memory = build_meta_split(recs, "new-subjects")
    assert from_files.meta_test.signals[0].tobytes() == from_memory.meta_test.signals[0].tobytes()
    with pytest.raises(SamplingError):
        build_meta_split(Catalog.from_keys([]), "new-subjects")
