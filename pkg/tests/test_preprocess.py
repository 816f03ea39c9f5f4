import numpy as np
import pytest

from strokecomp.preprocess import (ChannelStats, PreprocessConfig, PreprocessError, apply_zscore,
                                   dedup_sliding_window, extract_keyframes, fit_channel_stats, fit_spline,
                                   preprocess_dataset, preprocess_sequences, resample_cubic_spline)
from strokecomp.skeleton import Dataset, Label, N_JOINTS, stratified_split

from conftest import labelled_dataset, make_seq


def _dist(a, b):
    return sum(np.sqrt(sum((a[j][k] - b[j][k]) ** 2 for k in range(3))) for j in range(N_JOINTS)) / N_JOINTS


def _keyframes_reference(coords, thr):
    kept = [0]
    for i in range(1, len(coords)):
        if _dist(coords[i], coords[kept[-1]]) > thr:
            kept.append(i)
    return kept


def _dedup_reference(coords, size, step, eps):
    """Plain transcription of the windowed rule, one pass, then repeated until stable."""
    idx = list(range(len(coords)))
    while True:
        n = len(idx)
        removed = set()
        s = 0
        while True:
            kept = []
            for i in range(s, min(s + size, n)):
                if i in removed:
                    continue
                if any(_dist(coords[idx[i]], coords[idx[k]]) < eps for k in kept):
                    removed.add(i)
                else:
                    kept.append(i)
            if s + size >= n:
                break
            s += step
        if not removed:
            return idx
        idx = [x for i, x in enumerate(idx) if i not in removed]


def _jittery(rng, T, small=0.001, big=0.02, p_small=0.6):
    steps = np.where(rng.random(T) < p_small, small, big)[:, None, None] * rng.normal(size=(T, N_JOINTS, 3))
    return np.cumsum(steps, axis=0)


def test_keyframes_static_and_moving():
    assert len(extract_keyframes(make_seq(np.zeros((10, N_JOINTS, 3))), 0.01)) == 1
    moving = np.arange(8)[:, None, None] * np.full((1, N_JOINTS, 3), 0.02 / np.sqrt(3))
    assert len(extract_keyframes(make_seq(moving), 0.01)) == 8


def test_keyframes_match_reference_scan(rng):
    for _ in range(10):
        coords = np.zeros((30, N_JOINTS, 3))
        coords[1::2] = rng.normal(scale=0.01, size=(15, N_JOINTS, 3))  # alternating still / moving
        coords = np.cumsum(coords, axis=0)
        seq = make_seq(coords)
        out = extract_keyframes(seq, 0.005)
        ref = _keyframes_reference(coords, 0.005)
        assert np.array_equal(out.coords, coords[ref])
        assert np.array_equal(out.timestamps, seq.timestamps[ref])


def test_dedup_identical_window():
    cfg = PreprocessConfig()
    assert len(dedup_sliding_window(make_seq(np.ones((5, N_JOINTS, 3))), cfg)) == 1


def test_dedup_keeps_distinct_frames(rng):
    coords = np.arange(12)[:, None, None] * np.ones((1, N_JOINTS, 3))
    seq = make_seq(coords)
    assert np.array_equal(dedup_sliding_window(seq, PreprocessConfig()).coords, coords)


@pytest.mark.parametrize("size,step", [(5, 2), (3, 1), (4, 4), (6, 3)])
def test_dedup_matches_quadratic_reference(rng, size, step):
    cfg = PreprocessConfig(window_size=size, window_step=step, similarity_epsilon=0.01)
    for _ in range(8):
        coords = _jittery(rng, 25)
        out = dedup_sliding_window(make_seq(coords), cfg)
        assert np.array_equal(out.coords, coords[_dedup_reference(coords, size, step, 0.01)])


def test_dedup_idempotent_on_100_sequences(rng):
    cfg = PreprocessConfig(similarity_epsilon=0.01)
    for _ in range(100):
        once = dedup_sliding_window(make_seq(_jittery(rng, int(rng.integers(2, 40)))), cfg)
        twice = dedup_sliding_window(once, cfg)
        assert np.array_equal(once.coords, twice.coords)
        assert np.all(np.diff(once.timestamps) > 0)


def test_spline_constant_and_linear():
    const = make_seq(np.full((7, N_JOINTS, 3), 0.37))
    assert np.allclose(resample_cubic_spline(const, 11).coords, 0.37, atol=1e-12, rtol=0)
    t = np.array([0.0, 0.05, 0.2, 0.21, 0.5, 0.9])
    slope = np.linspace(-1, 1, 60).reshape(N_JOINTS, 3)
    coords = 0.3 + t[:, None, None] * slope
    from strokecomp.skeleton import ActionKind, MotionSequence
    seq = MotionSequence(coords, t, Label.NC, ActionKind.TOUCH_MOUTH)
    out = resample_cubic_spline(seq, 17)
    expect = 0.3 + np.linspace(0.0, 0.9, 17)[:, None, None] * slope
    assert np.max(np.abs(out.coords - expect)) < 1e-9
    assert np.allclose(np.diff(out.timestamps), 0.9 / 16)


def test_spline_knot_fidelity(rng):
    from strokecomp.skeleton import ActionKind, MotionSequence
    for _ in range(20):
        T = int(rng.integers(2, 30))
        t = np.cumsum(rng.uniform(0.01, 0.2, T))
        seq = MotionSequence(rng.normal(size=(T, N_JOINTS, 3)), t, Label.NC, ActionKind.TOUCH_MOUTH)
        u, spline = fit_spline(seq)
        assert np.max(np.abs(spline(u) - seq.channels())) < 1e-9
    seq = make_seq(rng=rng, T=9)
    out = resample_cubic_spline(seq, 9)
    assert np.max(np.abs(out.coords - seq.coords)) < 1e-9


def test_spline_endpoints_and_errors(rng):
    seq = make_seq(rng=rng, T=5)
    out = resample_cubic_spline(seq, 40)
    assert np.array_equal(out.coords[0], seq.coords[0]) and np.array_equal(out.coords[-1], seq.coords[-1])
    with pytest.raises(ValueError, match="too short"):
        resample_cubic_spline(make_seq(rng=rng, T=1), 5)


def test_stats_hand_values():
    coords = np.zeros((3, N_JOINTS, 3))
    coords[:, 0, 0] = [1.0, 2.0, 3.0]
    seq = make_seq(coords)
    st = fit_channel_stats([seq])
    assert st.mean[0] == 2.0
    assert abs(st.std[0] - np.sqrt(2.0 / 3.0)) < 1e-15
    assert abs(st.std[0] - 0.81650) < 1e-5
    assert st.degenerate[1] and not st.degenerate[0]
    z = apply_zscore(seq, st)
    assert np.allclose(z.coords[:, 0, 0], [-1.22474, 0.0, 1.22474], atol=1e-5)
    assert z.coords[1, 0, 0] == 0.0
    assert np.all(z.coords[:, 0, 1:] == 0.0)  # degenerate channels map to 0
    assert fit_channel_stats([seq, seq]) == st


def test_zscore_refit_is_standard(rng):
    train = [make_seq(rng.normal(loc=rng.normal(size=(1, N_JOINTS, 3)), scale=3.0, size=(12, N_JOINTS, 3)))
             for _ in range(6)]
    st = fit_channel_stats(train)
    re = fit_channel_stats([apply_zscore(s, st) for s in train])
    assert np.max(np.abs(re.mean)) < 1e-9 and np.max(np.abs(re.std - 1.0)) < 1e-9


def test_stats_errors():
    with pytest.raises(ValueError):
        fit_channel_stats([])


def test_stats_json_round_trip(tmp_path, rng):
    st = fit_channel_stats([make_seq(rng=rng)])
    assert ChannelStats.load(st.save(tmp_path / "s.json")) == st


def _clean_dataset(rng, lengths, labels=None):
    seqs = []
    for k, T in enumerate(lengths):
        coords = np.cumsum(rng.normal(scale=0.05, size=(T, N_JOINTS, 3)), axis=0)
        seqs.append(make_seq(coords, label=(labels or [Label(k % 4)])[k % len(labels or [0])]
                             if labels else Label(k % 4), repetition=k))
    return Dataset(seqs)


def test_preprocess_equal_length_clean_data(rng):
    ds = stratified_split(_clean_dataset(rng, [15] * 16), 0.75, seed=0)
    pds, st = preprocess_dataset(ds, PreprocessConfig())
    assert st.target_length == 15 and all(len(s) == 15 for s in pds.sequences)
    assert all(s.preprocessed for s in pds.sequences)


def test_preprocess_target_is_longest_training_sequence(rng):
    lengths = [10, 13, 21, 9, 12, 30, 8, 11, 16, 14, 19, 7]
    ds = stratified_split(_clean_dataset(rng, lengths), 0.7, seed=1)
    pds, st = preprocess_dataset(ds, PreprocessConfig())
    assert st.target_length == max(lengths[i] for i in ds.train_idx)
    assert {len(s) for s in pds.sequences} == {st.target_length}


def test_preprocess_has_no_test_leakage(rng):
    ds = stratified_split(_clean_dataset(rng, [12] * 12), 0.75, seed=2)
    _, st = preprocess_dataset(ds, PreprocessConfig())
    seqs = list(ds.sequences)
    i = ds.test_idx[0]
    seqs[i] = seqs[i].with_frames(seqs[i].coords * 1000.0, seqs[i].timestamps)
    _, st2 = preprocess_dataset(Dataset(seqs, ds.train_idx, ds.test_idx), PreprocessConfig())
    assert st2 == st


def test_inference_path_matches_training_path(rng):
    ds = stratified_split(_clean_dataset(rng, [10, 14, 12, 9] * 3), 0.75, seed=0)
    cfg = PreprocessConfig()
    pds, st = preprocess_dataset(ds, cfg)
    again = preprocess_sequences(ds.subset("test"), cfg, st)
    for a, b in zip(again, pds.subset("test")):
        assert np.array_equal(a.coords, b.coords)


def test_collapse_is_reported(rng):
    seqs = list(_clean_dataset(rng, [10] * 8).sequences)
    seqs[3] = seqs[3].with_frames(np.zeros((10, N_JOINTS, 3)), seqs[3].timestamps)
    ds = stratified_split(Dataset(seqs), 0.5, seed=0)
    with pytest.raises(PreprocessError, match=seqs[3].key()):
        preprocess_dataset(ds, PreprocessConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        PreprocessConfig(keyframe_threshold=0)
    with pytest.raises(ValueError):
        PreprocessConfig(window_size=1, window_step=2)
    with pytest.raises(ValueError):
        PreprocessConfig(target_length=1)
