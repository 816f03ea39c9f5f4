import numpy as np
import pytest

import strokecomp.autodiff as ad
from strokecomp.autodiff import Tensor
from strokecomp.model import (GcnLstmAttModel, ModelConfig, TrainConfig, Variant, attention_pool,
                              forward, frame_embed, gcn_forward, load_model, lstm_forward,
                              normalize_adjacency, predict, save_model, tiny_gradient_check, train)
from strokecomp.preprocess import ChannelStats
from strokecomp.skeleton import Dataset, Label, N_JOINTS, SkeletonGraph, canonical_upper_limb_graph

from conftest import make_seq

SMALL = dict(gcn_channels=(3, 5), lstm_hidden=6, attention_dim=4)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_normalize_adjacency_examples():
    assert np.allclose(normalize_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]])), 0.5, rtol=0, atol=1e-15)
    path = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    A = normalize_adjacency(path)
    assert abs(A[0, 1] - 1 / np.sqrt(6)) < 1e-12 and abs(A[1, 1] - 1 / 3) < 1e-12
    assert normalize_adjacency(np.zeros((1, 1))).tolist() == [[1.0]]


def test_skeleton_adjacency_properties():
    g = canonical_upper_limb_graph()
    A = normalize_adjacency(g)
    assert np.array_equal(A, A.T) and np.all(A >= 0)
    deg = g.adjacency().sum(axis=1) + 1
    assert np.allclose(np.diag(A), 1 / deg, rtol=0, atol=1e-15)
    assert np.max(np.abs(np.linalg.eigvalsh(A))) <= 1 + 1e-9
    assert not GcnLstmAttModel(ModelConfig(**SMALL)).A_hat.flags.writeable


def _gcn_loops(X, A, layers):
    H = X.copy()
    for W, b in layers:
        T, N, _ = H.shape
        out = np.zeros((T, N, W.shape[1]))
        for t in range(T):
            for i in range(N):
                agg = np.zeros(H.shape[2])
                for j in range(N):
                    agg += A[i, j] * H[t, j]
                for c in range(W.shape[1]):
                    out[t, i, c] = max(0.0, sum(agg[k] * W[k, c] for k in range(len(agg))) + b[c])
        H = out
    return H


def test_gcn_matches_loop_reference(rng):
    A = normalize_adjacency(canonical_upper_limb_graph())
    X = rng.normal(size=(3, N_JOINTS, 3))
    layers = [(rng.normal(size=(3, 4)), rng.normal(size=4) * 0.3), (rng.normal(size=(4, 2)), rng.normal(size=2) * 0.3)]
    ref = _gcn_loops(X, A, layers)
    tl = [(Tensor(w), Tensor(b)) for w, b in layers]
    for fused in (True, False):
        assert np.max(np.abs(gcn_forward(X, A, tl, fused=fused).data - ref)) < 1e-12


def test_gcn_trivial_cases(rng):
    A = normalize_adjacency(canonical_upper_limb_graph())
    X = rng.uniform(size=(4, N_JOINTS, 3))
    out = gcn_forward(X, A, [(Tensor(np.eye(3)), Tensor(np.zeros(3)))]).data
    assert np.allclose(out, np.einsum("ij,tjc->tic", A, X), rtol=0, atol=1e-15)
    zero = gcn_forward(np.zeros((2, N_JOINTS, 3)), A, [(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(4)))])
    assert np.all(zero.data == 0)
    with pytest.raises(ad.ShapeError):
        gcn_forward(X, A, [(Tensor(np.eye(4)), Tensor(np.zeros(4)))])


def test_frame_embed(rng):
    H = rng.normal(size=(5, N_JOINTS, 3))
    ref = np.array([[sum(H[t, j, c] for j in range(N_JOINTS)) / N_JOINTS for c in range(3)] for t in range(5)])
    assert np.max(np.abs(frame_embed(Tensor(H)).data - ref)) < 1e-15
    const = np.broadcast_to(rng.normal(size=(5, 1, 3)), (5, N_JOINTS, 3))
    assert np.allclose(frame_embed(Tensor(const)).data, const[:, 0], rtol=0, atol=1e-15)
    one_hot = np.zeros((1, N_JOINTS, 1))
    one_hot[0, 7, 0] = 4.0
    assert frame_embed(Tensor(one_hot)).data[0, 0] == 4.0 / 20


def test_lstm_zero_weights(rng):
    H = 3
    z = lambda *s: Tensor(np.zeros(s))
    out = lstm_forward(rng.normal(size=(6, 2)), z(2, 4 * H), z(H, 4 * H), z(4 * H)).data
    assert np.all(out == 0)


def test_lstm_single_step_reference(rng):
    H, C = 4, 3
    e = rng.normal(size=(1, C))
    wx, wh, b = rng.normal(size=(C, 4 * H)), rng.normal(size=(H, 4 * H)), rng.normal(size=4 * H)
    z = e[0] @ wx + b
    i, f, o, g = _sig(z[:H]), _sig(z[H:2 * H]), _sig(z[2 * H:3 * H]), np.tanh(z[3 * H:])
    h = o * np.tanh(i * g)
    for fused in (True, False):
        out = lstm_forward(e, Tensor(wx), Tensor(wh), Tensor(b), fused=fused).data
        assert np.max(np.abs(out[0] - h)) < 1e-12


def test_lstm_bias_only_recursion():
    H = 2
    b = np.array([0.3, -0.2, 1.0, 0.5, 0.7, -0.1, 0.4, 0.9])
    out = lstm_forward(np.zeros((150, 3)), Tensor(np.zeros((3, 4 * H))), Tensor(np.zeros((H, 4 * H))), Tensor(b)).data
    i, f, o, g = _sig(b[:H]), _sig(b[H:2 * H]), _sig(b[2 * H:3 * H]), np.tanh(b[3 * H:])
    c = np.zeros(H)
    for t in range(150):
        c = f * c + i * g
        assert np.max(np.abs(out[t] - o * np.tanh(c))) < 1e-12
    assert np.max(np.abs(out[-1] - o * np.tanh(i * g / (1 - f)))) < 1e-9


def test_fused_and_composed_lstm_agree(rng):
    E = rng.normal(size=(2, 7, 3))
    wx, wh, b = (Tensor(rng.normal(size=s) * 0.5) for s in [(3, 20), (5, 20), (20,)])
    a = lstm_forward(E, wx, wh, b).data
    c = lstm_forward(E, wx, wh, b, fused=False).data
    assert np.max(np.abs(a - c)) < 1e-14


def _att_params(rng, hidden=3, dim=4):
    return Tensor(rng.normal(size=(hidden, dim))), Tensor(rng.normal(size=dim)), Tensor(rng.normal(size=dim))


def test_attention_examples(rng):
    w, b, v = _att_params(rng)
    h = rng.normal(size=(1, 3))
    ctx, alpha = attention_pool(Tensor(h), w, b, v)
    assert alpha.data.tolist() == [1.0] and np.allclose(ctx.data, h[0], rtol=0, atol=1e-15)
    _, alpha = attention_pool(Tensor(np.tile(h, (5, 1))), w, b, v)
    assert np.array_equal(alpha.data, np.full(5, 0.2))
    assert ad.softmax(Tensor([10.0, 0.0, 0.0, 0.0])).data[0] > 0.999


def test_attention_weights_sum_to_one(rng):
    for _ in range(1000):
        T = int(rng.integers(1, 12))
        w, b, v = _att_params(rng)
        H = rng.normal(scale=rng.uniform(0.1, 20), size=(T, 3))
        a = attention_pool(Tensor(H), w, b, v)[1].data
        assert np.all(a >= 0) and abs(a.sum() - 1.0) < 1e-12


def test_uniform_cross_entropy():
    assert abs(ad.cross_entropy(Tensor(np.zeros((5, 4))), np.arange(5) % 4).item() - np.log(4)) < 1e-12


@pytest.mark.parametrize("variant", list(Variant))
def test_forward_shape_and_softmax(rng, variant):
    m = GcnLstmAttModel(ModelConfig(**SMALL, variant=variant), seed=1)
    z = forward(make_seq(rng=rng, T=7), m)
    assert z.shape == (4,)
    assert abs(ad.softmax(Tensor(z)).data.sum() - 1) < 1e-12


def test_gcn_only_is_averaging_idempotent(rng):
    m = GcnLstmAttModel(ModelConfig(**SMALL, variant="GCN_ONLY"), seed=2)
    frame = rng.normal(size=(1, N_JOINTS, 3))
    a = forward(make_seq(np.repeat(frame, 9, axis=0)), m)
    with ad.no_grad():
        b = m.logits(frame).data
    assert np.allclose(a, b, rtol=0, atol=1e-14)


def test_joint_permutation_leaves_logits_unchanged(rng):
    g = canonical_upper_limb_graph()
    perm = rng.permutation(N_JOINTS)
    inv = np.argsort(perm)
    # new joint k is old joint perm[k]
    edges = tuple(sorted((min(inv[a], inv[b]), max(inv[a], inv[b])) for a, b in g.edges))
    g2 = SkeletonGraph(N_JOINTS, edges, tuple(g.joint_names[p] for p in perm))
    m = GcnLstmAttModel(ModelConfig(**SMALL), g, seed=3)
    m2 = GcnLstmAttModel(ModelConfig(**SMALL), g2, params={k: p.data for k, p in m.params.items()})
    assert np.allclose(m2.A_hat, m.A_hat[np.ix_(perm, perm)], rtol=0, atol=1e-15)
    X = rng.normal(size=(3, 6, N_JOINTS, 3))
    with ad.no_grad():
        assert np.max(np.abs(m.logits(X).data - m2.logits(X[:, :, perm]).data)) < 1e-9


@pytest.mark.parametrize("variant", list(Variant))
def test_end_to_end_gradient_check(variant):
    assert tiny_gradient_check(variant) < 1e-4
    assert tiny_gradient_check(variant, seed=5, lstm_hidden=8) < 1e-4


def _toy_dataset(rng, n_per_class=8, T=4):
    """Classes differ by a constant offset along a class-specific axis; linearly separable after pooling."""
    seqs, centers = [], np.eye(4, 3) * 2.0
    centers[3] = [-2.0, -2.0, -2.0]
    for c in range(4):
        for r in range(n_per_class):
            coords = centers[c] + rng.normal(scale=0.2, size=(T, N_JOINTS, 3))
            seqs.append(make_seq(coords, label=Label(c), repetition=r, preprocessed=True))
    n = len(seqs)
    idx = np.arange(n)
    return Dataset(seqs, idx[idx % 4 != 0], idx[idx % 4 == 0])


def test_training_separable_toy_reaches_full_accuracy(rng):
    ds = _toy_dataset(rng)
    model, hist = train(ds, ModelConfig(gcn_channels=(3, 8), lstm_hidden=8, attention_dim=4),
                        TrainConfig(epochs=100, learning_rate=0.01, batch_size=8))
    assert max(e["train_accuracy"] for e in hist.epochs) == 1.0
    assert [int(p) for p in predict(ds, model, "train")] == [int(s.label) for s in ds.subset("train")]


def test_training_is_deterministic_and_lr0_is_inert(rng):
    ds = _toy_dataset(rng, n_per_class=4)
    mc = ModelConfig(**SMALL)
    a = train(ds, mc, TrainConfig(epochs=3, seed=4))
    b = train(ds, mc, TrainConfig(epochs=3, seed=4))
    assert a[1].final_loss == b[1].final_loss
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a[0].parameters(), b[0].parameters()))
    frozen, hist = train(ds, mc, TrainConfig(epochs=3, seed=4, learning_rate=0.0))
    init = GcnLstmAttModel(mc, seed=int(np.random.SeedSequence(4).spawn(3)[0].generate_state(1)[0]))
    assert all(np.array_equal(p.data, q.data) for p, q in zip(frozen.parameters(), init.parameters()))
    losses = [e["train_loss"] for e in hist.epochs]
    assert max(losses) - min(losses) < 1e-12


def test_predict_tie_breaks_low(rng):
    m = GcnLstmAttModel(ModelConfig(**SMALL), seed=0)
    m.params["cls.weight"].data[...] = 0.0
    m.params["cls.bias"].data[...] = [0.0, 1.0, 1.0, 0.5]
    assert predict([make_seq(rng=rng, T=4)], m) == [Label.TLF]


def test_predict_rejects_length_and_stats_mismatch(rng):
    ds = _toy_dataset(rng, n_per_class=2)
    m = GcnLstmAttModel(ModelConfig(**SMALL))
    m.stats = ChannelStats(np.zeros(60), np.ones(60), target_length=4)
    with pytest.raises(ValueError, match="target_length"):
        predict([make_seq(rng=rng, T=5)], m)
    other = ChannelStats(np.ones(60), np.ones(60), target_length=4)
    with pytest.raises(ValueError, match="statistics"):
        predict(Dataset(ds.sequences, ds.train_idx, ds.test_idx, stats=other), m)


def test_serialization_round_trip(tmp_path, rng):
    m = GcnLstmAttModel(ModelConfig(**SMALL), seed=9)
    m.stats = ChannelStats(rng.normal(size=60), rng.uniform(1, 2, 60), target_length=6)
    d = save_model(m, tmp_path / "m")
    raw = np.fromfile(d / "weights.bin", dtype="<f8")
    assert raw.size == sum(p.data.size for p in m.parameters())
    m2 = load_model(d)
    assert m2.config == m.config and m2.stats == m.stats and m2.target_length == 6
    for (k, p), (k2, q) in zip(m.params.items(), m2.params.items()):
        assert k == k2 and np.array_equal(p.data, q.data)
    seq = make_seq(rng=rng, T=6)
    assert np.array_equal(forward(seq, m), forward(seq, m2))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(gcn_channels=(4, 8))
    with pytest.raises(ValueError):
        ModelConfig(lstm_hidden=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_initialization_bounds():
    m = GcnLstmAttModel(ModelConfig(), seed=0)
    H = m.config.lstm_hidden
    for name, p in m.params.items():
        if name.endswith(("bias", ".b")):
            expect = np.zeros(p.shape)
            if name == "lstm.bias":
                expect[H:2 * H] = 1.0
            assert np.array_equal(p.data, expect), name
            continue
        bound = np.sqrt((6.0 if name.startswith("gcn") else 1.0) / p.shape[0])
        assert np.all(np.abs(p.data) <= bound) and np.abs(p.data).max() > 0.9 * bound, name
