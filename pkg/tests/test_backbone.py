"""Encoder tests: hand-computed layers, dense-matrix oracles, permutation
equivariance, the neutral-prompt identity, link-prediction pre-training,
and checkpoint persistence."""

import numpy as np
import pytest

import magprompt.autodiff as ad
import magprompt.backbone as bb
from magprompt.graph import Permutation, build_graph, gnp_synthesize, permute_graph
from magprompt.prompt import init_prompt
from magprompt.verify import randomize_prompt


def two_node_line():
    return build_graph([(0, 1), (1, 0)], 2, [[1.0], [1.0]])


def test_gcn_message_coefficients_by_hand():
    g = bb.prepare_graph(two_node_line(), "GCN")  # deg 2 each with loops
    w = ad.constant([[1.0]])
    m = bb.gcn_messages(g, ad.constant(g.features), w)
    # every coefficient is 1/sqrt(2*2) = 0.5 and h*W = 1
    assert np.allclose(m.data, 0.5)


def test_gcn_isolated_node_self_loop_coefficient_is_one():
    g = bb.prepare_graph(build_graph(np.zeros((0, 2)), 1, [[3.0]]), "GCN")
    m = bb.gcn_messages(g, ad.constant(g.features), ad.constant([[1.0]]))
    assert np.array_equal(m.data, [[3.0]])


def test_gcn_messages_require_self_loops_and_matching_dims():
    g = two_node_line()
    with pytest.raises(ValueError, match="self-loops"):
        bb.gcn_messages(g, ad.constant(g.features), ad.constant([[1.0]]))
    run = bb.prepare_graph(g, "GCN")
    with pytest.raises(ValueError):
        bb.gcn_messages(run, ad.constant(run.features), ad.constant(np.ones((3, 2))))


def test_gcn_update_activation_split():
    agg = ad.constant([[-1.0, 2.0]])
    bias = ad.constant([[0.0, 0.0]])
    assert np.array_equal(bb.gcn_update(agg, bias, final=False).data, [[0.0, 2.0]])
    assert np.array_equal(bb.gcn_update(agg, bias, final=True).data, [[-1.0, 2.0]])
    zero = bb.gcn_update(ad.constant([[0.0]]), ad.constant([[0.0]]), final=False)
    assert zero.data[0, 0] == 0.0


def test_one_layer_gcn_hand_forward():
    g = bb.prepare_graph(two_node_line(), "GCN")
    ckpt = bb.init_backbone("GCN", (1, 1), seed=0)
    ckpt.params["layer0.weight"].data = np.array([[1.0]])
    # each node receives 0.5 from itself and 0.5 from the other node
    assert np.allclose(bb.forward(g, ckpt).data, [[1.0], [1.0]])


def test_gcn_layer_matches_dense_oracle():
    for k in range(50):
        g = bb.prepare_graph(gnp_synthesize(15, 0.3, 4, seed=k), "GCN")
        ckpt = bb.init_backbone("GCN", (4, 6), seed=100 + k)
        got = bb.forward(g, ckpt).data
        adj = np.zeros((15, 15))
        adj[g.edge_dst, g.edge_src] = 1.0
        dinv = np.diag(1.0 / np.sqrt(adj.sum(axis=1)))
        want = dinv @ adj @ dinv @ g.features @ ckpt.params["layer0.weight"].data
        assert np.max(np.abs(got - want)) < 1e-10


def test_gin_triangle_identity_mlp():
    tri = [(0, 1), (1, 2), (2, 0), (1, 0), (2, 1), (0, 2)]
    g = build_graph(tri, 3, np.ones((3, 1)))
    ckpt = bb.init_backbone("GIN", (1, 1), seed=0)
    ckpt.params["layer0.w1"].data = np.array([[1.0]])
    ckpt.params["layer0.w2"].data = np.array([[1.0]])
    # eps = 0, identity perceptrons: every node maps to 1 + two neighbors = 3
    assert np.allclose(bb.forward(g, ckpt).data, 3.0)


def test_gin_edgeless_and_eps_minus_one():
    g = build_graph(np.zeros((0, 2)), 2, [[2.0], [5.0]])
    ckpt = bb.init_backbone("GIN", (1, 1), seed=0)
    ckpt.params["layer0.w1"].data = np.array([[1.0]])
    ckpt.params["layer0.w2"].data = np.array([[1.0]])
    assert np.allclose(bb.forward(g, ckpt).data, g.features)  # empty aggregation

    pair = build_graph([(0, 1), (1, 0)], 2, [[2.0], [5.0]])
    ckpt.params["layer0.eps"].data = np.array([[-1.0]])
    out = bb.forward(pair, ckpt).data
    assert np.allclose(out, [[5.0], [2.0]])  # self term cancels, neighbor sum only


def test_gin_rejects_self_loops():
    g = bb.prepare_graph(two_node_line(), "GCN")
    ckpt = bb.init_backbone("GIN", (1, 1), seed=0)
    with pytest.raises(ValueError, match="self-loops"):
        bb.forward(g, ckpt)
    with pytest.raises(ValueError):
        bb.prepare_graph(g, "GIN")


def test_forward_rejects_feature_dim_mismatch():
    g = bb.prepare_graph(gnp_synthesize(5, 0.5, 3, seed=0), "GCN")
    ckpt = bb.init_backbone("GCN", (4, 2), seed=0)
    with pytest.raises(ValueError, match="feature dim 3.*input dim 4"):
        bb.forward(g, ckpt)


def test_graph_readout_values_and_invariance():
    h = ad.constant([[1.0], [3.0]])
    assert np.array_equal(bb.graph_readout(h, "mean").data, [[2.0]])
    assert np.array_equal(bb.graph_readout(h, "sum").data, [[4.0]])
    single = ad.constant([[7.0, 1.0]])
    assert np.array_equal(bb.graph_readout(single, "mean").data, [[7.0, 1.0]])
    shuffled = ad.constant(h.data[::-1].copy())
    assert np.array_equal(bb.graph_readout(h, "mean").data,
                          bb.graph_readout(shuffled, "mean").data)
    with pytest.raises(ValueError):
        bb.graph_readout(ad.constant(np.zeros((0, 2))), "mean")
    with pytest.raises(ValueError):
        bb.graph_readout(h, "median")


@pytest.mark.parametrize("arch", ["GCN", "GIN"])
@pytest.mark.parametrize("variant", ["MAG", "MAG_PLUS"])
def test_forward_is_permutation_equivariant(arch, variant):
    rng = np.random.default_rng(11)
    for k in range(5):
        n = int(rng.integers(5, 25))
        g = gnp_synthesize(n, 0.35, 4, seed=300 + k)
        ckpt = bb.init_backbone(arch, (4, 6, 3), seed=k)
        state = init_prompt(ckpt, variant, 4, 3, beta=0.5, slope=0.2, seed=k)
        randomize_prompt(state, seed=k + 1)
        perm = Permutation.random(n, rng)

        h = bb.forward(bb.prepare_graph(g, arch), ckpt, state).data
        h_p = bb.forward(bb.prepare_graph(permute_graph(g, perm), arch),
                         ckpt, state).data
        expected = np.empty_like(h)
        expected[perm.mapping] = h
        assert np.max(np.abs(h_p - expected)) < 1e-9


@pytest.mark.parametrize("arch", ["GCN", "GIN"])
def test_neutral_prompt_reproduces_backbone(arch):
    for k in range(5):
        g = gnp_synthesize(10, 0.4, 3, seed=k)
        run = bb.prepare_graph(g, arch)
        ckpt = bb.init_backbone(arch, (3, 5, 4), seed=k)
        for variant in ("MAG", "MAG_PLUS"):
            neutral = init_prompt(ckpt, variant, 4, 2, beta=1.0, slope=0.2, seed=k)
            diff = np.abs(bb.forward(run, ckpt).data
                          - bb.forward(run, ckpt, neutral).data)
            assert np.max(diff) < 1e-12


def test_message_dims_follow_architecture():
    gcn = bb.init_backbone("GCN", (3, 5, 4), seed=0)
    gin = bb.init_backbone("GIN", (3, 5, 4), seed=0)
    assert bb.message_dims(gcn) == [5, 4]   # messages carry transformed features
    assert bb.message_dims(gin) == [3, 5]   # messages are raw neighbor states
    assert bb.gate_input_dims(gcn) == [3, 5]


def test_pretrain_loss_decreases_and_freezes():
    g = gnp_synthesize(20, 0.3, 3, seed=4)
    wins = 0
    for seed in range(5):
        ckpt = bb.pretrain_edgepred(g, "GCN", (3, 8), epochs=50, lr=1e-2,
                                    neg_ratio=1.0, seed=seed)
        curve = ckpt.meta["loss_curve"]
        assert len(curve) == 50 and all(np.isfinite(curve))
        wins += curve[-1] < curve[0]
        assert not any(t.requires_grad for t in ckpt.params.values())
    assert wins >= 4


def test_pretrain_positive_pair_loss_at_zero_score():
    # score 0 on every pair gives log 2 per pair
    s = ad.constant(np.zeros((4, 1)))
    loss = ad.scale(ad.sum_all(ad.log(ad.sigmoid(s))), -1.0 / 4)
    assert np.isclose(loss.item(), np.log(2.0))


def test_pretrain_rejects_edgeless_graph():
    g = build_graph(np.zeros((0, 2)), 4, np.ones((4, 2)))
    with pytest.raises(ValueError, match="edge"):
        bb.pretrain_edgepred(g, "GCN", (2, 4), epochs=1, lr=1e-3,
                             neg_ratio=1.0, seed=0)


def test_pretrain_is_deterministic():
    g = gnp_synthesize(15, 0.3, 2, seed=9)
    a = bb.pretrain_edgepred(g, "GIN", (2, 4), epochs=10, lr=1e-3,
                             neg_ratio=2.0, seed=3)
    b = bb.pretrain_edgepred(g, "GIN", (2, 4), epochs=10, lr=1e-3,
                             neg_ratio=2.0, seed=3)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)


def test_negative_sampler_avoids_edges_and_loops():
    g = gnp_synthesize(10, 0.4, 2, seed=2)
    existing = set(map(tuple, g.edge_pairs().tolist()))
    neg = bb.sample_negative_pairs(g, 40, np.random.default_rng(0))
    assert neg.shape == (40, 2)
    for s, d in neg:
        assert s != d and (int(s), int(d)) not in existing


def test_save_load_round_trip(tmp_path):
    ckpt = bb.pretrain_edgepred(gnp_synthesize(12, 0.4, 3, seed=1), "GCN",
                                (3, 6, 4), epochs=5, lr=1e-3, neg_ratio=1.0, seed=0)
    bb.save_backbone(ckpt, tmp_path / "bb.json")
    back = bb.load_backbone(tmp_path / "bb.json")
    assert back.arch == "GCN" and back.dims == (3, 6, 4)
    for name in ckpt.params:
        assert np.array_equal(back.params[name].data, ckpt.params[name].data)
        assert not back.params[name].requires_grad
    assert back.meta["objective"] == "edgepred"


def test_load_rejects_wrong_magic(tmp_path):
    from magprompt.checkpoint import write_checkpoint
    write_checkpoint(tmp_path / "p.json", "MAGP-PROMPT-1", {"arch": "GCN"}, {})
    with pytest.raises(ValueError, match="magic"):
        bb.load_backbone(tmp_path / "p.json")


def test_init_backbone_validation():
    with pytest.raises(ValueError):
        bb.init_backbone("GAT", (3, 4), seed=0)
    with pytest.raises(ValueError):
        bb.init_backbone("GCN", (3,), seed=0)
    with pytest.raises(ValueError):
        bb.init_backbone("GCN", (3, 0), seed=0)
