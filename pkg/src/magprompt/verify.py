"""Self-check suite: executable forms of the method's stated properties.

Each check returns its worst observed error against a fixed threshold so a
report can print one line per property. A corruption hook deliberately
breaks an op for sensitivity testing (a passing suite should fail loudly
when the softmax is wrong).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import prompt as pr
from .graph import Graph, Permutation, build_graph, gnp_synthesize, permute_graph


def randomize_prompt(state: pr.PromptState, seed: int, scale: float = 0.3) -> None:
    """Fill prompt parameters with noise so properties are not checked at the
    trivial zero point (and leaky-rectifier inputs avoid the kink)."""
    rng = np.random.default_rng(seed)
    for t in state.parameters():
        t.data = scale * rng.standard_normal(t.data.shape)


def _embed_pair(g: Graph, arch: str, variant: str, seed: int):
    """Forward a graph and its permuted copy through the same weights."""
    dims = (g.feature_dim, 7, 5)
    ckpt = bb.init_backbone(arch, dims, seed)
    state = pr.init_prompt(ckpt, variant, gate_dim=4, num_prompts=3,
                           beta=0.5, slope=0.2, seed=seed)
    randomize_prompt(state, seed + 1)
    rng = np.random.default_rng(seed + 2)
    perm = Permutation.random(g.num_nodes, rng)

    run = bb.prepare_graph(g, arch)
    run_p = bb.prepare_graph(permute_graph(g, perm), arch)
    h = bb.forward(run, ckpt, state).data
    h_p = bb.forward(run_p, ckpt, state).data
    return h, h_p, perm


def check_equivariance(num_graphs: int = 20, seed: int = 0) -> dict:
    """Permuting nodes permutes embeddings and leaves readouts unchanged."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(num_graphs):
        n = int(rng.integers(5, 31))
        g = gnp_synthesize(n, 0.3, 6, int(rng.integers(1 << 30)))
        for arch in bb.ARCHS:
            for variant in pr.VARIANTS:
                h, h_p, perm = _embed_pair(g, arch, variant, seed=1000 + k)
                expected = np.empty_like(h)
                expected[perm.mapping] = h
                worst = max(worst, float(np.max(np.abs(h_p - expected))))
                r = bb.graph_readout(ad.constant(h), "mean").data
                r_p = bb.graph_readout(ad.constant(h_p), "mean").data
                worst = max(worst, float(np.max(np.abs(r - r_p))))
    return {"name": "equivariance", "max_error": worst, "threshold": 1e-9,
            "passed": worst < 1e-9}


def check_gate_bounds(num_edges: int = 100_000, beta: float = 0.5,
                      seed: int = 0) -> dict:
    """beta <= a <= 1 with no violations; singleton in-edges give a == 1;
    per-(destination, head) attention sums to 1."""
    rng = np.random.default_rng(seed)
    n = 2000
    src = rng.integers(0, n, size=num_edges)
    dst = rng.integers(1, n, size=num_edges)  # node 0 kept as a singleton
    edges = np.concatenate([np.stack([src, dst], axis=1), [[5, 0]]])
    g = build_graph(edges, n, rng.standard_normal((n, 3)))

    logits = ad.constant(rng.standard_normal((g.num_edges, 4)) * 5.0)
    out = pr.compute_gate(ad.leaky_relu(logits, 0.2), g, beta)
    a = out.gate.data.ravel()

    violations = int(np.sum((a < beta) | (a > 1.0)))
    deg = g.in_degrees()
    singleton_edges = np.flatnonzero(deg[g.edge_dst] == 1)
    singleton_err = float(np.max(np.abs(a[singleton_edges] - 1.0))) \
        if singleton_edges.size else 0.0

    sums = np.zeros((n, 4))
    np.add.at(sums, g.edge_dst, out.alpha.data)
    occupied = deg > 0
    sum_err = float(np.max(np.abs(sums[occupied] - 1.0)))

    worst = max(float(violations), singleton_err, sum_err)
    return {"name": "gate_bounds", "max_error": worst, "threshold": 1e-9,
            "passed": violations == 0 and singleton_err == 0.0 and sum_err < 1e-9}


def check_gradients(seed: int = 0) -> dict:
    """Finite differences against the tape for the full prompted objective."""
    from .trainer import cross_entropy, init_head

    g = bb.prepare_graph(gnp_synthesize(10, 0.4, 4, seed), "GCN")
    ckpt = bb.init_backbone("GCN", (4, 6, 3), seed + 1)
    state = pr.init_prompt(ckpt, "MAG_PLUS", gate_dim=5, num_prompts=3,
                           beta=0.5, slope=0.2, seed=seed + 2)
    randomize_prompt(state, seed + 3)
    head = init_head(3, 2, seed + 4)
    labels = np.random.default_rng(seed + 5).integers(0, 2, size=10)

    def objective():
        h, trace = bb.forward_with_trace(g, ckpt, state)
        task = cross_entropy(head.apply(h), labels)
        terms = [pr.pc_loss(pr.usage_vector(pi), 1e-8) for pi in trace.mixtures]
        return pr.total_loss(task, terms, 0.1, ckpt.num_layers)

    params = state.parameters() + head.tensors()
    err = ad.finite_diff_check_params(objective, params, h=1e-6)
    return {"name": "gradient_fidelity", "max_error": err, "threshold": 1e-5,
            "passed": err < 1e-5}


def _naive_segment_softmax(x: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros_like(x)
    for s in range(n):
        rows = np.flatnonzero(seg == s)
        if rows.size:
            block = np.exp(x[rows] - x[rows].max(axis=0))
            out[rows] = block / block.sum(axis=0)
    return out


def check_oracles(instances: int = 50, seed: int = 0) -> dict:
    """Segment kernels against per-segment loops; the assembled graph
    convolution against its dense normalized-adjacency form."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        rows, n, d = int(rng.integers(1, 40)), int(rng.integers(1, 8)), 3
        seg = np.sort(rng.integers(0, n, size=rows))
        x = rng.standard_normal((rows, d)) * 3.0
        worst = max(worst, float(np.max(np.abs(
            ad.segment_softmax(ad.constant(x), seg, n).data
            - _naive_segment_softmax(x, seg, n)))))
        for mode in ("sum", "mean", "max"):
            got = ad.segment_reduce(ad.constant(x), seg, n, mode).data
            want = np.zeros((n, d))
            for s in range(n):
                block = x[seg == s]
                if block.size:
                    want[s] = {"sum": block.sum(0), "mean": block.mean(0),
                               "max": block.max(0)}[mode]
            worst = max(worst, float(np.max(np.abs(got - want))))

    for k in range(instances):
        g = bb.prepare_graph(gnp_synthesize(15, 0.3, 4, seed + 100 + k), "GCN")
        ckpt = bb.init_backbone("GCN", (4, 6), seed + 200 + k)
        got = bb.forward(g, ckpt).data
        adj = np.zeros((15, 15))
        adj[g.edge_dst, g.edge_src] = 1.0
        dinv = np.diag(1.0 / np.sqrt(adj.sum(axis=1)))
        pre = dinv @ adj @ dinv @ g.features @ ckpt.params["layer0.weight"].data
        want = pre + ckpt.params["layer0.bias"].data  # single layer: linear output
        worst = max(worst, float(np.max(np.abs(got - want))))
    return {"name": "oracle_equivalence", "max_error": worst, "threshold": 1e-10,
            "passed": worst < 1e-10}


def check_parameter_counts() -> dict:
    """Closed-form counts equal direct enumeration of live tensor sizes."""
    mismatches = 0
    for d in (32, 128):
        for d_a in (8, 16, 32):
            for m in (1, 10, 20):
                ckpt = bb.init_backbone("GCN", (d, d, d), seed=0)
                for variant in pr.VARIANTS:
                    state = pr.init_prompt(ckpt, variant, d_a, m, 0.5, 0.2, seed=0)
                    per_layer, total = pr.count_prompt_params(state)
                    sizes = [sum(int(t.data.size) for t in lp.tensors().values())
                             for lp in state.layers]
                    if per_layer != sizes or total != sum(sizes):
                        mismatches += 1
    return {"name": "parameter_accounting", "max_error": float(mismatches),
            "threshold": 1.0, "passed": mismatches == 0}


def check_usage_balance(seed: int = 0) -> dict:
    """Collapse loss: zero at uniform usage, hand value at [2, 0], and a
    function of column sums alone."""
    worst = 0.0
    uniform = pr.pc_loss(ad.constant(np.full((1, 4), 7.0)), 1e-8).item()
    worst = max(worst, abs(uniform))
    two_zero = pr.pc_loss(ad.constant(np.array([[2.0, 0.0]])), 1e-8).item()
    worst = max(worst, abs(two_zero - 1.0 / (1.0 + 1e-8)))

    rng = np.random.default_rng(seed)
    pi1 = rng.random((30, 5))
    pi1 /= pi1.sum(axis=1, keepdims=True)
    pi2 = pi1[rng.permutation(30)]  # same column sums, different rows
    v1 = pr.pc_loss(pr.usage_vector(ad.constant(pi1)), 1e-8).item()
    v2 = pr.pc_loss(pr.usage_vector(ad.constant(pi2)), 1e-8).item()
    worst = max(worst, abs(v1 - v2))
    return {"name": "usage_balance", "max_error": worst, "threshold": 1e-9,
            "passed": abs(uniform) < 1e-12 and abs(v1 - v2) < 1e-12
            and abs(two_zero - 1.0 / (1.0 + 1e-8)) < 1e-9}


def check_neutral_prompt(num_graphs: int = 10, seed: int = 0) -> dict:
    """Unit gates and zero prompts reproduce the plain backbone."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(num_graphs):
        n = int(rng.integers(4, 20))
        g = gnp_synthesize(n, 0.35, 5, seed + 50 + k)
        for arch in bb.ARCHS:
            run = bb.prepare_graph(g, arch)
            ckpt = bb.init_backbone(arch, (5, 6, 4), seed + 80 + k)
            for variant in pr.VARIANTS:
                neutral = pr.init_prompt(ckpt, variant, 4, 3, beta=1.0,
                                         slope=0.2, seed=k)
                plain = bb.forward(run, ckpt).data
                prompted = bb.forward(run, ckpt, neutral).data
                worst = max(worst, float(np.max(np.abs(plain - prompted))))
    return {"name": "neutral_prompt", "max_error": worst, "threshold": 1e-12,
            "passed": worst < 1e-12}


ALL_CHECKS = (check_equivariance, check_gate_bounds, check_gradients,
              check_oracles, check_parameter_counts, check_usage_balance,
              check_neutral_prompt)


def run_all(corrupt: str | None = None) -> list:
    """Run every check; `corrupt` deliberately breaks an op first (the suite
    must then fail) and always restores it."""
    if corrupt is None:
        return [check() for check in ALL_CHECKS]
    if corrupt != "segment_softmax":
        raise ValueError(f"unknown corruption target {corrupt!r}")
    original = ad.segment_softmax

    def skewed(logits, segment_of, num_segments):
        return ad.scale(original(logits, segment_of, num_segments), 1.01)

    ad.segment_softmax = skewed
    try:
        results = []
        for check in ALL_CHECKS:
            try:
                results.append(check())
            except Exception as err:  # a corrupted op may break invariant guards
                results.append({"name": check.__name__.removeprefix("check_"),
                                "max_error": float("inf"), "threshold": 0.0,
                                "passed": False, "error": str(err)})
        return results
    finally:
        ad.segment_softmax = original
