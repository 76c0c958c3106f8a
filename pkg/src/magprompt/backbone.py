"""Frozen GCN and GIN encoders split into message/aggregate/update stages.

The split exists so a prompt module can rewrite per-edge messages before
aggregation. GCN folds the symmetric normalization into the message, so a
gate scales the normalized message and an additive prompt is applied after
that scaling. GIN keeps raw neighbor states as messages; its update term
(1 + eps) * h_i plays the self-loop role, so GIN graphs carry no loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import BACKBONE_MAGIC, read_checkpoint, write_checkpoint
from .graph import Graph, add_self_loops

ARCHS = ("GCN", "GIN")


@dataclass
class BackboneCheckpoint:
    arch: str
    dims: tuple          # d_0 .. d_L
    params: dict         # name -> Tensor, insertion-ordered
    meta: dict = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def snapshot(self) -> dict:
        return {name: t.data.copy() for name, t in self.params.items()}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_backbone(arch: str, dims, seed: int, meta: dict | None = None) -> BackboneCheckpoint:
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"need at least [d_in, d_out] positive dims, got {dims}")
    rng = np.random.default_rng(seed)
    params: dict = {}
    for l in range(len(dims) - 1):
        d_in, d_out = dims[l], dims[l + 1]
        if arch == "GCN":
            params[f"layer{l}.weight"] = ad.constant(glorot(rng, d_in, d_out))
            params[f"layer{l}.bias"] = ad.constant(np.zeros((1, d_out)))
        else:
            params[f"layer{l}.eps"] = ad.constant(np.zeros((1, 1)))
            params[f"layer{l}.w1"] = ad.constant(glorot(rng, d_in, d_out))
            params[f"layer{l}.b1"] = ad.constant(np.zeros((1, d_out)))
            params[f"layer{l}.w2"] = ad.constant(glorot(rng, d_out, d_out))
            params[f"layer{l}.b2"] = ad.constant(np.zeros((1, d_out)))
    base_meta = {"seed": int(seed)}
    if meta:
        base_meta.update(meta)
    return BackboneCheckpoint(arch, dims, params, base_meta)


def message_dims(ckpt: BackboneCheckpoint):
    """Per-layer message width: GCN messages are post-weight, GIN are raw h_j."""
    if ckpt.arch == "GCN":
        return list(ckpt.dims[1:])
    return list(ckpt.dims[:-1])


def gate_input_dims(ckpt: BackboneCheckpoint):
    return list(ckpt.dims[:-1])


def _check_graph_arch(g: Graph, arch: str) -> None:
    if arch == "GCN" and not g.has_self_loops:
        raise ValueError("GCN forward needs self-loops; call prepare_graph first")
    if arch == "GIN" and g.has_self_loops:
        raise ValueError("GIN forward expects a graph without self-loops")


def prepare_graph(g: Graph, arch: str) -> Graph:
    """Adjust loop structure once, at load time."""
    if arch == "GCN":
        return g if g.has_self_loops else add_self_loops(g)
    if arch == "GIN":
        if g.has_self_loops:
            raise ValueError("GIN datasets must not contain self-loops")
        return g
    raise ValueError(f"unknown architecture {arch!r}")


def gcn_norm_coefficients(g: Graph) -> np.ndarray:
    """1/sqrt(deg(dst) * deg(src)) per edge, degrees counted with self-loops."""
    deg = g.in_degrees().astype(np.float64)
    return 1.0 / np.sqrt(deg[g.edge_dst] * deg[g.edge_src])


def gcn_messages(g: Graph, h: ad.Tensor, weight: ad.Tensor) -> ad.Tensor:
    _check_graph_arch(g, "GCN")
    if h.shape[1] != weight.shape[0]:
        raise ValueError(f"feature dim {h.shape[1]} vs weight rows {weight.shape[0]}")
    hw = ad.matmul(h, weight)
    coeff = ad.constant(gcn_norm_coefficients(g)[:, None])
    return ad.scale_rows(ad.gather_rows(hw, g.edge_src), coeff)


def gcn_update(aggregated: ad.Tensor, bias: ad.Tensor, final: bool) -> ad.Tensor:
    out = ad.add(aggregated, bias)
    return out if final else ad.leaky_relu(out, 0.0)


def gin_messages(g: Graph, h: ad.Tensor) -> ad.Tensor:
    _check_graph_arch(g, "GIN")
    return ad.gather_rows(h, g.edge_src)


def gin_update(g: Graph, h: ad.Tensor, aggregated: ad.Tensor, layer: dict) -> ad.Tensor:
    if aggregated.shape != h.shape:
        raise ValueError(f"aggregate shape {aggregated.shape} vs h {h.shape}")
    ones = ad.constant(np.ones((h.shape[0], 1)))
    eps_col = ad.matmul(ones, layer["eps"])
    pre = ad.add(ad.add(h, ad.scale_rows(h, eps_col)), aggregated)
    hidden = ad.leaky_relu(ad.affine(pre, layer["w1"], layer["b1"]), 0.0)
    return ad.affine(hidden, layer["w2"], layer["b2"])


@dataclass
class ForwardTrace:
    """Per-layer gate columns, mixture weights, and injected prompt rows."""
    gates: list = field(default_factory=list)       # Tensor [E x 1] or None
    mixtures: list = field(default_factory=list)    # Tensor [E x M] or None
    prompt_rows: list = field(default_factory=list)  # Tensor [E x d] / [1 x d] / None


def forward_with_trace(g: Graph, ckpt: BackboneCheckpoint, prompt=None):
    """Run all layers; prompted runs rewrite messages just before aggregation."""
    _check_graph_arch(g, ckpt.arch)
    if g.feature_dim != ckpt.dims[0]:
        raise ValueError(
            f"dataset feature dim {g.feature_dim} does not match checkpoint "
            f"input dim {ckpt.dims[0]}")
    if prompt is not None:
        prompt.check_compatible(ckpt)

    trace = ForwardTrace()
    h = ad.constant(g.features)
    n = g.num_nodes
    for l in range(ckpt.num_layers):
        final = l == ckpt.num_layers - 1
        if ckpt.arch == "GCN":
            m = gcn_messages(g, h, ckpt.params[f"layer{l}.weight"])
        else:
            m = gin_messages(g, h)
        if prompt is None:
            trace.gates.append(None)
            trace.mixtures.append(None)
            trace.prompt_rows.append(None)
        else:
            m, gate_out = prompt.apply_layer(l, g, h, m)
            trace.gates.append(gate_out.gate)
            trace.mixtures.append(gate_out.mixture)
            trace.prompt_rows.append(gate_out.prompt_rows)
        agg = ad.segment_reduce(m, g.edge_dst, n, "sum")
        if ckpt.arch == "GCN":
            h = gcn_update(agg, ckpt.params[f"layer{l}.bias"], final)
        else:
            layer = {k.split(".", 1)[1]: v for k, v in ckpt.params.items()
                     if k.startswith(f"layer{l}.")}
            h = gin_update(g, h, agg, layer)
    return h, trace


def forward(g: Graph, ckpt: BackboneCheckpoint, prompt=None) -> ad.Tensor:
    h, _ = forward_with_trace(g, ckpt, prompt)
    return h


def graph_readout(h: ad.Tensor, mode: str) -> ad.Tensor:
    if h.shape[0] < 1:
        raise ValueError("readout of an empty graph")
    if mode == "mean":
        row = np.full((1, h.shape[0]), 1.0 / h.shape[0])
    elif mode == "sum":
        row = np.ones((1, h.shape[0]))
    else:
        raise ValueError(f"unknown readout mode {mode!r}")
    return ad.matmul(ad.constant(row), h)


def _row_dots(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    ones = ad.constant(np.ones((a.shape[1], 1)))
    return ad.matmul(ad.mul(a, b), ones)


def sample_negative_pairs(g: Graph, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform ordered non-edges (no self-pairs), rejection-sampled."""
    existing = set(zip(g.edge_src.tolist(), g.edge_dst.tolist()))
    out = []
    n = g.num_nodes
    while len(out) < count:
        batch = rng.integers(0, n, size=(max(count, 16), 2))
        for s, d in batch:
            if s != d and (s, d) not in existing:
                out.append((s, d))
                if len(out) == count:
                    break
    return np.asarray(out, dtype=np.int64)


def pretrain_edgepred(g: Graph, arch: str, dims, epochs: int, lr: float,
                      neg_ratio: float, seed: int) -> BackboneCheckpoint:
    """Link-prediction pre-training: logistic loss on sigma(h_i . h_j).

    Positives are the existing directed edges (self-loops excluded);
    negatives are resampled uniformly every epoch. Returns a frozen
    checkpoint with the per-epoch loss curve in its metadata.
    """
    from .optim import Adam

    non_loop = g.edge_src != g.edge_dst
    pos = np.stack([g.edge_src[non_loop], g.edge_dst[non_loop]], axis=1)
    if pos.shape[0] == 0:
        raise ValueError("pre-training needs at least one non-loop edge")
    num_neg = max(1, int(round(neg_ratio * pos.shape[0])))

    ckpt = init_backbone(arch, dims, seed, meta={
        "objective": "edgepred", "epochs": int(epochs),
        "neg_ratio": float(neg_ratio), "lr": float(lr)})
    ckpt.set_trainable(True)
    run_graph = prepare_graph(g, arch)
    opt = Adam(list(ckpt.params.values()), lr=lr)
    rng = np.random.default_rng(seed)

    curve = []
    for _ in range(int(epochs)):
        neg = sample_negative_pairs(g, num_neg, rng)
        with ad.Tape():
            h = forward(run_graph, ckpt)
            s_pos = _row_dots(ad.gather_rows(h, pos[:, 0]), ad.gather_rows(h, pos[:, 1]))
            s_neg = _row_dots(ad.gather_rows(h, neg[:, 0]), ad.gather_rows(h, neg[:, 1]))
            ll = ad.add(ad.sum_all(ad.log(ad.sigmoid(s_pos))),
                        ad.sum_all(ad.log(ad.sigmoid(ad.scale(s_neg, -1.0)))))
            loss = ad.scale(ll, -1.0 / (pos.shape[0] + neg.shape[0]))
            ad.backward(loss)
        curve.append(loss.item())
        opt.step()
        opt.zero_grad()

    ckpt.set_trainable(False)
    ckpt.meta["loss_curve"] = curve
    return ckpt


def save_backbone(ckpt: BackboneCheckpoint, path) -> None:
    meta = {"arch": ckpt.arch, "dims": list(ckpt.dims), "extra": ckpt.meta}
    write_checkpoint(path, BACKBONE_MAGIC, meta,
                     {name: t.data for name, t in ckpt.params.items()})


def load_backbone(path) -> BackboneCheckpoint:
    """Parameters come back frozen; callers opt in to training explicitly."""
    meta, arrays = read_checkpoint(path, BACKBONE_MAGIC)
    params = {name: ad.constant(arr) for name, arr in arrays.items()}
    return BackboneCheckpoint(meta["arch"], tuple(meta["dims"]), params,
                              dict(meta.get("extra", {})))
