"""Message-adaptive prompting: per-edge gates plus additive message prompts.

Two variants share the gating path. The basic one adds a single learned
prompt row to every message of a layer; the compositional one mixes a basis
of prompt vectors with per-edge weights and regularizes basis usage toward
balance. Gates are bounded below by the residual weight beta, so messages
are never fully suppressed; beta = 1 disables reweighting exactly.

Two distinct softmax axes live here and must not be conflated: gate
attention normalizes over each destination's incoming edges (per head),
while mixture weights normalize per edge over the basis axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import PROMPT_MAGIC, read_checkpoint, write_checkpoint
from .graph import Graph

VARIANTS = ("MAG", "MAG_PLUS")


@dataclass
class LayerPrompt:
    gate_weight: ad.Tensor           # [d_in x d_a]
    gate_bias: ad.Tensor             # [1 x d_a]
    attn_src: ad.Tensor              # [1 x d_a], pairs with the message SOURCE
    attn_dst: ad.Tensor              # [1 x d_a], pairs with the DESTINATION
    prompt: ad.Tensor | None = None      # MAG: [1 x d_msg]
    basis: ad.Tensor | None = None       # MAG_PLUS: [M x d_msg]
    mix_weight: ad.Tensor | None = None  # MAG_PLUS: [d_a x M]
    mix_bias: ad.Tensor | None = None    # MAG_PLUS: [1 x M]

    def tensors(self) -> dict:
        out = {"gate_weight": self.gate_weight, "gate_bias": self.gate_bias,
               "attn_src": self.attn_src, "attn_dst": self.attn_dst}
        if self.prompt is not None:
            out["prompt"] = self.prompt
        if self.basis is not None:
            out["basis"] = self.basis
            out["mix_weight"] = self.mix_weight
            out["mix_bias"] = self.mix_bias
        return out


@dataclass
class GateOutput:
    gate: ad.Tensor                   # a, [E x 1], entries in [beta, 1]
    alpha: ad.Tensor                  # [E x d_a], per-(destination, head) normalized
    mixture: ad.Tensor | None = None  # pi, [E x M], rows sum to 1
    prompt_rows: ad.Tensor | None = None  # [1 x d] (shared) or [E x d] (per edge)


@dataclass
class PromptState:
    variant: str
    beta: float          # residual weight, fixed hyperparameter, not a tape leaf
    slope: float
    gate_dim: int
    num_prompts: int
    arch: str
    in_dims: list        # gate input width per layer (d_0 .. d_{L-1})
    msg_dims: list       # message width per layer
    layers: list = field(default_factory=list)
    pin_prompts: bool = False  # ablation: gates only, no additive prompt at all

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def parameters(self):
        out = []
        for lp in self.layers:
            out.extend(lp.tensors().values())
        return out

    def named_parameters(self) -> dict:
        return {f"layer{l}.{name}": t
                for l, lp in enumerate(self.layers)
                for name, t in lp.tensors().items()}

    def check_compatible(self, ckpt) -> None:
        from .backbone import gate_input_dims, message_dims
        if ckpt.arch != self.arch:
            raise ValueError(f"prompt built for {self.arch}, checkpoint is {ckpt.arch}")
        if gate_input_dims(ckpt) != self.in_dims or message_dims(ckpt) != self.msg_dims:
            raise ValueError(
                f"prompt dims (in={self.in_dims}, msg={self.msg_dims}) do not match "
                f"checkpoint dims {list(ckpt.dims)}")

    def apply_layer(self, l: int, g: Graph, h_in: ad.Tensor, m: ad.Tensor):
        """Rewrite one layer's messages; returns (m_tilde, GateOutput)."""
        lp = self.layers[l]
        b = project_gate(h_in, lp)
        logits = attention_logits(b, g, lp, self.slope)
        gate_out = compute_gate(logits, g, self.beta)
        if self.pin_prompts:
            return ad.scale_rows(m, gate_out.gate), gate_out
        if self.variant == "MAG":
            gate_out.prompt_rows = lp.prompt
            return mag_transform(m, gate_out.gate, lp.prompt), gate_out
        pi = mixture_weights(b, g, lp, self.slope)
        p_edge = compose_prompt(pi, lp.basis)
        gate_out.mixture = pi
        gate_out.prompt_rows = p_edge
        return mag_plus_transform(m, gate_out.gate, p_edge), gate_out


def init_prompt(ckpt, variant: str, gate_dim: int, num_prompts: int,
                beta: float, slope: float, seed: int) -> PromptState:
    """Zero prompts and zero attention vectors: the initial model differs from
    the frozen backbone only through uniform gating a = (1-beta)/|N(i)| + beta.
    """
    from .backbone import gate_input_dims, glorot, message_dims

    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if not (0.0 <= beta <= 1.0):
        raise ValueError(f"residual weight must lie in [0, 1], got {beta}")
    if gate_dim < 1:
        raise ValueError(f"gate dim must be >= 1, got {gate_dim}")
    if num_prompts < 1:
        raise ValueError(f"prompt count must be >= 1, got {num_prompts}")

    rng = np.random.default_rng(seed)
    in_dims, msg_dims = gate_input_dims(ckpt), message_dims(ckpt)
    layers = []
    for d_in, d_msg in zip(in_dims, msg_dims):
        lp = LayerPrompt(
            gate_weight=ad.parameter(glorot(rng, d_in, gate_dim)),
            gate_bias=ad.parameter(np.zeros((1, gate_dim))),
            attn_src=ad.parameter(np.zeros((1, gate_dim))),
            attn_dst=ad.parameter(np.zeros((1, gate_dim))),
        )
        if variant == "MAG":
            lp.prompt = ad.parameter(np.zeros((1, d_msg)))
        else:
            lp.basis = ad.parameter(np.zeros((num_prompts, d_msg)))
            lp.mix_weight = ad.parameter(glorot(rng, gate_dim, num_prompts))
            lp.mix_bias = ad.parameter(np.zeros((1, num_prompts)))
        layers.append(lp)
    return PromptState(variant, float(beta), float(slope), int(gate_dim),
                       int(num_prompts), ckpt.arch, in_dims, msg_dims, layers)


def project_gate(h: ad.Tensor, lp: LayerPrompt) -> ad.Tensor:
    if h.shape[1] != lp.gate_weight.shape[0]:
        raise ValueError(f"gate projection wants {lp.gate_weight.shape[0]} input "
                         f"features, got {h.shape[1]}")
    return ad.affine(h, lp.gate_weight, lp.gate_bias)


def attention_logits(b: ad.Tensor, g: Graph, lp: LayerPrompt, slope: float) -> ad.Tensor:
    # source projection pairs with attn_src, destination with attn_dst
    b_src = ad.gather_rows(b, g.edge_src)
    b_dst = ad.gather_rows(b, g.edge_dst)
    pre = ad.add(ad.mul(b_src, lp.attn_src), ad.mul(b_dst, lp.attn_dst))
    return ad.leaky_relu(pre, slope)


def compute_gate(logits: ad.Tensor, g: Graph, beta: float) -> GateOutput:
    """Per-destination softmax across incoming edges, head average, then the
    residual mix a = (1-beta) * alpha_bar + beta, which pins a into [beta, 1]."""
    alpha = ad.segment_softmax(logits, g.edge_dst, g.num_nodes)
    abar = ad.mean_over_columns(alpha)
    gate = ad.add(ad.scale(abar, 1.0 - beta),
                  ad.constant(np.full((logits.shape[0], 1), beta)))
    return GateOutput(gate=gate, alpha=alpha)


def mag_transform(m: ad.Tensor, a: ad.Tensor, p: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.scale_rows(m, a), p)


def mixture_weights(b: ad.Tensor, g: Graph, lp: LayerPrompt, slope: float) -> ad.Tensor:
    """Per-edge softmax over the basis axis (not over neighborhoods)."""
    if lp.mix_weight is None:
        raise ValueError("mixture weights need the compositional variant")
    b_pair = ad.add(ad.gather_rows(b, g.edge_dst), ad.gather_rows(b, g.edge_src))
    z = ad.leaky_relu(ad.affine(b_pair, lp.mix_weight, lp.mix_bias), slope)
    e, m = z.shape
    flat = ad.reshape(z, (e * m, 1))
    row_of = np.repeat(np.arange(e, dtype=np.int64), m)
    return ad.reshape(ad.segment_softmax(flat, row_of, e), (e, m))


def compose_prompt(pi: ad.Tensor, basis: ad.Tensor) -> ad.Tensor:
    return ad.matmul(pi, basis)


def mag_plus_transform(m: ad.Tensor, a: ad.Tensor, p_edge: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.scale_rows(m, a), p_edge)


def usage_vector(pi: ad.Tensor) -> ad.Tensor:
    """Column sums of the mixture weights: total mass routed to each basis
    vector over the batch's edges. Differentiable, summing to the edge count."""
    ones = ad.constant(np.ones((1, pi.shape[0])))
    return ad.matmul(ones, pi)


def pc_loss(s: ad.Tensor, eps: float) -> ad.Tensor:
    """Squared coefficient of variation of usage, zero exactly at balance."""
    if eps <= 0:
        raise ValueError(f"stabilizer must be positive, got {eps}")
    m = s.shape[1]
    sbar = ad.mean_over_columns(s)                       # [1 x 1]
    sbar_row = ad.matmul(sbar, ad.constant(np.ones((1, m))))
    dev = ad.add(s, ad.scale(sbar_row, -1.0))
    num = ad.sum_all(ad.mul(dev, dev))
    denom = ad.add(ad.mul(sbar, sbar), ad.constant(np.full((1, 1), eps)))
    inv = ad.reshape(ad.reciprocal(denom), ())
    return ad.scale(ad.mul(num, inv), 1.0 / m)


def total_loss(task_loss: ad.Tensor, pc_per_layer, pc_weight: float,
               num_layers: int) -> ad.Tensor:
    if pc_weight == 0.0:
        return task_loss
    if len(pc_per_layer) != num_layers:
        raise ValueError(f"{len(pc_per_layer)} collapse terms for {num_layers} layers")
    acc = pc_per_layer[0]
    for term in pc_per_layer[1:]:
        acc = ad.add(acc, term)
    return ad.add(task_loss, ad.scale(acc, pc_weight / num_layers))


def count_prompt_params(prompt: PromptState):
    """Closed-form per-layer counts (gate projection + bias + two attention
    vectors + prompt storage, plus the mixture head for the compositional
    variant). Independent of the live tensors, so tests can cross-check."""
    per_layer = []
    d_a, m = prompt.gate_dim, prompt.num_prompts
    for d_in, d_msg in zip(prompt.in_dims, prompt.msg_dims):
        count = d_in * d_a + d_a + 2 * d_a
        if prompt.variant == "MAG":
            count += d_msg
        else:
            count += m * d_msg + d_a * m + m
        per_layer.append(count)
    return per_layer, sum(per_layer)


def save_prompt(prompt: PromptState, path) -> None:
    meta = {"variant": prompt.variant, "beta": prompt.beta, "slope": prompt.slope,
            "gate_dim": prompt.gate_dim, "num_prompts": prompt.num_prompts,
            "arch": prompt.arch, "in_dims": prompt.in_dims,
            "msg_dims": prompt.msg_dims, "pin_prompts": prompt.pin_prompts}
    write_checkpoint(path, PROMPT_MAGIC, meta,
                     {name: t.data for name, t in prompt.named_parameters().items()})


def load_prompt(path) -> PromptState:
    meta, arrays = read_checkpoint(path, PROMPT_MAGIC)
    state = PromptState(meta["variant"], meta["beta"], meta["slope"],
                        meta["gate_dim"], meta["num_prompts"], meta["arch"],
                        list(meta["in_dims"]), list(meta["msg_dims"]),
                        pin_prompts=bool(meta.get("pin_prompts", False)))
    num_layers = len(state.in_dims)
    for l in range(num_layers):
        fields = {name.split(".", 1)[1]: ad.parameter(arr)
                  for name, arr in arrays.items() if name.startswith(f"layer{l}.")}
        state.layers.append(LayerPrompt(**fields))
    return state
