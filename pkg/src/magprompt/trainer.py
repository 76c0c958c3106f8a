"""Downstream heads, losses, tuning loops, few-shot protocol, and metrics.

Four tuning modes share one loop: LINEAR_PROBE trains the head on frozen
embeddings, MAG and MAG_PLUS train prompt plus head against the frozen
backbone, FINE_TUNE unfreezes a private copy of the backbone. Only
MAG_PLUS may carry the usage regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import prompt as pr
from .backbone import (BackboneCheckpoint, forward_with_trace, prepare_graph)
from .config import RunConfig
from .graph import GraphDataset, disjoint_union, sample_few_shot

VARIANT_CHOICES = ("LINEAR_PROBE", "MAG", "MAG_PLUS", "FINE_TUNE")


@dataclass
class Head:
    weight: ad.Tensor
    bias: ad.Tensor

    def apply(self, h: ad.Tensor) -> ad.Tensor:
        return ad.affine(h, self.weight, self.bias)

    def tensors(self):
        return [self.weight, self.bias]


def init_head(dim: int, num_classes: int, seed: int) -> Head:
    from .backbone import glorot
    rng = np.random.default_rng(seed)
    return Head(weight=ad.parameter(glorot(rng, dim, num_classes)),
                bias=ad.parameter(np.zeros((1, num_classes))))


def softmax_rows(x: ad.Tensor) -> ad.Tensor:
    n, k = x.shape
    flat = ad.reshape(x, (n * k, 1))
    row_of = np.repeat(np.arange(n, dtype=np.int64), k)
    return ad.reshape(ad.segment_softmax(flat, row_of, n), (n, k))


def cross_entropy(logits: ad.Tensor, labels) -> ad.Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"{labels.shape} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    probs = softmax_rows(logits)
    flat = ad.reshape(probs, (n * k, 1))
    true_idx = np.arange(n, dtype=np.int64) * k + labels
    picked = ad.gather_rows(flat, true_idx)
    return ad.scale(ad.sum_all(ad.log(picked)), -1.0 / n)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank statistic for binary labels; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 2:
        if scores.shape[1] != 2:
            raise ValueError("rank metric needs binary scores")
        scores = scores[:, 1] - scores[:, 0]
    labels = np.asarray(labels)
    pos, neg = int(np.sum(labels == 1)), int(np.sum(labels == 0))
    if pos == 0 or neg == 0:
        raise ValueError("rank metric needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.shape[0])
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    return float((ranks[labels == 1].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def evaluate(scores, labels, metric: str) -> float:
    if metric == "accuracy":
        return accuracy(np.asarray(scores), labels)
    if metric == "roc_auc":
        return roc_auc(np.asarray(scores), labels)
    raise ValueError(f"unknown metric {metric!r}")


def usage_cv(s: np.ndarray) -> float:
    s = np.asarray(s, dtype=np.float64)
    mean = s.mean()
    return float(s.std() / mean) if mean > 0 else 0.0


@dataclass
class Metrics:
    metric_name: str = "accuracy"
    records: list = field(default_factory=list)
    usage_rows: list = field(default_factory=list)  # (epoch, layer, m, s_m)
    summary: dict = field(default_factory=dict)

    def log_epoch(self, rec: dict) -> None:
        for key in ("loss_total", "loss_task"):
            if not np.isfinite(rec[key]):
                raise RuntimeError(
                    f"training diverged at epoch {rec['epoch']}: {key}={rec[key]}")
        for key in ("train_metric", "val_metric", "test_metric"):
            if not (0.0 <= rec[key] <= 1.0):
                raise RuntimeError(f"metric {key}={rec[key]} outside [0, 1]")
        self.records.append(rec)

    def log_usage(self, epoch: int, per_layer_usage) -> None:
        for layer, s in enumerate(per_layer_usage):
            for m, val in enumerate(np.asarray(s).ravel()):
                self.usage_rows.append((epoch, layer, m, float(val)))


@dataclass
class TuneResult:
    prompt: pr.PromptState | None
    head: Head
    metrics: Metrics
    backbone: BackboneCheckpoint | None = None  # set when fine-tuned


def clone_backbone(ckpt: BackboneCheckpoint, trainable: bool) -> BackboneCheckpoint:
    params = {name: ad.Tensor(t.data.copy(), requires_grad=trainable)
              for name, t in ckpt.params.items()}
    return BackboneCheckpoint(ckpt.arch, ckpt.dims, params, dict(ckpt.meta))


def _trainable_prompt_params(state: pr.PromptState):
    if not state.pin_prompts:
        return state.parameters()
    keep = []
    for lp in state.layers:
        keep.extend([lp.gate_weight, lp.gate_bias, lp.attn_src, lp.attn_dst])
    return keep


def _metric_for(data: GraphDataset) -> str:
    if data.task == "graph" and data.num_classes == 2:
        return "roc_auc"
    return "accuracy"


def _collapse_terms(trace, cfg: RunConfig):
    """Usage vectors and per-layer collapse losses from a traced forward."""
    usages, losses = [], []
    for pi in trace.mixtures:
        if pi is None:
            return [], []
        s = pr.usage_vector(pi)
        usages.append(s)
        losses.append(pr.pc_loss(s, cfg.pc_eps))
    return usages, losses


def _prompt_magnitudes(trace) -> list:
    out = []
    for rows in trace.prompt_rows:
        out.append(0.0 if rows is None else float(np.mean(np.abs(rows.data))))
    return out


def task_labels(data: GraphDataset) -> np.ndarray:
    if data.task == "node":
        return data.graphs[0].labels
    return np.array([int(g.labels) for g in data.graphs])


def tune(data: GraphDataset, ckpt: BackboneCheckpoint, variant: str,
         cfg: RunConfig, seed: int) -> TuneResult:
    """Few-shot protocol: sample the split from the seed, then tune on it."""
    split = sample_few_shot(task_labels(data), cfg.k_shots, seed)
    return tune_split(data, ckpt, variant, cfg, seed, split)


def tune_split(data: GraphDataset, ckpt: BackboneCheckpoint, variant: str,
               cfg: RunConfig, seed: int, split) -> TuneResult:
    if variant not in VARIANT_CHOICES:
        raise ValueError(f"variant must be one of {VARIANT_CHOICES}, got {variant!r}")
    if cfg.pc_weight != 0.0 and variant != "MAG_PLUS":
        raise ValueError(f"pc_weight={cfg.pc_weight} requires MAG_PLUS, got {variant}")
    if data.feature_dim != ckpt.dims[0]:
        raise ValueError(f"dataset feature dim {data.feature_dim} does not match "
                         f"checkpoint input dim {ckpt.dims[0]}")

    run_ckpt = clone_backbone(ckpt, trainable=True) if variant == "FINE_TUNE" else ckpt
    state = None
    trainable = []
    if variant in ("MAG", "MAG_PLUS"):
        state = pr.init_prompt(run_ckpt, variant, cfg.gate_dim, cfg.num_prompts,
                               cfg.gate_residual, cfg.slope, seed)
        state.pin_prompts = cfg.pin_prompts
        trainable.extend(_trainable_prompt_params(state))
    head = init_head(run_ckpt.dims[-1], data.num_classes, seed + 1)
    trainable.extend(head.tensors())
    if variant == "FINE_TUNE":
        trainable.extend(run_ckpt.params.values())

    metrics = Metrics(metric_name=_metric_for(data))
    metrics.summary["split_warnings"] = list(getattr(split, "warnings", ()))
    if data.task == "node":
        _tune_node(data, run_ckpt, state, head, trainable, cfg, seed, metrics, split)
    else:
        _tune_graph(data, run_ckpt, state, head, trainable, cfg, seed, metrics, split)
    metrics.summary.update({
        "variant": variant, "seed": int(seed), "metric": metrics.metric_name,
        "prompt_params": pr.count_prompt_params(state)[1] if state else 0,
    })
    return TuneResult(prompt=state, head=head, metrics=metrics,
                      backbone=run_ckpt if variant == "FINE_TUNE" else None)


class _Selector:
    """Early stopping on validation with snapshot/restore of the trainables."""

    def __init__(self, trainable, patience: int, mode: str):
        self.trainable = trainable
        self.patience = patience
        self.mode = mode
        self.best_val = -np.inf
        self.best_epoch = -1
        self.best_test = 0.0
        self._snap = None

    def observe(self, epoch: int, val: float, test: float) -> bool:
        """Record this epoch; returns True when training should stop."""
        if val > self.best_val:
            self.best_val = val
            self.best_epoch = epoch
            self.best_test = test
            if self.mode == "best_val":
                self._snap = [t.data.copy() for t in self.trainable]
        return epoch - self.best_epoch > self.patience

    def finish(self, last_epoch: int, last_val: float, last_test: float) -> dict:
        if self.mode == "best_val" and self._snap is not None:
            for t, saved in zip(self.trainable, self._snap):
                t.data = saved
            return {"best_epoch": self.best_epoch, "val_metric": self.best_val,
                    "test_metric": self.best_test, "epochs_run": last_epoch + 1}
        return {"best_epoch": last_epoch, "val_metric": last_val,
                "test_metric": last_test, "epochs_run": last_epoch + 1}


def _tune_node(data, ckpt, state, head, trainable, cfg, seed, metrics, split) -> None:
    from .optim import Adam

    g = prepare_graph(data.graphs[0], ckpt.arch)
    tr, va, te = split.train_indices, split.val_indices, split.test_indices
    y = g.labels

    probe_embed = None
    if state is None and ckpt.params and not any(
            t.requires_grad for t in ckpt.params.values()):
        probe_embed = ad.constant(forward_with_trace(g, ckpt)[0].data)

    opt = Adam(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    num_layers = ckpt.num_layers
    select = _Selector(trainable, cfg.patience, cfg.model_selection)

    for epoch in range(cfg.epochs):
        with ad.Tape():
            if probe_embed is not None:
                h, trace = probe_embed, None
            else:
                h, trace = forward_with_trace(g, ckpt, state)
            logits = head.apply(h)
            task = cross_entropy(ad.gather_rows(logits, tr), y[tr])
            usages, pc_terms = _collapse_terms(trace, cfg) if trace else ([], [])
            total = pr.total_loss(task, pc_terms, cfg.pc_weight, num_layers) \
                if pc_terms else task
            ad.backward(total)
        opt.step()
        opt.zero_grad()

        if probe_embed is not None:
            eval_logits = head.apply(probe_embed).data
        else:
            eval_logits = head.apply(forward_with_trace(g, ckpt, state)[0]).data
        rec = {
            "epoch": epoch,
            "loss_total": total.item(),
            "loss_task": task.item(),
            "pc_per_layer": [t.item() for t in pc_terms],
            "prompt_magnitude": _prompt_magnitudes(trace) if trace else [],
            "train_metric": evaluate(eval_logits[tr], y[tr], metrics.metric_name),
            "val_metric": evaluate(eval_logits[va], y[va], metrics.metric_name),
            "test_metric": evaluate(eval_logits[te], y[te], metrics.metric_name),
        }
        metrics.log_epoch(rec)
        if usages:
            metrics.log_usage(epoch, [s.data for s in usages])
        if select.observe(epoch, rec["val_metric"], rec["test_metric"]):
            break
    metrics.summary.update(select.finish(rec["epoch"], rec["val_metric"],
                                         rec["test_metric"]))


def _embed_graphs(graphs, ckpt, state, head, readout: str) -> np.ndarray:
    union, node_to_graph = disjoint_union(graphs)
    h, _ = forward_with_trace(union, ckpt, state)
    pooled = ad.segment_reduce(h, node_to_graph, len(graphs), readout)
    return head.apply(pooled).data


def _tune_graph(data, ckpt, state, head, trainable, cfg, seed, metrics, split) -> None:
    from .optim import Adam

    graphs = [prepare_graph(g, ckpt.arch) for g in data.graphs]
    y = np.array([int(g.labels) for g in data.graphs])
    tr, va, te = split.train_indices, split.val_indices, split.test_indices

    opt = Adam(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    num_layers = ckpt.num_layers
    select = _Selector(trainable, cfg.patience, cfg.model_selection)
    shuffler = np.random.default_rng([seed, 211])

    for epoch in range(cfg.epochs):
        order = shuffler.permutation(tr)
        task_losses, total_losses = [], []
        pc_sums = np.zeros(num_layers)
        usage_sums = None
        magnitudes = np.zeros(num_layers)
        batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            union, node_to_graph = disjoint_union([graphs[i] for i in idx])
            with ad.Tape():
                h, trace = forward_with_trace(union, ckpt, state)
                pooled = ad.segment_reduce(h, node_to_graph, len(idx), cfg.readout)
                task = cross_entropy(head.apply(pooled), y[idx])
                usages, pc_terms = _collapse_terms(trace, cfg)
                total = pr.total_loss(task, pc_terms, cfg.pc_weight, num_layers) \
                    if pc_terms else task
                ad.backward(total)
            opt.step()
            opt.zero_grad()
            task_losses.append(task.item())
            total_losses.append(total.item())
            if pc_terms:
                pc_sums += [t.item() for t in pc_terms]
                layer_usage = np.stack([s.data.ravel() for s in usages])
                usage_sums = layer_usage if usage_sums is None else usage_sums + layer_usage
            if trace:
                magnitudes += _prompt_magnitudes(trace)
            batches += 1

        logits = {name: _embed_graphs([graphs[i] for i in part], ckpt, state,
                                      head, cfg.readout)
                  for name, part in (("train", tr), ("val", va), ("test", te))}
        rec = {
            "epoch": epoch,
            "loss_total": float(np.mean(total_losses)),
            "loss_task": float(np.mean(task_losses)),
            "pc_per_layer": list(pc_sums / max(batches, 1)),
            "prompt_magnitude": list(magnitudes / max(batches, 1)),
            "train_metric": evaluate(logits["train"], y[tr], metrics.metric_name),
            "val_metric": evaluate(logits["val"], y[va], metrics.metric_name),
            "test_metric": evaluate(logits["test"], y[te], metrics.metric_name),
        }
        metrics.log_epoch(rec)
        if usage_sums is not None:
            metrics.log_usage(epoch, list(usage_sums))
        if select.observe(epoch, rec["val_metric"], rec["test_metric"]):
            break
    metrics.summary.update(select.finish(rec["epoch"], rec["val_metric"],
                                         rec["test_metric"]))


def multi_seed(data: GraphDataset, ckpt: BackboneCheckpoint, variant: str,
               cfg: RunConfig) -> tuple:
    """Run every configured seed; returns (results, aggregate summary)."""
    results = [tune(data, ckpt, variant, cfg, seed) for seed in cfg.seeds]
    tests = np.array([r.metrics.summary["test_metric"] for r in results])
    aggregate = {
        "variant": variant,
        "metric": results[0].metrics.metric_name,
        "seeds": [int(s) for s in cfg.seeds],
        "per_seed": [{"seed": int(s), "test_metric": float(t),
                      "val_metric": float(r.metrics.summary["val_metric"]),
                      "best_epoch": int(r.metrics.summary["best_epoch"])}
                     for s, t, r in zip(cfg.seeds, tests, results)],
        "mean_test_metric": float(tests.mean()),
        "std_test_metric": float(tests.std()),
    }
    return results, aggregate


ABLATION_CELLS = ((False, False), (True, False), (False, True), (True, True))


def ablation_grid(data: GraphDataset, ckpt: BackboneCheckpoint,
                  cfg: RunConfig) -> list:
    """Four-cell grid over (reweighting, edge prompts); rows of mean and std."""
    rows = []
    for rw, ep in ABLATION_CELLS:
        if not rw and not ep:
            cell = replace(cfg, variant="LINEAR_PROBE", pc_weight=0.0,
                           pin_prompts=False)
        elif rw and not ep:
            cell = replace(cfg, variant="MAG_PLUS", pin_prompts=True, pc_weight=0.0)
        elif not rw and ep:
            cell = replace(cfg, variant="MAG_PLUS", gate_residual=1.0,
                           pin_prompts=False)
        else:
            cell = replace(cfg, variant="MAG_PLUS", pin_prompts=False)
        _, agg = multi_seed(data, ckpt, cell.variant, cell)
        rows.append({"rw": rw, "ep": ep,
                     "mean": agg["mean_test_metric"],
                     "std": agg["std_test_metric"],
                     "seeds": len(cfg.seeds)})
    return rows
