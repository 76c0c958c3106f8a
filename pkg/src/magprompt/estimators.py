"""Estimator facade: prompt tuning behind fit/predict, embeddings behind
fit/transform.

The node classifier is transductive: fit takes one graph plus a label
vector where -1 marks unlabeled nodes, and predict scores any node of that
graph. The graph classifier takes a sequence of graphs. Both pre-train
their own backbone with link prediction unless one is supplied.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .backbone import (BackboneCheckpoint, forward_with_trace, prepare_graph,
                       pretrain_edgepred)
from .config import RunConfig
from .graph import Graph, GraphDataset, FewShotSplit, as_node_dataset, disjoint_union
from .trainer import tune_split


def _check_graph(x) -> Graph:
    if not isinstance(x, Graph):
        raise TypeError(f"expected a Graph, got {type(x).__name__}")
    if x.num_nodes < 1:
        raise ValueError("graph has no nodes")
    return x


def _check_graph_list(xs) -> list:
    if isinstance(xs, Graph):
        raise TypeError("expected a sequence of Graphs, got a single Graph")
    graphs = [_check_graph(g) for g in xs]
    if not graphs:
        raise ValueError("empty graph sequence")
    dims = {g.feature_dim for g in graphs}
    if len(dims) > 1:
        raise ValueError(f"graphs disagree on feature dim: {sorted(dims)}")
    return graphs


def _encode_labels(y, expect: int) -> tuple:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != expect:
        raise ValueError(f"y must be a vector of length {expect}, got shape {y.shape}")
    labeled = np.flatnonzero(y != -1)
    if labeled.size == 0:
        raise ValueError("no labeled examples (every label is -1)")
    classes = np.unique(y[labeled])
    index = {c: i for i, c in enumerate(classes)}
    encoded = np.full(expect, -1, dtype=np.int64)
    encoded[labeled] = [index[c] for c in y[labeled]]
    return encoded, labeled, classes


class _PromptedModel:
    """Shared fit/score plumbing for both estimators."""

    def _config(self) -> RunConfig:
        cfg = RunConfig(
            arch=self.arch, num_layers=self.num_layers, hidden=self.hidden,
            variant=self.variant, gate_residual=self.gate_residual,
            gate_dim=self.gate_dim, num_prompts=self.num_prompts,
            pc_weight=self.pc_weight, slope=self.slope, lr=self.lr,
            epochs=self.epochs, batch_size=self.batch_size,
            weight_decay=self.weight_decay, readout=self.readout,
            pretrain_epochs=self.pretrain_epochs, neg_ratio=self.neg_ratio,
            seeds=[self.random_state], model_selection="last",
            patience=self.epochs)
        cfg.validate()
        return cfg

    def _backbone(self, cfg: RunConfig, raw: Graph, feature_dim: int) -> BackboneCheckpoint:
        if self.backbone is not None:
            if self.backbone.dims[0] != feature_dim:
                raise ValueError(
                    f"supplied backbone expects {self.backbone.dims[0]} features, "
                    f"data has {feature_dim}")
            return self.backbone
        return pretrain_edgepred(raw, cfg.arch, cfg.dims_for(feature_dim),
                                 cfg.pretrain_epochs, cfg.lr, cfg.neg_ratio,
                                 self.random_state)

    def _fit_on(self, data: GraphDataset, train_idx: np.ndarray) -> None:
        cfg = self._config()
        if data.task == "node":
            raw = data.graphs[0]
        else:
            raw, _ = disjoint_union(data.graphs)
        ckpt = self._backbone(cfg, raw, data.feature_dim)
        split = FewShotSplit(train_indices=train_idx, val_indices=train_idx,
                             test_indices=train_idx, shots_per_class=0,
                             seed=self.random_state)
        result = tune_split(data, ckpt, self.variant, cfg, self.random_state, split)
        self.checkpoint_ = ckpt
        self.prompt_ = result.prompt
        self.head_ = result.head
        self.metrics_ = result.metrics
        if result.backbone is not None:
            self.checkpoint_ = result.backbone


class PromptTunedNodeClassifier(_PromptedModel, ClassifierMixin, BaseEstimator):
    """Transductive node classification with a frozen pre-trained encoder."""

    def __init__(self, arch: str = "GCN", num_layers: int = 2, hidden: int = 32,
                 variant: str = "MAG_PLUS", gate_residual: float = 0.5,
                 gate_dim: int = 16, num_prompts: int = 10,
                 pc_weight: float = 0.0, slope: float = 0.2, lr: float = 1e-3,
                 epochs: int = 100, batch_size: int = 32,
                 weight_decay: float = 0.0, readout: str = "mean",
                 pretrain_epochs: int = 50, neg_ratio: float = 1.0,
                 random_state: int = 0, backbone=None):
        self.arch = arch
        self.num_layers = num_layers
        self.hidden = hidden
        self.variant = variant
        self.gate_residual = gate_residual
        self.gate_dim = gate_dim
        self.num_prompts = num_prompts
        self.pc_weight = pc_weight
        self.slope = slope
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.readout = readout
        self.pretrain_epochs = pretrain_epochs
        self.neg_ratio = neg_ratio
        self.random_state = random_state
        self.backbone = backbone

    def fit(self, X, y):
        g = _check_graph(X)
        encoded, labeled, classes = _encode_labels(y, g.num_nodes)
        self.classes_ = classes
        data = GraphDataset("node", (Graph(
            g.num_nodes, g.dst_offsets, g.edge_src, g.edge_dst, g.features,
            np.where(encoded == -1, 0, encoded), g.has_self_loops),),
            num_classes=len(classes), feature_dim=g.feature_dim)
        self._fit_on(data, labeled)
        self._graph_ = g
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        g = prepare_graph(_check_graph(X), self.checkpoint_.arch)
        h, _ = forward_with_trace(g, self.checkpoint_, self.prompt_)
        return self.head_.apply(h).data

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class PromptTunedGraphClassifier(_PromptedModel, ClassifierMixin, BaseEstimator):
    """Whole-graph classification over a sequence of attributed graphs."""

    def __init__(self, arch: str = "GIN", num_layers: int = 3, hidden: int = 32,
                 variant: str = "MAG_PLUS", gate_residual: float = 0.5,
                 gate_dim: int = 16, num_prompts: int = 20,
                 pc_weight: float = 0.0, slope: float = 0.2, lr: float = 1e-3,
                 epochs: int = 100, batch_size: int = 32,
                 weight_decay: float = 0.0, readout: str = "mean",
                 pretrain_epochs: int = 50, neg_ratio: float = 1.0,
                 random_state: int = 0, backbone=None):
        self.arch = arch
        self.num_layers = num_layers
        self.hidden = hidden
        self.variant = variant
        self.gate_residual = gate_residual
        self.gate_dim = gate_dim
        self.num_prompts = num_prompts
        self.pc_weight = pc_weight
        self.slope = slope
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.readout = readout
        self.pretrain_epochs = pretrain_epochs
        self.neg_ratio = neg_ratio
        self.random_state = random_state
        self.backbone = backbone

    def fit(self, X, y):
        graphs = _check_graph_list(X)
        encoded, labeled, classes = _encode_labels(y, len(graphs))
        if labeled.size != len(graphs):
            raise ValueError("every graph needs a label (-1 is not allowed here)")
        self.classes_ = classes
        relabeled = tuple(
            Graph(g.num_nodes, g.dst_offsets, g.edge_src, g.edge_dst,
                  g.features, np.int64(encoded[k]), g.has_self_loops)
            for k, g in enumerate(graphs))
        data = GraphDataset("graph", relabeled, len(classes), graphs[0].feature_dim)
        self._fit_on(data, labeled)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        graphs = [prepare_graph(g, self.checkpoint_.arch)
                  for g in _check_graph_list(X)]
        union, node_to_graph = disjoint_union(graphs)
        h, _ = forward_with_trace(union, self.checkpoint_, self.prompt_)
        pooled = ad.segment_reduce(h, node_to_graph, len(graphs), self.readout)
        return self.head_.apply(pooled).data

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class GraphEmbedding(TransformerMixin, BaseEstimator):
    """Frozen encoder as a feature extractor: fit pre-trains, transform embeds."""

    def __init__(self, arch: str = "GCN", num_layers: int = 2, hidden: int = 32,
                 pretrain_epochs: int = 50, lr: float = 1e-3,
                 neg_ratio: float = 1.0, readout: str = "mean",
                 random_state: int = 0, backbone=None):
        self.arch = arch
        self.num_layers = num_layers
        self.hidden = hidden
        self.pretrain_epochs = pretrain_epochs
        self.lr = lr
        self.neg_ratio = neg_ratio
        self.readout = readout
        self.random_state = random_state
        self.backbone = backbone

    def fit(self, X, y=None):
        if isinstance(X, Graph):
            raw, dim = X, X.feature_dim
        else:
            graphs = _check_graph_list(X)
            raw, _ = disjoint_union(graphs)
            dim = graphs[0].feature_dim
        if self.backbone is not None:
            self.checkpoint_ = self.backbone
        else:
            dims = [dim] + [self.hidden] * self.num_layers
            self.checkpoint_ = pretrain_edgepred(
                raw, self.arch, dims, self.pretrain_epochs, self.lr,
                self.neg_ratio, self.random_state)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        if isinstance(X, Graph):
            g = prepare_graph(X, self.checkpoint_.arch)
            return forward_with_trace(g, self.checkpoint_)[0].data
        graphs = [prepare_graph(g, self.checkpoint_.arch)
                  for g in _check_graph_list(X)]
        union, node_to_graph = disjoint_union(graphs)
        h, _ = forward_with_trace(union, self.checkpoint_)
        return ad.segment_reduce(h, node_to_graph, len(graphs), self.readout).data
