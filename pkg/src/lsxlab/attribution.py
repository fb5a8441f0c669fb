"""Explanation methods: input-times-gradient and integrated gradients.

Both methods attribute the logit of the ground-truth class (pre-softmax;
stable under double backward). Each comes in two forms:

* a value form for metrics and dumps (no graph retained), and
* a node form used inside training losses, where the attribution map is a
  graph tensor whose gradient reaches the model parameters through the
  recorded backward pass.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class AttributionMap:
    """Batch of attributions, one map per sample (same shape as the input).

    `labels` is the explained class per sample (the ground-truth label).
    When `differentiable`, `chunks` holds the tracked per-chunk tensors on
    `graph`, with the model parameters bound once as `leaves`.
    """

    values: np.ndarray
    sample_ids: np.ndarray
    labels: np.ndarray
    predicted: np.ndarray
    differentiable: bool = False
    chunks: list | None = None
    chunk_labels: list | None = None
    graph: ad.Graph | None = None
    leaves: dict | None = None


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def class_logit_sum(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    """Sum over the batch of each sample's true-class logit."""
    return ad.sum(ad.mul(logits, ad.Tensor(_onehot(labels, logits.shape[1]))))


def input_x_gradient_node(model, leaves: dict, x_leaf: ad.Tensor, labels: np.ndarray,
                          graph: ad.Graph) -> tuple[ad.Tensor, ad.Tensor]:
    """Differentiable e = x * d f_y / d x on an existing graph.

    Returns (e, logits); logits can be reused for the base loss so the
    batch is only run forward once.
    """
    logits = model.logits(x_leaf, leaves)
    root = class_logit_sum(logits, labels)
    gx = ad.backward(graph, root, [x_leaf.node], build_graph=True)[x_leaf.node]
    if not np.all(np.isfinite(gx.data)):
        raise ad.NonFiniteError("input_x_gradient: non-finite gradient")
    return ad.mul(x_leaf, gx), logits


def input_x_gradient(model, x: np.ndarray, labels: np.ndarray,
                     sample_ids: np.ndarray | None = None, build_graph: bool = False,
                     chunk_size: int = 128) -> AttributionMap:
    """Attribution maps for a batch; row-wise over samples.

    With build_graph=True all chunks share one graph and one set of
    parameter leaves, so a scalar built from the chunks is differentiable
    with respect to the model parameters.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if sample_ids is None:
        sample_ids = np.arange(len(labels), dtype=np.int64)
    values = np.empty_like(x)
    predicted = np.empty(len(labels), dtype=np.int64)
    chunks, chunk_labels = [], []
    graph = ad.Graph() if build_graph else None
    leaves = model.bind(graph) if build_graph else None
    for i in range(0, len(labels), chunk_size):
        xs, ys = x[i:i + chunk_size], labels[i:i + chunk_size]
        if build_graph:
            e, logits = input_x_gradient_node(model, leaves, graph.leaf(xs), ys, graph)
            chunks.append(e)
            chunk_labels.append(ys)
        else:
            g = ad.Graph()
            lv = model.bind(g)
            x_leaf = g.leaf(xs)
            logits = model.logits(x_leaf, lv)
            gx = ad.backward(g, class_logit_sum(logits, ys), [x_leaf.node])[x_leaf.node]
            e = ad.Tensor(xs * gx.data)
        if not np.all(np.isfinite(e.data)):
            raise ad.NonFiniteError("input_x_gradient: non-finite attribution")
        values[i:i + chunk_size] = e.data
        predicted[i:i + chunk_size] = np.argmax(logits.data, axis=1)
    return AttributionMap(values, sample_ids, labels, predicted, build_graph,
                          chunks or None, chunk_labels or None, graph, leaves)


def _midpoints(steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError("integrated_gradients: steps must be >= 1")
    return (np.arange(steps) + 0.5) / steps


def integrated_gradients_node(model, leaves: dict, z: np.ndarray, labels: np.ndarray,
                              graph: ad.Graph, steps: int = 50) -> ad.Tensor:
    """Differentiable IG from a zero baseline (midpoint rule) on a graph."""
    acc = None
    for alpha in _midpoints(steps):
        u = graph.leaf(alpha * z)
        root = class_logit_sum(model.logits(u, leaves), labels)
        gu = ad.backward(graph, root, [u.node], build_graph=True)[u.node]
        acc = gu if acc is None else ad.add(acc, gu)
    return ad.mul(ad.Tensor(z), ad.scale(acc, 1.0 / steps))


def integrated_gradients(model, z: np.ndarray, labels: np.ndarray,
                         sample_ids: np.ndarray | None = None, steps: int = 50,
                         chunk_size: int = 512) -> AttributionMap:
    """IG values (z - 0) * mean_alpha grad f_y(alpha z); no graph retained."""
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if sample_ids is None:
        sample_ids = np.arange(len(labels), dtype=np.int64)
    values = np.empty_like(z)
    predicted = np.empty(len(labels), dtype=np.int64)
    for i in range(0, len(labels), chunk_size):
        zs, ys = z[i:i + chunk_size], labels[i:i + chunk_size]
        acc = np.zeros_like(zs)
        for alpha in _midpoints(steps):
            g = ad.Graph()
            lv = model.bind(g)
            u = g.leaf(alpha * zs)
            logits = model.logits(u, lv)
            acc += ad.backward(g, class_logit_sum(logits, ys), [u.node])[u.node].data
        values[i:i + chunk_size] = zs * acc / steps
        predicted[i:i + chunk_size] = np.argmax(model.predict_logits(zs), axis=1)
        if not np.all(np.isfinite(values[i:i + chunk_size])):
            raise ad.NonFiniteError("integrated_gradients: non-finite attribution")
    return AttributionMap(values, sample_ids, labels, predicted)


def max_abs_normalize(values: np.ndarray) -> np.ndarray:
    """Per-sample divide by max |value|; an all-zero map stays zero."""
    values = np.asarray(values, dtype=np.float64)
    flat = values.reshape(len(values), -1) if values.ndim > 1 else values.reshape(1, -1)
    peak = np.max(np.abs(flat), axis=1)
    peak[peak == 0.0] = 1.0
    out = flat / peak[:, None]
    return out.reshape(values.shape)


@dataclass
class BinarizedConceptMask:
    mask: np.ndarray  # {0,1}, same shape as the attribution
    threshold: float


def binarize(values: np.ndarray, delta: float) -> BinarizedConceptMask:
    """Keep entries whose max-abs-normalized attribution exceeds delta.

    Thresholding the signed normalized value drops negative attributions;
    delta=0 marks exactly the strictly positive entries.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"binarize: delta must be in [0,1], got {delta}")
    single = np.asarray(values).ndim == 2
    batch = np.asarray(values)[None] if single else np.asarray(values)
    mask = (max_abs_normalize(batch) > delta).astype(np.float64)
    return BinarizedConceptMask(mask[0] if single else mask, delta)


# ---------------------------------------------------------------------------
# dumps

def dump_attributions_csv(path, attrs: AttributionMap):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        width = attrs.values[0].size if len(attrs.values) else 0
        writer.writerow(["sample_id", "label", "predicted"] + [f"v{i}" for i in range(width)])
        for i in range(len(attrs.values)):
            writer.writerow(
                [int(attrs.sample_ids[i]), int(attrs.labels[i]), int(attrs.predicted[i])]
                + [f"{v:.10g}" for v in attrs.values[i].reshape(-1)]
            )


def write_pgm(path, values: np.ndarray):
    """Signed map to 8-bit PGM: 0 maps to mid-gray, +-max to white/black."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:  # channel mean for color maps
        values = values.mean(axis=0)
    peak = np.max(np.abs(values))
    scaled = values / peak if peak > 0 else values
    pixels = np.clip((scaled + 1.0) * 127.5, 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5 {w} {h} 255\n".encode())
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().split()
        if header[0] != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        w, h, maxv = int(header[1]), int(header[2]), int(header[3])
        return np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w)
