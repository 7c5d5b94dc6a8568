"""Routing-behavior indicators: sharpness, permutation difference, fairness,
and gate trends, with CSV emission for plot-ready series.

All indicators are pure functions of (model parameters, batch), so they can
be recomputed from any checkpoint.  The three scalar indicators are
implementation-defined; the defining formulas live in the docstrings below.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RoutingTrace",
    "extract_routing_trace",
    "attention_sharpness",
    "permutation_difference",
    "attention_fairness",
    "gate_summary",
    "write_indicator_csv",
]


@dataclass
class RoutingTrace:
    """Detached per-layer routing decisions.

    Each layer dict holds ``attention`` with the source distribution on the
    LAST axis (block-routing layers: [batch, outputs, sources]; transformer:
    [batch, heads, queries, keys]) and, for block-routing layers, ``gates``
    [batch, outputs] plus the layer's ``routed`` mix output.
    """

    kind: str
    layers: list


def _forward(model, inputs):
    """Run any supported wrapper in eval mode; returns (net, forward output)."""
    net = getattr(model, "model", model)        # unwrap a harness bundle
    fwd = getattr(net, "forward", None)
    if fwd is None:
        raise ValueError(f"cannot inspect {type(model).__name__}")
    if not hasattr(net, "net"):
        # bare network, not an adapter: forward wants a graph tensor
        from .tensor import Tensor
        inputs = Tensor(np.asarray(inputs, dtype=np.float64))
    return net, fwd(inputs, rng=None, eval_mode=True)


def extract_routing_trace(model, inputs: np.ndarray) -> RoutingTrace:
    """Per-layer attention weights and gates for one batch, detached.

    Accepts a harness model bundle, an adapter, or a bare network; plain
    feedforward models have no routing to inspect and are rejected.
    """
    kind = getattr(getattr(model, "model", model), "kind", None)
    if kind is None:
        kind = type(getattr(model, "model", model)).__name__.lower()
    if "smfr" in kind:
        return _smfr_trace(model, inputs)
    if "transformer" in kind:
        net, _ = _forward(model, inputs)
        tnet = getattr(net, "net", net)
        layers = [{"attention": w} for w in tnet.last_attention["encoder"]]
        layers += [{"attention": w} for w in tnet.last_attention["decoder_cross"]]
        return RoutingTrace("transformer", layers)
    raise ValueError(f"model kind {kind!r} has no routing decisions to inspect")


def _smfr_trace(model, inputs: np.ndarray) -> RoutingTrace:
    adapter = getattr(model, "model", model)
    net = getattr(adapter, "net", adapter)
    from .tensor import Tensor

    h = Tensor(np.asarray(inputs, dtype=np.float64))
    layers = []
    for layer in net.layers:
        out, tr = layer.forward(h, rng=None, eval_mode=True)
        w = tr.mux_weights.data
        routed = np.einsum("bmn,bmd->bnd", w, h.data)
        layers.append({
            "attention": np.transpose(w, (0, 2, 1)).copy(),
            "gates": tr.gate_values.data.copy(),
            "routed": routed,
        })
        h = Tensor(out.data.copy())
    return RoutingTrace("smfr", layers)


def attention_sharpness(trace: RoutingTrace) -> float:
    """Mean over every routing decision of its maximum source weight.

    1.0 exactly when every decision is one-hot; 1/sources when uniform.
    """
    maxima = [layer["attention"].max(axis=-1).reshape(-1)
              for layer in trace.layers]
    return float(np.concatenate(maxima).mean())


def attention_fairness(trace: RoutingTrace) -> float:
    """Spread of total first-layer attention mass across source blocks.

    fairness = 1 - (max - min) / total where mass is summed per source over
    all first-layer decisions (batch-averaged).  1.0 iff perfectly balanced;
    0.0 when a single source receives everything.
    """
    att = trace.layers[0]["attention"]
    flat = att.reshape(-1, att.shape[-1])
    mass = flat.sum(axis=0)
    total = mass.sum()
    if total == 0:
        return 0.0
    return float(1.0 - (mass.max() - mass.min()) / total)


def permutation_difference(model, batches, layer: int = 0) -> float:
    """Mean pairwise L2 distance between per-permutation mean activations
    taken after the first attention layer.

    Each batch must hold one permutation group.  A model whose first layer
    exactly undoes the band permutation produces group-independent
    activations and scores 0 on identical underlying images.
    """
    if len(batches) == 0:
        raise ValueError("need at least one permutation group")
    means = []
    for batch in batches:
        inputs = batch.inputs if hasattr(batch, "inputs") else np.asarray(batch)
        data = _post_attention_data(model, inputs, layer)
        means.append(data.mean(axis=0).reshape(-1))
    if len(means) == 1:
        return 0.0
    dists = []
    for i in range(len(means)):
        for j in range(i + 1, len(means)):
            dists.append(np.linalg.norm(means[i] - means[j]))
    return float(np.mean(dists))


def _post_attention_data(model, inputs: np.ndarray, layer: int) -> np.ndarray:
    kind = getattr(getattr(model, "model", model), "kind", "")
    if "transformer" in kind:
        net, _ = _forward(model, inputs)
        tnet = getattr(net, "net", net)
        return tnet.last_encoder_layer0
    trace = _smfr_trace(model, inputs)
    return trace.layers[layer]["routed"]


def gate_summary(trace: RoutingTrace, flat: bool = False):
    """Per-layer, per-output-block gate statistics over the batch."""
    if flat:
        out = {}
        for i, layer in enumerate(trace.layers):
            if "gates" in layer:
                out[f"gate_mean_layer{i}"] = float(layer["gates"].mean())
        return out
    summary = []
    for layer in trace.layers:
        if "gates" not in layer:
            summary.append(None)
            continue
        g = layer["gates"]
        summary.append([{"mean": float(g[:, n].mean()),
                         "min": float(g[:, n].min()),
                         "max": float(g[:, n].max())}
                        for n in range(g.shape[1])])
    return summary


def write_indicator_csv(path: str, rows: list[dict]) -> None:
    """Write indicator series rows (dicts sharing a 'step' key) as CSV."""
    if not rows:
        raise ValueError("no indicator rows to write")
    columns = ["step"] + sorted({k for row in rows for k in row} - {"step"})
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".part"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    os.replace(tmp, path)
