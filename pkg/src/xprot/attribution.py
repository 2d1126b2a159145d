"""Integrated gradients at the embedding layer and at each block's attention heads.

The integration path is always the straight line between baseline and sample
embeddings. For head-level attribution that line is pushed through the
network, so the activations seen by block ``l`` (its input ``s`` and the
concatenated head output ``c``) trace a curved path. Attributions use the
trapezoid rule on gradients multiplied by the actual activation increments
along that path, so the increments telescope to ``c(x) - c(x')`` exactly and
the completeness gap comes only from gradient quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .model import PAD, Encoder

CHUNK = 64


class AttributionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PathSpec:
    baseline: str = "zero"
    steps: int = 64

    def __post_init__(self):
        if self.baseline not in ("zero", "pad"):
            raise ValueError(f"baseline must be 'zero' or 'pad', got {self.baseline!r}")
        if int(self.steps) < 1:
            raise ValueError("steps must be >= 1")


def token_flags(n_tokens: int) -> list[str]:
    return ["cls"] + ["residue"] * (n_tokens - 2) + ["sep"]


@dataclass
class AttributionMap:
    kind: str                       # "embedding" | "head"
    values: np.ndarray              # seq x d_model, or seq x n_heads
    protein_id: str
    class_index: int
    steps: int
    baseline: str
    completeness_gap: float
    logit_sample: float
    logit_baseline: float
    layer: int | None = None
    skip: np.ndarray | None = None  # seq x d_model skip-branch attribution (head kind)
    token_flags: list = field(default_factory=list)

    @property
    def relevance(self) -> np.ndarray:
        """Per-token relevance: signed channel sum (embedding) or the map itself (head)."""
        if self.kind == "embedding":
            return self.values.sum(axis=1)
        return self.values

    def residue_rows(self) -> np.ndarray:
        flags = np.array(self.token_flags)
        return self.relevance[flags == "residue"]

    def to_json(self) -> dict:
        out = {
            "protein_id": self.protein_id,
            "class": self.class_index,
            "kind": self.kind,
            "steps": self.steps,
            "baseline": self.baseline,
            "completeness_gap": self.completeness_gap,
            "logit_sample": self.logit_sample,
            "logit_baseline": self.logit_baseline,
            "values": self.values.tolist(),
            "token_flags": list(self.token_flags),
        }
        if self.layer is not None:
            out["layer"] = self.layer
        if self.skip is not None:
            out["skip_values"] = self.skip.tolist()
        return out

    @classmethod
    def from_json(cls, d: dict) -> "AttributionMap":
        return cls(
            kind=d["kind"], values=np.asarray(d["values"], dtype=np.float64),
            protein_id=d["protein_id"], class_index=int(d["class"]), steps=int(d["steps"]),
            baseline=d["baseline"], completeness_gap=float(d["completeness_gap"]),
            logit_sample=float(d["logit_sample"]), logit_baseline=float(d["logit_baseline"]),
            layer=d.get("layer"),
            skip=np.asarray(d["skip_values"], dtype=np.float64) if "skip_values" in d else None,
            token_flags=list(d["token_flags"]),
        )


@dataclass
class SummedMap:
    values: np.ndarray              # n_layers x n_heads
    protein_id: str
    class_index: int

    def to_json(self) -> dict:
        return {"protein_id": self.protein_id, "class": self.class_index,
                "n_layers": int(self.values.shape[0]), "n_heads": int(self.values.shape[1]),
                "values": self.values.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "SummedMap":
        return cls(np.asarray(d["values"], dtype=np.float64), d["protein_id"], int(d["class"]))


def completeness_gap(total: float, f_sample: float, f_baseline: float) -> float:
    """Relative violation of completeness; absolute when the logit difference is below 1e-9."""
    delta = f_sample - f_baseline
    err = abs(total - delta)
    return err / abs(delta) if abs(delta) > 1e-9 else err


def embedding_path(sample, baseline, steps: int) -> np.ndarray:
    """``steps + 1`` points baseline + (k/steps)(sample - baseline); both endpoints exact."""
    x = np.asarray(sample, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if x.shape != b.shape:
        raise ValueError(f"sample shape {x.shape} differs from baseline shape {b.shape}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    alphas = np.arange(steps + 1, dtype=np.float64) / steps
    pts = b + alphas.reshape((-1,) + (1,) * x.ndim) * (x - b)
    pts[-1] = x
    return pts


def trapezoid_attribution(grads, points) -> np.ndarray:
    """Sum over segments of mean endpoint gradient times the actual point increment."""
    g = np.asarray(grads)
    p = np.asarray(points)
    return (0.5 * (g[:-1] + g[1:]) * (p[1:] - p[:-1])).sum(axis=0)


def integrated_gradients(grad_fn, sample, baseline, steps: int, chunk: int = CHUNK):
    """Straight-line IG of a scalar function.

    ``grad_fn`` maps a batch of points to ``(values, gradients)``. Returns
    ``(attribution, f(sample), f(baseline))``. Segments are accumulated in
    path order so chunking never changes the result.
    """
    path = embedding_path(sample, baseline, steps)
    total = np.zeros_like(path[0])
    prev_point = prev_grad = None
    f_base = f_sample = None
    for start in range(0, len(path), chunk):
        pts = path[start:start + chunk]
        vals, grads = grad_fn(pts)
        bad = ~np.isfinite(grads.reshape(len(pts), -1)).all(axis=1)
        if bad.any():
            raise AttributionError(f"non-finite gradient at path index {start + int(np.argmax(bad))}")
        if prev_point is not None:
            pts = np.concatenate([prev_point[None], pts])
            grads = np.concatenate([prev_grad[None], grads])
        total += trapezoid_attribution(grads, pts)
        prev_point, prev_grad = pts[-1], grads[-1]
        if start == 0:
            f_base = float(vals[0])
        f_sample = float(vals[-1])
    return total, f_sample, f_base


def baseline_embedding(model: Encoder, tokens, kind: str) -> np.ndarray:
    if kind == "zero":
        return np.zeros((len(tokens), model.config.d_model))
    if kind == "pad":
        with torch.no_grad():
            return model.embed([PAD] * len(tokens)).numpy().copy()
    raise ValueError(f"unknown baseline {kind!r}")


def sample_embedding(model: Encoder, tokens) -> np.ndarray:
    with torch.no_grad():
        return model.embed(list(tokens)).numpy().copy()


def ig_embedding(model: Encoder, tokens, class_index: int, spec: PathSpec = PathSpec(),
                 protein_id: str = "") -> AttributionMap:
    tokens = list(tokens)
    x = sample_embedding(model, tokens)
    base = baseline_embedding(model, tokens, spec.baseline)
    attr, f_x, f_b = integrated_gradients(
        lambda pts: model.embedding_gradient(pts, class_index), x, base, spec.steps)
    return AttributionMap(
        kind="embedding", values=attr, protein_id=protein_id, class_index=class_index,
        steps=spec.steps, baseline=spec.baseline,
        completeness_gap=completeness_gap(float(attr.sum()), f_x, f_b),
        logit_sample=f_x, logit_baseline=f_b, token_flags=token_flags(len(tokens)))


def reduce_heads(channel_attr, n_heads: int) -> np.ndarray:
    """seq x d_model -> seq x n_heads by summing each contiguous block of d_model/n_heads channels."""
    a = np.asarray(channel_attr, dtype=np.float64)
    seq, d = a.shape
    if d % n_heads:
        raise ValueError(f"{d} channels do not split into {n_heads} heads")
    return a.reshape(seq, n_heads, d // n_heads).sum(axis=2)


def head_cut_attributions(model: Encoder, tokens, class_index: int, layers,
                          spec: PathSpec = PathSpec(), chunk: int = CHUNK):
    """Raw head-cut IG for several layers sharing one path evaluation.

    Returns ``{layer: (c_attr, s_attr, f_sample, f_baseline)}`` with ``c_attr``
    and ``s_attr`` of shape seq x d_model.
    """
    tokens = list(tokens)
    n_layers = model.config.n_layers
    layers = sorted(set(layers))
    for layer in layers:
        if not 0 <= layer < n_layers:
            raise IndexError(f"layer {layer} out of range [0, {n_layers})")
    x = sample_embedding(model, tokens)
    base = baseline_embedding(model, tokens, spec.baseline)
    path = embedding_path(x, base, spec.steps)
    seq, d = x.shape
    acc = {l: [np.zeros((seq, d)), np.zeros((seq, d))] for l in layers}
    prev: dict[int, tuple] = {}
    f_vals: dict[int, list[float]] = {l: [] for l in layers}
    for start in range(0, len(path), chunk):
        pts = torch.as_tensor(path[start:start + chunk])
        with torch.no_grad():
            states = {}
            h = model.embedding_input(pts)
            for i in range(max(layers) + 1):
                c = model.head_outputs(i, h)
                if i in acc:
                    states[i] = (h.numpy().copy(), c.numpy().copy())
                h = model.block_rest(i, h, c)
        for l in layers:
            s_np, c_np = states[l]
            vals, g_c, g_s = model.head_cut_gradient(l, s_np, c_np, class_index)
            bad = ~(np.isfinite(g_c.reshape(len(s_np), -1)).all(axis=1)
                    & np.isfinite(g_s.reshape(len(s_np), -1)).all(axis=1))
            if bad.any():
                raise AttributionError(
                    f"non-finite gradient at layer {l}, path index {start + int(np.argmax(bad))}")
            if l in prev:
                ps, pc, pgs, pgc = prev[l]
                s_np = np.concatenate([ps[None], s_np])
                c_np = np.concatenate([pc[None], c_np])
                g_s = np.concatenate([pgs[None], g_s])
                g_c = np.concatenate([pgc[None], g_c])
            acc[l][0] += trapezoid_attribution(g_c, c_np)
            acc[l][1] += trapezoid_attribution(g_s, s_np)
            prev[l] = (s_np[-1], c_np[-1], g_s[-1], g_c[-1])
            f_vals[l].extend(float(v) for v in vals)
    return {l: (acc[l][0], acc[l][1], f_vals[l][-1], f_vals[l][0]) for l in layers}


def _head_map(model, tokens, class_index, layer, spec, protein_id, raw) -> AttributionMap:
    c_attr, s_attr, f_x, f_b = raw
    total = float(c_attr.sum() + s_attr.sum())
    return AttributionMap(
        kind="head", values=reduce_heads(c_attr, model.config.n_heads), protein_id=protein_id,
        class_index=class_index, steps=spec.steps, baseline=spec.baseline,
        completeness_gap=completeness_gap(total, f_x, f_b), logit_sample=f_x,
        logit_baseline=f_b, layer=layer, skip=s_attr, token_flags=token_flags(len(tokens)))


def ig_head_level(model: Encoder, tokens, class_index: int, layer: int,
                  spec: PathSpec = PathSpec(), protein_id: str = "") -> AttributionMap:
    """Head map (seq x n_heads) plus skip map (seq x d_model) for one block."""
    raw = head_cut_attributions(model, tokens, class_index, [layer], spec)[layer]
    return _head_map(model, tokens, class_index, layer, spec, protein_id, raw)


def ig_all_layers(model: Encoder, tokens, class_index: int, spec: PathSpec = PathSpec(),
                  protein_id: str = "") -> list[AttributionMap]:
    raws = head_cut_attributions(model, tokens, class_index, range(model.config.n_layers), spec)
    return [_head_map(model, tokens, class_index, l, spec, protein_id, raws[l])
            for l in range(model.config.n_layers)]


def sum_over_sequence(head_map) -> np.ndarray:
    values = head_map.values if isinstance(head_map, AttributionMap) else np.asarray(head_map)
    return values.sum(axis=0)


def assemble_summed_map(maps: list[AttributionMap], n_layers: int) -> SummedMap:
    by_layer = {m.layer: m for m in maps}
    missing = [l for l in range(n_layers) if l not in by_layer]
    if missing:
        raise AttributionError(f"missing head maps for layers {missing}")
    first = by_layer[0]
    rows = np.stack([sum_over_sequence(by_layer[l]) for l in range(n_layers)])
    return SummedMap(rows, first.protein_id, first.class_index)
