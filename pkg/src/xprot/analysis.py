"""Population statistics over attribution maps.

Two parallel tracks per (class, annotation type):

* correlation: per protein, point-biserial r between each head's residue
  relevances and the annotation mask, then a one-sided t-test per cell;
* relevance: per protein, head relevances summed over the sequence, then a
  one-sided Wilcoxon signed-rank test per cell.

Each track is BH-adjusted over the whole n_layers x n_heads grid. Cells that
cannot be tested enter the adjustment with p = 1 so the family size is always
the grid size. The overlay keeps correlation-significant cells that are also
relevance-significant.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import stats
from .attribution import (AttributionMap, SummedMap, assemble_summed_map, ig_all_layers,
                          ig_embedding)
from .model import tokenize
from .tensor_core import Rng

log = logging.getLogger(__name__)

MIN_N = 3


class AnalysisError(ValueError):
    pass


@dataclass
class CorrelationMatrix:
    protein_id: str
    annotation_type: str
    values: np.ndarray          # n_layers x n_heads, NaN where undefined
    valid: np.ndarray           # bool

    @property
    def shape(self):
        return self.values.shape


@dataclass
class SignificanceMatrix:
    raw_p: np.ndarray
    adjusted_p: np.ndarray
    mask: np.ndarray
    display: np.ndarray
    test: str                   # "t" | "wilcoxon"
    class_id: str
    annotation_type: str | None
    n_proteins: int
    n_per_cell: np.ndarray
    tested: np.ndarray
    alpha: float
    family_size: int
    statistic: np.ndarray = field(default=None)
    untested_reason: list = field(default_factory=list)   # per cell: None or why it was skipped

    def to_json(self) -> dict:
        return {
            "test": self.test, "class": self.class_id, "annotation_type": self.annotation_type,
            "alpha": self.alpha, "n_proteins": self.n_proteins, "family_size": self.family_size,
            "raw_p": _nan_list(self.raw_p), "adjusted_p": _nan_list(self.adjusted_p),
            "statistic": _nan_list(self.statistic),
            "significant": self.mask.tolist(), "display": _nan_list(self.display),
            "n_per_cell": self.n_per_cell.tolist(), "tested": self.tested.tolist(),
            "untested_reason": self.untested_reason,
        }


def _nan_list(a):
    if a is None:
        return None
    arr = np.asarray(a, dtype=np.float64)
    return [[None if not math.isfinite(v) else float(v) for v in row] for row in arr]


def matrix_csv(matrix) -> str:
    """Rows = layers, columns = heads; NaN cells are left blank."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    arr = np.asarray(matrix, dtype=np.float64)
    w.writerow(["layer"] + [f"head{h}" for h in range(arr.shape[1])])
    for l, row in enumerate(arr):
        w.writerow([l] + ["" if not math.isfinite(v) else repr(float(v)) for v in row])
    return buf.getvalue()


def _residue_window(n_residues: int, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.int8)
    if len(mask) < n_residues:
        raise AnalysisError(f"annotation mask of length {len(mask)} shorter than "
                            f"{n_residues} attributed residues")
    return mask[:n_residues]


def correlate_protein(head_maps: list[AttributionMap], mask, annotation_type: str,
                      protein_id: str = "") -> CorrelationMatrix:
    """Point-biserial r per (layer, head) over residue tokens; masks are cropped to the maps."""
    maps = sorted(head_maps, key=lambda m: m.layer)
    rows = [m.residue_rows() for m in maps]
    n_res = rows[0].shape[0]
    window = _residue_window(n_res, mask)
    n_layers, n_heads = len(rows), rows[0].shape[1]
    values = np.full((n_layers, n_heads), np.nan)
    for l, rel in enumerate(rows):
        for h in range(n_heads):
            try:
                values[l, h] = stats.point_biserial(rel[:, h], window)
            except stats.UndefinedCorrelation:
                pass
    return CorrelationMatrix(protein_id or maps[0].protein_id, annotation_type,
                             values, np.isfinite(values))


def _significance(cells, shape, test_fn, min_n, alpha, test, class_id, ann_type, n_proteins):
    raw = np.full(shape, np.nan)
    statistic = np.full(shape, np.nan)
    n_per_cell = np.zeros(shape, dtype=int)
    tested = np.zeros(shape, dtype=bool)
    reasons = [[None] * shape[1] for _ in range(shape[0])]
    for (l, h), values in cells.items():
        n_per_cell[l, h] = len(values)
        if len(values) < min_n:
            reasons[l][h] = f"{len(values)} defined values, fewer than {min_n}"
            continue
        try:
            res = test_fn(values)
        except ValueError as exc:
            log.debug("cell (%d, %d) untested: %s", l, h, exc)
            reasons[l][h] = str(exc)
            continue
        raw[l, h] = res.p_value
        statistic[l, h] = res.statistic
        tested[l, h] = True
    if not tested.any():
        raise AnalysisError("no testable cells: " + "; ".join(sorted({r for row in reasons for r in row if r})))
    family = np.where(tested, raw, 1.0).ravel()
    assert family.size == shape[0] * shape[1]
    adjusted = stats.bh_adjust(family).reshape(shape)
    adjusted = np.where(tested, adjusted, np.nan)
    display, mask = stats.neglog10_threshold(np.where(tested, adjusted, 1.0), alpha)
    return SignificanceMatrix(raw, adjusted, mask, display, test, class_id, ann_type,
                              n_proteins, n_per_cell, tested, alpha, int(family.size), statistic, reasons)


def population_correlation_significance(matrices: list[CorrelationMatrix], alpha: float = 0.05,
                                        min_n: int = MIN_N, class_id: str = "") -> SignificanceMatrix:
    """One-sided t-test of r > 0 per cell over the proteins where r is defined."""
    if not matrices:
        raise AnalysisError("no correlation matrices")
    shape = matrices[0].shape
    if any(m.shape != shape for m in matrices):
        raise AnalysisError("correlation matrices differ in shape")
    cells = {}
    for l in range(shape[0]):
        for h in range(shape[1]):
            cells[l, h] = [m.values[l, h] for m in matrices if m.valid[l, h]]
    return _significance(cells, shape, lambda v: stats.t_test_one_sample(v, 0.0, "greater"),
                         min_n, alpha, "t", class_id, matrices[0].annotation_type, len(matrices))


def population_relevance_significance(summed: list[SummedMap], alpha: float = 0.05,
                                      class_id: str = "", annotation_type: str | None = None
                                      ) -> SignificanceMatrix:
    """One-sided Wilcoxon signed-rank test of summed head relevance > 0 per cell."""
    if not summed:
        raise AnalysisError("no summed maps")
    shape = summed[0].values.shape
    if any(s.values.shape != shape for s in summed):
        raise AnalysisError("summed maps differ in shape")
    stack = np.stack([s.values for s in summed])
    cells = {(l, h): list(stack[:, l, h]) for l in range(shape[0]) for h in range(shape[1])}
    return _significance(cells, shape, lambda v: stats.wilcoxon_signed_rank(v, "greater"),
                         1, alpha, "wilcoxon", class_id, annotation_type, len(summed))


def overlay(corr_sig: SignificanceMatrix, relev_sig: SignificanceMatrix) -> np.ndarray:
    """Correlation display values where the relevance test is significant, NaN elsewhere."""
    if corr_sig.display.shape != relev_sig.display.shape:
        raise AnalysisError("overlay operands differ in shape")
    return np.where(relev_sig.mask & corr_sig.mask, corr_sig.display, np.nan)


def rotate_mask(mask, rng: Rng) -> np.ndarray:
    """Circular shift by a random nonzero offset (negative-control masks)."""
    mask = np.asarray(mask)
    if len(mask) < 2:
        return mask.copy()
    return np.roll(mask, int(rng.integers(1, len(mask))))


def embedding_correlations(emb_maps: dict[str, AttributionMap], masks: dict[str, np.ndarray]):
    """Per-protein r between channel-summed residue relevance and the mask (undefined ones dropped)."""
    out = {}
    for pid in sorted(masks):
        rel = emb_maps[pid].residue_rows()
        try:
            out[pid] = stats.point_biserial(rel, _residue_window(len(rel), masks[pid]))
        except stats.UndefinedCorrelation:
            continue
    return out


def embedding_level_tests(emb_maps: dict[str, AttributionMap], masks_by_type: dict,
                          alpha: float = 0.05, min_n: int = MIN_N) -> dict:
    """t-test of per-protein correlations per annotation type, BH across the types tested."""
    results = {}
    for kind in sorted(masks_by_type):
        rs = embedding_correlations(emb_maps, masks_by_type[kind])
        entry = {"n": len(rs), "mean_r": float(np.mean(list(rs.values()))) if rs else None}
        if len(rs) >= min_n:
            try:
                res = stats.t_test_one_sample(list(rs.values()), 0.0, "greater")
                entry.update(t=res.statistic, p=res.p_value)
            except ValueError as exc:
                entry["untested"] = str(exc)
        else:
            entry["untested"] = f"fewer than {min_n} defined correlations"
        results[kind] = entry
    tested = [k for k in sorted(results) if "p" in results[k]]
    if tested:
        adj = stats.bh_adjust([results[k]["p"] for k in tested])
        for k, q in zip(tested, adj):
            results[k]["p_adjusted"] = float(q)
            results[k]["significant"] = bool(q < alpha)
    return results


def eligible_mask(record, kind: str, n_residues: int):
    """Annotation mask cropped to the attributed residues, or None without any annotated residue there."""
    if kind not in record.annotations:
        return None
    window = np.asarray(record.annotations[kind][:n_residues], dtype=np.int8)
    return window if window.any() else None


def analyze_attributions(records: dict, emb_maps: dict[str, AttributionMap],
                         head_maps: dict[str, list[AttributionMap]], class_id: str,
                         types, alpha: float = 0.05, n_layers: int | None = None,
                         rotate_seed: int | None = None) -> dict:
    """Build the report for one class from precomputed attributions.

    ``records`` maps protein id to ProteinRecord. ``rotate_seed`` replaces every
    annotation mask by a randomly rotated copy (negative control).
    """
    pids = sorted(set(head_maps) | set(emb_maps))
    if not pids:
        raise AnalysisError("no attributions")
    any_maps = next(iter(head_maps.values()), None)
    if n_layers is None and any_maps:
        n_layers = len(any_maps)
    report = {"class": class_id, "alpha": alpha, "types": {}, "skipped": {},
              "n_proteins_attributed": len(pids)}
    summed = {pid: assemble_summed_map(head_maps[pid], n_layers) for pid in sorted(head_maps)}
    relevance = None
    if summed:
        relevance = population_relevance_significance(list(summed.values()), alpha, class_id)
        report["relevance"] = relevance.to_json()
        report["n_layers"], report["n_heads"] = map(int, relevance.mask.shape)

    masks_by_type = {}
    for kind in types:
        masks = {}
        for pid in pids:
            ref = emb_maps.get(pid) or head_maps[pid][0]
            n_res = ref.token_flags.count("residue")
            m = eligible_mask(records[pid], kind, n_res)
            if m is None:
                continue
            if rotate_seed is not None:
                m = rotate_mask(m, Rng(rotate_seed).child(f"{kind}/{pid}"))
            masks[pid] = m
        if not masks:
            report["skipped"][kind] = "no qualifying proteins"
            log.warning("annotation type %s skipped: no qualifying proteins", kind)
            continue
        masks_by_type[kind] = masks
        entry = {"n_proteins": len(masks)}
        if head_maps:
            matrices = [correlate_protein(head_maps[pid], masks[pid], kind, pid)
                        for pid in sorted(masks) if pid in head_maps]
            try:
                corr = population_correlation_significance(matrices, alpha, class_id=class_id)
            except AnalysisError as exc:
                entry["correlation_untested"] = str(exc)
            else:
                entry["correlation"] = corr.to_json()
                entry["overlay"] = _nan_list(overlay(corr, relevance))
                entry["_matrices"] = (corr, overlay(corr, relevance))
        report["types"][kind] = entry
    if emb_maps and masks_by_type:
        report["embedding_level"] = embedding_level_tests(
            {p: emb_maps[p] for p in emb_maps}, {k: {p: m for p, m in v.items() if p in emb_maps}
                                                 for k, v in masks_by_type.items()}, alpha)
    return report


def strip_private(report: dict) -> dict:
    out = dict(report)
    out["types"] = {k: {kk: vv for kk, vv in v.items() if not kk.startswith("_")}
                    for k, v in report["types"].items()}
    return out


def select_proteins(dataset, class_id: str, split: str = "test"):
    return [r for r in dataset.split(split) if class_id in r.labels]


def run_class_analysis(model, dataset, class_id: str, types, spec, alpha: float = 0.05,
                       split: str = "test", rotate_seed: int | None = None, compute=None) -> dict:
    """Attribute every ``split`` protein carrying ``class_id`` and analyse them.

    ``compute(model, record, class_index, spec)`` returns ``(emb_map, head_maps)``
    and defaults to :func:`attribute_protein`.
    """
    classes = dataset.classes
    if class_id not in classes:
        raise AnalysisError(f"unknown class {class_id!r}")
    class_index = classes.index(class_id)
    chosen = select_proteins(dataset, class_id, split)
    compute = compute or attribute_protein
    emb_maps, head_maps = {}, {}
    for rec in sorted(chosen, key=lambda r: r.id):
        emb, heads = compute(model, rec, class_index, spec)
        emb_maps[rec.id], head_maps[rec.id] = emb, heads
    if not chosen:
        return {"class": class_id, "alpha": alpha, "types": {},
                "skipped": {k: "no qualifying proteins" for k in types},
                "n_proteins_attributed": 0}
    return analyze_attributions(dataset.by_id(), emb_maps, head_maps, class_id, types, alpha,
                                model.config.n_layers, rotate_seed)


def attribute_protein(model, record, class_index: int, spec):
    tokens = tokenize(record.sequence)
    return (ig_embedding(model, tokens, class_index, spec, record.id),
            ig_all_layers(model, tokens, class_index, spec, record.id))
