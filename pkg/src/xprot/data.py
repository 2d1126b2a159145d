"""Sequence, label and annotation ingestion plus the planted-motif generator.

On-disk dataset directory::

    sequences.fasta   >id header lines, wrapped sequence lines
    labels.tsv        protein_id<TAB>class_id, one row per pair
    annotations.tsv   protein_id<TAB>annotation_type<TAB>start<TAB>end (1-based, inclusive)
    splits.tsv        protein_id<TAB>split   (train | valid | test)

TSVs are UTF-8 with a header row; lines starting with "#" are skipped.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import AMINO_ACIDS
from .tensor_core import Rng

log = logging.getLogger(__name__)

ANNOTATION_TYPES = ("active_site", "binding_site", "transmembrane", "motif", "prosite_pattern")
SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    pass


@dataclass
class ProteinRecord:
    id: str
    sequence: str
    labels: set = field(default_factory=set)
    annotations: dict = field(default_factory=dict)
    split: str = "train"

    def annotation(self, kind: str) -> np.ndarray:
        return self.annotations.get(kind, np.zeros(len(self.sequence), dtype=np.int8))


@dataclass
class Dataset:
    records: list[ProteinRecord]

    @property
    def classes(self) -> list[str]:
        return sorted({lab for r in self.records for lab in r.labels})

    def split(self, name: str) -> list[ProteinRecord]:
        return [r for r in self.records if r.split == name]

    def by_id(self) -> dict[str, ProteinRecord]:
        return {r.id: r for r in self.records}


def parse_fasta(text: str) -> list[ProteinRecord]:
    records: list[ProteinRecord] = []
    header_line = 0
    chunks: list[str] = []

    def flush():
        if records:
            seq = "".join(chunks).upper()
            if not seq:
                raise DataError(f"line {header_line}: record {records[-1].id!r} has an empty sequence")
            records[-1].sequence = seq

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            fields = line[1:].split()
            if not fields:
                raise DataError(f"line {lineno}: header without identifier")
            records.append(ProteinRecord(fields[0], ""))
            header_line = lineno
            chunks = []
        else:
            if not records:
                raise DataError(f"line {lineno}: sequence data before the first header")
            chunks.append(line)
    flush()
    return records


def format_fasta(records, width: int = 60) -> str:
    out = []
    for r in records:
        out.append(f">{r.id}")
        out.extend(r.sequence[i:i + width] for i in range(0, len(r.sequence), width))
    return "\n".join(out) + "\n"


def _tsv_rows(text: str, columns: tuple[str, ...], what: str):
    """Yield (line number, fields) for data rows after validating the header."""
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        fields = raw.rstrip("\r\n").split("\t")
        if not header_seen:
            if tuple(f.strip() for f in fields[:len(columns)]) != columns:
                raise DataError(f"{what} line {lineno}: expected header {'/'.join(columns)}")
            header_seen = True
            continue
        if len(fields) < len(columns):
            raise DataError(f"{what} line {lineno}: expected {len(columns)} columns, got {len(fields)}")
        yield lineno, [f.strip() for f in fields]


def parse_annotations(text: str, lengths: dict[str, int]) -> dict[str, dict[str, np.ndarray]]:
    """Per-protein binary masks from 1-based inclusive ranges; overlaps are unioned."""
    masks: dict[str, dict[str, np.ndarray]] = {}
    for lineno, (pid, kind, start, end, *_) in _tsv_rows(
            text, ("protein_id", "annotation_type", "start", "end"), "annotations"):
        if pid not in lengths:
            raise DataError(f"annotations line {lineno}: unknown protein {pid!r}")
        if kind not in ANNOTATION_TYPES:
            raise DataError(f"annotations line {lineno}: unknown annotation type {kind!r}")
        try:
            lo, hi = int(start), int(end)
        except ValueError:
            raise DataError(f"annotations line {lineno}: non-integer coordinates") from None
        if lo < 1 or hi < lo:
            raise DataError(f"annotations line {lineno}: invalid range {lo}..{hi}")
        if hi > lengths[pid]:
            raise DataError(f"annotations line {lineno}: end {hi} beyond sequence length {lengths[pid]}")
        mask = masks.setdefault(pid, {}).setdefault(kind, np.zeros(lengths[pid], dtype=np.int8))
        mask[lo - 1:hi] = 1
    return masks


def mask_runs(mask) -> list[tuple[int, int]]:
    """Maximal runs of ones as 1-based inclusive (start, end) pairs."""
    m = np.concatenate([[0], np.asarray(mask, dtype=np.int8), [0]])
    edges = np.flatnonzero(np.diff(m))
    return [(int(a) + 1, int(b)) for a, b in zip(edges[::2], edges[1::2])]


def format_annotations(records) -> str:
    lines = ["protein_id\tannotation_type\tstart\tend"]
    for r in records:
        for kind in sorted(r.annotations):
            for lo, hi in mask_runs(r.annotations[kind]):
                lines.append(f"{r.id}\t{kind}\t{lo}\t{hi}")
    return "\n".join(lines) + "\n"


def parse_labels(text: str, known_ids) -> dict[str, set]:
    known = set(known_ids)
    labels: dict[str, set] = {pid: set() for pid in known}
    if not text.strip():
        log.warning("label file is empty; every protein gets an empty label set")
        return labels
    for lineno, (pid, cls, *_) in _tsv_rows(text, ("protein_id", "class_id"), "labels"):
        if pid not in known:
            raise DataError(f"labels line {lineno}: unknown protein {pid!r}")
        labels[pid].add(cls)
    return labels


def format_labels(records) -> str:
    lines = ["protein_id\tclass_id"]
    for r in records:
        lines.extend(f"{r.id}\t{c}" for c in sorted(r.labels))
    return "\n".join(lines) + "\n"


def parse_splits(text: str, known_ids) -> dict[str, str]:
    known = set(known_ids)
    out = {}
    for lineno, (pid, split, *_) in _tsv_rows(text, ("protein_id", "split"), "splits"):
        if pid not in known:
            raise DataError(f"splits line {lineno}: unknown protein {pid!r}")
        if split not in SPLITS:
            raise DataError(f"splits line {lineno}: unknown split {split!r}")
        out[pid] = split
    return out


def format_splits(records) -> str:
    return "\n".join(["protein_id\tsplit"] + [f"{r.id}\t{r.split}" for r in records]) + "\n"


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {
        "sequences.fasta": format_fasta(ds.records),
        "labels.tsv": format_labels(ds.records),
        "annotations.tsv": format_annotations(ds.records),
        "splits.tsv": format_splits(ds.records),
    }
    for name, text in files.items():
        tmp = d / (name + ".tmp")
        tmp.write_text(text, encoding="utf-8", newline="\n")
        os.replace(tmp, d / name)


def load_dataset(directory, valid_fraction: float = 0.1, seed: int = 0) -> Dataset:
    """Read a dataset directory. Missing label/annotation/split files are allowed.

    Without a split file everything is ``train``; if no protein is marked
    ``valid``, a seeded random 10 % of the training proteins becomes the
    validation split.
    """
    d = Path(directory)
    fasta = d / "sequences.fasta"
    if not fasta.is_file():
        raise DataError(f"{fasta} not found")
    records = parse_fasta(fasta.read_text(encoding="utf-8"))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate protein ids in FASTA")
    lengths = {r.id: len(r.sequence) for r in records}
    if (d / "labels.tsv").is_file():
        labels = parse_labels((d / "labels.tsv").read_text(encoding="utf-8"), ids)
        for r in records:
            r.labels = labels[r.id]
    if (d / "annotations.tsv").is_file():
        masks = parse_annotations((d / "annotations.tsv").read_text(encoding="utf-8"), lengths)
        for r in records:
            r.annotations = masks.get(r.id, {})
    if (d / "splits.tsv").is_file():
        splits = parse_splits((d / "splits.tsv").read_text(encoding="utf-8"), ids)
        for r in records:
            r.split = splits.get(r.id, "train")
    for r in records:
        for kind, mask in r.annotations.items():
            assert len(mask) == len(r.sequence), (r.id, kind)
    ds = Dataset(records)
    if not ds.split("valid"):
        train = ds.split("train")
        n_valid = int(round(valid_fraction * len(train)))
        for i in Rng(seed).child("valid-split").permutation(len(train))[:n_valid]:
            train[i].split = "valid"
    return ds


@dataclass(frozen=True)
class SynthConfig:
    n_proteins: int = 2000
    min_length: int = 16
    max_length: int = 32
    alphabet: str = AMINO_ACIDS
    motifs: tuple = (("motif", "HDCWY", 0.5),)
    background_class: str = "none"
    task_kind: str = "multiclass"
    seed: int = 0
    split_fractions: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "motifs", tuple(tuple(m) for m in self.motifs))
        object.__setattr__(self, "split_fractions", tuple(self.split_fractions))
        if not self.motifs:
            raise DataError("at least one motif is required")
        for cls, motif, prob in self.motifs:
            if not motif or any(ch not in self.alphabet for ch in motif):
                raise DataError(f"motif {motif!r} for class {cls!r} is empty or outside the alphabet")
            if len(motif) > self.min_length:
                raise DataError(f"motif {motif!r} longer than min_length {self.min_length}")
            if not 0.0 <= prob <= 1.0:
                raise DataError(f"insertion probability {prob} out of range")
        if self.task_kind == "multiclass" and sum(p for *_, p in self.motifs) > 1.0 + 1e-12:
            raise DataError("multiclass insertion probabilities sum to more than 1")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise DataError("split fractions must be three values summing to 1")
        if not 1 <= self.min_length <= self.max_length:
            raise DataError("need 1 <= min_length <= max_length")
        if self.n_proteins < 1:
            raise DataError("n_proteins must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(map(list, v)) if k == "motifs" else list(v) if k == "split_fractions" else v)
                for k, v in ((f, getattr(self, f)) for f in self.__dataclass_fields__)}


def _quota(n: int, probs: list[float]) -> list[int]:
    counts = [int(round(p * n)) for p in probs]
    return counts


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Uniform random sequences with class motifs planted by overwriting a random span.

    Class sizes follow the insertion probabilities as exact quotas. Each
    sequence is resampled until every motif occurs exactly as planted: once for
    each assigned class, never for any other. Planted spans become ``motif``
    annotations.
    """
    rng = Rng(cfg.seed)
    motifs = list(cfg.motifs)
    n = cfg.n_proteins
    alphabet = np.array(list(cfg.alphabet))

    if cfg.task_kind == "multiclass":
        counts = _quota(n, [p for *_, p in motifs])
        assignment = []
        for i, c in enumerate(counts):
            assignment += [[i]] * c
        assignment += [[]] * (n - len(assignment))
        order = rng.child("classes").permutation(n)
        assignment = [assignment[i] for i in order]
    else:
        assignment = [[] for _ in range(n)]
        for i, (*_, p) in enumerate(motifs):
            chosen = rng.child(f"class{i}").permutation(n)[:int(round(p * n))]
            for j in chosen:
                assignment[j].append(i)

    seq_rng = rng.child("sequences")
    records = []
    width = len(str(n - 1))
    for idx, classes in enumerate(assignment):
        if sum(len(motifs[c][1]) for c in classes) > cfg.min_length:
            raise DataError("planted motifs do not fit into the minimum length")
        while True:
            length = int(seq_rng.integers(cfg.min_length, cfg.max_length + 1))
            seq = list(alphabet[seq_rng.integers(0, len(alphabet), size=length)])
            spans = []
            ok = True
            for c in classes:
                motif = motifs[c][1]
                start = int(seq_rng.integers(0, length - len(motif) + 1))
                if any(start < e and s < start + len(motif) for s, e in spans):
                    ok = False
                    break
                seq[start:start + len(motif)] = list(motif)
                spans.append((start, start + len(motif)))
            text = "".join(seq)
            if ok and all(text.count(m) == (1 if i in classes else 0)
                          and (i in classes or m not in text)
                          for i, (_, m, _) in enumerate(motifs)):
                break
        ann = {}
        if spans:
            mask = np.zeros(length, dtype=np.int8)
            for s, e in spans:
                mask[s:e] = 1
            ann["motif"] = mask
        labels = {motifs[c][0] for c in classes} or ({cfg.background_class} if cfg.task_kind == "multiclass" else set())
        records.append(ProteinRecord(f"syn{idx:0{width}d}", text, labels, ann))

    fr = cfg.split_fractions
    n_train = int(round(fr[0] * n))
    n_valid = int(round(fr[1] * n))
    order = rng.child("splits").permutation(n)
    for rank, i in enumerate(order):
        records[i].split = "train" if rank < n_train else "valid" if rank < n_train + n_valid else "test"
    return Dataset(records)
