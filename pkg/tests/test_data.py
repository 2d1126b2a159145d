import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xprot.data import (DataError, Dataset, ProteinRecord, SynthConfig, format_annotations,
                        format_fasta, format_labels, format_splits, generate_synthetic,
                        load_dataset, mask_runs, parse_annotations, parse_fasta, parse_labels,
                        parse_splits, save_dataset)
from xprot.model import AMINO_ACIDS

ANN_HEADER = "protein_id\tannotation_type\tstart\tend\n"


def test_fasta_wrapped_record():
    (rec,) = parse_fasta(">p1 some description\nMK\nlv\n")
    assert (rec.id, rec.sequence) == ("p1", "MKLV")


def test_fasta_order_and_errors():
    recs = parse_fasta(">b\nAA\n\n>a\nC\n")
    assert [r.id for r in recs] == ["b", "a"]
    with pytest.raises(DataError, match="line 1"):
        parse_fasta("MK\n>p1\n")
    with pytest.raises(DataError, match="line 1"):
        parse_fasta(">p1\n>p2\nMK\n")
    with pytest.raises(DataError, match="line 3"):
        parse_fasta(">p1\nMK\n>\n")


def test_annotation_single_residue():
    masks = parse_annotations(ANN_HEADER + "p1\tactive_site\t65\t65\n", {"p1": 80})
    m = masks["p1"]["active_site"]
    assert m.shape == (80,) and np.flatnonzero(m).tolist() == [64]


def test_annotation_overlaps_union():
    text = ANN_HEADER + "# comment\np1\tmotif\t3\t6\np1\tmotif\t5\t9\n"
    m = parse_annotations(text, {"p1": 12})["p1"]["motif"]
    assert np.flatnonzero(m).tolist() == list(range(2, 9))


@pytest.mark.parametrize("row, pattern", [
    ("p1\tmotif\t1\t0", "invalid range"),
    ("p1\tmotif\t5\t3", "invalid range"),
    ("p1\tmotif\t5\t13", "end 13 beyond"),
    ("p9\tmotif\t1\t2", "unknown protein"),
    ("p1\tcoiled_coil\t1\t2", "unknown annotation type"),
    ("p1\tmotif\tx\t2", "non-integer"),
])
def test_annotation_errors_name_the_row(row, pattern):
    with pytest.raises(DataError, match=f"line 2: {pattern}"):
        parse_annotations(ANN_HEADER + row + "\n", {"p1": 12})


def test_annotation_header_required():
    with pytest.raises(DataError, match="header"):
        parse_annotations("p1\tmotif\t1\t2\n", {"p1": 12})


def test_labels_multi_and_dedup():
    text = "protein_id\tclass_id\np1\tGO:0016020\np1\tGO:0005488\np1\tGO:0016020\n"
    labels = parse_labels(text, ["p1", "p2"])
    assert labels == {"p1": {"GO:0016020", "GO:0005488"}, "p2": set()}
    with pytest.raises(DataError, match="unknown protein"):
        parse_labels(text + "p3\tx\n", ["p1"])


def test_labels_empty_file_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert parse_labels("", ["p1"]) == {"p1": set()}
    assert "empty" in caplog.text


def test_splits_validation():
    assert parse_splits("protein_id\tsplit\np1\ttest\n", ["p1"]) == {"p1": "test"}
    with pytest.raises(DataError, match="unknown split"):
        parse_splits("protein_id\tsplit\np1\tholdout\n", ["p1"])


@given(st.lists(st.booleans(), min_size=1, max_size=40))
def test_mask_runs_round_trip(bits):
    mask = np.array(bits, dtype=np.int8)
    rows = "".join(f"p\tmotif\t{a}\t{b}\n" for a, b in mask_runs(mask))
    parsed = parse_annotations(ANN_HEADER + rows, {"p": len(mask)}).get("p", {})
    assert np.array_equal(parsed.get("motif", np.zeros_like(mask)), mask)


_ids = st.text(alphabet="abcdefgh0123456789_", min_size=1, max_size=6)


@settings(max_examples=50)
@given(st.dictionaries(_ids, st.text(alphabet=AMINO_ACIDS, min_size=1, max_size=150), min_size=1, max_size=5))
def test_fasta_fixed_point(seqs):
    recs = [ProteinRecord(k, v) for k, v in seqs.items()]
    text = format_fasta(recs)
    again = parse_fasta(text)
    assert [(r.id, r.sequence) for r in again] == [(r.id, r.sequence) for r in recs]
    assert format_fasta(again) == text


def _dataset(n=40, **kw):
    return generate_synthetic(SynthConfig(n_proteins=n, **kw))


def test_synthetic_planted_span():
    ds = _dataset(60, motifs=(("pos", "HDC", 0.5),), min_length=10, max_length=20)
    positives = [r for r in ds.records if "pos" in r.labels]
    negatives = [r for r in ds.records if "pos" not in r.labels]
    assert len(positives) == 30 and len(negatives) == 30
    for r in positives:
        runs = mask_runs(r.annotation("motif"))
        assert len(runs) == 1 and runs[0][1] - runs[0][0] == 2
        assert r.sequence[runs[0][0] - 1:runs[0][1]] == "HDC"
    for r in negatives:
        assert "HDC" not in r.sequence and not r.annotation("motif").any()
        assert r.labels == {"none"}
    assert all(set(r.sequence) <= set(AMINO_ACIDS) for r in ds.records)


def test_synthetic_balance_and_splits():
    ds = _dataset(1000, min_length=8, max_length=12)
    frac = sum("motif" in r.labels for r in ds.records) / 1000
    assert abs(frac - 0.5) <= 0.02
    sizes = [len(ds.split(s)) for s in ("train", "valid", "test")]
    assert sizes == [800, 100, 100]


def test_synthetic_deterministic_bytes(tmp_path):
    save_dataset(_dataset(seed=7), tmp_path / "a")
    save_dataset(_dataset(seed=7), tmp_path / "b")
    save_dataset(_dataset(seed=8), tmp_path / "c")
    for name in ("sequences.fasta", "labels.tsv", "annotations.tsv", "splits.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "sequences.fasta").read_bytes() != (tmp_path / "c" / "sequences.fasta").read_bytes()


def test_synthetic_config_errors():
    with pytest.raises(DataError, match="longer than min_length"):
        SynthConfig(min_length=4, motifs=(("m", "HDCWY", 0.5),))
    with pytest.raises(DataError, match="unknown synth config keys"):
        SynthConfig.from_dict({"n": 3})
    with pytest.raises(DataError):
        SynthConfig(motifs=(("m", "HDB", 0.5),))
    assert SynthConfig.from_dict(SynthConfig().to_dict()) == SynthConfig()


def test_save_load_round_trip(tmp_path):
    ds = _dataset(30)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    for a, b in zip(ds.records, back.records):
        assert (a.id, a.sequence, a.labels, a.split) == (b.id, b.sequence, b.labels, b.split)
        assert np.array_equal(a.annotation("motif"), b.annotation("motif"))
    for fmt in (format_fasta, format_labels, format_annotations, format_splits):
        assert fmt(back.records) == fmt(ds.records)


def test_load_fallback_validation_split(tmp_path):
    recs = [ProteinRecord(f"p{i:02d}", "MKLV") for i in range(50)]
    (tmp_path / "sequences.fasta").write_text(format_fasta(recs))
    ds = load_dataset(tmp_path, seed=3)
    assert len(ds.split("valid")) == 5 and len(ds.split("train")) == 45
    again = load_dataset(tmp_path, seed=3)
    assert [r.id for r in ds.split("valid")] == [r.id for r in again.split("valid")]


def test_load_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_dataset(tmp_path)
    (tmp_path / "sequences.fasta").write_text(">a\nMK\n>a\nLV\n")
    with pytest.raises(DataError, match="duplicate"):
        load_dataset(tmp_path)
