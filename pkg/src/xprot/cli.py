"""``xprot`` command-line entry point.

Exit codes: 0 ok, 1 usage, 2 input/config error, 3 numeric failure,
4 empty result. Progress goes to stdout as ``key=value`` lines, diagnostics
to stderr. Every command writes ``manifest.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC, EXIT_EMPTY = 0, 1, 2, 3, 4

log = logging.getLogger("xprot")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _digests(paths) -> dict:
    return {str(p): _sha256(p) for p in sorted(map(Path, paths)) if Path(p).is_file()}


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_manifest(out_dir: Path, command: str, argv, config: dict, seed, inputs, outputs, started):
    manifest = {
        "command": command, "argv": list(argv), "config": config, "seed": seed,
        "inputs": _digests(inputs), "outputs": _digests(outputs),
        "version": __version__, "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    _write_atomic(out_dir / "manifest.json", _dump(manifest))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_INPUT, f"{what} {p} not found")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INPUT, f"{what} {p} is not valid JSON: {exc}") from exc


def _progress(**kv) -> None:
    print(" ".join(f"{k}={v}" for k, v in kv.items()), flush=True)


def _single_thread():
    import torch
    torch.set_num_threads(1)


# --- synth ----------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import DataError, SynthConfig, generate_synthetic, save_dataset
    started = _now()
    raw = _read_json(args.config, "config")
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(raw)
        ds = generate_synthetic(cfg)
    except (DataError, TypeError) as exc:
        raise CliError(EXIT_INPUT, f"invalid synth config: {exc}") from exc
    out = Path(args.out)
    save_dataset(ds, out)
    files = [out / n for n in ("sequences.fasta", "labels.tsv", "annotations.tsv", "splits.tsv")]
    for f in files:
        _progress(file=f.name, sha256=_sha256(f))
    write_manifest(out, "synth", args.argv, cfg.to_dict(), cfg.seed, [args.config], files, started)
    return EXIT_OK


# --- train ----------------------------------------------------------------

def cmd_train(args) -> int:
    from .archive import save_weights
    from .data import DataError, load_dataset
    from .model import ConfigError, ModelConfig
    from .training import NumericError, TrainConfig, train
    started = _now()
    _single_thread()
    mc_raw = _read_json(args.model_config, "model config")
    tc_raw = _read_json(args.train_config, "train config")
    if args.freeze_epochs is not None:
        tc_raw["freeze_encoder_epochs"] = args.freeze_epochs
    if args.seed is not None:
        tc_raw["seed"] = args.seed
    try:
        tc = TrainConfig.from_dict(tc_raw)
        ds = load_dataset(args.data, seed=tc.seed)
        classes = ds.classes
        if not classes:
            raise DataError("dataset has no labels")
        mc_raw["n_classes"] = len(classes)
        longest = max(len(r.sequence) for r in ds.records)
        mc_raw.setdefault("max_positions", min(longest, 1000) + 2)
        mc = ModelConfig.from_dict(mc_raw)
    except (DataError, ConfigError, ValueError, TypeError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = []

    def on_epoch(record):
        history.append(record)
        _progress(**record)

    try:
        best = train(ds.split("train"), ds.split("valid"), classes, mc, tc, progress=on_epoch)
    except NumericError as exc:
        raise CliError(EXIT_NUMERIC, str(exc)) from exc
    except (DataError, ValueError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc

    weights_path = out / "weights.xprotw"
    tmp = weights_path.with_name(weights_path.name + ".tmp")
    tmp.write_bytes(save_weights(mc, best.weights))
    os.replace(tmp, weights_path)
    sidecar = dict(best.sidecar(), classes=classes,
                   initial_encoder_sha256=best.initial_encoder_sha256)
    _write_atomic(out / "checkpoint.json", _dump(sidecar))
    _write_atomic(out / "history.json", _dump(history))
    _progress(best_epoch=best.epoch, metric=best.metric, metric_kind=best.metric_kind)
    inputs = [args.model_config, args.train_config] + [
        Path(args.data) / n for n in ("sequences.fasta", "labels.tsv", "annotations.tsv", "splits.tsv")]
    write_manifest(out, "train", args.argv, {"model": mc.to_dict(), "train": tc.to_dict()},
                   tc.seed, inputs, [weights_path, out / "checkpoint.json", out / "history.json"],
                   started)
    return EXIT_OK


# --- attribute ------------------------------------------------------------

def load_checkpoint(path):
    from .archive import ArchiveError, load_weights
    from .model import Encoder
    d = Path(path)
    weights_path = d / "weights.xprotw" if d.is_dir() else d
    sidecar_path = weights_path.with_name("checkpoint.json")
    if not weights_path.is_file():
        raise CliError(EXIT_INPUT, f"model weights {weights_path} not found")
    try:
        config, weights = load_weights(weights_path.read_bytes())
    except ArchiveError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    sidecar = _read_json(sidecar_path, "checkpoint sidecar") if sidecar_path.is_file() else {}
    classes = sidecar.get("classes") or [str(i) for i in range(config.n_classes)]
    return Encoder(config, weights), classes, weights_path


_WORKER = {}


def _worker_init(weights_bytes):
    from .archive import load_weights
    from .model import Encoder
    _single_thread()
    config, weights = load_weights(weights_bytes)
    _WORKER["model"] = Encoder(config, weights)


def _attribute_one(job):
    from .attribution import (PathSpec, assemble_summed_map, ig_all_layers, ig_embedding,
                              ig_head_level)
    from .model import tokenize
    pid, sequence, class_index, target, steps, baseline = job
    model = _WORKER["model"]
    spec = PathSpec(baseline, steps)
    tokens = tokenize(sequence)
    files, gaps = {}, []
    if target == "embedding":
        m = ig_embedding(model, tokens, class_index, spec, pid)
        files[f"{pid}.embedding.json"] = _dump(m.to_json())
        gaps.append(("embedding", m.completeness_gap))
    elif target == "all-layers":
        maps = ig_all_layers(model, tokens, class_index, spec, pid)
        for m in maps:
            files[f"{pid}.layer{m.layer}.json"] = _dump(m.to_json())
            gaps.append((f"layer:{m.layer}", m.completeness_gap))
        summed = assemble_summed_map(maps, model.config.n_layers)
        files[f"{pid}.summed.json"] = _dump(summed.to_json())
    else:
        layer = int(target.split(":", 1)[1])
        m = ig_head_level(model, tokens, class_index, layer, spec, pid)
        files[f"{pid}.layer{layer}.json"] = _dump(m.to_json())
        gaps.append((target, m.completeness_gap))
    return pid, files, gaps


def cmd_attribute(args) -> int:
    from .data import DataError, parse_fasta
    from .model import TokenizeError, tokenize
    started = _now()
    _single_thread()
    model, classes, weights_path = load_checkpoint(args.model)
    if args.klass not in classes:
        raise CliError(EXIT_INPUT, f"unknown class {args.klass!r}; known: {', '.join(classes)}")
    class_index = classes.index(args.klass)
    target = args.target
    if target.startswith("layer:"):
        try:
            layer = int(target.split(":", 1)[1])
        except ValueError:
            raise CliError(EXIT_INPUT, f"bad target {target!r}") from None
        if not 0 <= layer < model.config.n_layers:
            raise CliError(EXIT_INPUT, f"layer {layer} out of range [0, {model.config.n_layers})")
    elif target not in ("embedding", "all-layers"):
        raise CliError(EXIT_INPUT, f"bad target {target!r}")
    if args.steps < 1:
        raise CliError(EXIT_INPUT, "--steps must be >= 1")
    fasta = Path(args.fasta)
    if not fasta.is_file():
        raise CliError(EXIT_INPUT, f"FASTA {fasta} not found")
    try:
        records = parse_fasta(fasta.read_text(encoding="utf-8"))
        for r in records:
            if len(tokenize(r.sequence)) > model.config.max_positions:
                raise DataError(f"{r.id}: {len(r.sequence)} residues exceed the model's "
                                f"{model.config.max_positions - 2} positions")
    except (DataError, TokenizeError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(r.id, r.sequence, class_index, target, args.steps, args.baseline)
            for r in sorted(records, key=lambda r: r.id)]
    weights_bytes = weights_path.read_bytes()
    if args.jobs > 1:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(args.jobs, initializer=_worker_init, initargs=(weights_bytes,)) as pool:
            results = pool.map(_attribute_one, jobs)
    else:
        _worker_init(weights_bytes)
        results = [_attribute_one(j) for j in jobs]
    written = []
    for pid, files, gaps in sorted(results, key=lambda r: r[0]):
        for name in sorted(files):
            _write_atomic(out / name, files[name])
            written.append(out / name)
        for tgt, gap in gaps:
            _progress(protein=pid, target=tgt, completeness_gap=repr(gap))
    config = {"class": args.klass, "class_index": class_index, "target": target,
              "steps": args.steps, "baseline": args.baseline}
    write_manifest(out, "attribute", args.argv, config, None, [weights_path, fasta], written, started)
    return EXIT_OK


# --- analyze --------------------------------------------------------------

def load_attributions(directory):
    from .attribution import AttributionMap
    emb, heads = {}, {}
    for path in sorted(Path(directory).glob("*.json")):
        if path.name == "manifest.json" or path.name.endswith(".summed.json"):
            continue
        d = json.loads(path.read_text(encoding="utf-8"))
        if "kind" not in d:
            continue
        m = AttributionMap.from_json(d)
        if m.kind == "embedding":
            emb[m.protein_id] = m
        else:
            heads.setdefault(m.protein_id, []).append(m)
    return emb, heads


def cmd_analyze(args) -> int:
    from .analysis import AnalysisError, analyze_attributions, matrix_csv, strip_private
    from .data import ANNOTATION_TYPES, DataError, load_dataset
    started = _now()
    types = [t.strip() for t in args.types.split(",") if t.strip()]
    unknown = [t for t in types if t not in ANNOTATION_TYPES]
    if unknown or not types:
        raise CliError(EXIT_INPUT, f"unknown annotation types {unknown}; "
                                   f"choose from {', '.join(ANNOTATION_TYPES)}")
    if not Path(args.attr).is_dir():
        raise CliError(EXIT_INPUT, f"attribution directory {args.attr} not found")
    try:
        ds = load_dataset(args.data)
    except DataError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    if args.klass not in ds.classes:
        raise CliError(EXIT_INPUT, f"unknown class {args.klass!r}")
    records = ds.by_id()
    emb, heads = load_attributions(args.attr)

    def keep(pid):
        r = records.get(pid)
        return r is not None and args.klass in r.labels and (args.split == "all" or r.split == args.split)

    emb = {p: m for p, m in emb.items() if keep(p)}
    heads = {p: ms for p, ms in heads.items() if keep(p)}
    n_layers = max((len(ms) for ms in heads.values()), default=None)
    heads = {p: ms for p, ms in heads.items() if len(ms) == n_layers}
    if not emb and not heads:
        raise CliError(EXIT_EMPTY, f"no attributions for class {args.klass!r} in split {args.split!r}")
    try:
        report = analyze_attributions(records, emb, heads, args.klass, types, args.alpha,
                                      n_layers, args.rotate_seed)
    except AnalysisError as exc:
        raise CliError(EXIT_EMPTY, str(exc)) from exc
    if not report["types"]:
        raise CliError(EXIT_EMPTY, "no qualifying proteins for any requested annotation type: "
                       + "; ".join(f"{k}: {v}" for k, v in report["skipped"].items()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, entry in report["types"].items():
        if "_matrices" in entry:
            corr, over = entry["_matrices"]
            for name, mat in ((f"{kind}.correlation.csv", corr.display), (f"{kind}.overlay.csv", over)):
                _write_atomic(out / name, matrix_csv(mat))
                written.append(out / name)
            _progress(type=kind, n_proteins=entry["n_proteins"],
                      significant_cells=int(corr.mask.sum()),
                      overlay_cells=int(np.isfinite(over).sum()))
    if "relevance" in report:
        rel = np.array([[np.nan if v is None else v for v in row]
                        for row in report["relevance"]["display"]], dtype=float)
        _write_atomic(out / "relevance.csv", matrix_csv(rel))
        written.append(out / "relevance.csv")
    clean = strip_private(report)
    _write_atomic(out / "report.json", _dump(clean))
    written.append(out / "report.json")
    for kind, e in sorted(clean.get("embedding_level", {}).items()):
        _progress(type=kind, embedding_level_p_adjusted=e.get("p_adjusted"),
                  significant=e.get("significant"))
    inputs = sorted(Path(args.attr).glob("*.json")) + [
        Path(args.data) / n for n in ("sequences.fasta", "labels.tsv", "annotations.tsv", "splits.tsv")]
    inputs = [p for p in inputs if p.name != "manifest.json"]
    write_manifest(out, "analyze", args.argv,
                   {"class": args.klass, "types": types, "alpha": args.alpha, "split": args.split,
                    "rotate_seed": args.rotate_seed}, args.rotate_seed, inputs, written, started)
    return EXIT_OK


# --- embed ----------------------------------------------------------------

def cmd_embed(args) -> int:
    from .attribution import SummedMap
    from .data import DataError, parse_labels
    from .embedding import (EmbeddingConfig, EmbeddingError, emit_scatter, flatten, kmeans,
                            min_points, pca, rand_index, tsne)
    started = _now()
    maps_dir = Path(args.maps)
    if not maps_dir.is_dir():
        raise CliError(EXIT_INPUT, f"maps directory {maps_dir} not found")
    paths = sorted(maps_dir.glob("*.summed.json"))
    maps = [SummedMap.from_json(json.loads(p.read_text(encoding="utf-8"))) for p in paths]
    maps.sort(key=lambda m: m.protein_id)
    cfg = EmbeddingConfig(pca_dims=args.pca, perplexity=args.perplexity, seed=args.seed,
                          iterations=args.iterations, learning_rate=args.learning_rate)
    if len(maps) < min_points(cfg.perplexity):
        raise CliError(EXIT_INPUT, f"{len(maps)} maps are too few for perplexity {cfg.perplexity}; "
                                   f"at least {min_points(cfg.perplexity)} required")
    ids = [m.protein_id for m in maps]
    labels = [str(m.class_index) for m in maps]
    label_file = Path(args.labels) if args.labels else maps_dir / "labels.tsv"
    inputs = list(paths)
    if label_file.is_file():
        try:
            table = parse_labels(label_file.read_text(encoding="utf-8"), ids)
        except DataError as exc:
            raise CliError(EXIT_INPUT, str(exc)) from exc
        labels = [",".join(sorted(table[i])) or "unlabeled" for i in ids]
        inputs.append(label_file)
    elif args.labels:
        raise CliError(EXIT_INPUT, f"label file {label_file} not found")
    try:
        matrix = flatten(maps)
        scores, evals, _ = pca(matrix, cfg.pca_dims)
        points = tsne(scores, cfg)
    except EmbeddingError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    out = Path(args.out)
    csv_path, svg_path = emit_scatter(points, labels, ids, out)
    _progress(n=len(maps), pca_dims=cfg.pca_dims,
              explained=repr(float(evals[:cfg.pca_dims].sum() / evals.sum())) if evals.sum() > 0 else "nan")
    code = EXIT_OK
    if args.verify_clusters:
        k = len(set(labels))
        ri = rand_index(kmeans(points, k, seed=cfg.seed), labels)
        _progress(rand_index=repr(ri), threshold=0.9, passed=ri >= 0.9)
        if ri < 0.9:
            print(f"cluster check failed: Rand index {ri:.4f} < 0.9", file=sys.stderr)
            code = EXIT_NUMERIC
    write_manifest(out, "embed", args.argv, {
        "pca_dims": cfg.pca_dims, "perplexity": cfg.perplexity, "learning_rate": cfg.learning_rate,
        "iterations": cfg.iterations, "early_exaggeration": cfg.early_exaggeration},
        cfg.seed, inputs, [csv_path, svg_path], started)
    return code


def cmd_synth_maps(args) -> int:
    from .embedding import synthetic_summed_maps
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps, labels = synthetic_summed_maps(args.n, args.classes, args.layers, args.heads, args.seed)
    written = []
    for m in maps:
        p = out / f"{m.protein_id}.summed.json"
        _write_atomic(p, _dump(m.to_json()))
        written.append(p)
    lines = ["protein_id\tclass_id"] + [f"{m.protein_id}\t{lab}" for m, lab in zip(maps, labels)]
    _write_atomic(out / "labels.tsv", "\n".join(lines) + "\n")
    written.append(out / "labels.tsv")
    config = {"n": args.n, "classes": args.classes, "layers": args.layers, "heads": args.heads}
    write_manifest(out, "synth-maps", args.argv, config, args.seed, [],
                   written, started)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # malformed command lines are usage errors, not input errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xprot", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("synth", help="generate a planted-motif dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="finetune an encoder on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--model-config", required=True)
    t.add_argument("--train-config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--freeze-epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attribute", help="integrated-gradients attribution maps")
    a.add_argument("--model", required=True)
    a.add_argument("--fasta", required=True)
    a.add_argument("--class", dest="klass", required=True)
    a.add_argument("--target", default="embedding", help="embedding | layer:<l> | all-layers")
    a.add_argument("--steps", type=int, default=64)
    a.add_argument("--baseline", choices=("zero", "pad"), default="zero")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attribute)

    z = sub.add_parser("analyze", help="correlation/relevance significance report")
    z.add_argument("--attr", required=True)
    z.add_argument("--data", required=True)
    z.add_argument("--class", dest="klass", required=True)
    z.add_argument("--types", required=True)
    z.add_argument("--alpha", type=float, default=0.05)
    z.add_argument("--split", default="test", help="train | valid | test | all")
    z.add_argument("--rotate-seed", type=int, help="negative control: rotate every mask randomly")
    z.add_argument("--out", required=True)
    z.set_defaults(func=cmd_analyze)

    e = sub.add_parser("embed", help="PCA + t-SNE scatter of summed attribution maps")
    e.add_argument("--maps", required=True)
    e.add_argument("--labels")
    e.add_argument("--pca", type=int, default=50)
    e.add_argument("--perplexity", type=float, default=30.0)
    e.add_argument("--learning-rate", type=float, default=200.0)
    e.add_argument("--iterations", type=int, default=1000)
    e.add_argument("--seed", type=int, default=42)
    e.add_argument("--verify-clusters", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_embed)

    m = sub.add_parser("synth-maps", help="synthetic summed maps with planted head patterns")
    m.add_argument("--n", type=int, default=90)
    m.add_argument("--classes", type=int, default=3)
    m.add_argument("--layers", type=int, default=30)
    m.add_argument("--heads", type=int, default=16)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_synth_maps)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)
    args.argv = ["xprot", *argv]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"xprot {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ArithmeticError, RuntimeError) as exc:
        # non-finite gradients, losses or path points
        print(f"xprot {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
