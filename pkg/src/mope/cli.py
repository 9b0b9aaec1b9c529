"""Command-line entry point: ``mope <command> ...``.

Every command writes a resolved-config JSON next to its outputs. Exit codes:
0 success, 2 validation error, 3 contract error, 4 format error, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

from . import __version__
from .backbone import BackboneConfig, load_backbone, save_backbone
from .checkpoint import manifest_path, payload_path
from .corpus import (Schema, build_vocab, corpus_texts, generate_lm_dialogues,
                     generate_synthetic, load_corpus, save_corpus)
from .errors import ContractError, FormatError, MopeError, ValidationError
from .evaluate import (heatmap_svg, matrix_csv, rows_csv, similarity_matrix, spearman,
                       taxonomy_svg)
from .experts import load_pool, save_pool
from .pipeline import (ROUTINGS, RunResult, SweepRow, cluster_examples, evaluate_icl,
                       evaluate_pool, prediction_records, spearman_by_group, sweep_clusters,
                       train_pool)
from .routing import MODES, ClusterModel, cluster_slots, featurize
from .train import ExpertTrainConfig, PretrainConfig, pretrain_backbone, subsample_dialogues

log = logging.getLogger("mope")

SWEEP_COLUMNS = ("mode", "k", "domain", "seed", "train_acs", "test_acs", "jga",
                 "sa_with_none", "sa_without_none")
ACS_COLUMNS = ("mode", "domain", "seed", "k", "train_acs", "test_acs", "jga")


# --- helpers -----------------------------------------------------------------


def _finite(doc):
    """NaN and infinities become null so the output stays strict JSON."""
    if isinstance(doc, float) and not math.isfinite(doc):
        return None
    if isinstance(doc, dict):
        return {k: _finite(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_finite(v) for v in doc]
    return doc


def _dump(doc) -> str:
    return json.dumps(_finite(doc), indent=1, sort_keys=True, allow_nan=False) + "\n"


def _write(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _config_path(out: str | Path) -> Path:
    """Resolved-config location for a single-file output: ``<stem>.config.json``."""
    out = Path(out)
    return out.with_name((out.stem if out.suffix else out.name) + ".config.json")


def _record(path: Path, args: argparse.Namespace, **resolved) -> None:
    opts = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
            if k not in ("func", "verbose")}
    _write(path, _dump({"version": __version__, "command": args.command, "args": opts,
                        "resolved": resolved}))


def _file_digest(*paths: Path) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.read_bytes())
    return h.hexdigest()


def _load_backbone(stem):
    params, vocab = load_backbone(stem)
    if vocab is None:
        raise FormatError(f"{stem}: backbone checkpoint carries no vocabulary")
    return params, vocab


def _read_json(path, what: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read {what} ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed {what} JSON ({exc})") from exc


def _dataclass_from(cls, doc, where: str):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ValidationError(f"{where} must be an object")
    known = {f.name: f.type for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ValidationError(f"{where}: unknown keys {unknown}")
    for key, value in doc.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
            raise ValidationError(f"{where}.{key} must be a positive number, got {value!r}")
    try:
        return cls(**doc)
    except ContractError as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def _backbone_config(doc, vocab_size: int) -> BackboneConfig:
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ValidationError("backbone config must be an object")
    if "vocab_size" in doc:
        raise ValidationError("backbone.vocab_size is derived from the corpus, do not set it")
    known = set(BackboneConfig.__dataclass_fields__) - {"vocab_size"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValidationError(f"backbone: unknown keys {unknown}")
    try:
        return BackboneConfig(vocab_size=vocab_size, **doc)
    except ContractError as exc:
        raise ValidationError(f"backbone: {exc}") from exc


def _train_config(args) -> ExpertTrainConfig:
    doc = {}
    if args.config is not None:
        doc = _read_json(args.config, "config").get("experts", {})
    cfg = _dataclass_from(ExpertTrainConfig, doc, "experts")
    if args.epochs is not None:
        if args.epochs < 1:
            raise ContractError("--epochs must be at least 1")
        cfg.epochs = args.epochs
    return cfg


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str) -> list[str]:
    return [x for x in text.split(",") if x]


def _domains(schema: Schema, domain: str | None) -> list[str]:
    if domain is None:
        return list(schema.held_out)
    if domain not in schema.domains:
        raise ContractError(f"unknown domain {domain!r}")
    return [domain]


# --- commands ----------------------------------------------------------------


def cmd_gen_corpus(args) -> None:
    if args.dialogues < 1:
        raise ContractError(f"--dialogues must be positive, got {args.dialogues}")
    schema, train, test = generate_synthetic(args.seed, args.dialogues, n_test=args.test_dialogues)
    lm = generate_lm_dialogues(args.seed, args.lm_dialogues)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(out / "train.json", schema, train)
    save_corpus(out / "test.json", schema, test)
    save_corpus(out / "lm.json", schema, lm)
    _record(out / "config.json", args, train=len(train), test=len(test), lm=len(lm),
            held_out=list(schema.held_out))


def cmd_pretrain(args) -> None:
    schema, dialogues = load_corpus(args.corpus)
    doc = _read_json(args.config, "config")
    if not isinstance(doc, dict):
        raise ValidationError(f"{args.config}: config must be a JSON object")
    unknown = sorted(set(doc) - {"backbone", "pretrain", "experts"})
    if unknown:
        raise ValidationError(f"{args.config}: unknown sections {unknown}")
    vocab = build_vocab(corpus_texts(schema, dialogues))
    config = _backbone_config(doc.get("backbone"), len(vocab))
    pcfg = _dataclass_from(PretrainConfig, doc.get("pretrain"), "pretrain")
    if not isinstance(pcfg.epochs, int) or not isinstance(pcfg.batch_size, int):
        raise ValidationError("pretrain.epochs and pretrain.batch_size must be integers")
    params, losses = pretrain_backbone(dialogues, vocab, config, args.seed, pcfg)
    save_backbone(params, args.out, vocab)
    stem = manifest_path(args.out).with_suffix("")
    _write(stem.with_name(stem.name + ".loss.csv"),
           rows_csv([{"epoch": e, "loss": l} for e, l in enumerate(losses)], ["epoch", "loss"]))
    _record(stem.with_name(stem.name + ".config.json"), args, backbone=config.to_json(),
            pretrain=asdict(pcfg), vocab_size=len(vocab), digest=params.digest())


def cmd_cluster(args) -> None:
    params, vocab = _load_backbone(args.backbone)
    schema, _ = load_corpus(args.corpus)
    model = cluster_slots(params, vocab, schema, args.feature, args.k, args.seed)
    model.save(args.out)
    _record(_config_path(args.out), args, sse=model.sse_history[-1],
            iterations=len(model.sse_history) - 1)


def cmd_train_experts(args) -> None:
    files = (manifest_path(args.backbone), payload_path(args.backbone))
    before = _file_digest(*files)
    params, vocab = _load_backbone(args.backbone)
    model = ClusterModel.load(args.clusters)
    schema, dialogues = load_corpus(args.corpus)
    cfg = _train_config(args)
    kept = subsample_dialogues(dialogues, args.fraction, args.seed)
    if not kept:
        raise ContractError(f"--fraction {args.fraction} keeps no training dialogue")
    groups = cluster_examples(vocab, schema, kept, model, params.config.max_context)
    pool, losses = train_pool(params, model, groups, args.seed, cfg)
    if _file_digest(*files) != before:
        raise ContractError("backbone checkpoint changed during expert training")
    out = Path(args.out)
    save_pool(pool, out / "experts")
    _write(out / "losses.csv", rows_csv(losses, ["epoch", "expert", "mean_loss"]))
    _record(out / "config.json", args, train=cfg.to_json(), backbone_sha256=before,
            dialogues=[d.id for d in kept],
            examples={str(k): len(v) for k, v in sorted(groups.items())})


def _experts_stem(path) -> Path:
    path = Path(path)
    return path / "experts" if path.is_dir() else path


def cmd_eval(args) -> None:
    params, vocab = _load_backbone(args.backbone)
    model = ClusterModel.load(args.clusters)
    pool = load_pool(_experts_stem(args.experts))
    schema, dialogues = load_corpus(args.corpus)
    report, preds = evaluate_pool(params, vocab, schema, dialogues, args.domain, pool, model,
                                  args.routing, args.seed)
    out = Path(args.report)
    _write(out, _dump(report.to_json()))
    _write(out.with_suffix(".predictions.jsonl"),
           "".join(json.dumps(r, sort_keys=True) + "\n" for r in prediction_records(preds)))
    _record(_config_path(out), args, provenance=pool.provenance)


def cmd_icl(args) -> None:
    params, vocab = _load_backbone(args.backbone)
    schema, test = load_corpus(args.corpus)
    train = []
    if args.shots > 0:
        if args.exemplars is None:
            raise ContractError("--shots > 0 needs --exemplars (a training corpus)")
        _, train = load_corpus(args.exemplars)
    model = ClusterModel.load(args.clusters) if args.clusters else None
    report, grid = evaluate_icl(params, vocab, schema, train, test, args.domain, args.shots,
                                args.seed, model)
    out = Path(args.report)
    _write(out, _dump(report.to_json()))
    _write(out.with_suffix(".predictions.jsonl"),
           "".join(json.dumps(r, sort_keys=True) + "\n" for r in prediction_records(grid)))
    _record(_config_path(out), args)


def cmd_sweep(args) -> None:
    params, vocab = _load_backbone(args.backbone)
    schema, train = load_corpus(args.train)
    _, test = load_corpus(args.test)
    bad = [m for m in args.features if m not in MODES]
    if bad:
        raise ContractError(f"unknown feature modes {bad}")
    cfg = _train_config(args)
    out = Path(args.out)
    domains = _domains(schema, args.domain)

    def save_run(seed: int, mode: str, k: int, run: RunResult) -> None:
        tag = f"{mode}-k{k}-s{seed}"
        run.model.save(out / "runs" / f"{tag}.clusters.json")
        if args.save_experts:
            save_pool(run.pool, out / "runs" / f"{tag}.experts")
        for domain, rep in run.reports.items():
            _write(out / "runs" / f"{tag}.{domain}.report.json", _dump(rep.to_json()))

    rows = sweep_clusters(params, vocab, schema, train, test, domains, args.ks, args.features,
                          args.seeds, cfg, save_run)
    _write(out / "sweep.csv", rows_csv([r.to_json() for r in rows], SWEEP_COLUMNS))
    _record(out / "config.json", args, train=cfg.to_json(), domains=domains,
            spearman=spearman_by_group(rows))


def _read_sweep(path) -> list[SweepRow]:
    import csv

    try:
        with open(path, encoding="utf-8", newline="") as fh:
            raw = list(csv.DictReader(fh))
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read sweep table ({exc})") from exc
    rows = []
    for i, r in enumerate(raw):
        try:
            rows.append(SweepRow(r["mode"], int(r["k"]), r["domain"], int(r["seed"]),
                                 *(float(r[c]) for c in SWEEP_COLUMNS[4:])))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}: row {i + 1} is malformed ({exc})") from exc
    return rows


def cmd_acs(args) -> None:
    rows = sorted(_read_sweep(args.sweep), key=lambda r: (r.mode, r.domain, r.seed, r.k))
    out = Path(args.out)
    _write(out / "acs.csv", rows_csv([r.to_json() for r in rows], ACS_COLUMNS))
    groups = spearman_by_group(rows)
    pooled = spearman([r.test_acs for r in rows], [r.jga for r in rows])
    _write(out / "spearman.json", _dump({"by_group": groups, "pooled": pooled}))
    _record(out / "config.json", args)
    for name, rho in groups.items():
        print(f"spearman(test_acs, jga) {name}: {rho:.3f}")
    print(f"spearman(test_acs, jga) pooled: {pooled:.3f}")


def cmd_errors(args) -> None:
    labels = args.labels or [Path(p).stem for p in args.report]
    if len(labels) != len(args.report):
        raise ContractError("--labels must name every report")
    counts, rows = {}, []
    for label, path in zip(labels, args.report):
        doc = _read_json(path, "report")
        try:
            c = {k: int(doc["error_counts"][k]) for k in ("partial", "over", "other")}
            total = int(doc["total_errors"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: not an evaluation report ({exc})") from exc
        if sum(c.values()) != total:
            raise FormatError(f"{path}: error counts do not sum to total_errors")
        counts[label] = c
        rows.append({"run": label, **c, "total": total})
    out = Path(args.out)
    _write(out, taxonomy_svg(counts))
    _write(out.with_suffix(".csv"), rows_csv(rows, ["run", "partial", "over", "other", "total"]))
    _record(_config_path(out), args)


def cmd_heatmap(args) -> None:
    params, vocab = _load_backbone(args.backbone)
    schema, _ = load_corpus(args.corpus)
    feats = {f.slot: f.vector for f in featurize(params, vocab, schema.slots(), args.feature)}
    names, mat, flagged = similarity_matrix(feats)
    out = Path(args.out)
    _write(out / "similarity.csv", matrix_csv(names, mat))
    _write(out / "heatmap.svg", heatmap_svg(names, mat))
    _record(out / "config.json", args, zero_norm=flagged)


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mope", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("gen-corpus", help="write train.json, test.json and lm.json")
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--dialogues", type=int, default=300)
    c.add_argument("--test-dialogues", type=int, default=100)
    c.add_argument("--lm-dialogues", type=int, default=3000)
    c.set_defaults(func=cmd_gen_corpus)

    c = sub.add_parser("pretrain", help="train a backbone on a corpus's plain text")
    c.add_argument("--corpus", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_pretrain)

    c = sub.add_parser("cluster", help="k-means over training-slot features")
    c.add_argument("--backbone", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--feature", choices=MODES, default="hidden")
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cluster)

    def train_opts(c):
        c.add_argument("--epochs", type=int, default=None)
        c.add_argument("--config", default=None, help="JSON with an 'experts' section")

    c = sub.add_parser("train-experts", help="one prefix expert per cluster")
    c.add_argument("--backbone", required=True)
    c.add_argument("--clusters", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--fraction", type=float, default=1.0)
    c.add_argument("--out", required=True)
    train_opts(c)
    c.set_defaults(func=cmd_train_experts)

    c = sub.add_parser("eval", help="score a pool on one domain")
    c.add_argument("--backbone", required=True)
    c.add_argument("--clusters", required=True)
    c.add_argument("--experts", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--domain", required=True)
    c.add_argument("--routing", choices=ROUTINGS, default="specialized")
    c.add_argument("--report", required=True)
    c.add_argument("--seed", type=int, default=1, help="seed for random routing")
    c.set_defaults(func=cmd_eval)

    c = sub.add_parser("icl", help="frozen backbone with in-context exemplars")
    c.add_argument("--backbone", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--domain", required=True)
    c.add_argument("--shots", type=int, choices=(0, 1, 3, 5), required=True)
    c.add_argument("--report", required=True)
    c.add_argument("--exemplars", default=None, help="training corpus to draw exemplars from")
    c.add_argument("--clusters", default=None, help="draw exemplars from the query's cluster")
    c.add_argument("--seed", type=int, default=1)
    c.set_defaults(func=cmd_icl)

    a = sub.add_parser("analyze", help="sweeps, ACS tables and figures")
    asub = a.add_subparsers(dest="analysis", required=True)

    c = asub.add_parser("sweep", help="train and evaluate over K, feature modes and seeds")
    c.add_argument("--backbone", required=True)
    c.add_argument("--train", required=True)
    c.add_argument("--test", required=True)
    c.add_argument("--domain", default=None, help="default: every held-out domain")
    c.add_argument("--ks", type=_int_list, default=[1, 2, 3])
    c.add_argument("--features", type=_str_list, default=["hidden", "embedding"])
    c.add_argument("--seeds", type=_int_list, default=[1])
    c.add_argument("--save-experts", action="store_true")
    c.add_argument("--out", required=True)
    train_opts(c)
    c.set_defaults(func=cmd_sweep)

    c = asub.add_parser("acs", help="(K, train ACS, test ACS, JGA) table and Spearman")
    c.add_argument("--sweep", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_acs)

    c = asub.add_parser("errors", help="error-type bars from evaluation reports")
    c.add_argument("--report", nargs="+", required=True)
    c.add_argument("--labels", nargs="+", default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_errors)

    c = asub.add_parser("heatmap", help="slot-feature cosine similarity")
    c.add_argument("--backbone", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--feature", choices=MODES, default="hidden")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_heatmap)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except MopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
