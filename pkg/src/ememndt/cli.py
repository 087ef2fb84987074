"""``emem`` command-line front end.

Exit codes: 0 success, 1 usage error, 2 data or invariant error, 3 numeric failure.
Logs go to stderr; results go to stdout or ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("emem")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    """Bad invocation: missing inputs, refused overwrite, bad flag values."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--threads", type=int, help="cap numeric worker threads")
    p.add_argument("--edge-policy", help="'complete' or 'radius(<meters>)'")
    p.add_argument("--taxonomy", help="taxonomy JSON ([{label, description}, ...])")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emem", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="store_true", help="print tool and format versions")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic JSONL dataset")
    _common(p)
    p.add_argument("--out", help="dataset path")
    p.add_argument("--split", action="store_true",
                   help="also write <out>.train.jsonl and <out>.test.jsonl")
    p.add_argument("--n-per-class", type=int)

    p = sub.add_parser("train-base", help="train the base encoder")
    _common(p)
    p.add_argument("--train")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")

    p = sub.add_parser("build-tree", help="grow the behavior tree from label descriptions")
    _common(p)
    p.add_argument("--embeddings", help="label embedding JSON; the offline trigram embedder otherwise")
    p.add_argument("--linkage", choices=("average", "single", "complete"))
    p.add_argument("--name", action="append", default=[], metavar="NODE=NAME",
                   help="attach a display name to an inner node (repeatable)")
    p.add_argument("--out")

    p = sub.add_parser("implant", help="fill the leaf memory banks; writes an untrained model")
    _common(p)
    p.add_argument("--encoder")
    p.add_argument("--tree")
    p.add_argument("--train")
    p.add_argument("--eta", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--out")

    p = sub.add_parser("train-ndt", help="train the leaf transforms of an implanted model")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--encoder")
    p.add_argument("--train")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out")

    for name, what in (("predict", "label instances"), ("explain", "explanation trace per instance")):
        p = sub.add_parser(name, help=what)
        _common(p)
        p.add_argument("--model")
        p.add_argument("--encoder")
        p.add_argument("--instance", "--instances", dest="instances", help="JSONL instances")
        p.add_argument("--track-usage", action="store_true",
                       help="add matched prototypes to the model's usage counts (rewrites --model)")
        p.add_argument("--out")

    p = sub.add_parser("eval", help="precision/recall/F1 on a labeled test set")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--encoder")
    p.add_argument("--test")
    p.add_argument("--base", action="store_true", help="also evaluate the encoder's own classifier")
    p.add_argument("--few-shot", help="comma-separated labels for a per-class F1 table")
    p.add_argument("--utilization", action="store_true", help="add a prototype usage report")
    p.add_argument("--format", choices=("json", "text"), default="json")
    p.add_argument("--csv", help="write the confusion matrix as CSV")
    p.add_argument("--out")

    p = sub.add_parser("sweep-eta", help="implant, train and evaluate over several thresholds")
    _common(p)
    p.add_argument("--encoder")
    p.add_argument("--tree")
    p.add_argument("--train")
    p.add_argument("--test")
    p.add_argument("--etas", default="0.3,0.7,0.8,0.9")
    p.add_argument("--format", choices=("json", "text"), default="json")
    p.add_argument("--out")
    return parser


# ------------------------------------------------------------------ helpers

def _config(args):
    from .pipeline import RunConfig, load_config, with_overrides

    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"config file {args.config} does not exist")
        cfg = load_config(args.config)
    elif args.seed is not None:
        cfg = RunConfig(seed=args.seed)
    else:
        raise UsageError("a seed is required: pass --config or --seed")
    return with_overrides(cfg, seed=args.seed, edge_policy=args.edge_policy)


def _input(args, cfg, attr: str, key: str | None = None) -> Path:
    value = getattr(args, attr, None)
    path = Path(value) if value else cfg.path(key or attr)
    if path is None:
        raise UsageError(f"missing --{attr.replace('_', '-')} (and no paths.{key or attr} in the config)")
    if not path.exists():
        raise UsageError(f"input {path} does not exist")
    return path


def _output(args, cfg, key: str | None) -> Path | None:
    path = Path(args.out) if args.out else (cfg.path(key) if key else None)
    if path is not None:
        _check_writable(path, args.force)
    return path


def _check_writable(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        path.write_text(text if text.endswith("\n") else text + "\n")
        log.info("wrote %s", path)


def _taxonomy(args, cfg):
    from .data import load_taxonomy

    path = Path(args.taxonomy) if args.taxonomy else cfg.path("taxonomy")
    if path is None:
        return None
    if not path.exists():
        raise UsageError(f"taxonomy {path} does not exist")
    return load_taxonomy(path)


def _dataset(path, args, cfg):
    from .data import load_dataset

    return load_dataset(path, None, _taxonomy(args, cfg))


def _check_encoder(model, encoder) -> None:
    from .data import DataError

    if model.encoder_hash and model.encoder_hash != encoder.content_hash():
        raise DataError("the encoder does not match the one the model's memory banks were built with")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg) -> None:
    from dataclasses import replace

    from .data import save_dataset, split
    from .synthetic import generate_synthetic

    out = _output(args, cfg, "data")
    if out is None:
        raise UsageError("missing --out")
    syn = cfg.synthetic if args.n_per_class is None else replace(cfg.synthetic, n_per_class=args.n_per_class)
    data = generate_synthetic(syn, cfg.seed)
    targets = [out]
    if args.split:
        stem = out.with_suffix("")
        targets += [Path(f"{stem}.train.jsonl"), Path(f"{stem}.test.jsonl")]
        for p in targets[1:]:
            _check_writable(p, args.force)
    save_dataset(data, out)
    if args.split:
        train, test = split(data, cfg.train_fraction, cfg.seed)
        save_dataset(train, targets[1])
        save_dataset(test, targets[2])
    log.info("wrote %d instances to %s", len(data), ", ".join(map(str, targets)))


def cmd_train_base(args, cfg) -> None:
    from dataclasses import replace

    from .encoder import train_base

    train = _dataset(_input(args, cfg, "train"), args, cfg)
    out = _output(args, cfg, "encoder")
    if out is None:
        raise UsageError("missing --out")
    base = cfg.base if args.epochs is None else replace(cfg.base, epochs=args.epochs)
    if args.seed is not None:
        base = replace(base, seed=args.seed)
    enc_cfg = cfg.encoder_config(train.observation_length, train.taxonomy.M)
    params = train_base(train, base, enc_cfg, cfg.policy)
    params.save(out)


def cmd_build_tree(args, cfg) -> None:
    from dataclasses import replace

    from .pipeline import grow_tree
    from .synthetic import SYNTHETIC_TAXONOMY
    from .tree import annotate_node, save_tree

    out = _output(args, cfg, "tree")
    if out is None:
        raise UsageError("missing --out")
    tax = _taxonomy(args, cfg) or SYNTHETIC_TAXONOMY
    emb = args.embeddings or cfg.path("label_embeddings")
    if emb is not None and not Path(emb).exists():
        raise UsageError(f"embeddings {emb} do not exist")
    if args.linkage:
        cfg = replace(cfg, linkage=args.linkage)
    tree = grow_tree(tax, cfg, emb)
    for spec in args.name:
        node, sep, name = spec.partition("=")
        if not sep or not node.strip().isdigit():
            raise UsageError(f"--name expects NODE=NAME, got {spec!r}")
        tree = annotate_node(tree, int(node), name)
    save_tree(tree, out)


def cmd_implant(args, cfg) -> None:
    from .encoder import EncoderParams
    from .memory import bank_stats
    from .ndt import save_model
    from .pipeline import make_model, with_overrides
    from .tree import load_tree

    encoder = EncoderParams.load(_input(args, cfg, "encoder"))
    tree = load_tree(_input(args, cfg, "tree"))
    train = _dataset(_input(args, cfg, "train"), args, cfg)
    out = _output(args, cfg, "banks")
    if out is None:
        raise UsageError("missing --out")
    cfg = with_overrides(cfg, eta=args.eta, rho=args.rho)

    model = make_model(train, encoder, tree, cfg)
    save_model(model, out)
    rows, total = bank_stats(model.banks)
    for r in rows:
        log.info("leaf %d %s: K=%d", r.leaf_id, r.label, r.K)
    log.info("total EMB %d", total)


def cmd_train_ndt(args, cfg) -> None:
    from dataclasses import replace

    from .encoder import EncoderParams
    from .ndt import load_model, save_model, train_ndt

    model = load_model(_input(args, cfg, "model", "banks"))
    encoder = EncoderParams.load(_input(args, cfg, "encoder"))
    train = _dataset(_input(args, cfg, "train"), args, cfg)
    out = _output(args, cfg, "model")
    if out is None:
        raise UsageError("missing --out")
    _check_encoder(model, encoder)
    ndt = cfg.ndt
    if args.epochs is not None:
        ndt = replace(ndt, epochs=args.epochs)
    if args.lr is not None:
        ndt = replace(ndt, lr=args.lr)
    if args.seed is not None:
        ndt = replace(ndt, seed=args.seed)
    model = train_ndt(model, train, encoder, ndt, cfg.policy)
    save_model(model, out)


def _predict_like(args, cfg, explain: bool) -> None:
    from .data import read_instances
    from .encoder import EncoderParams, embed
    from .ndt import explain_embedding, load_model, predict_batch, save_model

    model_path = _input(args, cfg, "model")
    model = load_model(model_path)
    encoder = EncoderParams.load(_input(args, cfg, "encoder"))
    _check_encoder(model, encoder)
    instances = read_instances(_input(args, cfg, "instances", "test"))
    out = _output(args, cfg, None)
    G = embed(encoder, instances, cfg.policy)
    lines = []
    if explain:
        for inst, g in zip(instances, G):
            trace = explain_embedding(g, model, inst.instance_id, args.track_usage)
            lines.append(json.dumps(trace.to_json(), separators=(",", ":")))
    else:
        labels, P = predict_batch(model, G, track_usage=args.track_usage)
        names = model.labels
        for inst, lab, p in zip(instances, labels, P):
            lines.append(json.dumps({"instance_id": inst.instance_id, "predicted": lab,
                                     "probabilities": dict(zip(names, p.tolist()))},
                                    separators=(",", ":")))
    _emit("\n".join(lines), out)
    if args.track_usage:
        save_model(model, model_path)


def cmd_eval(args, cfg) -> None:
    from .encoder import EncoderParams
    from .evaluation import (
        evaluate,
        evaluate_base,
        few_shot_report,
        utilization_report,
        utilization_text,
        utilization_to_json,
    )
    from .ndt import load_model

    model = load_model(_input(args, cfg, "model"))
    encoder = EncoderParams.load(_input(args, cfg, "encoder"))
    _check_encoder(model, encoder)
    test = _dataset(_input(args, cfg, "test"), args, cfg)
    out = _output(args, cfg, "report")
    csv = Path(args.csv) if args.csv else None
    if csv is not None:
        _check_writable(csv, args.force)
    few = [s for s in (args.few_shot or "").split(",") if s]
    if args.utilization:
        model.banks.reset_usage()
    cm, report = evaluate(model, encoder, test, cfg.policy, track_usage=args.utilization)
    doc = {"confusion": cm.to_json(), "metrics": report.to_json()}
    text = report.to_text()
    if args.base:
        bcm, brep = evaluate_base(encoder, test, cfg.policy)
        doc["base"] = {"confusion": bcm.to_json(), "metrics": brep.to_json()}
        text += "\nbase classifier\n" + brep.to_text()
    if few:
        rows = few_shot_report(report, few)
        doc["few_shot"] = [vars(r) for r in rows]
        text += "\nfew-shot F1\n" + "".join(f"{r.label}  {r.f1:.4f}\n" for r in rows)
    if args.utilization:
        urows = utilization_report(model)
        doc["utilization"] = utilization_to_json(urows)
        text += "\nprototype usage\n" + utilization_text(urows)
    if csv is not None:
        csv.write_text(cm.to_csv())
    _emit(json.dumps(doc, indent=1, sort_keys=True) if args.format == "json" else text, out)


def cmd_sweep_eta(args, cfg) -> None:
    from dataclasses import asdict

    from .encoder import EncoderParams
    from .evaluation import eta_table_text, sweep_eta
    from .tree import load_tree

    encoder = EncoderParams.load(_input(args, cfg, "encoder"))
    tree = load_tree(_input(args, cfg, "tree"))
    train = _dataset(_input(args, cfg, "train"), args, cfg)
    test = _dataset(_input(args, cfg, "test"), args, cfg)
    out = _output(args, cfg, None)
    try:
        etas = [float(x) for x in args.etas.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--etas expects comma-separated numbers, got {args.etas!r}") from None
    if not etas or any(not -1.0 <= e <= 1.0 for e in etas):
        raise UsageError("every eta must lie in [-1, 1]")
    rows = sweep_eta(train, test, encoder, tree, etas, cfg.ndt, cfg.policy, cfg.rho, cfg.aggregation,
                     cfg.hidden, cfg.out, cfg.init_gain)
    if args.format == "json":
        _emit(json.dumps([asdict(r) for r in rows], indent=1), out)
    else:
        _emit(eta_table_text(rows), out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "build-tree": cmd_build_tree,
    "implant": cmd_implant,
    "train-ndt": cmd_train_ndt,
    "predict": lambda a, c: _predict_like(a, c, explain=False),
    "explain": lambda a, c: _predict_like(a, c, explain=True),
    "eval": cmd_eval,
    "sweep-eta": cmd_sweep_eta,
}


def _version() -> str:
    from . import __version__
    from .encoder import ENCODER_VERSION
    from .ndt import MODEL_VERSION
    from .pipeline import SCHEMA_VERSION
    from .tree import TREE_VERSION

    return (f"emem {__version__} (encoder {ENCODER_VERSION}, tree {TREE_VERSION}, "
            f"model {MODEL_VERSION}, config schema {SCHEMA_VERSION})")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.version:
        print(_version())
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.threads is not None:
        if args.threads < 1:
            print("emem: error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        # only effective before numpy loads its BLAS, which the lazy imports below allow
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")

    from .layers import NumericError

    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"emem {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"emem {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"emem {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
