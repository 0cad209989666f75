"""Command-line entry point: prepare, train, evaluate, gradcheck, ablate, sweep.

Exit codes: 0 ok, 2 usage, 3 data, 4 numeric.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .cooccur import CooccurrenceMatrix, dump_cooccurrence
from .data import (MODALITIES, InteractionDataset, ModalFeatureTable, SynthSpec, load_interactions,
                   load_modal_features, split_leave_one_out, synth_generate, write_interactions,
                   write_modal_features)
from .errors import DataError, NumericError
from .evaluation import evaluate
from .model import MDSRec, ModelConfig, parse_key_values
from .numkit import grad_check
from .interest import dump_clusters
from .relgraph import dump_graph
from .trainer import apply_ablation, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("mdsrec")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

INTERACTIONS_FILE = "interactions.tsv"
FEATURE_FILE = "features_{}.mdsf"


class UsageError(Exception):
    pass


def _require_file(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def resolve_config(path: str | None, overrides: list[str] | None = None) -> ModelConfig:
    """Defaults, then the config (or manifest) file, then ``--set key=value`` flags."""
    cfg = ModelConfig()
    if path is not None:
        values = parse_key_values(_require_file(path, "--config").read_text(encoding="utf-8"))
        if any(k.startswith("config.") for k in values):
            values = {k[len("config."):]: v for k, v in values.items() if k.startswith("config.")}
        cfg = cfg.updated(values)
    if overrides:
        pairs = {}
        for item in overrides:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            key, val = item.split("=", 1)
            pairs[key.strip()] = val.strip()
        cfg = cfg.updated(pairs)
    return cfg


# -- prepared data directory --------------------------------------------------

def write_prepared(out: Path, dataset: InteractionDataset, features: dict[str, ModalFeatureTable],
                   config: ModelConfig) -> dict[str, float]:
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(dataset, out / INTERACTIONS_FILE)
    for m in MODALITIES:
        write_modal_features(features[m], out / FEATURE_FILE.format(m))
    split = split_leave_one_out(dataset)
    with (out / "split.tsv").open("w", encoding="utf-8") as fh:
        fh.write("user\titem\trole\n")
        for u in range(split.n_users):
            for item in split.train[u]:
                fh.write(f"{u}\t{item}\ttrain\n")
            fh.write(f"{u}\t{split.valid_target[u]}\tvalid\n{u}\t{split.test_target[u]}\ttest\n")
    # same construction path as training, so the dumps match what a model sees
    model = MDSRec.from_data(config, split, features)
    dump_cooccurrence(CooccurrenceMatrix(model.cooccurrence, split.n_users), out / "cooccurrence.tsv")
    for m, graph in model.graphs.items():
        dump_graph(graph, out / f"graph_{m}.txt")
    dump_clusters(model.clusters, out / "clusters.tsv")
    report = dict(dataset.stats())
    report["cooccurrence_nnz"] = model.cooccurrence.nnz
    report["H"] = config.H
    report["k"] = config.k
    for m in MODALITIES:
        report[f"missing_{m}"] = len(features[m].missing)
        if m in model.graphs:
            report[f"cold_{m}"] = len(model.graphs[m].cold_items)
    with (out / "prepare_report.txt").open("w", encoding="utf-8") as fh:
        for key, val in report.items():
            fh.write(f"{key} = {val!r}\n" if isinstance(val, float) else f"{key} = {val}\n")
    return report


def load_prepared(data_dir, max_len: int = 50):
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise UsageError(f"--data: not a directory: {data_dir}")
    path = data_dir / INTERACTIONS_FILE
    if not path.is_file():
        raise DataError(f"{data_dir} has no {INTERACTIONS_FILE}; run 'mdsrec prepare' first")
    dataset = load_interactions(path, max_len=max_len)
    features = {}
    for m in MODALITIES:
        fp = data_dir / FEATURE_FILE.format(m)
        if not fp.is_file():
            raise DataError(f"{data_dir} has no {fp.name}")
        features[m] = load_modal_features(fp, m, n_items=dataset.n_items)
    return dataset, split_leave_one_out(dataset), features


def _data_digests(data_dir: Path) -> dict[str, str]:
    names = [INTERACTIONS_FILE] + [FEATURE_FILE.format(m) for m in MODALITIES]
    return {name: _sha256(data_dir / name) for name in names}


def write_manifest(path: Path, config: ModelConfig, command: str, digests: dict[str, str],
                   artifacts: dict[str, str]) -> None:
    lines = [f"tool_version = {__version__}", f"command = {command}", f"seed = {config.seed}"]
    lines += [f"input.{k} = sha256:{v}" for k, v in digests.items()]
    lines += [f"artifact.{k} = {v}" for k, v in artifacts.items()]
    lines += [f"config.{line}" for line in config.to_text().splitlines()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- commands -----------------------------------------------------------------

def cmd_prepare(args) -> int:
    real = any(x is not None for x in (args.interactions, args.features_visual, args.features_textual))
    if real and args.synth:
        raise UsageError("give either --interactions/--features-* or --synth, not both")
    if not real and not args.synth:
        raise UsageError("give --interactions with --features-visual/--features-textual, or --synth")
    config = resolve_config(args.config, args.set)
    if args.synth:
        spec = SynthSpec.from_file(_require_file(args.synth, "--synth"))
        dataset, features = synth_generate(spec, args.seed)
    else:
        inter = _require_file(args.interactions, "--interactions")
        fv = _require_file(args.features_visual, "--features-visual")
        ft = _require_file(args.features_textual, "--features-textual")
        dataset = load_interactions(inter, max_len=config.max_len)
        index = dataset.item_index()
        features = {
            "visual": load_modal_features(fv, "visual", n_items=dataset.n_items, item_index=index),
            "textual": load_modal_features(ft, "textual", n_items=dataset.n_items, item_index=index),
        }
    report = write_prepared(Path(args.out), dataset, features, config)
    print(f"prepared {report['n_users']} users, {report['n_items']} items, "
          f"{report['n_interactions']} interactions, sparsity {report['sparsity']:.4f} -> {args.out}")
    return 0


def _train_and_save(config: ModelConfig, data_dir: Path, out: Path, command: str):
    dataset, split, features = load_prepared(data_dir, config.max_len)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {"checkpoint": str(out / "checkpoint.mdsc"), "history": str(out / "history.csv"),
                 "report": str(out / "report.csv")}
    write_manifest(out / "manifest.txt", config, command, _data_digests(data_dir), artifacts)
    result = fit(config, split, features)
    save_checkpoint(result.model, out / "checkpoint.mdsc")
    result.history.write(out / "history.csv")
    report = evaluate(result.model, split, mode="test")
    report.write(out / "report.csv")
    return result, report


def cmd_train(args) -> int:
    config = resolve_config(args.config, args.set)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    result, report = _train_and_save(config, Path(args.data), Path(args.out), "train")
    print(f"best epoch {result.state.best_epoch} (valid R@10 {result.state.best_recall:.4f}); "
          f"test {report.summary()}")
    return 0


def cmd_evaluate(args) -> int:
    config, arrays = load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
    dataset, split, features = load_prepared(args.data, config.max_len)
    model = MDSRec.from_data(config, split, features)
    model.load_state(arrays)
    report = evaluate(model, split, mode=args.mode)
    if args.out:
        report.write(args.out)
    else:
        sys.stdout.write(report.to_csv())
    print(report.summary(), file=sys.stderr)
    return 0


def gradcheck_toy(config: ModelConfig):
    """A 3-user, 8-item problem with every parameter randomised away from its init."""
    rng = np.random.default_rng(config.seed)
    seqs = [np.array(s) for s in ([0, 1, 2, 3, 4, 5, 6], [2, 4, 6, 7, 1, 3], [5, 7, 0, 3, 2])]
    dataset = InteractionDataset(3, 8, seqs, max_len=config.max_len)
    split = split_leave_one_out(dataset)
    features = {"visual": rng.standard_normal((8, 5)), "textual": rng.standard_normal((8, 4))}
    model = MDSRec.from_data(config, split, features)
    for name, p in model.params.items():
        p.data[...] = rng.standard_normal(p.shape) * 0.5 + (1.0 if name.endswith("_g") else 0.0)
    from .data import make_batches
    batch = next(make_batches(split, 8, config.max_len, mode="train"))
    return model, batch


GRADCHECK_DEFAULTS = {"d": "8", "n_layers": "1", "n_heads": "2", "max_len": "6", "H": "3", "k": "2",
                      "dtype": "float64"}


def cmd_gradcheck(args) -> int:
    config = ModelConfig().updated(GRADCHECK_DEFAULTS)
    if args.config:
        config = config.updated(parse_key_values(_require_file(args.config, "--config").read_text()))
    if args.set:
        config = config.updated(dict(s.split("=", 1) for s in args.set))
    if config.dtype != "float64":
        raise UsageError("gradcheck needs dtype = float64")
    model, batch = gradcheck_toy(config)
    report = grad_check(lambda: model.loss(batch, np.random.default_rng(config.seed + 1)),
                        model.params, step=args.step, tol=args.tol)
    for line in report.lines():
        print(line)
    name, err = report.worst
    print(f"worst relative error {err:.3e} in {name} (tol {args.tol:g})")
    if not report.passed:
        raise NumericError(f"gradient check failed: {name} at {err:.3e}")
    return 0


def _append_csv(path: Path, header: str, row: str) -> None:
    new = not path.exists()
    with path.open("a", encoding="utf-8") as fh:
        if new:
            fh.write(header + "\n")
        fh.write(row + "\n")


def run_variant(config: ModelConfig, split, features, variant: str):
    if variant != "full":
        config = apply_ablation(config, variant)
    result = fit(config, split, features)
    return evaluate(result.model, split, mode="test")


def cmd_ablate(args) -> int:
    base = resolve_config(args.config, args.set)
    dataset, split, features = load_prepared(args.data, base.max_len)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    out = Path(args.out)
    for seed in seeds:
        report = run_variant(replace(base, seed=seed), split, features, args.variant)
        label = "MDSRec" if args.variant == "full" else f"w/o {args.variant.upper()}"
        _append_csv(out, "variant,seed,recall10,ndcg10,recall20,ndcg20",
                    f"{label},{seed},{report.recall[10]!r},{report.ndcg[10]!r},"
                    f"{report.recall[20]!r},{report.ndcg[20]!r}")
        print(f"{label} seed {seed}: {report.summary()}")
    return 0


def cmd_sweep(args) -> int:
    base = resolve_config(args.config, args.set)
    dataset, split, features = load_prepared(args.data, base.max_len)
    try:
        grid = [int(v) for v in args.grid.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--grid must be a comma-separated list of integers, got {args.grid!r}") from None
    out = Path(args.out)
    for value in grid:
        config = replace(base, **{args.param: value}).validate()
        report = run_variant(config, split, features, "full")
        _append_csv(out, "param,value,recall20,ndcg20",
                    f"{args.param},{value},{report.recall[20]!r},{report.ndcg[20]!r}")
        print(f"{args.param}={value}: {report.summary()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdsrec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    p.add_argument("--print-schema", action="store_true", help="print config keys and defaults, then exit")
    sub = p.add_subparsers(dest="command")

    def common(sp, data=True):
        if data:
            sp.add_argument("--data", required=True, help="directory written by 'prepare'")
        sp.add_argument("--config", help="key = value config file (a run manifest also works)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("prepare", help="ingest or synthesise data and cache graphs")
    sp.add_argument("--interactions")
    sp.add_argument("--features-visual")
    sp.add_argument("--features-textual")
    sp.add_argument("--synth", help="synthetic spec file (key = value)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    common(sp, data=False)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train with early stopping, write checkpoint/history/manifest")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="rank the catalog with a saved checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=("test", "valid", "train"), default="test")
    sp.add_argument("--out", help="CSV report path (default: stdout)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    common(sp, data=False)
    sp.add_argument("--step", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train one ablation variant and append to a comparison CSV")
    common(sp)
    sp.add_argument("--variant", required=True, choices=("full", "dis", "cre", "mrgc", "ica"))
    sp.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    sp.add_argument("--out", default="ablation.csv")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("sweep", help="sweep H or k and emit param,value,recall20,ndcg20 rows")
    common(sp)
    sp.add_argument("--param", required=True, choices=("H", "k"))
    sp.add_argument("--grid", required=True, help="comma-separated values, e.g. 0,5,10")
    sp.add_argument("--out", default="sweep.csv")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_schema:
        sys.stdout.write(ModelConfig.schema())
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mdsrec {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"mdsrec {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"mdsrec {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"mdsrec {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
