"""Command-line interface exposing the whole pipeline.

Subcommands: parse, featurize, train, cv, search, predict, evaluate,
explain-zeroing, explain-local.  Settings resolve as defaults <- config
file <- --set flags <- --seed; every directory-producing run echoes the
fully resolved configuration next to its outputs, and that file feeds
back in via --config for bit-identical reruns.

All file outputs are written to a temporary sibling and renamed into
place, so interrupted runs never leave truncated files.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or invalid
inputs), 3 numeric failure (diverged loss, degenerate fits).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    DegenerateLabels,
    LabelScaler,
    kfold,
    load_csv,
    load_fold_plan,
    write_fold_plan,
    write_rejects_csv,
)
from .featurize import build_graph, write_feat_file, write_feature_csv
from .interpret import (
    DegenerateSamples,
    local_explain,
    model_predictor,
    write_bar_data,
    write_importance_csv,
    zeroing_importance,
)
from .model import load_checkpoint, save_checkpoint
from .smiles import Molecule, SmilesError, parse
from .train import (
    ConstantTarget,
    NonFiniteLoss,
    TrainConfig,
    cross_validate,
    evaluate,
    graphs_from_dataset,
    predict as predict_graphs,
    search_hparams,
    train_one,
)
from .autodiff import SplitRng

__all__ = ["main", "dispatch", "UsageError"]


class UsageError(Exception):
    """Bad invocation or bad settings; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_FLOAT_KEYS = {"lr", "dropout"}


def _parse_config_lines(lines, source: str) -> dict:
    settings: dict = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise UsageError(f"{source}:{number}: expected key=value, got {raw!r}")
        if key not in _CONFIG_KEYS:
            raise UsageError(f"{source}:{number}: unknown config key {key!r}")
        try:
            settings[key] = float(value) if key in _FLOAT_KEYS else int(value)
        except ValueError:
            raise UsageError(
                f"{source}:{number}: bad value {value!r} for {key!r}") from None
    return settings


def resolve_train_config(args) -> TrainConfig:
    settings: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        settings.update(_parse_config_lines(text.splitlines(), str(config_path)))
    for item in getattr(args, "set", None) or []:
        settings.update(_parse_config_lines([item], "--set"))
    if getattr(args, "seed", None) is not None:
        settings["seed"] = args.seed
    try:
        return TrainConfig(**settings)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def format_config(config: TrainConfig) -> str:
    pairs = sorted(dataclasses.asdict(config).items())
    return "".join(f"{k}={v!r}\n" for k, v in pairs)


def _atomic_write(path, writer) -> None:
    """Run ``writer(tmp_path)`` then rename; no partial file survives."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _atomic_text(path, text: str) -> None:
    _atomic_write(path, lambda tmp: Path(tmp).write_text(text, encoding="utf-8"))


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(outdir: Path, text: str) -> None:
    _atomic_text(outdir / "resolved.cfg", text)


def _run_settings(**pairs) -> str:
    return "".join(f"{k}={v}\n" for k, v in sorted(pairs.items()))


# ---------------------------------------------------------------------------
# Shared input helpers
# ---------------------------------------------------------------------------

def _load_dataset(args):
    return load_csv(
        args.data,
        smiles_col=getattr(args, "smiles_col", None),
        inchikey_col=getattr(args, "inchikey_col", None),
        label_col=getattr(args, "label_col", None),
    )


def _read_smiles_lines(path) -> list[str]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line.split()[0])
    if not out:
        raise ValueError(f"{path}: no SMILES lines found")
    return out


def _gather_smiles(args) -> list[str]:
    items = list(args.smiles or [])
    if getattr(args, "infile", None):
        items.extend(_read_smiles_lines(args.infile))
    if not items:
        raise UsageError("provide --smiles or --in")
    return items


def _load_model(path):
    params, extra = load_checkpoint(path)
    if "scaler_mean" not in extra or "scaler_std" not in extra:
        raise ValueError(
            f"{path}: checkpoint lacks label-scaler entries; retrain to regenerate")
    scaler = LabelScaler(mean=float(extra["scaler_mean"]),
                         std=float(extra["scaler_std"]))
    batch_size = int(extra.get("batch_size", 64))
    return params, scaler, batch_size


def _checkpoint_extras(config: TrainConfig, scaler: LabelScaler) -> dict:
    return {
        "scaler_mean": repr(scaler.mean),
        "scaler_std": repr(scaler.std),
        "batch_size": str(config.batch_size),
    }


def _holdout_split(graphs, seed: int):
    """Carve a 10% early-stopping slice (at least one molecule)."""
    n = len(graphs)
    if n < 3:
        return list(graphs), list(graphs), list(range(n))
    order = SplitRng(seed).permutation(n)
    val_count = max(1, n // 10)
    val = [graphs[i] for i in order[:val_count]]
    fit = [graphs[i] for i in order[val_count:]]
    return fit, val, [int(i) for i in order[val_count:]]


def _write_csv_rows(path, header, rows) -> None:
    def writer(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            out.writerow(header)
            out.writerows(rows)

    _atomic_write(path, writer)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def dump_molecule(mol: Molecule) -> str:
    """Deterministic line-oriented perception dump for corpus diffing."""
    ring_atoms = {i for ring in mol.rings for i in ring}
    lines = [
        f"molecule {mol.source} atoms={len(mol.atoms)} bonds={len(mol.bonds)} "
        f"rings={len(mol.rings)}"
    ]
    for i, atom in enumerate(mol.atoms):
        parity = atom.parity.name if atom.parity is not None else "NONE"
        lines.append(
            f"atom {i} {atom.element} charge={atom.formal_charge} "
            f"aromatic={int(atom.aromatic)} degree={atom.degree} "
            f"implicit_h={atom.implicit_h} total_h={mol.total_h(i)} "
            f"radicals={atom.radical_electrons} "
            f"hybridization={atom.hybridization.name} "
            f"in_ring={int(i in ring_atoms)} chiral={int(atom.chiral)} "
            f"parity={parity}"
        )
    for bond in mol.bonds:
        lines.append(
            f"bond {bond.u} {bond.v} {bond.order.name} "
            f"conjugated={int(bond.conjugated)} in_ring={int(bond.in_ring)} "
            f"stereo={bond.stereo.name}"
        )
    for r, ring in enumerate(mol.rings):
        lines.append(f"ring {r} " + ",".join(str(i) for i in ring))
    return "\n".join(lines) + "\n"


def cmd_parse(args) -> int:
    smiles_list = _gather_smiles(args)
    dumps = [dump_molecule(parse(s)) for s in smiles_list]
    text = "".join(dumps)
    if args.out:
        _atomic_text(args.out, text)
        print(f"parsed {len(smiles_list)} molecule(s) -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_featurize(args) -> int:
    dataset = _load_dataset(args)
    pairs = [(r.smiles, r.log_s) for r in dataset.records]
    graphs = [build_graph(parse(s), label=label) for s, label in pairs]
    _atomic_write(args.out, lambda tmp: write_feat_file(tmp, graphs))
    if args.audit_csv:
        _atomic_write(args.audit_csv,
                      lambda tmp: write_feature_csv(tmp, graphs))
    if args.rejects:
        _atomic_write(args.rejects,
                      lambda tmp: write_rejects_csv(tmp, dataset.rejects))
    print(f"featurized {len(graphs)} molecule(s), rejected "
          f"{len(dataset.rejects)} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    dataset = _load_dataset(args)
    graphs = graphs_from_dataset(dataset)
    fit, val, fit_ids = _holdout_split(graphs, config.seed)
    result = train_one(fit, val, config, train_ids=fit_ids,
                       log=print if args.verbose else None)

    outdir = _outdir(args)
    _echo_config(outdir, format_config(config))
    _atomic_write(outdir / "model.ckpt",
                  lambda tmp: save_checkpoint(
                      tmp, result.params,
                      extra=_checkpoint_extras(config, result.scaler)))
    _write_csv_rows(
        outdir / "history.csv",
        ["epoch", "train_loss", "val_rmse"],
        [(e, repr(tl), repr(vr)) for e, (tl, vr) in
         enumerate(zip(result.history.train_loss, result.history.val_rmse))],
    )
    if dataset.rejects:
        _atomic_write(outdir / "rejects.csv",
                      lambda tmp: write_rejects_csv(tmp, dataset.rejects))
    best = result.history.best_epoch
    print(f"trained on {len(fit)} molecules ({len(val)} held out): best epoch "
          f"{best}, val RMSE {result.history.val_rmse[best]:.4f} -> {outdir}")
    return 0


def _resolve_plan(args, config: TrainConfig, n: int, outdir: Path | None):
    if getattr(args, "folds", None):
        return load_fold_plan(args.folds, expected_n=n)
    plan = kfold(n, k=args.k, seed=config.seed)
    if outdir is not None:
        _atomic_write(outdir / "folds.csv",
                      lambda tmp: write_fold_plan(tmp, plan))
    return plan


def cmd_cv(args) -> int:
    config = resolve_train_config(args)
    dataset = _load_dataset(args)
    graphs = graphs_from_dataset(dataset)
    outdir = _outdir(args)
    plan = _resolve_plan(args, config, len(graphs), outdir)
    result = cross_validate(graphs, plan, config,
                            log=print if args.verbose else None,
                            workers=args.workers)

    _echo_config(outdir, format_config(config))
    rows = [(str(i), str(m.n), repr(m.r2), repr(m.rmse))
            for i, m in enumerate(result.per_fold)]
    rows.append(("mean", "", repr(result.mean_r2), repr(result.mean_rmse)))
    rows.append(("std", "", repr(result.std_r2), repr(result.std_rmse)))
    _write_csv_rows(outdir / "cv_metrics.csv", ["fold", "n", "r2", "rmse"], rows)
    if dataset.rejects:
        _atomic_write(outdir / "rejects.csv",
                      lambda tmp: write_rejects_csv(tmp, dataset.rejects))
    print(f"cross-validated {plan.k} folds on {len(graphs)} molecules: "
          f"R2 {result.mean_r2:.4f} +/- {result.std_r2:.4f}, "
          f"RMSE {result.mean_rmse:.4f} +/- {result.std_rmse:.4f} -> {outdir}")
    return 0


def cmd_search(args) -> int:
    base = resolve_train_config(args)
    dataset = _load_dataset(args)
    graphs = graphs_from_dataset(dataset)
    outdir = _outdir(args)
    plan = _resolve_plan(args, base, len(graphs), outdir)
    best, trial_log = search_hparams(
        graphs, plan, base, trials=args.trials,
        folds_per_trial=args.folds_per_trial, seed=base.seed,
        log=print if args.verbose else None)

    _echo_config(outdir, format_config(base))
    header = ["trial", "lr", "hidden_dim", "dropout", "transformer_depth",
              "heads", "batch_size", "mean_rmse", "status"]
    _write_csv_rows(outdir / "trials.csv", header,
                    [[repr(e[k]) if isinstance(e[k], float) else e[k]
                      for k in header] for e in trial_log])
    if best is None:
        raise NonFiniteLoss(0, 0, float("nan"))
    _atomic_text(outdir / "best.cfg", format_config(best))
    ok = sum(1 for e in trial_log if e["status"] == "ok")
    print(f"searched {args.trials} trial(s) ({ok} ok): best mean RMSE "
          f"{min(e['mean_rmse'] for e in trial_log if e['status'] == 'ok'):.4f}"
          f" -> {outdir / 'best.cfg'}")
    return 0


def cmd_predict(args) -> int:
    params, scaler, batch_size = _load_model(args.checkpoint)
    smiles_list = _gather_smiles(args)
    graphs = [build_graph(parse(s)) for s in smiles_list]
    preds = scaler.invert(predict_graphs(params, graphs, batch_size=batch_size))
    for smiles, value in zip(smiles_list, preds):
        print(f"{smiles},{value:.4f}")
    if args.out:
        _write_csv_rows(args.out, ["smiles", "predicted_log_s"],
                        [(s, repr(float(v)))
                         for s, v in zip(smiles_list, preds)])
    return 0


def cmd_evaluate(args) -> int:
    params, scaler, _ = _load_model(args.checkpoint)
    dataset = _load_dataset(args)
    graphs = graphs_from_dataset(dataset)
    report = evaluate(params, scaler, graphs)

    outdir = _outdir(args)
    _echo_config(outdir, _run_settings(checkpoint=args.checkpoint,
                                       data=args.data))
    _write_csv_rows(outdir / "metrics.csv",
                    ["r2", "rmse", "n", "mean_error"],
                    [(repr(report.metrics.r2), repr(report.metrics.rmse),
                      report.metrics.n, repr(report.mean_error))])
    _write_csv_rows(outdir / "predictions.csv",
                    ["smiles", "actual", "predicted", "error"],
                    [(s, repr(y), repr(p), repr(e))
                     for s, y, p, e in report.rows])
    _write_csv_rows(
        outdir / "error_histogram.csv",
        ["bin_lo", "bin_hi", "count"],
        [(repr(float(lo)), repr(float(hi)), int(c))
         for lo, hi, c in zip(report.histogram_edges[:-1],
                              report.histogram_edges[1:],
                              report.histogram_counts)],
    )
    if dataset.rejects:
        _atomic_write(outdir / "rejects.csv",
                      lambda tmp: write_rejects_csv(tmp, dataset.rejects))
    print(f"evaluated {report.metrics.n} molecules: R2 {report.metrics.r2:.4f}"
          f", RMSE {report.metrics.rmse:.4f} -> {outdir}")
    return 0


def cmd_explain_zeroing(args) -> int:
    params, scaler, batch_size = _load_model(args.checkpoint)
    dataset = _load_dataset(args)
    graphs = graphs_from_dataset(dataset)
    report = zeroing_importance(
        graphs, model_predictor(params, scaler, batch_size=batch_size),
        dataset_name=dataset.name, checkpoint_id=str(args.checkpoint),
        workers=args.workers)

    outdir = _outdir(args)
    _echo_config(outdir, _run_settings(checkpoint=args.checkpoint,
                                       data=args.data, workers=args.workers))
    _atomic_write(outdir / "importance.csv",
                  lambda tmp: write_importance_csv(tmp, report))
    if args.bar_file:
        _atomic_write(outdir / "bars.csv",
                      lambda tmp: write_bar_data(tmp, report.entries))
    top = report.entries[0]
    print(f"ranked {len(report.entries)} feature groups on "
          f"{len(graphs)} molecules: top {top.feature} "
          f"(MAPD {top.score:.4f}) -> {outdir}")
    return 0


def cmd_explain_local(args) -> int:
    params, scaler, batch_size = _load_model(args.checkpoint)
    graph = build_graph(parse(args.smiles))
    explanation = local_explain(
        graph, model_predictor(params, scaler, batch_size=batch_size),
        n_samples=args.samples, top_k=args.top_k, seed=args.seed,
        kernel_width=args.kernel_width, flip_probability=args.flip_probability,
        ridge=args.ridge)

    outdir = _outdir(args)
    _echo_config(outdir, _run_settings(
        checkpoint=args.checkpoint, smiles=args.smiles, samples=args.samples,
        top_k=args.top_k, seed=args.seed, kernel_width=args.kernel_width,
        flip_probability=args.flip_probability, ridge=args.ridge))
    _write_csv_rows(outdir / "local.csv", ["feature", "score", "sign"],
                    [(e.feature, repr(e.score), "+" if e.score >= 0 else "-")
                     for e in explanation.entries])
    if args.bar_file:
        _atomic_write(outdir / "bars.csv",
                      lambda tmp: write_bar_data(tmp, explanation.entries))
    top = explanation.entries[0]
    print(f"explained {args.smiles} with {explanation.n_samples} samples: "
          f"top {top.feature} ({top.score:+.4f}) -> {outdir}")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="solgraph",
                     description="Aqueous solubility prediction from SMILES.")
    sub = parser.add_subparsers(dest="command")

    data_flags = _Parser(add_help=False)
    data_flags.add_argument("--data", required=True, help="dataset CSV path")
    data_flags.add_argument("--smiles-col", help="override SMILES column name")
    data_flags.add_argument("--inchikey-col", help="override InChIKey column name")
    data_flags.add_argument("--label-col", help="override label column name")

    config_flags = _Parser(add_help=False)
    config_flags.add_argument("--config", help="key=value config file")
    config_flags.add_argument("--set", action="append", metavar="KEY=VALUE",
                              help="override one config key (repeatable)")
    config_flags.add_argument("--seed", type=int, help="override the seed")
    config_flags.add_argument("--verbose", action="store_true",
                              help="print per-epoch/per-fold progress")

    smiles_flags = _Parser(add_help=False)
    smiles_flags.add_argument("--smiles", action="append",
                              help="one SMILES string (repeatable)")
    smiles_flags.add_argument("--in", dest="infile",
                              help="file with one SMILES per line")

    p = sub.add_parser("parse", parents=[smiles_flags],
                       help="print the perceived molecular graph")
    p.add_argument("--out", help="write the dump to a file instead of stdout")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("featurize", parents=[data_flags],
                       help="write graph features in the binary container")
    p.add_argument("--out", required=True, help="output feature file")
    p.add_argument("--audit-csv", help="also write per-atom features as CSV")
    p.add_argument("--rejects", help="write the reject report CSV here")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", parents=[data_flags, config_flags],
                       help="train one model with an early-stopping holdout")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", parents=[data_flags, config_flags],
                       help="k-fold cross-validation")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--folds", help="existing index,fold plan file")
    p.add_argument("--k", type=int, default=10, help="fold count (default 10)")
    p.add_argument("--workers", type=int, default=1,
                   help="train folds in this many threads")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("search", parents=[data_flags, config_flags],
                       help="random hyperparameter search")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--folds", help="existing index,fold plan file")
    p.add_argument("--k", type=int, default=10, help="fold count (default 10)")
    p.add_argument("--trials", type=int, default=20, help="number of trials")
    p.add_argument("--folds-per-trial", type=int, default=2,
                   help="abbreviated CV width per trial")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("predict", parents=[smiles_flags],
                       help="predict log S for molecules")
    p.add_argument("--checkpoint", required=True, help="trained model file")
    p.add_argument("--out", help="also write predictions CSV here")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[data_flags],
                       help="metrics, per-molecule errors, error histogram")
    p.add_argument("--checkpoint", required=True, help="trained model file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain-zeroing", parents=[data_flags],
                       help="rank feature groups by zeroing importance")
    p.add_argument("--checkpoint", required=True, help="trained model file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bar-file", action="store_true",
                   help="also write bar-chart data")
    p.add_argument("--workers", type=int, default=1,
                   help="score feature columns in this many threads")
    p.set_defaults(func=cmd_explain_zeroing)

    p = sub.add_parser("explain-local",
                       help="local surrogate explanation for one molecule")
    p.add_argument("--checkpoint", required=True, help="trained model file")
    p.add_argument("--smiles", required=True, help="molecule to explain")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--samples", type=int, default=1000,
                   help="number of perturbation samples")
    p.add_argument("--top-k", type=int, default=15,
                   help="number of reported conditions")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--kernel-width", type=float, default=0.25)
    p.add_argument("--flip-probability", type=float, default=0.5)
    p.add_argument("--ridge", type=float, default=1e-3)
    p.add_argument("--bar-file", action="store_true",
                   help="also write bar-chart data")
    p.set_defaults(func=cmd_explain_local)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            raise UsageError("a subcommand is required (see --help)")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteLoss, ConstantTarget, DegenerateSamples,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (SmilesError, DegenerateLabels, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())
