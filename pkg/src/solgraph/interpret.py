"""Feature-importance procedures: feature zeroing and a local linear surrogate.

Both procedures treat the model as a black-box predictor over graphs, so a
fitted checkpoint and a synthetic reference model run through the same code
path.  ``model_predictor`` adapts trained parameters to that interface.

Zeroing importance ranks feature groups by Mean Absolute Prediction
Difference (MAPD): each node-feature column is zeroed independently across
the dataset, the mean absolute prediction shift is recorded, and the
per-column scores are averaged within each group.  The element one-hot
block is ranked per element in a separate section.

The local surrogate explains one molecule: molecule-level binary
conditions (element presence, aromaticity, degree/H-count buckets, ...)
are switched off at random in feature space, and a kernel-weighted ridge
regression from condition vectors to model predictions yields signed
per-condition effects.  Perturbations never re-parse SMILES, so every
sample is well-formed even when chemically unrealizable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .autodiff import SplitRng
from .data import LabelScaler
from .featurize import FEATURE_GROUPS, NODE_FEATURE_DIM, MoleculeGraph
from .model import ModelParams
from .smiles import ELEMENTS

__all__ = [
    "DegenerateSamples",
    "ImportanceEntry",
    "ImportanceReport",
    "Condition",
    "LocalExplanation",
    "model_predictor",
    "zeroing_importance",
    "molecule_conditions",
    "local_explain",
    "write_importance_csv",
    "write_bar_data",
]

PredictFn = Callable[[Sequence[MoleculeGraph]], np.ndarray]


class DegenerateSamples(ValueError):
    def __init__(self) -> None:
        super().__init__("all perturbation samples are identical; cannot fit a surrogate")


@dataclass(frozen=True)
class ImportanceEntry:
    feature: str
    score: float
    method: str  # "MAPD" or "LOCAL"


@dataclass
class ImportanceReport:
    entries: list[ImportanceEntry]         # group ranking, descending |score|
    symbol_entries: list[ImportanceEntry]  # per-element ranking, separate section
    metadata: dict[str, str]


def model_predictor(params: ModelParams, scaler: LabelScaler | None = None,
                    batch_size: int = 64) -> PredictFn:
    """Adapt trained parameters to a graphs -> predictions callable.

    With a scaler the outputs are de-normalized log S; without one they stay
    in the model's output space.
    """
    from .train import predict  # deferred: train imports featurize like we do

    def fn(graphs: Sequence[MoleculeGraph]) -> np.ndarray:
        out = predict(params, graphs, batch_size=batch_size)
        return scaler.invert(out) if scaler is not None else out

    return fn


def _zero_column(graph: MoleculeGraph, columns: Sequence[int]) -> MoleculeGraph:
    modified = graph.node_features.copy()
    modified[:, list(columns)] = 0.0
    return replace(graph, node_features=modified)


def zeroing_importance(graphs: Sequence[MoleculeGraph], predict_fn: PredictFn,
                       dataset_name: str = "", checkpoint_id: str = "",
                       workers: int = 1) -> ImportanceReport:
    """Rank feature groups by MAPD under per-column zeroing.

    Columns that are zero across the whole dataset score exactly 0 without
    a model call.  Element columns are reported per element (absent
    elements omitted; their score is identically 0).  ``workers`` > 1
    scores columns in a thread pool; ``predict_fn`` must then be safe to
    call concurrently (the built-in model predictor is).
    """
    if not graphs:
        raise ValueError("zeroing importance requires at least one molecule")
    base = np.asarray(predict_fn(graphs), dtype=np.float64)
    active = np.zeros(NODE_FEATURE_DIM, dtype=bool)
    for g in graphs:
        active |= np.any(g.node_features != 0, axis=0)

    def score_column(col: int) -> float:
        zeroed = [_zero_column(g, (col,)) for g in graphs]
        preds = np.asarray(predict_fn(zeroed), dtype=np.float64)
        return float(np.mean(np.abs(preds - base)))

    columns = [c for c in range(NODE_FEATURE_DIM) if active[c]]
    column_scores = np.zeros(NODE_FEATURE_DIM)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            for col, score in zip(columns, pool.map(score_column, columns)):
                column_scores[col] = score
    else:
        for col in columns:
            column_scores[col] = score_column(col)

    entries = []
    symbol_entries = []
    for name, lo, hi in FEATURE_GROUPS:
        if name == "Symbol":
            for col in range(lo, hi):
                if active[col]:
                    symbol_entries.append(
                        ImportanceEntry(ELEMENTS[col - lo],
                                        column_scores[col], "MAPD"))
        else:
            entries.append(
                ImportanceEntry(name, float(column_scores[lo:hi].mean()), "MAPD"))
    entries.sort(key=lambda e: -abs(e.score))
    symbol_entries.sort(key=lambda e: -abs(e.score))
    return ImportanceReport(
        entries=entries,
        symbol_entries=symbol_entries,
        metadata={
            "dataset": dataset_name,
            "checkpoint": checkpoint_id,
            "molecules": str(len(graphs)),
            "method": "MAPD",
        },
    )


# ---------------------------------------------------------------------------
# Local surrogate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Condition:
    """One molecule-level binary statement tied to the node-feature columns
    that get zeroed when it is switched off."""

    name: str
    columns: tuple[int, ...]


_HYBRIDIZATION_NAMES = ("S", "SP", "SP2", "SP3", "SP3D", "SP3D2", "OTHER")


def molecule_conditions(graph: MoleculeGraph) -> list[Condition]:
    """Binary conditions present in this molecule, in column order."""
    active = np.any(graph.node_features != 0, axis=0)
    conditions: list[Condition] = []
    for col in range(66):
        if active[col]:
            conditions.append(Condition(f"has {ELEMENTS[col]}", (col,)))
    for k in range(8):
        if active[66 + k]:
            conditions.append(Condition(f"has degree-{k} atom", (66 + k,)))
    if active[74]:
        conditions.append(Condition("has formal charge", (74,)))
    if active[75]:
        conditions.append(Condition("has radical electrons", (75,)))
    for slot, name in enumerate(_HYBRIDIZATION_NAMES):
        if active[76 + slot]:
            conditions.append(Condition(f"has {name} atom", (76 + slot,)))
    if active[83]:
        conditions.append(Condition("has aromatic atoms", (83,)))
    for k in range(5):
        if active[84 + k]:
            conditions.append(Condition(f"has atom with {k} H", (84 + k,)))
    if active[89] or active[90] or active[91]:
        conditions.append(Condition("has chiral centers", (89, 90, 91)))
    return conditions


@dataclass
class LocalExplanation:
    entries: list[ImportanceEntry]  # top-k by |coefficient|, signed
    conditions: list[str]
    coefficients: np.ndarray
    intercept: float
    n_samples: int
    seed: int


def local_explain(graph: MoleculeGraph, predict_fn: PredictFn,
                  n_samples: int = 1000, top_k: int = 15, seed: int = 0,
                  flip_probability: float = 0.5, kernel_width: float = 0.25,
                  ridge: float = 1e-3) -> LocalExplanation:
    """Fit a kernel-weighted ridge surrogate around one molecule.

    Samples switch each condition off independently (probability
    ``flip_probability``); sample weight is exp(-d^2 / width^2) with d the
    fraction of switched-off conditions.  Positive coefficients mean the
    condition increases the predicted solubility.
    """
    if n_samples < 50:
        raise ValueError(f"n_samples must be >= 50, got {n_samples}")
    conditions = molecule_conditions(graph)
    m = len(conditions)
    rng = SplitRng(seed)
    on = rng.uniform((n_samples, m)) >= flip_probability
    if m == 0 or np.unique(on, axis=0).shape[0] < 2:
        raise DegenerateSamples()

    perturbed = []
    for row in on:
        columns = [c for cond, keep in zip(conditions, row) if not keep
                   for c in cond.columns]
        perturbed.append(_zero_column(graph, columns) if columns else graph)
    predictions = np.asarray(predict_fn(perturbed), dtype=np.float64)

    distance = 1.0 - on.mean(axis=1)
    weights = np.exp(-(distance ** 2) / (kernel_width ** 2))

    design = np.hstack([np.ones((n_samples, 1)), on.astype(np.float64)])
    weighted = design * weights[:, None]
    normal = design.T @ weighted
    penalty = np.eye(m + 1) * ridge
    penalty[0, 0] = 0.0  # the intercept is not shrunk
    beta = np.linalg.solve(normal + penalty, design.T @ (weights * predictions))

    coefficients = beta[1:]
    order = np.argsort(-np.abs(coefficients))[:top_k]
    entries = [
        ImportanceEntry(conditions[i].name, float(coefficients[i]), "LOCAL")
        for i in order
    ]
    return LocalExplanation(
        entries=entries,
        conditions=[c.name for c in conditions],
        coefficients=coefficients,
        intercept=float(beta[0]),
        n_samples=n_samples,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------

def write_importance_csv(path: str, report: ImportanceReport) -> None:
    """`feature,score,sign,method` rows; group ranking first, then elements
    prefixed with `Symbol:`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "score", "sign", "method"])
        for entry in report.entries:
            writer.writerow([entry.feature, repr(entry.score),
                             "+" if entry.score >= 0 else "-", entry.method])
        for entry in report.symbol_entries:
            writer.writerow([f"Symbol:{entry.feature}", repr(entry.score),
                             "+" if entry.score >= 0 else "-", entry.method])


def write_bar_data(path: str, entries: Sequence[ImportanceEntry]) -> None:
    """`feature,signed_score` pairs for external horizontal-bar plotting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "signed_score"])
        for entry in entries:
            writer.writerow([entry.feature, repr(entry.score)])
