"""Dataset loading, label scaling, and the 10-fold split protocol.

Input CSVs carry three columns (header names matched case-insensitively,
with common aliases, or pinned explicitly): a SMILES string, an InChIKey
treated as an opaque record key, and a log S label in log10 mol/L.

Loading never drops a row silently.  Rows that cannot become records --
missing fields, non-finite labels, SMILES our parser rejects, or a
duplicate InChIKey (keep-first policy) -- are collected as rejects with a
reason, and loading succeeds with an explicit reject count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import SplitRng
from .smiles import SmilesError, parse

__all__ = [
    "Record",
    "Reject",
    "Dataset",
    "FoldPlan",
    "LabelScaler",
    "MissingColumn",
    "EmptyDataset",
    "TooFewRecords",
    "DegenerateLabels",
    "load_csv",
    "write_rejects_csv",
    "kfold",
    "write_fold_plan",
    "load_fold_plan",
]


class MissingColumn(ValueError):
    def __init__(self, name: str, header: Sequence[str]):
        super().__init__(f"no column matching {name!r} in header {list(header)}")
        self.name = name


class EmptyDataset(ValueError):
    def __init__(self, path: str):
        super().__init__(f"{path!r} contains no data rows")
        self.path = path


class TooFewRecords(ValueError):
    def __init__(self, n: int, k: int):
        super().__init__(f"cannot split {n} records into {k} folds")
        self.n = n
        self.k = k


class DegenerateLabels(ValueError):
    def __init__(self) -> None:
        super().__init__("labels have zero variance; cannot fit a scaler")


@dataclass(frozen=True)
class Record:
    smiles: str
    inchikey: str
    log_s: float


@dataclass(frozen=True)
class Reject:
    row: int      # 1-based data-row number (header not counted)
    smiles: str
    reason: str


@dataclass
class Dataset:
    records: list[Record]
    name: str = ""
    rejects: list[Reject] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.log_s for r in self.records], dtype=np.float64)

    @property
    def smiles(self) -> list[str]:
        return [r.smiles for r in self.records]


# Aliases accepted during auto-detection, keyed by normalized header text
# (lowercased, spaces/underscores/dashes stripped).
_SMILES_ALIASES = {"smiles", "smile", "canonicalsmiles"}
_INCHIKEY_ALIASES = {"inchikey", "inchikeys", "stdinchikey"}
_LABEL_ALIASES = {"logs", "logs0", "solubility", "logsolubility", "explogs",
                  "measuredlogs", "measuredlogsolubilityinmolsperlitre"}


def _normalize(name: str) -> str:
    return "".join(c for c in name.lower() if c.isalnum())


def _find_column(header: Sequence[str], explicit: str | None,
                 aliases: set[str], what: str) -> int:
    if explicit is not None:
        for i, name in enumerate(header):
            if name.strip().lower() == explicit.strip().lower():
                return i
        raise MissingColumn(explicit, header)
    for i, name in enumerate(header):
        if _normalize(name) in aliases:
            return i
    raise MissingColumn(what, header)


def load_csv(
    path: str,
    name: str | None = None,
    smiles_col: str | None = None,
    inchikey_col: str | None = None,
    label_col: str | None = None,
) -> Dataset:
    """Load a dataset CSV; record order equals file order.

    Column flags pin exact header names; otherwise headers are matched
    case-insensitively against common aliases.  Every SMILES is parsed at
    load time so the rejects report is complete.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(path) from None
        si = _find_column(header, smiles_col, _SMILES_ALIASES, "SMILES")
        ki = _find_column(header, inchikey_col, _INCHIKEY_ALIASES, "InChIKey")
        li = _find_column(header, label_col, _LABEL_ALIASES, "logS")

        records: list[Record] = []
        rejects: list[Reject] = []
        seen_keys: dict[str, int] = {}
        row_number = 0
        for row in reader:
            row_number += 1
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) <= max(si, ki, li):
                rejects.append(Reject(row_number, "", "row has too few fields"))
                continue
            smiles = row[si].strip()
            inchikey = row[ki].strip()
            raw_label = row[li].strip()
            if not smiles or not inchikey or not raw_label:
                rejects.append(Reject(row_number, smiles, "missing required field"))
                continue
            try:
                label = float(raw_label)
            except ValueError:
                rejects.append(
                    Reject(row_number, smiles, f"unparseable label {raw_label!r}")
                )
                continue
            if not np.isfinite(label):
                rejects.append(Reject(row_number, smiles, "non-finite label"))
                continue
            try:
                parse(smiles)
            except SmilesError as exc:
                rejects.append(Reject(row_number, smiles, str(exc)))
                continue
            if inchikey in seen_keys:
                rejects.append(Reject(
                    row_number, smiles,
                    f"duplicate InChIKey of data row {seen_keys[inchikey]} (keep-first)",
                ))
                continue
            seen_keys[inchikey] = row_number
            records.append(Record(smiles, inchikey, label))

    if row_number == 0:
        raise EmptyDataset(path)
    dataset_name = name if name is not None else Path(path).stem
    return Dataset(records=records, name=dataset_name, rejects=rejects)


def write_rejects_csv(path: str, rejects: Iterable[Reject]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "smiles", "reason"])
        for r in rejects:
            writer.writerow([r.row, r.smiles, r.reason])


# ---------------------------------------------------------------------------
# Label scaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelScaler:
    """z-score scaler with population standard deviation.

    Fit only on training-split labels; metrics are always computed on
    inverted (raw log S) values.
    """

    mean: float
    std: float

    @classmethod
    def fit(cls, labels: Sequence[float] | np.ndarray) -> "LabelScaler":
        arr = np.asarray(labels, dtype=np.float64)
        std = float(arr.std())
        if arr.size < 2 or std == 0.0:
            raise DegenerateLabels()
        return cls(mean=float(arr.mean()), std=std)

    def apply(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


# ---------------------------------------------------------------------------
# Fold plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    """A disjoint cover of dataset indices by k folds."""

    folds: tuple[tuple[int, ...], ...]

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def n(self) -> int:
        return sum(len(f) for f in self.folds)

    def test_indices(self, i: int) -> np.ndarray:
        return np.array(self.folds[i], dtype=np.int64)

    def train_indices(self, i: int) -> np.ndarray:
        rest = [idx for j, fold in enumerate(self.folds) if j != i for idx in fold]
        return np.array(sorted(rest), dtype=np.int64)

    def validate(self) -> None:
        all_indices = [idx for fold in self.folds for idx in fold]
        if len(all_indices) != len(set(all_indices)):
            raise ValueError("fold plan has overlapping indices")
        if sorted(all_indices) != list(range(len(all_indices))):
            raise ValueError("fold plan does not cover indices 0..n-1 exactly")


def kfold(n_records: int, k: int = 10, seed: int = 0) -> FoldPlan:
    """Seeded shuffle plus round-robin assignment; fold sizes differ by ≤ 1."""
    if n_records < k:
        raise TooFewRecords(n_records, k)
    order = SplitRng(seed).permutation(n_records)
    folds: list[list[int]] = [[] for _ in range(k)]
    for position, index in enumerate(order):
        folds[position % k].append(int(index))
    plan = FoldPlan(tuple(tuple(sorted(f)) for f in folds))
    plan.validate()
    return plan


def write_fold_plan(path: str, plan: FoldPlan) -> None:
    """One `index,fold` line per record, ordered by index."""
    pairs = sorted(
        (idx, fold_id) for fold_id, fold in enumerate(plan.folds) for idx in fold
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("index,fold\n")
        for idx, fold_id in pairs:
            fh.write(f"{idx},{fold_id}\n")


def load_fold_plan(path: str, expected_n: int | None = None) -> FoldPlan:
    """Read an external `index,fold` file and validate the partition."""
    assignments: dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line_no == 1 and line.lower().replace(" ", "") == "index,fold":
                continue
            try:
                idx_text, fold_text = line.split(",")
                idx, fold_id = int(idx_text), int(fold_text)
            except ValueError:
                raise ValueError(
                    f"{path}:{line_no}: expected 'index,fold', got {line!r}"
                ) from None
            if idx in assignments:
                raise ValueError(f"{path}:{line_no}: index {idx} assigned twice")
            if fold_id < 0:
                raise ValueError(f"{path}:{line_no}: negative fold id")
            assignments[idx] = fold_id
    if not assignments:
        raise ValueError(f"{path!r} contains no assignments")
    k = max(assignments.values()) + 1
    folds: list[list[int]] = [[] for _ in range(k)]
    for idx, fold_id in assignments.items():
        folds[fold_id].append(idx)
    if any(not f for f in folds):
        raise ValueError("fold plan has an empty fold")
    plan = FoldPlan(tuple(tuple(sorted(f)) for f in folds))
    plan.validate()
    if expected_n is not None and plan.n != expected_n:
        raise ValueError(f"fold plan covers {plan.n} records, dataset has {expected_n}")
    return plan
