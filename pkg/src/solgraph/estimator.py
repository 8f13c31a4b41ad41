"""Scikit-learn style wrappers: a SMILES-to-graph transformer and a regressor.

These adapt the functional training pipeline to the fit/transform/predict
protocol so the model composes with scikit-learn tooling (pipelines,
cross_val_score, grid search over get_params names).  X is a sequence of
SMILES strings throughout; the regressor returns raw log S.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import SplitRng
from .data import LabelScaler
from .featurize import MoleculeGraph, build_graph
from .model import ModelParams, load_checkpoint, save_checkpoint
from .smiles import parse
from .train import TrainConfig, predict as _predict_graphs, train_one

__all__ = ["MoleculeFeaturizer", "SolubilityRegressor"]


def _as_smiles_list(X) -> list[str]:
    if isinstance(X, str):
        raise TypeError("X must be a sequence of SMILES strings, not a single string")
    items = list(X)
    if not items:
        raise ValueError("X must contain at least one SMILES string")
    for i, item in enumerate(items):
        if not isinstance(item, str):
            raise TypeError(f"X[{i}] is {type(item).__name__}, expected str")
    return items


def _as_graphs(X, y=None) -> list[MoleculeGraph]:
    if isinstance(X, str):
        raise TypeError("X must be a sequence of SMILES strings, not a single string")
    items = list(X)
    if items and isinstance(items[0], MoleculeGraph):
        graphs = items
    else:
        graphs = [build_graph(parse(s)) for s in _as_smiles_list(items)]
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 1 or len(y) != len(graphs):
            raise ValueError(
                f"y must be a 1-d array of length {len(graphs)}, got shape {y.shape}"
            )
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite values")
        graphs = [
            MoleculeGraph(g.node_features, g.edge_index, g.edge_features,
                          g.source_smiles, float(label))
            for g, label in zip(graphs, y)
        ]
    return graphs


class MoleculeFeaturizer(TransformerMixin, BaseEstimator):
    """Stateless transformer from SMILES strings to molecular graphs."""

    def fit(self, X, y=None):
        _as_smiles_list(X)
        self.n_features_in_ = 1
        return self

    def transform(self, X) -> list[MoleculeGraph]:
        return [build_graph(parse(s)) for s in _as_smiles_list(X)]


class SolubilityRegressor(RegressorMixin, BaseEstimator):
    """Graph neural regressor for log S with an early-stopped training loop.

    A fraction of the training set is held out for early stopping
    (``validation_fraction``; 0 reuses the training set).  ``score`` is
    R^2 via the scikit-learn mixin.
    """

    def __init__(self, lr: float = 5e-4, batch_size: int = 32,
                 epochs: int = 300, patience: int = 30, seed: int = 0,
                 hidden_dim: int = 128, transformer_depth: int = 6,
                 heads: int = 8, mlp_dim: int = 256, dropout: float = 0.2519,
                 validation_fraction: float = 0.1):
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.seed = seed
        self.hidden_dim = hidden_dim
        self.transformer_depth = transformer_depth
        self.heads = heads
        self.mlp_dim = mlp_dim
        self.dropout = dropout
        self.validation_fraction = validation_fraction

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
            patience=self.patience, seed=self.seed,
            hidden_dim=self.hidden_dim,
            transformer_depth=self.transformer_depth, heads=self.heads,
            mlp_dim=self.mlp_dim, dropout=self.dropout,
        )

    def fit(self, X, y):
        if y is None:
            raise ValueError("y is required")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(
                f"validation_fraction must be in [0, 1), got {self.validation_fraction}"
            )
        graphs = _as_graphs(X, y)
        n = len(graphs)
        if self.validation_fraction == 0.0 or n < 3:
            fit_graphs, val_graphs = graphs, graphs
            fit_ids = list(range(n))
        else:
            order = SplitRng(self.seed).permutation(n)
            val_count = max(1, int(round(n * self.validation_fraction)))
            val_count = min(val_count, n - 1)
            val_graphs = [graphs[i] for i in order[:val_count]]
            fit_graphs = [graphs[i] for i in order[val_count:]]
            fit_ids = [int(i) for i in order[val_count:]]
        result = train_one(fit_graphs, val_graphs, self._train_config(),
                           train_ids=fit_ids)
        self.params_ = result.params
        self.scaler_ = result.scaler
        self.history_ = result.history
        self.n_features_in_ = 1
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        graphs = _as_graphs(X)
        return self.scaler_.invert(
            _predict_graphs(self.params_, graphs, batch_size=self.batch_size))

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, extra={
            "scaler_mean": repr(self.scaler_.mean),
            "scaler_std": repr(self.scaler_.std),
            "batch_size": str(self.batch_size),
        })

    @classmethod
    def load(cls, path) -> "SolubilityRegressor":
        params, extra = load_checkpoint(path)
        if "scaler_mean" not in extra or "scaler_std" not in extra:
            raise ValueError(f"{path!r} lacks label-scaler entries")
        est = cls(
            hidden_dim=params.config.hidden_dim,
            transformer_depth=params.config.transformer_depth,
            heads=params.config.heads,
            mlp_dim=params.config.mlp_dim,
            dropout=params.config.dropout,
            seed=params.config.seed,
            # restored so prediction batching (and its float32 rounding)
            # matches the run that produced the checkpoint
            batch_size=int(extra.get("batch_size", 32)),
        )
        est.params_ = params
        est.scaler_ = LabelScaler(mean=float(extra["scaler_mean"]),
                                  std=float(extra["scaler_std"]))
        est.n_features_in_ = 1
        return est
