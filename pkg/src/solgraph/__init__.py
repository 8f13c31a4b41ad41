"""solgraph: aqueous solubility (log S) prediction from SMILES.

Self-contained pipeline: SMILES parsing and chemical perception, graph
featurization, a graph-convolution / attention / recurrent regressor on a
small reverse-mode autodiff engine, cross-validated training and two
feature-importance procedures.
"""

from .data import LabelScaler, kfold, load_csv
from .estimator import MoleculeFeaturizer, SolubilityRegressor
from .featurize import (
    EDGE_FEATURE_DIM,
    NODE_FEATURE_DIM,
    MoleculeGraph,
    build_graph,
    read_feat_file,
    write_feat_file,
)
from .model import ModelConfig, ModelParams, load_checkpoint, save_checkpoint
from .smiles import Molecule, SmilesError, parse, tokenize
from .train import TrainConfig, cross_validate, evaluate, train_one

__all__ = [
    "parse",
    "tokenize",
    "Molecule",
    "SmilesError",
    "MoleculeGraph",
    "build_graph",
    "NODE_FEATURE_DIM",
    "EDGE_FEATURE_DIM",
    "read_feat_file",
    "write_feat_file",
    "ModelConfig",
    "ModelParams",
    "save_checkpoint",
    "load_checkpoint",
    "LabelScaler",
    "load_csv",
    "kfold",
    "TrainConfig",
    "train_one",
    "cross_validate",
    "evaluate",
    "MoleculeFeaturizer",
    "SolubilityRegressor",
]

__version__ = "0.1.0"
