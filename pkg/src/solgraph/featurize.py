"""Numeric graph features for perceived molecules.

Each molecule becomes a MoleculeGraph: an N x 92 node-feature matrix, a
directed edge list storing every bond in both directions, and a 2E x 10
edge-feature matrix.  Feature ordering is frozen; checkpoints and
importance indices depend on it.

Node-feature row layout (92 columns):

    [0..65]   element one-hot over the 66 recognized symbols
    [66..73]  heavy-atom degree one-hot, 0-7, clamped at 7
    [74]      formal charge, raw value
    [75]      radical electron count, raw value
    [76..82]  hybridization one-hot: S, SP, SP2, SP3, SP3D, SP3D2, OTHER
    [83]      aromatic flag
    [84..88]  attached-hydrogen one-hot, 0-4, clamped at 4
    [89]      chiral flag
    [90..91]  tetrahedral parity one-hot: CCW, CW (all zero when achiral)

Edge-feature row layout (10 columns):

    [0..3]    bond-type one-hot: single, double, triple, aromatic
    [4]       conjugated flag
    [5]       in-ring flag
    [6..9]    stereo one-hot: none, any, Z, E

The module also reads and writes the ``SOLGRAPH-FEAT v1`` binary container
and a human-readable CSV export used for audits.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .smiles import (
    Atom,
    Bond,
    BondOrder,
    BondStereo,
    ELEMENT_INDEX,
    Hybridization,
    Molecule,
    Parity,
    UnknownElement,
)

__all__ = [
    "NODE_FEATURE_DIM",
    "EDGE_FEATURE_DIM",
    "FEATURE_GROUPS",
    "MoleculeGraph",
    "atom_features",
    "bond_features",
    "build_graph",
    "write_feat_file",
    "read_feat_file",
    "write_feature_csv",
]

NODE_FEATURE_DIM = 92
EDGE_FEATURE_DIM = 10

# Column spans of the node-feature groups, in layout order.  Used by the
# importance analysis and the audit export.
FEATURE_GROUPS: tuple[tuple[str, int, int], ...] = (
    ("Symbol", 0, 66),
    ("Degree", 66, 74),
    ("FormalCharge", 74, 75),
    ("Electrons", 75, 76),
    ("Hybridization", 76, 83),
    ("Aromatic", 83, 84),
    ("Hydrogen", 84, 89),
    ("Chirality", 89, 90),
    ("ChiralityType", 90, 92),
)

_HYBRIDIZATION_SLOT = {
    Hybridization.S: 0,
    Hybridization.SP: 1,
    Hybridization.SP2: 2,
    Hybridization.SP3: 3,
    Hybridization.SP3D: 4,
    Hybridization.SP3D2: 5,
    Hybridization.OTHER: 6,
}

_BOND_TYPE_SLOT = {
    BondOrder.SINGLE: 0,
    BondOrder.DOUBLE: 1,
    BondOrder.TRIPLE: 2,
    BondOrder.AROMATIC: 3,
}

_STEREO_SLOT = {
    BondStereo.NONE: 0,
    BondStereo.ANY: 1,
    BondStereo.Z: 2,
    BondStereo.E: 3,
}

_FEAT_MAGIC = b"SOLGRAPH-FEAT v1\n"


@dataclass
class MoleculeGraph:
    """Numeric tensors for one molecule.

    ``edge_index`` stores each undirected bond as two directed entries at
    adjacent columns 2k and 2k+1 with identical feature rows.  Node order
    equals SMILES appearance order, which is also the sequence order
    consumed by the recurrent stage of the model.
    """

    node_features: np.ndarray  # (N, 92) float32
    edge_index: np.ndarray     # (2, 2E) int64
    edge_features: np.ndarray  # (2E, 10) float32
    source_smiles: str = ""
    label: float | None = None

    @property
    def num_atoms(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_directed_edges(self) -> int:
        return self.edge_index.shape[1]

    @property
    def atom_order(self) -> np.ndarray:
        """Sequence order of atoms for the recurrent stage (appearance order)."""
        return np.arange(self.num_atoms, dtype=np.int64)


def atom_features(atom: Atom, attached_h: int | None = None) -> np.ndarray:
    """Encode one perceived atom as a 92-entry float32 vector.

    ``attached_h`` overrides the hydrogen count; when omitted the atom's
    implicit count is used, which is correct unless the molecule carries
    explicit hydrogen atoms as neighbors.
    """
    vec = np.zeros(NODE_FEATURE_DIM, dtype=np.float32)
    slot = ELEMENT_INDEX.get(atom.element)
    if slot is None:
        raise UnknownElement(atom.element)
    vec[slot] = 1.0
    vec[66 + min(atom.degree, 7)] = 1.0
    vec[74] = float(atom.formal_charge)
    vec[75] = float(atom.radical_electrons)
    vec[76 + _HYBRIDIZATION_SLOT[atom.hybridization]] = 1.0
    vec[83] = 1.0 if atom.aromatic else 0.0
    h = atom.implicit_h if attached_h is None else attached_h
    vec[84 + min(h, 4)] = 1.0
    if atom.chiral:
        vec[89] = 1.0
        vec[90 if atom.parity is Parity.CCW else 91] = 1.0
    return vec


def bond_features(bond: Bond) -> np.ndarray:
    """Encode one perceived bond as a 10-entry float32 vector."""
    vec = np.zeros(EDGE_FEATURE_DIM, dtype=np.float32)
    vec[_BOND_TYPE_SLOT[bond.order]] = 1.0
    vec[4] = 1.0 if bond.conjugated else 0.0
    vec[5] = 1.0 if bond.in_ring else 0.0
    vec[6 + _STEREO_SLOT[bond.stereo]] = 1.0
    return vec


def build_graph(mol: Molecule, label: float | None = None) -> MoleculeGraph:
    """Assemble the full numeric graph for one molecule.

    Both directions of every bond are emitted at adjacent edge-list
    positions with the same feature row.
    """
    n = len(mol.atoms)
    nodes = np.zeros((n, NODE_FEATURE_DIM), dtype=np.float32)
    for i, atom in enumerate(mol.atoms):
        nodes[i] = atom_features(atom, attached_h=mol.total_h(i))

    e = len(mol.bonds)
    index = np.zeros((2, 2 * e), dtype=np.int64)
    edges = np.zeros((2 * e, EDGE_FEATURE_DIM), dtype=np.float32)
    for k, bond in enumerate(mol.bonds):
        row = bond_features(bond)
        index[:, 2 * k] = (bond.u, bond.v)
        index[:, 2 * k + 1] = (bond.v, bond.u)
        edges[2 * k] = row
        edges[2 * k + 1] = row

    return MoleculeGraph(
        node_features=nodes,
        edge_index=index,
        edge_features=edges,
        source_smiles=mol.source,
        label=label,
    )


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------
#
# Layout after the magic line, all integers little-endian:
#   uint32  record count
#   per record:
#     uint32  SMILES byte length, then that many UTF-8 bytes
#     uint8   label-present flag; float32 label when the flag is 1
#     uint32  N (atoms), uint32 E (directed edges)
#     N*92  float32   node features, row-major
#     2*E   int64     edge index, row-major
#     E*10  float32   edge features, row-major

def _write_matrix(fh: BinaryIO, arr: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_exact(fh: BinaryIO, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"truncated feature file: wanted {count} bytes, got {len(data)}")
    return data


def write_feat_file(path: str, graphs: Iterable[MoleculeGraph]) -> int:
    """Write graphs to the binary container.  Returns the record count."""
    graphs = list(graphs)
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<I", len(graphs)))
        for g in graphs:
            smiles = g.source_smiles.encode("utf-8")
            fh.write(struct.pack("<I", len(smiles)))
            fh.write(smiles)
            if g.label is None:
                fh.write(struct.pack("<B", 0))
            else:
                fh.write(struct.pack("<Bf", 1, g.label))
            fh.write(struct.pack("<II", g.num_atoms, g.num_directed_edges))
            _write_matrix(fh, g.node_features, "<f4")
            _write_matrix(fh, g.edge_index, "<i8")
            _write_matrix(fh, g.edge_features, "<f4")
    return len(graphs)


def read_feat_file(path: str) -> list[MoleculeGraph]:
    """Read a binary container back into MoleculeGraph values."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_FEAT_MAGIC))
        if magic != _FEAT_MAGIC:
            raise ValueError(f"{path!r} is not a SOLGRAPH-FEAT v1 file")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        graphs: list[MoleculeGraph] = []
        for _ in range(count):
            (slen,) = struct.unpack("<I", _read_exact(fh, 4))
            smiles = _read_exact(fh, slen).decode("utf-8")
            (flag,) = struct.unpack("<B", _read_exact(fh, 1))
            label = None
            if flag:
                (label,) = struct.unpack("<f", _read_exact(fh, 4))
            n, e = struct.unpack("<II", _read_exact(fh, 8))
            nodes = np.frombuffer(
                _read_exact(fh, n * NODE_FEATURE_DIM * 4), dtype="<f4"
            ).reshape(n, NODE_FEATURE_DIM).copy()
            index = np.frombuffer(
                _read_exact(fh, 2 * e * 8), dtype="<i8"
            ).reshape(2, e).copy()
            edges = np.frombuffer(
                _read_exact(fh, e * EDGE_FEATURE_DIM * 4), dtype="<f4"
            ).reshape(e, EDGE_FEATURE_DIM).copy()
            graphs.append(MoleculeGraph(nodes, index, edges, smiles, label))
    return graphs


def write_feature_csv(path: str, graphs: Sequence[MoleculeGraph]) -> None:
    """Human-readable audit export: one row per atom with all 92 columns."""
    header = ["molecule", "smiles", "atom"]
    for name, lo, hi in FEATURE_GROUPS:
        width = hi - lo
        if width == 1:
            header.append(name)
        else:
            header.extend(f"{name}_{j}" for j in range(width))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for m, g in enumerate(graphs):
            for i in range(g.num_atoms):
                row = [m, g.source_smiles, i]
                row.extend(format(v, "g") for v in g.node_features[i])
                writer.writerow(row)
