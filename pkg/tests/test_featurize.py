"""Feature-vector layout and binary container tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from solgraph.featurize import (
    EDGE_FEATURE_DIM,
    FEATURE_GROUPS,
    NODE_FEATURE_DIM,
    atom_features,
    bond_features,
    build_graph,
    read_feat_file,
    write_feat_file,
    write_feature_csv,
)
from solgraph.smiles import ELEMENT_INDEX, Atom, BondOrder, UnknownElement, parse

# A small pool of parseable, structurally varied molecules for property tests.
MOLECULES = [
    "C", "CCO", "c1ccccc1", "CC(=O)O", "C/C=C/C", "C#N", "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
    "c1cc[nH]c1", "[NH4+]", "C[C@H](N)C(=O)O", "FS(F)(F)(F)(F)F", "C1CC2CCC1CC2",
    "CN1C=NC2=C1C(=O)N(C)C(=O)N2C",
]


class TestAtomFeatures:
    def test_dimension(self):
        vec = atom_features(parse("C").atoms[0])
        assert vec.shape == (NODE_FEATURE_DIM,)
        assert vec.dtype == np.float32

    def test_methane_carbon(self):
        vec = atom_features(parse("C").atoms[0])
        assert vec[ELEMENT_INDEX["C"]] == 1.0
        assert vec[66 + 0] == 1.0        # degree 0
        assert vec[74] == 0.0            # charge
        assert vec[75] == 0.0            # radicals
        assert vec[76 + 3] == 1.0        # SP3
        assert vec[83] == 0.0            # not aromatic
        assert vec[84 + 4] == 1.0        # 4 hydrogens
        assert vec[89] == 0.0 and vec[90] == 0.0 and vec[91] == 0.0

    def test_benzene_carbon_five_nonzero(self):
        mol = parse("c1ccccc1")
        vec = atom_features(mol.atoms[0], attached_h=mol.total_h(0))
        assert vec[ELEMENT_INDEX["C"]] == 1.0
        assert vec[66 + 2] == 1.0        # degree 2
        assert vec[76 + 2] == 1.0        # SP2
        assert vec[83] == 1.0            # aromatic
        assert vec[84 + 1] == 1.0        # 1 hydrogen
        assert int(np.count_nonzero(vec)) == 5

    def test_acetate_oxygen_charge(self):
        mol = parse("CC(=O)[O-]")
        vec = atom_features(mol.atoms[3], attached_h=mol.total_h(3))
        assert vec[ELEMENT_INDEX["O"]] == 1.0
        assert vec[74] == -1.0
        assert vec[84 + 0] == 1.0        # no hydrogens

    def test_chiral_parity_slots(self):
        mol = parse("C[C@H](N)C(=O)O")
        center = next(i for i, a in enumerate(mol.atoms) if a.chiral)
        vec = atom_features(mol.atoms[center], attached_h=mol.total_h(center))
        assert vec[89] == 1.0
        assert vec[90] == 1.0 and vec[91] == 0.0
        mol2 = parse("C[C@@H](N)C(=O)O")
        vec2 = atom_features(mol2.atoms[center], attached_h=mol2.total_h(center))
        assert vec2[90] == 0.0 and vec2[91] == 1.0

    def test_degree_clamped_at_seven(self):
        a = Atom("C")
        a.degree = 11
        assert atom_features(a)[66 + 7] == 1.0

    def test_h_count_clamped_at_four(self):
        a = Atom("C")
        assert atom_features(a, attached_h=9)[84 + 4] == 1.0

    def test_radical_entry(self):
        vec = atom_features(parse("[CH3]").atoms[0], attached_h=3)
        assert vec[75] == 1.0

    def test_unknown_element_rejected(self):
        with pytest.raises(UnknownElement):
            atom_features(Atom("Xx"))

    @pytest.mark.parametrize("smiles", MOLECULES)
    def test_one_hot_discipline(self, smiles):
        mol = parse(smiles)
        for i, atom in enumerate(mol.atoms):
            vec = atom_features(atom, attached_h=mol.total_h(i))
            assert vec[0:66].sum() == 1.0          # element
            assert vec[66:74].sum() == 1.0         # degree
            assert vec[76:83].sum() == 1.0         # hybridization
            assert vec[84:89].sum() == 1.0         # hydrogens
            assert vec[90:92].sum() == vec[89]     # parity mirrors chiral flag


class TestBondFeatures:
    def test_dimension(self):
        vec = bond_features(parse("CC").bonds[0])
        assert vec.shape == (EDGE_FEATURE_DIM,)

    def test_ethane_default_bond(self):
        vec = bond_features(parse("CC").bonds[0])
        assert vec[0] == 1.0             # single
        assert vec[4] == 0.0 and vec[5] == 0.0
        assert vec[6] == 1.0             # stereo NONE

    def test_benzene_bond(self):
        vec = bond_features(parse("c1ccccc1").bonds[0])
        assert vec[3] == 1.0             # aromatic type
        assert vec[4] == 1.0 and vec[5] == 1.0
        assert vec[6] == 1.0

    def test_trans_2_butene_double(self):
        mol = parse("C/C=C/C")
        double = next(b for b in mol.bonds if b.order is BondOrder.DOUBLE)
        vec = bond_features(double)
        assert vec[1] == 1.0             # double
        assert vec[9] == 1.0             # stereo E

    def test_triple_bond_slot(self):
        mol = parse("C#N")
        assert bond_features(mol.bonds[0])[2] == 1.0

    @pytest.mark.parametrize("smiles", MOLECULES)
    def test_one_hot_discipline(self, smiles):
        for b in parse(smiles).bonds:
            vec = bond_features(b)
            assert vec[0:4].sum() == 1.0
            assert vec[6:10].sum() == 1.0
            assert set(np.unique(vec)) <= {0.0, 1.0}


class TestBuildGraph:
    def test_single_atom(self):
        g = build_graph(parse("C"))
        assert g.node_features.shape == (1, 92)
        assert g.edge_index.shape == (2, 0)
        assert g.edge_features.shape == (0, 10)
        assert g.num_atoms == 1

    def test_ethanol_shapes(self):
        g = build_graph(parse("CCO"))
        assert g.node_features.shape == (3, 92)
        assert g.edge_index.shape == (2, 4)
        assert g.edge_features.shape == (4, 10)

    def test_benzene_shapes_and_uniform_edges(self):
        g = build_graph(parse("c1ccccc1"))
        assert g.node_features.shape == (6, 92)
        assert g.edge_index.shape == (2, 12)
        assert np.all(g.edge_features == g.edge_features[0])

    def test_both_directions_adjacent(self):
        g = build_graph(parse("CCO"))
        for k in range(g.num_directed_edges // 2):
            u, v = g.edge_index[:, 2 * k]
            v2, u2 = g.edge_index[:, 2 * k + 1]
            assert (u, v) == (u2, v2)
            assert np.array_equal(g.edge_features[2 * k], g.edge_features[2 * k + 1])

    def test_label_carried(self):
        g = build_graph(parse("CCO"), label=-0.77)
        assert g.label == pytest.approx(-0.77)
        assert build_graph(parse("CCO")).label is None

    def test_atom_order_sequence(self):
        g = build_graph(parse("CCO"))
        assert np.array_equal(g.atom_order, np.array([0, 1, 2]))

    @pytest.mark.parametrize("smiles", MOLECULES)
    def test_directed_symmetry(self, smiles):
        g = build_graph(parse(smiles))
        pairs = {}
        for k in range(g.num_directed_edges):
            u, v = g.edge_index[:, k]
            pairs.setdefault((min(u, v), max(u, v)), []).append(k)
        for ks in pairs.values():
            assert len(ks) == 2
            assert np.array_equal(g.edge_features[ks[0]], g.edge_features[ks[1]])

    def test_determinism(self):
        a = build_graph(parse("CC(=O)Oc1ccccc1C(=O)O"))
        b = build_graph(parse("CC(=O)Oc1ccccc1C(=O)O"))
        assert np.array_equal(a.node_features, b.node_features)
        assert np.array_equal(a.edge_index, b.edge_index)
        assert np.array_equal(a.edge_features, b.edge_features)

    def test_feature_groups_cover_layout(self):
        spans = sorted((lo, hi) for _, lo, hi in FEATURE_GROUPS)
        assert spans[0][0] == 0
        assert spans[-1][1] == NODE_FEATURE_DIM
        for (_, hi), (lo, _) in zip(spans, spans[1:]):
            assert hi == lo


class TestBinaryContainer:
    def _graphs(self):
        return [
            build_graph(parse(s), label=float(i) - 2.5)
            for i, s in enumerate(["CCO", "c1ccccc1", "C/C=C/C"])
        ] + [build_graph(parse("C"))]

    def test_round_trip_bit_exact(self, tmp_path):
        path = str(tmp_path / "x.feat")
        graphs = self._graphs()
        assert write_feat_file(path, graphs) == 4
        back = read_feat_file(path)
        assert len(back) == len(graphs)
        for a, b in zip(graphs, back):
            assert a.source_smiles == b.source_smiles
            assert np.array_equal(
                a.node_features.view(np.uint32), b.node_features.view(np.uint32)
            )
            assert np.array_equal(a.edge_index, b.edge_index)
            assert np.array_equal(
                a.edge_features.view(np.uint32), b.edge_features.view(np.uint32)
            )
            if a.label is None:
                assert b.label is None
            else:
                assert np.float32(a.label) == np.float32(b.label)

    def test_magic_line_present(self, tmp_path):
        path = str(tmp_path / "x.feat")
        write_feat_file(path, self._graphs())
        with open(path, "rb") as fh:
            assert fh.readline() == b"SOLGRAPH-FEAT v1\n"

    def test_wrong_magic_rejected(self, tmp_path):
        path = str(tmp_path / "bad.feat")
        with open(path, "wb") as fh:
            fh.write(b"NOT-A-FEAT-FILE\n\x00\x00\x00\x00")
        with pytest.raises(ValueError):
            read_feat_file(path)

    def test_truncated_rejected(self, tmp_path):
        path = str(tmp_path / "x.feat")
        write_feat_file(path, self._graphs())
        data = open(path, "rb").read()
        trunc = str(tmp_path / "trunc.feat")
        with open(trunc, "wb") as fh:
            fh.write(data[:-8])
        with pytest.raises(ValueError):
            read_feat_file(trunc)

    def test_empty_container(self, tmp_path):
        path = str(tmp_path / "empty.feat")
        write_feat_file(path, [])
        assert read_feat_file(path) == []

    @given(smiles_list=st.lists(st.sampled_from(MOLECULES), min_size=1, max_size=6))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, tmp_path_factory, smiles_list):
        path = str(tmp_path_factory.mktemp("feat") / "p.feat")
        graphs = [build_graph(parse(s)) for s in smiles_list]
        write_feat_file(path, graphs)
        back = read_feat_file(path)
        for a, b in zip(graphs, back):
            assert np.array_equal(a.node_features, b.node_features)
            assert np.array_equal(a.edge_index, b.edge_index)

    def test_csv_export(self, tmp_path):
        path = str(tmp_path / "audit.csv")
        graphs = self._graphs()
        write_feature_csv(path, graphs)
        lines = open(path).read().splitlines()
        total_atoms = sum(g.num_atoms for g in graphs)
        assert len(lines) == 1 + total_atoms
        header = lines[0].split(",")
        assert len(header) == 3 + NODE_FEATURE_DIM
        assert header[:3] == ["molecule", "smiles", "atom"]
        assert "FormalCharge" in header
