#!/usr/bin/env python3
"""Generate the per-atom parser reference table for a SMILES corpus.

Prefers RDKit when importable.  Otherwise falls back to a built-in
reference perceiver that is deliberately independent of the package
implementation:

  * tokenization by regex, not a character scanner;
  * aromatic flags read directly from the input notation (the corpus is
    curated to always write aromatic rings in lowercase form);
  * hydrogen counts from sigma-bond arithmetic (bracket atoms carry their
    hydrogen count explicitly, so no arithmetic applies to them);
  * ring membership as 2-core membership (iterative pruning of
    degree-<2 atoms), not a cycle-basis computation.

The fallback is cross-validated before writing anything: for the anchor
subset with well-known literature molecular formulas, the perceived
formula must match exactly or the script aborts.

Usage: make_parser_reference.py --corpus tests/data/drugs200.smi \
       --out tests/data/parser_reference.csv
"""

from __future__ import annotations

import argparse
import csv
import re
import sys

# Literature molecular formulas for the anchor subset (element -> count).
KNOWN_FORMULAS = {
    "CC(=O)Oc1ccccc1C(=O)O": "C9H8O4",        # aspirin
    "CC(=O)Nc1ccc(O)cc1": "C8H9NO2",          # paracetamol
    "Cn1cnc2c1c(=O)n(C)c(=O)n2C": "C8H10N4O2",  # caffeine
    "CC(C)Cc1ccc(C(C)C(=O)O)cc1": "C13H18O2",  # ibuprofen
    "CN1CCCC1c1cccnc1": "C10H14N2",           # nicotine
    "Oc1ccccc1": "C6H6O",                      # phenol
    "Nc1ccccc1": "C6H7N",                      # aniline
    "Cc1ccccc1": "C7H8",                       # toluene
    "C=Cc1ccccc1": "C8H8",                     # styrene
    "O=Cc1ccccc1": "C7H6O",                    # benzaldehyde
    "OC(=O)c1ccccc1": "C7H6O2",                # benzoic acid
    "NC(=O)c1ccccc1": "C7H7NO",                # benzamide
    "N#Cc1ccccc1": "C7H5N",                    # benzonitrile
    "COc1ccccc1": "C7H8O",                     # anisole
    "c1ccc2ccccc2c1": "C10H8",                 # naphthalene
    "c1ccc2cc3ccccc3cc2c1": "C14H10",          # anthracene
    "c1ccncc1": "C5H5N",                       # pyridine
    "c1cc[nH]c1": "C4H5N",                     # pyrrole
    "c1ccoc1": "C4H4O",                        # furan
    "c1ccsc1": "C4H4S",                        # thiophene
    "c1c[nH]cn1": "C3H4N2",                    # imidazole
    "c1cc[nH]n1": "C3H4N2",                    # pyrazole
    "c1ocnc1": "C3H3NO",                       # oxazole
    "c1scnc1": "C3H3NS",                       # thiazole
    "c1cncnc1": "C4H4N2",                      # pyrimidine
    "c1cnccn1": "C4H4N2",                      # pyrazine
    "c1ccc2c(c1)cc[nH]2": "C8H7N",             # indole
    "c1ccc2ncccc2c1": "C9H7N",                 # quinoline
    "c1ccc2cnccc2c1": "C9H7N",                 # isoquinoline
    "c1ccc2occc2c1": "C8H6O",                  # benzofuran
    "c1ccc2sccc2c1": "C8H6S",                  # benzothiophene
    "c1ccc2[nH]cnc2c1": "C7H6N2",              # benzimidazole
    "c1ncc2[nH]cnc2n1": "C5H4N4",              # purine
    "c1ccc2nccnc2c1": "C8H6N2",                # quinoxaline
    "Oc1ccccc1O": "C6H6O2",                    # catechol
    "COc1cc(C=O)ccc1O": "C8H8O3",              # vanillin
    "OC(=O)c1ccccc1O": "C7H6O3",               # salicylic acid
    "CC(=O)Nc1ccccc1": "C8H9NO",               # acetanilide
    "Nc1ccc(S(N)(=O)=O)cc1": "C6H8N2O2S",      # sulfanilamide
    "CCOC(=O)c1ccc(N)cc1": "C9H11NO2",         # benzocaine
    "CCN(CC)CCOC(=O)c1ccc(N)cc1": "C13H20N2O2",  # procaine
    "CCN(CC)CC(=O)Nc1c(C)cccc1C": "C14H22N2O",   # lidocaine
    "NC(Cc1ccccc1)C(=O)O": "C9H11NO2",         # phenylalanine
    "NC(Cc1ccc(O)cc1)C(=O)O": "C9H11NO3",      # tyrosine
    "NC(Cc1c[nH]c2ccccc12)C(=O)O": "C11H12N2O2",  # tryptophan
    "NC(Cc1c[nH]cn1)C(=O)O": "C6H9N3O2",       # histidine
    "NCCc1c[nH]c2ccc(O)cc12": "C10H12N2O",     # serotonin
    "NCCc1ccc(O)c(O)c1": "C8H11NO2",           # dopamine
    "CNCC(O)c1ccc(O)c(O)c1": "C9H13NO3",       # adrenaline
    "CC(N)Cc1ccccc1": "C9H13N",                # amphetamine
    "OCC(O)C(O)C(O)C(O)C=O": "C6H12O6",        # open-chain glucose
    "OC(=O)CC(O)(CC(=O)O)C(=O)O": "C6H8O7",    # citric acid
    "NC(N)=O": "CH4N2O",                       # urea
    "NCC(=O)O": "C2H5NO2",                     # glycine
    "NC(=N)c1ccccc1": "C7H8N2",                # benzamidine
    "O=[N+]([O-])c1ccccc1": "C6H5NO2",         # nitrobenzene
    "CC(C)C1CCC(C)CC1O": "C10H20O",            # menthol
    "CC1(C)C2CCC1(C)C(=O)C2": "C10H16O",       # camphor
    "O=C/C=C/c1ccccc1": "C9H8O",               # cinnamaldehyde
    "O=c1ccc2ccccc2o1": "C9H6O2",              # coumarin
    "O=C1NS(=O)(=O)c2ccccc12": "C7H5NO3S",     # saccharin
    "C=CCc1ccc(O)c(OC)c1": "C10H12O2",         # eugenol
    "NC=O": "CH3NO",                           # formamide
}

_VALENCES = {"B": (3,), "C": (4,), "N": (3,), "O": (2,), "P": (3, 5),
             "S": (2, 4, 6), "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,)}

_TOKEN = re.compile(
    r"(?P<bracket>\[[^\]]*\])"
    r"|(?P<two>Cl|Br)"
    r"|(?P<plain>[BCNOPSFI])"
    r"|(?P<arom>[bcnops])"
    r"|(?P<ring2>%\d\d)"
    r"|(?P<ring>\d)"
    r"|(?P<bond>[-=#:/\\])"
    r"|(?P<open>\()"
    r"|(?P<close>\))"
)

_BRACKET = re.compile(
    r"\[(?P<iso>\d+)?(?P<sym>[A-Z][a-z]?|[a-z]{1,2})(?P<chiral>@{1,2})?"
    r"(?P<h>H\d*)?(?P<chg>\+\d+|-\d+|\++|-+)?\]$"
)


class RefAtom:
    __slots__ = ("element", "aromatic", "bracket", "hcount", "charge", "bonds")

    def __init__(self, element, aromatic, bracket, hcount, charge):
        self.element = element
        self.aromatic = aromatic
        self.bracket = bracket
        self.hcount = hcount  # None = to be derived
        self.charge = charge
        self.bonds = []  # (neighbor index, order) with order 1/2/3/"ar"


def _parse_bracket(text):
    m = _BRACKET.match(text)
    if not m:
        raise ValueError(f"unparseable bracket atom {text!r}")
    sym = m.group("sym")
    aromatic = sym[0].islower()
    element = sym.capitalize() if aromatic else sym
    h = m.group("h")
    hcount = 0 if h is None else (1 if h == "H" else int(h[1:]))
    chg = m.group("chg") or ""
    if not chg:
        charge = 0
    elif chg[0] == "+":
        charge = int(chg[1:]) if chg[1:].isdigit() else len(chg)
    else:
        charge = -(int(chg[1:]) if chg[1:].isdigit() else len(chg))
    return RefAtom(element, aromatic, True, hcount, charge)


def reference_parse(smiles):
    """Minimal independent SMILES reader: atoms with explicit bonds only."""
    atoms = []
    prev = None
    stack = []
    pending = None  # bond symbol before the next atom
    rings = {}

    def add_bond(u, v, symbol):
        if symbol in ("-", "/", "\\"):
            order = 1
        elif symbol == "=":
            order = 2
        elif symbol == "#":
            order = 3
        elif symbol == ":":
            order = "ar"
        else:  # default bond
            order = "ar" if atoms[u].aromatic and atoms[v].aromatic else 1
        atoms[u].bonds.append((v, order))
        atoms[v].bonds.append((u, order))

    def new_atom(atom):
        nonlocal prev, pending
        atoms.append(atom)
        idx = len(atoms) - 1
        if prev is not None:
            add_bond(prev, idx, pending)
        prev = idx
        pending = None

    def ring_digit(label):
        nonlocal pending
        if label in rings:
            other, order = rings.pop(label)
            add_bond(prev, other, pending if pending is not None else order)
        else:
            rings[label] = (prev, pending)
        pending = None

    pos = 0
    while pos < len(smiles):
        m = _TOKEN.match(smiles, pos)
        if not m:
            raise ValueError(f"cannot tokenize {smiles!r} at {pos}")
        pos = m.end()
        kind = m.lastgroup
        text = m.group()
        if kind == "bracket":
            new_atom(_parse_bracket(text))
        elif kind in ("two", "plain"):
            new_atom(RefAtom(text, False, False, None, 0))
        elif kind == "arom":
            new_atom(RefAtom(text.upper(), True, False, None, 0))
        elif kind == "ring":
            ring_digit(text)
        elif kind == "ring2":
            ring_digit(text[1:])
        elif kind == "bond":
            pending = text
        elif kind == "open":
            stack.append(prev)
        elif kind == "close":
            prev = stack.pop()
    if rings or stack:
        raise ValueError(f"unbalanced ring digits or branches in {smiles!r}")
    return atoms


def assign_hydrogens(atoms):
    for atom in atoms:
        if atom.bracket:
            continue  # hcount already explicit
        degree = len(atom.bonds)
        if atom.aromatic:
            # Lowercase notation implies a filled aromatic valence shell:
            # carbon gets its leftover position, heteroatoms get none
            # (N-H ring nitrogens must be written [nH]).
            atom.hcount = max(0, 3 - degree) if atom.element == "C" else 0
            continue
        used = sum(2 if o == 2 else 3 if o == 3 else 1 for _, o in atom.bonds)
        options = [v for v in _VALENCES[atom.element] if v >= used]
        atom.hcount = (options[0] - used) if options else 0


def ring_membership(atoms):
    """Atoms with at least one non-bridge edge lie on a cycle.

    An edge is a bridge iff removing it disconnects its endpoints, tested
    by breadth-first search that skips the edge itself.  (A simple 2-core
    would not do: it also keeps bridge atoms that connect two cycles.)
    """
    edges = set()
    for i, atom in enumerate(atoms):
        for j, _ in atom.bonds:
            edges.add((min(i, j), max(i, j)))
    adjacency = {i: set() for i in range(len(atoms))}
    for u, v in edges:
        adjacency[u].add(v)
        adjacency[v].add(u)
    in_ring = set()
    for u, v in edges:
        seen = {u}
        queue = [u]
        found = False
        while queue and not found:
            x = queue.pop()
            for y in adjacency[x]:
                if (x, y) in ((u, v), (v, u)):
                    continue
                if y == v:
                    found = True
                    break
                if y not in seen:
                    seen.add(y)
                    queue.append(y)
        if found:
            in_ring.add(u)
            in_ring.add(v)
    return in_ring


def formula_of(atoms):
    counts = {}
    for atom in atoms:
        counts[atom.element] = counts.get(atom.element, 0) + 1
        counts["H"] = counts.get("H", 0) + atom.hcount
    if counts.get("H") == 0:
        del counts["H"]
    return counts


def parse_formula(text):
    counts = {}
    for sym, num in re.findall(r"([A-Z][a-z]?)(\d*)", text):
        if sym:
            counts[sym] = counts.get(sym, 0) + (int(num) if num else 1)
    return counts


def perceive_with_fallback(smiles):
    atoms = reference_parse(smiles)
    assign_hydrogens(atoms)
    ring_atoms = ring_membership(atoms)
    return [
        {
            "degree": len(a.bonds),
            "aromatic": int(a.aromatic),
            "hcount": a.hcount,
            "in_ring": int(i in ring_atoms),
        }
        for i, a in enumerate(atoms)
    ], formula_of(atoms)


def perceive_with_rdkit(smiles):
    from rdkit import Chem

    mol = Chem.MolFromSmiles(smiles, sanitize=True)
    if mol is None:
        raise ValueError(f"RDKit rejected {smiles!r}")
    info = mol.GetRingInfo()
    rows = []
    for atom in mol.GetAtoms():
        rows.append({
            "degree": atom.GetDegree(),
            "aromatic": int(atom.GetIsAromatic()),
            "hcount": atom.GetTotalNumHs(),
            "in_ring": int(info.NumAtomRings(atom.GetIdx()) > 0),
        })
    return rows, None


def load_corpus(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(line.split()[0])
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--corpus", required=True)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    try:
        import rdkit  # noqa: F401
        use_rdkit = True
    except ImportError:
        use_rdkit = False
    print(f"oracle: {'rdkit' if use_rdkit else 'built-in reference perceiver'}")

    corpus = load_corpus(args.corpus)

    # Cross-validate the fallback against literature formulas before use.
    if not use_rdkit:
        checked = 0
        for smiles, formula in KNOWN_FORMULAS.items():
            _, got = perceive_with_fallback(smiles)
            want = parse_formula(formula)
            if got != want:
                sys.exit(f"FORMULA MISMATCH for {smiles}: oracle {got}, "
                         f"literature {want}; refusing to write reference")
            checked += 1
        anchors_in_corpus = sum(1 for s in corpus if s in KNOWN_FORMULAS)
        print(f"fallback validated on {checked} literature formulas "
              f"({anchors_in_corpus} of them in the corpus)")

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["molecule", "smiles", "atom", "degree", "aromatic",
                         "hcount", "in_ring"])
        total = 0
        for m, smiles in enumerate(corpus):
            rows, _ = (perceive_with_rdkit(smiles) if use_rdkit
                       else perceive_with_fallback(smiles))
            for i, row in enumerate(rows):
                writer.writerow([m, smiles, i, row["degree"], row["aromatic"],
                                 row["hcount"], row["in_ring"]])
                total += 1
    print(f"wrote {total} atom rows for {len(corpus)} molecules -> {args.out}")


if __name__ == "__main__":
    main()
