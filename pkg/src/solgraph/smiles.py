"""SMILES reading and chemical perception.

Converts SMILES strings into annotated molecular graphs without any external
cheminformatics dependency.  Supported notation:

    - organic-subset atoms (B, C, N, O, P, S, F, Cl, Br, I) and their
      aromatic lowercase forms (b, c, n, o, p, s)
    - bracket atoms with isotope, charge, explicit hydrogen count and
      tetrahedral parity markers (@ / @@)
    - bond symbols ``- = # : / \\``
    - branches and ring closures, including two-digit ``%nn`` labels

Perception applied by :func:`parse`: implicit hydrogens from a standard
valence table, ring detection (minimum cycle basis), aromaticity (trusted
from lowercase notation, plus promotion of 5/6-membered rings written in
alternating single/double form that pass an electron-count test),
hybridization, conjugation and double-bond stereo from directional bonds.

Disconnected inputs (``.`` separator) are rejected: the downstream model
consumes single connected graphs and no desalting policy is defined.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

__all__ = [
    "Token",
    "TokenKind",
    "Atom",
    "Bond",
    "Molecule",
    "BondOrder",
    "BondStereo",
    "Hybridization",
    "Parity",
    "tokenize",
    "parse",
    "perceive_rings",
    "assign_hybridization",
    "assign_conjugation",
    "ELEMENTS",
    "SmilesError",
    "UnexpectedCharacter",
    "UnterminatedBracket",
    "UnclosedRingBond",
    "UnbalancedBranch",
    "ValenceExceeded",
    "UnknownElement",
    "DisconnectedInputRejected",
]


# The 66 recognized element symbols, in the frozen order also used by the
# featurizer's element one-hot block.
ELEMENTS: tuple[str, ...] = (
    "K", "Y", "V", "Sm", "Dy", "In", "Lu", "Hg", "Co", "Mg", "Cu", "Rh",
    "Hf", "O", "As", "Ge", "Au", "Mo", "Br", "Ce", "Zr", "Ag", "Ba", "N",
    "Cr", "Sr", "Fe", "Gd", "I", "Al", "B", "Se", "Pr", "Te", "Cd", "Pd",
    "Si", "Zn", "Pb", "Sn", "Cl", "Mn", "Cs", "Na", "S", "Ti", "Ni", "Ru",
    "Ca", "Nd", "W", "H", "Li", "Sb", "Bi", "La", "Pt", "Nb", "P", "F",
    "C", "Re", "Ta", "Ir", "Be", "Tl",
)

ELEMENT_INDEX: dict[str, int] = {sym: i for i, sym in enumerate(ELEMENTS)}

# Atoms writable without brackets.
_ORGANIC_UPPER = frozenset({"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"})
_ORGANIC_LOWER = frozenset({"b", "c", "n", "o", "p", "s"})

# Standard valences used for implicit-hydrogen filling and valence checking.
# Multi-entry tuples list the allowed valence states in ascending order.
_VALENCES: dict[str, tuple[int, ...]] = {
    "B": (3,),
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
    "H": (1,),
}

# Elements whose allowed valence shifts by one unit per unit of formal charge.
_CHARGE_ADJUSTED = frozenset({"N", "O", "S"})

_BOND_SYMBOLS = frozenset("-=#:/\\")


class TokenKind(Enum):
    ATOM_ORGANIC = "atom_organic"
    ATOM_BRACKET = "atom_bracket"
    BOND = "bond"
    RING_CLOSURE = "ring_closure"
    BRANCH_OPEN = "branch_open"
    BRANCH_CLOSE = "branch_close"
    DOT = "dot"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    text: str
    position: int


class BondOrder(Enum):
    SINGLE = "single"
    DOUBLE = "double"
    TRIPLE = "triple"
    AROMATIC = "aromatic"


class BondStereo(Enum):
    NONE = "none"
    ANY = "any"
    Z = "z"
    E = "e"


class Hybridization(Enum):
    S = "s"
    SP = "sp"
    SP2 = "sp2"
    SP3 = "sp3"
    SP3D = "sp3d"
    SP3D2 = "sp3d2"
    OTHER = "other"


class Parity(Enum):
    CCW = "ccw"  # written @
    CW = "cw"    # written @@


class SmilesError(ValueError):
    """Base class for all SMILES tokenization / parsing / perception errors."""


class UnexpectedCharacter(SmilesError):
    def __init__(self, char: str, position: int):
        super().__init__(f"unexpected character {char!r} at position {position}")
        self.char = char
        self.position = position


class UnterminatedBracket(SmilesError):
    def __init__(self, position: int):
        super().__init__(f"unterminated bracket atom opened at position {position}")
        self.position = position


class UnclosedRingBond(SmilesError):
    def __init__(self, label: int):
        super().__init__(f"ring-closure label {label} opened but never closed")
        self.label = label


class UnbalancedBranch(SmilesError):
    def __init__(self, position: int):
        super().__init__(f"unbalanced branch parenthesis at position {position}")
        self.position = position


class ValenceExceeded(SmilesError):
    def __init__(self, atom_index: int, valence: int):
        super().__init__(
            f"atom {atom_index} has valence {valence}, exceeding every allowed value"
        )
        self.atom_index = atom_index
        self.valence = valence


class UnknownElement(SmilesError):
    def __init__(self, symbol: str):
        super().__init__(f"element symbol {symbol!r} is not recognized")
        self.symbol = symbol


class DisconnectedInputRejected(SmilesError):
    def __init__(self, position: int):
        super().__init__(
            f"disconnected input ('.' at position {position}) is rejected; "
            "the model consumes single connected molecules"
        )
        self.position = position


@dataclass
class Atom:
    """One atom with all perceived annotations.

    ``explicit_h`` is the bracket-specified hydrogen count (None for
    organic-subset atoms); ``implicit_h`` is the computed count and equals
    ``explicit_h`` whenever the latter is given.  ``degree`` counts bonded
    heavy-atom neighbors only.
    """

    element: str
    formal_charge: int = 0
    isotope: int | None = None
    aromatic: bool = False
    explicit_h: int | None = None
    implicit_h: int = 0
    degree: int = 0
    radical_electrons: int = 0
    hybridization: Hybridization = Hybridization.OTHER
    chiral: bool = False
    parity: Parity | None = None
    in_aromatic_ring: bool = False
    # Set when the atom donates a lone pair (not a pi bond) to an aromatic
    # ring, which changes the implicit-hydrogen accounting.
    _pi_donor: bool = False


@dataclass
class Bond:
    u: int
    v: int
    order: BondOrder
    conjugated: bool = False
    in_ring: bool = False
    stereo: BondStereo = BondStereo.NONE

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.u, self.v)

    def other(self, idx: int) -> int:
        return self.v if idx == self.u else self.u


@dataclass
class Molecule:
    """Perceived molecular graph.  Atom order equals SMILES appearance order."""

    atoms: list[Atom] = field(default_factory=list)
    bonds: list[Bond] = field(default_factory=list)
    rings: list[tuple[int, ...]] = field(default_factory=list)
    source: str = ""

    def neighbors(self, idx: int) -> list[int]:
        return [b.other(idx) for b in self.bonds if idx in (b.u, b.v)]

    def bonds_of(self, idx: int) -> list[Bond]:
        return [b for b in self.bonds if idx in (b.u, b.v)]

    def total_h(self, idx: int) -> int:
        """Hydrogens attached to atom ``idx``: implicit plus explicit H neighbors."""
        h_neighbors = sum(
            1 for b in self.bonds_of(idx) if self.atoms[b.other(idx)].element == "H"
        )
        return self.atoms[idx].implicit_h + h_neighbors


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

def tokenize(smiles: str) -> list[Token]:
    """Split a SMILES string into tokens.

    Every input character lands in exactly one token, so concatenating the
    token texts reproduces the input.

    Raises:
        UnexpectedCharacter: on any character outside the supported dialect.
        UnterminatedBracket: when a ``[`` has no matching ``]``.
    """
    if not smiles:
        raise UnexpectedCharacter("", 0)
    tokens: list[Token] = []
    i = 0
    n = len(smiles)
    while i < n:
        c = smiles[i]
        if not c.isascii():
            raise UnexpectedCharacter(c, i)
        if c == "[":
            end = smiles.find("]", i + 1)
            if end < 0:
                raise UnterminatedBracket(i)
            tokens.append(Token(TokenKind.ATOM_BRACKET, smiles[i : end + 1], i))
            i = end + 1
        elif c == "%":
            if i + 2 >= n or not (smiles[i + 1].isdigit() and smiles[i + 2].isdigit()):
                raise UnexpectedCharacter(c, i)
            tokens.append(Token(TokenKind.RING_CLOSURE, smiles[i : i + 3], i))
            i += 3
        elif c.isdigit():
            tokens.append(Token(TokenKind.RING_CLOSURE, c, i))
            i += 1
        elif c in _BOND_SYMBOLS:
            tokens.append(Token(TokenKind.BOND, c, i))
            i += 1
        elif c == "(":
            tokens.append(Token(TokenKind.BRANCH_OPEN, c, i))
            i += 1
        elif c == ")":
            tokens.append(Token(TokenKind.BRANCH_CLOSE, c, i))
            i += 1
        elif c == ".":
            tokens.append(Token(TokenKind.DOT, c, i))
            i += 1
        elif c.isupper():
            two = smiles[i : i + 2]
            if two in ("Cl", "Br"):
                tokens.append(Token(TokenKind.ATOM_ORGANIC, two, i))
                i += 2
            elif c in _ORGANIC_UPPER:
                tokens.append(Token(TokenKind.ATOM_ORGANIC, c, i))
                i += 1
            else:
                raise UnexpectedCharacter(c, i)
        elif c.islower():
            if c not in _ORGANIC_LOWER:
                raise UnexpectedCharacter(c, i)
            tokens.append(Token(TokenKind.ATOM_ORGANIC, c, i))
            i += 1
        else:
            raise UnexpectedCharacter(c, i)
    return tokens


# ---------------------------------------------------------------------------
# Bracket-atom parsing
# ---------------------------------------------------------------------------

def _parse_bracket(text: str, position: int) -> Atom:
    """Parse a bracket-atom token like ``[13CH2+]`` into an Atom."""
    body = text[1:-1]
    if not body:
        raise UnexpectedCharacter("]", position + 1)
    i = 0
    n = len(body)

    isotope = None
    start = i
    while i < n and body[i].isdigit():
        i += 1
    if i > start:
        isotope = int(body[start:i])

    if i >= n:
        raise UnexpectedCharacter("]", position + 1 + i)
    # Element symbol: longest match against the recognized list, lowercase
    # forms allowed for the aromatic organic subset.
    symbol = None
    aromatic = False
    two = body[i : i + 2]
    if two in ELEMENT_INDEX and len(two) == 2:
        symbol = two
        i += 2
    elif body[i] in ELEMENT_INDEX:
        symbol = body[i]
        i += 1
    elif body[i] in _ORGANIC_LOWER:
        symbol = body[i].upper()
        aromatic = True
        i += 1
    else:
        # Capture a plausible symbol slice for the error message.
        bad = two if len(two) == 2 and two[1].islower() else body[i]
        raise UnknownElement(bad)

    chiral = False
    parity: Parity | None = None
    if i < n and body[i] == "@":
        chiral = True
        if i + 1 < n and body[i + 1] == "@":
            parity = Parity.CW
            i += 2
        else:
            parity = Parity.CCW
            i += 1

    explicit_h = 0
    if i < n and body[i] == "H":
        i += 1
        start = i
        while i < n and body[i].isdigit():
            i += 1
        explicit_h = int(body[start:i]) if i > start else 1

    charge = 0
    if i < n and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        count = 1
        i += 1
        if i < n and body[i].isdigit():
            start = i
            while i < n and body[i].isdigit():
                i += 1
            count = int(body[start:i])
        else:
            while i < n and body[i] == body[i - 1]:
                count += 1
                i += 1
        charge = sign * count

    if i != n:
        raise UnexpectedCharacter(body[i], position + 1 + i)

    return Atom(
        element=symbol,
        formal_charge=charge,
        isotope=isotope,
        aromatic=aromatic,
        explicit_h=explicit_h,
        chiral=chiral,
        parity=parity,
    )


# ---------------------------------------------------------------------------
# Structural parsing
# ---------------------------------------------------------------------------

@dataclass
class _PendingBond:
    symbol: str | None = None  # one of - = # : / \ or None (default bond)
    position: int = -1


def _bond_order_for(symbol: str | None, a_arom: bool, b_arom: bool) -> BondOrder:
    if symbol is None:
        return BondOrder.AROMATIC if (a_arom and b_arom) else BondOrder.SINGLE
    if symbol == "=":
        return BondOrder.DOUBLE
    if symbol == "#":
        return BondOrder.TRIPLE
    if symbol == ":":
        return BondOrder.AROMATIC
    return BondOrder.SINGLE  # '-', '/' and '\\'


def parse(smiles: str) -> Molecule:
    """Parse a SMILES string and run full perception.

    Returns a :class:`Molecule` with implicit hydrogens, rings, aromaticity,
    hybridization, conjugation and double-bond stereo assigned.  Atoms are
    indexed in order of appearance.

    Raises subclasses of :class:`SmilesError` on invalid input.
    """
    tokens = tokenize(smiles)
    mol = Molecule(source=smiles)

    prev: int | None = None
    pending = _PendingBond()
    branch_stack: list[tuple[int, int]] = []  # (atom index, '(' position)
    open_rings: dict[int, tuple[int, str | None, int]] = {}
    bond_keys: set[tuple[int, int]] = set()
    # Directional ('/' or '\\') bonds in written order: (first, second, symbol).
    directional: list[tuple[int, int, str]] = []

    def add_bond(a: int, b: int, symbol: str | None, position: int) -> None:
        if a == b:
            raise SmilesError(f"ring closure at position {position} would bond atom {a} to itself")
        key = (min(a, b), max(a, b))
        if key in bond_keys:
            raise SmilesError(f"duplicate bond between atoms {a} and {b}")
        bond_keys.add(key)
        order = _bond_order_for(symbol, mol.atoms[a].aromatic, mol.atoms[b].aromatic)
        mol.bonds.append(Bond(a, b, order))
        if symbol in ("/", "\\"):
            directional.append((a, b, symbol))

    def attach_atom(atom: Atom, position: int) -> None:
        nonlocal prev
        mol.atoms.append(atom)
        idx = len(mol.atoms) - 1
        if prev is not None:
            add_bond(prev, idx, pending.symbol, position)
        elif pending.symbol is not None:
            raise SmilesError(f"bond symbol at position {pending.position} has no preceding atom")
        pending.symbol = None
        prev = idx

    for tok in tokens:
        if tok.kind == TokenKind.DOT:
            raise DisconnectedInputRejected(tok.position)
        if tok.kind == TokenKind.ATOM_ORGANIC:
            text = tok.text
            atom = Atom(element=text.upper() if text.islower() else text,
                        aromatic=text.islower())
            attach_atom(atom, tok.position)
        elif tok.kind == TokenKind.ATOM_BRACKET:
            attach_atom(_parse_bracket(tok.text, tok.position), tok.position)
        elif tok.kind == TokenKind.BOND:
            if prev is None or pending.symbol is not None:
                raise SmilesError(f"misplaced bond symbol at position {tok.position}")
            pending.symbol = tok.text
            pending.position = tok.position
        elif tok.kind == TokenKind.RING_CLOSURE:
            if prev is None:
                raise SmilesError(f"ring closure at position {tok.position} has no preceding atom")
            label = int(tok.text.lstrip("%"))
            if label in open_rings:
                other, open_symbol, open_pos = open_rings.pop(label)
                if open_symbol is not None and pending.symbol is not None \
                        and open_symbol != pending.symbol:
                    raise SmilesError(
                        f"ring closure {label} carries conflicting bond symbols "
                        f"{open_symbol!r} and {pending.symbol!r}"
                    )
                symbol = pending.symbol if pending.symbol is not None else open_symbol
                if symbol in ("/", "\\") and pending.symbol is None:
                    # Direction was written at the opening digit: the opening
                    # atom is the "first" endpoint of the directional bond.
                    add_bond(other, prev, symbol, tok.position)
                else:
                    add_bond(prev, other, symbol, tok.position)
                pending.symbol = None
            else:
                open_rings[label] = (prev, pending.symbol, tok.position)
                pending.symbol = None
        elif tok.kind == TokenKind.BRANCH_OPEN:
            if prev is None:
                raise UnbalancedBranch(tok.position)
            if pending.symbol is not None:
                raise SmilesError(f"bond symbol dangling before '(' at position {tok.position}")
            branch_stack.append((prev, tok.position))
        elif tok.kind == TokenKind.BRANCH_CLOSE:
            if not branch_stack:
                raise UnbalancedBranch(tok.position)
            if pending.symbol is not None:
                raise SmilesError(f"bond symbol dangling before ')' at position {tok.position}")
            prev, _ = branch_stack.pop()

    if pending.symbol is not None:
        raise SmilesError(f"dangling bond symbol at position {pending.position}")
    if branch_stack:
        raise UnbalancedBranch(branch_stack[-1][1])
    if open_rings:
        raise UnclosedRingBond(min(open_rings))
    if not mol.atoms:
        raise SmilesError("input contains no atoms")

    _perceive(mol, directional)
    return mol


# ---------------------------------------------------------------------------
# Ring perception: minimum cycle basis (Horton's algorithm)
# ---------------------------------------------------------------------------

def perceive_rings(mol: Molecule) -> list[tuple[int, ...]]:
    """Compute a minimum cycle basis of the bond graph.

    Returns E - V + 1 simple cycles (for a connected molecule), each as an
    ordered tuple of atom indices, and marks ``in_ring`` on every bond that
    lies on a basis cycle or whose endpoints share one.  Acyclic input
    returns the empty list.
    """
    n = len(mol.atoms)
    edges = [(min(b.u, b.v), max(b.u, b.v)) for b in mol.bonds]
    dim = len(edges) - n + 1
    if dim <= 0:
        mol.rings = []
        return []

    edge_id = {e: i for i, e in enumerate(edges)}
    adj: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)

    def bfs(root: int) -> tuple[list[int], list[int]]:
        dist = [-1] * n
        parent = [-1] * n
        dist[root] = 0
        queue = deque([root])
        while queue:
            x = queue.popleft()
            for y in adj[x]:
                if dist[y] < 0:
                    dist[y] = dist[x] + 1
                    parent[y] = x
                    queue.append(y)
        return dist, parent

    def path_to_root(x: int, parent: list[int]) -> list[int]:
        path = [x]
        while parent[x] >= 0:
            x = parent[x]
            path.append(x)
        return path  # x ... root

    # Horton candidates: for each root r and edge (u, v), the cycle formed by
    # the shortest paths r->u and r->v plus (u, v), kept when the two paths
    # only share the root.
    candidates: list[tuple[int, tuple[int, ...], int]] = []
    seen_masks: set[int] = set()
    for root in range(n):
        dist, parent = bfs(root)
        for u, v in edges:
            if parent[u] == v or parent[v] == u:
                continue
            pu = path_to_root(u, parent)
            pv = path_to_root(v, parent)
            if set(pu) & set(pv) != {root}:
                continue
            nodes = tuple(pu[::-1] + pv[:-1])  # root..u, v..(before root)
            mask = 0
            ok = True
            for i in range(len(nodes)):
                a, b = nodes[i], nodes[(i + 1) % len(nodes)]
                eid = edge_id.get((min(a, b), max(a, b)))
                if eid is None:
                    ok = False
                    break
                mask |= 1 << eid
            if not ok or mask in seen_masks:
                continue
            seen_masks.add(mask)
            candidates.append((len(nodes), _canonical_cycle(nodes), mask))

    candidates.sort(key=lambda c: (c[0], c[1]))

    # Greedy GF(2) independence over edge-incidence bitmasks.
    basis: list[tuple[tuple[int, ...], int]] = []
    pivots: list[int] = []
    for _, nodes, mask in candidates:
        reduced = mask
        for p in pivots:
            reduced = min(reduced, reduced ^ p)
        if reduced:
            pivots.append(reduced)
            pivots.sort(reverse=True)
            basis.append((nodes, mask))
            if len(basis) == dim:
                break

    mol.rings = [nodes for nodes, _ in basis]

    ring_sets = [set(nodes) for nodes, _ in basis]
    basis_edges: set[int] = set()
    for _, mask in basis:
        for i in range(len(edges)):
            if mask >> i & 1:
                basis_edges.add(i)
    for bond in mol.bonds:
        eid = edge_id[(min(bond.u, bond.v), max(bond.u, bond.v))]
        bond.in_ring = eid in basis_edges or any(
            bond.u in rs and bond.v in rs for rs in ring_sets
        )
    return list(mol.rings)


def _canonical_cycle(nodes: tuple[int, ...]) -> tuple[int, ...]:
    """Rotate/reflect a cycle to start at its smallest atom, smaller neighbor first."""
    k = nodes.index(min(nodes))
    rotated = nodes[k:] + nodes[:k]
    reverse = (rotated[0],) + rotated[1:][::-1]
    return min(rotated, reverse)


# ---------------------------------------------------------------------------
# Perception pipeline
# ---------------------------------------------------------------------------

def _perceive(mol: Molecule, directional: list[tuple[int, int, str]] | None = None) -> None:
    for i, atom in enumerate(mol.atoms):
        atom.degree = sum(
            1 for b in mol.bonds_of(i) if mol.atoms[b.other(i)].element != "H"
        )

    perceive_rings(mol)

    # An implicit bond between two aromatic atoms defaults to AROMATIC, but
    # aromatic bonds only exist inside rings (e.g. the biphenyl link bond is
    # single); demote the rest.
    for bond in mol.bonds:
        if bond.order is BondOrder.AROMATIC and not bond.in_ring:
            bond.order = BondOrder.SINGLE

    _promote_kekule_rings(mol)
    _mark_aromatic_ring_membership(mol)
    _assign_implicit_hydrogens(mol)
    assign_hybridization(mol)
    assign_conjugation(mol)
    _assign_bond_stereo(mol, directional or [])


def _promote_kekule_rings(mol: Molecule) -> None:
    """Promote 5/6-membered rings written in alternating Kekulé form.

    A basis cycle is promoted when every member would be sp2 (carries a
    double bond) or is a lone-pair heteroatom (N, O, S without an exocyclic
    multiple bond), and the electron count -- 1 per atom with an in-ring
    double bond, 2 per lone-pair donor -- satisfies 4n+2.
    """
    for nodes in mol.rings:
        if len(nodes) not in (5, 6):
            continue
        ring_set = set(nodes)
        ring_bonds = [
            b for b in mol.bonds
            if b.u in ring_set and b.v in ring_set and _adjacent_in_cycle(nodes, b.u, b.v)
        ]
        if all(mol.atoms[i].aromatic for i in nodes) and \
                all(b.order is BondOrder.AROMATIC for b in ring_bonds):
            continue
        pi = 0
        eligible = True
        donors: list[int] = []
        for i in nodes:
            atom = mol.atoms[i]
            in_ring_double = any(
                b.order is BondOrder.DOUBLE and b.other(i) in ring_set
                for b in mol.bonds_of(i)
            )
            exo_count = sum(
                1 for b in mol.bonds_of(i)
                if b.order in (BondOrder.DOUBLE, BondOrder.TRIPLE) and b.other(i) not in ring_set
            )
            exo_multiple = exo_count > 0
            if exo_count >= 2:
                # Two exocyclic double bonds (e.g. a sulfonyl sulfur) force a
                # tetrahedral center; the ring cannot hold a pi system.
                eligible = False
                break
            if in_ring_double:
                pi += 1
            elif atom.element in ("N", "O", "S") and not exo_multiple:
                pi += 2
                donors.append(i)
            elif atom.aromatic or exo_multiple:
                pass  # sp2-eligible, contributes no ring electrons
            else:
                eligible = False
                break
        if not eligible or pi < 2 or (pi - 2) % 4 != 0:
            continue
        for i in nodes:
            mol.atoms[i].aromatic = True
        for i in donors:
            mol.atoms[i]._pi_donor = True
        for b in ring_bonds:
            b.order = BondOrder.AROMATIC


def _adjacent_in_cycle(nodes: tuple[int, ...], u: int, v: int) -> bool:
    k = len(nodes)
    for i in range(k):
        a, b = nodes[i], nodes[(i + 1) % k]
        if (a, b) in ((u, v), (v, u)):
            return True
    return False


def _mark_aromatic_ring_membership(mol: Molecule) -> None:
    for nodes in mol.rings:
        ring_set = set(nodes)
        ring_bonds = [
            b for b in mol.bonds
            if b.u in ring_set and b.v in ring_set and _adjacent_in_cycle(nodes, b.u, b.v)
        ]
        if ring_bonds and all(b.order is BondOrder.AROMATIC for b in ring_bonds):
            for i in nodes:
                mol.atoms[i].in_aromatic_ring = True


def _aromatic_pi_reservation(mol: Molecule, idx: int) -> int:
    """Valence units an aromatic atom reserves for the ring pi system.

    Atoms that hold one bond of the ring's alternating double bonds (aromatic
    carbon, pyridine-type nitrogen) reserve one unit.  Lone-pair donors
    (aromatic O/S/B, pyrrole-type nitrogen) reserve none: their contribution
    is a lone pair, which costs no valence.
    """
    atom = mol.atoms[idx]
    if not atom.aromatic:
        return 0
    if atom.element in ("O", "S", "B"):
        return 0
    if atom._pi_donor:
        return 0
    if atom.element in ("N", "P"):
        # Pyrrole-type nitrogens (ring N-H, N-methyl, anionic N) have their
        # valence filled by sigma bonds alone and donate the lone pair;
        # pyridine-type nitrogens still have room for the ring pi bond.
        sigma = atom.degree + (atom.explicit_h or 0)
        if sigma >= 3 + atom.formal_charge:
            return 0
    if any(
        b.order in (BondOrder.DOUBLE, BondOrder.TRIPLE) for b in mol.bonds_of(idx)
    ):
        return 0  # pi electron already spent on an explicit multiple bond
    return 1


_ORDER_UNITS = {
    BondOrder.SINGLE: 1,
    BondOrder.DOUBLE: 2,
    BondOrder.TRIPLE: 3,
    BondOrder.AROMATIC: 1,  # plus the per-atom pi reservation
}


def _assign_implicit_hydrogens(mol: Molecule) -> None:
    for i, atom in enumerate(mol.atoms):
        used = sum(_ORDER_UNITS[b.order] for b in mol.bonds_of(i))
        used += _aromatic_pi_reservation(mol, i)

        allowed = _VALENCES.get(atom.element)
        if allowed is not None and atom.element in _CHARGE_ADJUSTED:
            allowed = tuple(v + atom.formal_charge for v in allowed)

        if atom.explicit_h is not None:
            atom.implicit_h = atom.explicit_h
            total = used + atom.implicit_h
            if allowed is not None:
                if total > max(allowed):
                    raise ValenceExceeded(i, total)
                standard = min(v for v in allowed if v >= total)
                atom.radical_electrons = max(0, standard - total)
        else:
            if allowed is None:
                atom.implicit_h = 0
                continue
            if used > max(allowed):
                raise ValenceExceeded(i, used)
            standard = min(v for v in allowed if v >= used)
            atom.implicit_h = standard - used


def assign_hybridization(mol: Molecule) -> Molecule:
    """Assign hybridization by a fixed, ordered rule table.

    aromatic -> SP2; triple bond or two doubles -> SP; any double -> SP2;
    five sigma connections -> SP3D; six -> SP3D2; element H -> S; one to
    four sigma connections -> SP3; anything else -> OTHER.
    """
    for i, atom in enumerate(mol.atoms):
        bonds = mol.bonds_of(i)
        doubles = sum(1 for b in bonds if b.order is BondOrder.DOUBLE)
        triples = sum(1 for b in bonds if b.order is BondOrder.TRIPLE)
        sigma = len(bonds) + atom.implicit_h
        if atom.aromatic:
            atom.hybridization = Hybridization.SP2
        elif triples >= 1 or doubles >= 2:
            atom.hybridization = Hybridization.SP
        elif doubles == 1:
            atom.hybridization = Hybridization.SP2
        elif sigma == 5:
            atom.hybridization = Hybridization.SP3D
        elif sigma == 6:
            atom.hybridization = Hybridization.SP3D2
        elif atom.element == "H":
            atom.hybridization = Hybridization.S
        elif 1 <= sigma <= 4:
            atom.hybridization = Hybridization.SP3
        else:
            atom.hybridization = Hybridization.OTHER
    return mol


def assign_conjugation(mol: Molecule) -> Molecule:
    """Mark conjugated bonds.

    A bond is conjugated iff both endpoints are SP or SP2 and each endpoint
    participates in at least one multiple (double/triple/aromatic) bond
    besides the bond itself; an isolated C=C is therefore not conjugated.
    Aromatic bonds are always conjugated.
    """
    multiple = (BondOrder.DOUBLE, BondOrder.TRIPLE, BondOrder.AROMATIC)

    def has_other_multiple(idx: int, excluding: Bond) -> bool:
        return any(
            b.order in multiple for b in mol.bonds_of(idx) if b is not excluding
        )

    sp_like = (Hybridization.SP, Hybridization.SP2)
    for bond in mol.bonds:
        if bond.order is BondOrder.AROMATIC:
            bond.conjugated = True
            continue
        a, b = mol.atoms[bond.u], mol.atoms[bond.v]
        bond.conjugated = (
            a.hybridization in sp_like
            and b.hybridization in sp_like
            and has_other_multiple(bond.u, bond)
            and has_other_multiple(bond.v, bond)
        )
    return mol


def _assign_bond_stereo(mol: Molecule, directional: list[tuple[int, int, str]]) -> None:
    if not directional:
        return
    for bond in mol.bonds:
        if bond.order is not BondOrder.DOUBLE:
            continue
        side_u = _directional_sign(directional, bond.u, bond.v)
        side_v = _directional_sign(directional, bond.v, bond.u)
        if side_u is None and side_v is None:
            continue
        if side_u is None or side_v is None:
            bond.stereo = BondStereo.ANY
            continue
        # Equal normalized signs put the two references on the same side.
        bond.stereo = BondStereo.Z if side_u * side_v > 0 else BondStereo.E


def _directional_sign(
    directional: list[tuple[int, int, str]], end: int, other_end: int
) -> int | None:
    """Orientation of the first directional bond at one double-bond end.

    The raw sign (+1 for '/', -1 for '\\') is flipped when the directional
    bond was written pointing away from ``end``, normalizing both ends to a
    common reading direction.
    """
    for first, second, sym in directional:
        if end not in (first, second) or other_end in (first, second):
            continue
        sign = 1 if sym == "/" else -1
        return sign if second == end else -sign
    return None
