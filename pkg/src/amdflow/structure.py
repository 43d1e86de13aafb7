"""Crystal structures, compositions, periodic geometry and POSCAR I/O.

Every pipeline stage passes :class:`CrystalStructure` objects around. They
are immutable and always held in canonical form (wrapped fractional
coordinates, sites sorted by element then coordinates), so plain ``==``
is structural equality and the objects hash stably.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

ELEMENTS = (
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
    "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds",
    "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
)
_ELEMENT_SET = frozenset(ELEMENTS)

MIN_VOLUME = 1e-6
COORD_TIE_TOL = 1e-9


class StructureError(ValueError):
    """Invalid structure data (bad element, degenerate cell, ...)."""


class PoscarError(ValueError):
    """Base class for POSCAR parse failures; carries the 1-based line number."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class PoscarFormatError(PoscarError):
    """Missing or malformed lines."""


class UnknownElementError(PoscarError):
    pass


class CountMismatchError(PoscarError):
    """Species/counts/coordinate blocks disagree in size."""


class CellVolumeError(PoscarError):
    pass


def is_element(symbol: str) -> bool:
    return symbol in _ELEMENT_SET


def check_element(symbol: str) -> str:
    if symbol not in _ELEMENT_SET:
        raise StructureError(f"unknown element symbol {symbol!r}")
    return symbol


def wrap_coordinate(x: float) -> float:
    """Map x into [0, 1) with ``x - floor(x)``; results rounding up to 1.0 become 0.0."""
    w = x - math.floor(x)
    if w >= 1.0:
        w = 0.0
    return w + 0.0  # drops a negative zero


def _compare_sites(a: Site, b: Site) -> int:
    if a.element != b.element:
        return -1 if a.element < b.element else 1
    for x, y in zip(a.frac, b.frac):
        if abs(x - y) > COORD_TIE_TOL:
            return -1 if x < y else 1
    return 0


@dataclass(frozen=True)
class Site:
    element: str
    frac: tuple[float, float, float]

    def __post_init__(self):
        check_element(self.element)
        if len(self.frac) != 3:
            raise StructureError("fractional coordinate must have 3 components")
        object.__setattr__(self, "frac", tuple(wrap_coordinate(float(x)) for x in self.frac))


@dataclass(frozen=True)
class CrystalStructure:
    """Periodic cell with labelled sites, always stored canonically.

    ``lattice`` holds the three lattice vectors as rows (Angstrom). The
    ``label`` is free-form provenance and takes part in equality; use
    :meth:`same_geometry` to compare lattices and sites only.
    """

    lattice: tuple[tuple[float, float, float], ...]
    sites: tuple[Site, ...]
    label: str = ""

    def __post_init__(self):
        rows = tuple(tuple(float(v) for v in row) for row in self.lattice)
        if len(rows) != 3 or any(len(r) != 3 for r in rows):
            raise StructureError("lattice must be a 3x3 matrix")
        det = float(np.linalg.det(np.array(rows)))
        if not det > MIN_VOLUME:
            raise StructureError(f"cell volume must be > {MIN_VOLUME} A^3 (got {det:g})")
        sites = tuple(s if isinstance(s, Site) else Site(*s) for s in self.sites)
        if not sites:
            raise StructureError("structure needs at least one site")
        sites = tuple(sorted(sites, key=functools.cmp_to_key(_compare_sites)))
        label = " ".join(str(self.label).split())
        object.__setattr__(self, "lattice", rows)
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "label", label)

    @classmethod
    def from_arrays(cls, lattice, elements: Sequence[str], frac, label: str = "") -> CrystalStructure:
        frac = np.asarray(frac, dtype=float).reshape(-1, 3)
        if len(elements) != len(frac):
            raise StructureError("elements and coordinates differ in length")
        sites = [Site(e, tuple(map(float, f))) for e, f in zip(elements, frac)]
        return cls(tuple(map(tuple, np.asarray(lattice, dtype=float))), tuple(sites), label)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.lattice)

    @property
    def frac_coords(self) -> np.ndarray:
        return np.array([s.frac for s in self.sites])

    @property
    def cart_coords(self) -> np.ndarray:
        return self.frac_coords @ self.matrix

    @property
    def elements(self) -> list[str]:
        return [s.element for s in self.sites]

    @property
    def species(self) -> list[str]:
        """Distinct elements in canonical (sorted) order."""
        return sorted(set(self.elements))

    @property
    def volume(self) -> float:
        return float(np.linalg.det(self.matrix))

    def __len__(self) -> int:
        return len(self.sites)

    def with_label(self, label: str) -> CrystalStructure:
        return CrystalStructure(self.lattice, self.sites, label)

    def relabel(self, mapping: Mapping[str, str], label: str | None = None) -> CrystalStructure:
        """Replace element symbols site-wise via ``mapping`` (missing keys unchanged)."""
        sites = tuple(Site(mapping.get(s.element, s.element), s.frac) for s in self.sites)
        return CrystalStructure(self.lattice, sites, self.label if label is None else label)

    def translated(self, shift) -> CrystalStructure:
        shift = tuple(float(v) for v in shift)
        sites = tuple(Site(s.element, tuple(f + d for f, d in zip(s.frac, shift))) for s in self.sites)
        return CrystalStructure(self.lattice, sites, self.label)

    def supercell(self, reps: tuple[int, int, int]) -> CrystalStructure:
        na, nb, nc = reps
        lattice = self.matrix * np.array(reps, dtype=float)[:, None]
        sites = []
        for s in self.sites:
            for i, j, k in itertools.product(range(na), range(nb), range(nc)):
                f = ((s.frac[0] + i) / na, (s.frac[1] + j) / nb, (s.frac[2] + k) / nc)
                sites.append(Site(s.element, f))
        return CrystalStructure(tuple(map(tuple, lattice)), tuple(sites), self.label)

    def geometry_key(self) -> tuple:
        """Hashable key of lattice and sites, ignoring the label."""
        return (self.lattice, self.sites)

    def same_geometry(self, other: CrystalStructure) -> bool:
        return self.geometry_key() == other.geometry_key()


def canonicalize(s: CrystalStructure) -> CrystalStructure:
    """Return the canonical form; structures are canonical on construction, so this rebuilds."""
    return CrystalStructure(s.lattice, s.sites, s.label)


# ---------------------------------------------------------------------------
# Composition


@dataclass(frozen=True)
class Composition:
    """Element -> positive integer atom count. Stored as a sorted tuple of pairs."""

    items: tuple[tuple[str, int], ...] = field(default=())

    def __post_init__(self):
        merged: dict[str, int] = {}
        for el, n in self.items:
            check_element(el)
            if int(n) != n or n < 1:
                raise StructureError(f"atom count for {el} must be a positive integer (got {n})")
            merged[el] = merged.get(el, 0) + int(n)
        if not merged:
            raise StructureError("composition is empty")
        object.__setattr__(self, "items", tuple(sorted(merged.items())))

    @classmethod
    def from_dict(cls, counts: Mapping[str, int]) -> Composition:
        return cls(tuple(counts.items()))

    @classmethod
    def from_formula(cls, formula: str) -> Composition:
        """Parse a simple formula like ``CeFe2In`` (no parentheses)."""
        import re

        tokens = re.findall(r"([A-Z][a-z]?)(\d*)", formula)
        if "".join(a + b for a, b in tokens) != formula or not tokens:
            raise StructureError(f"cannot parse formula {formula!r}")
        return cls(tuple((el, int(n) if n else 1) for el, n in tokens))

    def as_dict(self) -> dict[str, int]:
        return dict(self.items)

    def __getitem__(self, el: str) -> int:
        return self.as_dict().get(el, 0)

    def __iter__(self):
        return iter(el for el, _ in self.items)

    @property
    def elements(self) -> list[str]:
        return [el for el, _ in self.items]

    @property
    def natoms(self) -> int:
        return sum(n for _, n in self.items)

    def reduced(self) -> Composition:
        g = 0
        for _, n in self.items:
            g = math.gcd(g, n)
        return Composition(tuple((el, n // g) for el, n in self.items))

    def fractions(self, elements: Sequence[str]) -> np.ndarray:
        """Atomic fractions in the given element order; raises if an element is missing from ``elements``."""
        extra = set(self.elements) - set(elements)
        if extra:
            raise StructureError(f"composition contains elements outside {list(elements)}: {sorted(extra)}")
        total = self.natoms
        counts = self.as_dict()
        return np.array([counts.get(el, 0) / total for el in elements])

    @property
    def formula(self) -> str:
        return "".join(el if n == 1 else f"{el}{n}" for el, n in self.items)

    @property
    def reduced_formula(self) -> str:
        return self.reduced().formula

    def __str__(self) -> str:
        return self.formula


def composition_of(s: CrystalStructure) -> Composition:
    counts: dict[str, int] = {}
    for site in s.sites:
        counts[site.element] = counts.get(site.element, 0) + 1
    return Composition.from_dict(counts)


# ---------------------------------------------------------------------------
# Periodic geometry


def perpendicular_widths(matrix: np.ndarray) -> np.ndarray:
    """Distances between opposite cell faces along each lattice direction."""
    vol = abs(np.linalg.det(matrix))
    a, b, c = matrix
    return vol / np.array([
        np.linalg.norm(np.cross(b, c)),
        np.linalg.norm(np.cross(c, a)),
        np.linalg.norm(np.cross(a, b)),
    ])


def image_offsets(matrix: np.ndarray, cutoff: float) -> np.ndarray:
    """Integer translations that can bring a wrapped difference vector within ``cutoff``.

    With fractional differences in [-1, 1] any translation outside
    ``ceil(cutoff / width) + 1`` along some axis lands beyond the cutoff.
    """
    bound = np.ceil(cutoff / perpendicular_widths(matrix)).astype(int) + 1
    ranges = [np.arange(-n, n + 1) for n in bound]
    return np.array(list(itertools.product(*ranges)), dtype=float)


def min_image_distance(s: CrystalStructure, i: int, j: int) -> float:
    """Shortest distance from site ``i`` to any periodic image of site ``j``.

    For ``i == j`` the zero translation is excluded, giving the shortest
    lattice vector. Exact for arbitrarily skewed cells: the search radius
    is the length of a known candidate vector, and every translation that
    could beat it is enumerated.
    """
    n = len(s.sites)
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"site index out of range for {n} sites: ({i}, {j})")
    m = s.matrix
    d = np.array(s.sites[j].frac) - np.array(s.sites[i].frac)
    if i == j:
        bound = float(np.min(np.linalg.norm(m, axis=1)))
    else:
        d = d - np.round(d)
        bound = float(np.linalg.norm(d @ m))
    offsets = image_offsets(m, bound)
    vecs = (d + offsets) @ m
    dist = np.linalg.norm(vecs, axis=1)
    if i == j:
        dist = dist[np.any(offsets != 0, axis=1)]
    return float(dist.min())


def neighbor_pairs(s: CrystalStructure, cutoff: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All ordered (i, j, image) pairs with 0 < distance <= cutoff.

    Returns index arrays ``i``, ``j`` and the matching distances.
    """
    m = s.matrix
    frac = s.frac_coords
    offsets = image_offsets(m, cutoff)
    shifts = offsets @ m
    cart = frac @ m
    ii, jj, dd = [], [], []
    for i in range(len(frac)):
        # vectors from site i to every image of every site j
        diff = cart[None, :, :] - cart[i] + shifts[:, None, :]
        dist = np.linalg.norm(diff, axis=2)
        mask = (dist <= cutoff) & (dist > 1e-10)
        _, j_idx = np.nonzero(mask)
        ii.append(np.full(len(j_idx), i))
        jj.append(j_idx)
        dd.append(dist[mask])
    return np.concatenate(ii), np.concatenate(jj), np.concatenate(dd)


# ---------------------------------------------------------------------------
# POSCAR


def _parse_floats(line: str, n: int, lineno: int, what: str) -> list[float]:
    parts = line.split()
    if len(parts) < n:
        raise PoscarFormatError(f"expected {n} numbers for {what}, got {len(parts)}", lineno)
    try:
        return [float(p) for p in parts[:n]]
    except ValueError:
        raise PoscarFormatError(f"non-numeric {what}: {line.strip()!r}", lineno) from None


def parse_poscar(text: str) -> CrystalStructure:
    """Parse VASP 5 POSCAR/CONTCAR text into a canonical structure.

    Selective-dynamics flags, per-site trailing labels and velocity blocks
    are ignored. A negative scale factor is read as the target cell volume.
    """
    lines = text.replace("\r\n", "\n").replace("\r", "\n").split("\n")

    def need(idx: int, what: str) -> str:
        if idx >= len(lines) or (not lines[idx].strip() and idx > 0):
            raise PoscarFormatError(f"missing {what}", idx + 1)
        return lines[idx]

    comment = lines[0] if lines else ""
    scale_parts = need(1, "scale factor").split()
    try:
        scale = [float(p) for p in scale_parts[:3]] if len(scale_parts) >= 3 and _all_float(scale_parts[:3]) \
            else [float(scale_parts[0])]
    except ValueError:
        raise PoscarFormatError(f"bad scale factor {lines[1].strip()!r}", 2) from None
    rows = np.array([_parse_floats(need(2 + k, "lattice vector"), 3, 3 + k, "lattice vector")
                     for k in range(3)])

    raw_det = float(np.linalg.det(rows))
    if len(scale) == 1 and scale[0] < 0:
        if raw_det <= 0:
            raise CellVolumeError("non-positive cell volume", 3)
        rows = rows * (-scale[0] / raw_det) ** (1.0 / 3.0)
    elif len(scale) == 1:
        if scale[0] == 0:
            raise CellVolumeError("zero scale factor", 2)
        rows = rows * scale[0]
    else:
        if any(f <= 0 for f in scale):
            raise CellVolumeError("per-axis scale factors must be positive", 2)
        rows = rows * np.array(scale)[None, :]
    if not np.linalg.det(rows) > MIN_VOLUME:
        raise CellVolumeError(f"non-positive cell volume ({np.linalg.det(rows):g} A^3)", 3)

    symbols = need(5, "element symbol line").split()
    if all(tok.isdigit() for tok in symbols):
        raise PoscarFormatError("element symbol line missing (VASP 4 format is not supported)", 6)
    for tok in symbols:
        if tok not in _ELEMENT_SET:
            raise UnknownElementError(f"unknown element symbol {tok!r}", 6)
    count_tokens = need(6, "atom counts").split()
    try:
        counts = [int(tok) for tok in count_tokens]
    except ValueError:
        raise PoscarFormatError(f"non-integer atom counts {lines[6].strip()!r}", 7) from None
    if len(counts) != len(symbols):
        raise CountMismatchError(f"{len(symbols)} element symbols but {len(counts)} counts", 7)
    if any(c < 0 for c in counts) or sum(counts) == 0:
        raise CountMismatchError("atom counts must be non-negative with a positive total", 7)

    idx = 7
    mode = need(idx, "coordinate mode").strip()
    if mode[:1] in ("S", "s"):
        idx += 1
        mode = need(idx, "coordinate mode").strip()
    if mode[:1] in ("C", "c", "K", "k"):
        cartesian = True
    elif mode[:1] in ("D", "d"):
        cartesian = False
    else:
        raise PoscarFormatError(f"unknown coordinate mode {mode!r}", idx + 1)
    idx += 1

    natoms = sum(counts)
    coords = []
    for k in range(natoms):
        lineno = idx + k + 1
        if idx + k >= len(lines) or not lines[idx + k].strip():
            raise CountMismatchError(
                f"coordinate block has {k} lines but counts require {natoms}", lineno)
        coords.append(_parse_floats(lines[idx + k], 3, lineno, "coordinates"))
    coords = np.array(coords)
    if cartesian:
        if len(scale) == 1 and scale[0] > 0:
            coords = coords * scale[0]
        elif len(scale) == 1:
            coords = coords * (-scale[0] / raw_det) ** (1.0 / 3.0)
        else:
            coords = coords * np.array(scale)[None, :]
        coords = np.linalg.solve(rows.T, coords.T).T

    elements = [el for el, c in zip(symbols, counts) for _ in range(c)]
    lattice = tuple(tuple(float(v) for v in r) for r in rows)
    sites = tuple(Site(el, tuple(float(v) for v in f)) for el, f in zip(elements, coords))
    try:
        return CrystalStructure(lattice, sites, comment)
    except StructureError as exc:
        raise CellVolumeError(str(exc), 3) from None


def _all_float(tokens: Iterable[str]) -> bool:
    try:
        for t in tokens:
            float(t)
    except ValueError:
        return False
    return True


def _fmt(x: float) -> str:
    # repr is the shortest string that round-trips the double exactly
    return repr(float(x))


def write_poscar(s: CrystalStructure) -> str:
    """Canonical POSCAR text: scale 1.0, Direct coordinates, LF endings."""
    out = [s.label, "1.0"]
    for row in s.lattice:
        out.append("  " + " ".join(f"{_fmt(v):>24}" for v in row))
    groups = [(el, len(list(g))) for el, g in itertools.groupby(s.elements)]
    out.append("  " + " ".join(el for el, _ in groups))
    out.append("  " + " ".join(str(n) for _, n in groups))
    out.append("Direct")
    for site in s.sites:
        out.append("  " + " ".join(f"{_fmt(v):>24}" for v in site.frac))
    return "\n".join(out) + "\n"


def read_poscar(path) -> CrystalStructure:
    with open(path, encoding="utf-8") as fh:
        return parse_poscar(fh.read())


def write_poscar_file(s: CrystalStructure, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(write_poscar(s))
