"""Formation energies, lower convex hull, energy above hull and decomposition.

Compositions of an n-element system are embedded as the atomic fractions
of elements 2..n, lifted by formation energy. The stable phases are the
vertices of the lower convex hull of those points.

Degenerate inputs (an entry lying exactly on a hull facet or edge) are
common with small-integer stoichiometries. Before hull construction every
energy is lowered by ``PERTURBATION * sum(x_i**2)``, a tiny strictly
concave term. Coplanar and collinear entries then fall strictly above the
hull unless they are true extreme points, so the vertex set contains
extreme points only. All reported energies use the unperturbed values;
the perturbation only picks the triangulation and moves the hull surface
by at most ``PERTURBATION``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .structure import Composition, CrystalStructure, write_poscar

logger = logging.getLogger(__name__)

ON_HULL_TOL = 1e-8
PERTURBATION = 1e-9
_PLANE_TOL = 1e-12
_BARY_TOL = 1e-9


class HullError(RuntimeError):
    pass


class MissingReferenceError(HullError):
    def __init__(self, element: str):
        self.element = element
        super().__init__(f"no elemental reference energy for {element}")


@dataclass(frozen=True)
class PhaseEntry:
    id: str
    composition: Composition
    energy_per_atom: float
    is_reference: bool = False

    def __post_init__(self):
        if not math.isfinite(self.energy_per_atom):
            raise ValueError(f"entry {self.id} has non-finite energy")
        object.__setattr__(self, "composition", self.composition.reduced())

    @classmethod
    def from_total(cls, id: str, composition: Composition, total_energy: float,
                   is_reference: bool = False) -> PhaseEntry:
        return cls(id, composition, total_energy / composition.natoms, is_reference)

    @property
    def is_elemental(self) -> bool:
        return len(self.composition.items) == 1


@dataclass
class ReferenceSet:
    refs: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, el: str) -> float:
        try:
            return self.refs[el]
        except KeyError:
            raise MissingReferenceError(el) from None

    def __contains__(self, el: str) -> bool:
        return el in self.refs

    @classmethod
    def from_entries(cls, entries: Iterable[PhaseEntry],
                     extra: Mapping[str, float] | None = None) -> ReferenceSet:
        """Lowest elemental energy per element among ``entries`` and ``extra``."""
        refs: dict[str, float] = dict(extra or {})
        for e in entries:
            if e.is_elemental:
                el = e.composition.elements[0]
                if el not in refs or e.energy_per_atom < refs[el]:
                    refs[el] = e.energy_per_atom
        return cls(refs)


def read_references(path) -> dict[str, float]:
    """``<element>\\t<eV/atom>`` lines; blank lines and ``#`` comments are skipped."""
    refs = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected '<element> <energy>'")
        refs[parts[0]] = float(parts[1])
    return refs


def formation_energy_per_atom(total_energy: float, comp: Composition, refs: ReferenceSet) -> float:
    natoms = comp.natoms
    if natoms <= 0:
        raise ValueError("composition has no atoms")
    ref_sum = sum(n * refs[el] for el, n in comp.items)
    return (total_energy - ref_sum) / natoms


def _formation(entry: PhaseEntry, refs: ReferenceSet) -> float:
    comp = entry.composition
    return formation_energy_per_atom(entry.energy_per_atom * comp.natoms, comp, refs)


# ---------------------------------------------------------------------------
# lower hull kernels; every kernel returns lower facets as index tuples


def _lower_chain(x: np.ndarray, e: np.ndarray) -> list[tuple[int, int]]:
    order = sorted(range(len(x)), key=lambda i: (x[i], e[i], i))
    hull: list[int] = []
    for i in order:
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (x[b] - x[a]) * (e[i] - e[a]) - (e[b] - e[a]) * (x[i] - x[a])
            if cross <= _PLANE_TOL * (x[i] - x[a]):
                hull.pop()
            else:
                break
        hull.append(i)
    return list(zip(hull[:-1], hull[1:]))


def _face_plane(p: np.ndarray, face: tuple[int, int, int]):
    a, b, c = p[list(face)]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n)
    if norm < 1e-300:
        return np.zeros(3), 0.0
    n = n / norm
    return n, float(n @ a)


def _incremental_hull_3d(p: np.ndarray, seed: Sequence[int]) -> list[tuple[int, int, int]]:
    """Full 3-D convex hull by incremental insertion in index order.

    ``seed`` names four affinely independent points. A point is inserted
    only when it lies more than ``_PLANE_TOL`` outside some face.
    """
    a, b, c, d = seed
    faces = []
    for f, opposite in (((a, b, c), d), ((a, b, d), c), ((a, c, d), b), ((b, c, d), a)):
        n, off = _face_plane(p, f)
        if n @ p[opposite] - off > 0:
            f = (f[0], f[2], f[1])
        faces.append(f)
    planes = [_face_plane(p, f) for f in faces]
    seeded = set(seed)
    for i in range(len(p)):
        if i in seeded:
            continue
        normals = np.array([pl[0] for pl in planes])
        offsets = np.array([pl[1] for pl in planes])
        dist = normals @ p[i] - offsets
        visible = dist > _PLANE_TOL
        if not visible.any():
            continue
        vis_edges = set()
        for f, v in zip(faces, visible):
            if v:
                vis_edges.update(((f[0], f[1]), (f[1], f[2]), (f[2], f[0])))
        horizon = [(u, w) for (u, w) in vis_edges if (w, u) not in vis_edges]
        faces = [f for f, v in zip(faces, visible) if not v]
        planes = [pl for pl, v in zip(planes, visible) if not v]
        for u, w in sorted(horizon):
            f = (u, w, i)
            faces.append(f)
            planes.append(_face_plane(p, f))
    return faces


def _lower_triangles(x: np.ndarray, e: np.ndarray) -> list[tuple[int, ...]]:
    m = len(x)
    span = float(e.max() - e.min()) + 1.0
    ceiling = np.array([1.0 / 3.0, 1.0 / 3.0, float(e.max()) + 10.0 * span])
    pts = np.vstack([np.column_stack([x, e]), ceiling])
    corners = [int(np.argmin(np.abs(x - c).sum(axis=1))) for c in ((0, 0), (1, 0), (0, 1))]
    faces = _incremental_hull_3d(pts, [*corners, m])
    lower = []
    for f in faces:
        if m in f:
            continue
        n, _ = _face_plane(pts, f)
        if n[2] < -_PLANE_TOL:
            lower.append(f)
    return lower


def _lower_qhull(x: np.ndarray, e: np.ndarray) -> list[tuple[int, ...]]:
    from scipy.spatial import ConvexHull

    dim = x.shape[1]
    span = float(e.max() - e.min()) + 1.0
    centroid = np.full(dim, 1.0 / (dim + 1))
    pts = np.vstack([np.column_stack([x, e]), np.append(centroid, e.max() + 10.0 * span)])
    ceiling = len(x)
    hull = ConvexHull(pts, qhull_options="Qt")
    lower = []
    for simplex, eq in zip(hull.simplices, hull.equations):
        if ceiling in simplex or not eq[-2] < -_PLANE_TOL:
            continue
        lower.append(tuple(int(v) for v in simplex))
    return lower


# ---------------------------------------------------------------------------


@dataclass
class _Facet:
    ids: tuple[str, ...]
    inverse: np.ndarray  # maps (x, 1) to barycentric weights
    energies: np.ndarray


@dataclass
class ConvexHullResult:
    elements: tuple[str, ...]
    vertices: list[str]
    facets: list[tuple[str, ...]]
    refs: ReferenceSet
    tolerance: float = ON_HULL_TOL
    formation: dict[str, float] = field(default_factory=dict)
    compositions: dict[str, Composition] = field(default_factory=dict)
    synthetic: list[PhaseEntry] = field(default_factory=list)
    _facets: list[_Facet] = field(default_factory=list, repr=False)
    _vertex_by_comp: dict = field(default_factory=dict, repr=False)

    @property
    def dimension(self) -> int:
        return len(self.elements)

    def coords(self, comp: Composition) -> np.ndarray:
        return comp.fractions(self.elements)[1:]

    def hull_energy(self, comp: Composition) -> float:
        return decompose(comp, self).hull_energy


def build_hull(entries: Sequence[PhaseEntry], refs: ReferenceSet,
               elements: Sequence[str] | None = None) -> ConvexHullResult:
    """Lower convex hull of formation energies over the composition simplex.

    References count as entries: an element whose reference is lower than
    every elemental entry (or has none) gets a synthetic ``ref:<El>`` entry.
    """
    if elements is None:
        elements = sorted({el for e in entries for el in e.composition.elements} | set(refs.refs))
    elements = tuple(elements)
    n = len(elements)
    if n < 2:
        raise HullError("a hull needs at least two elements")
    for el in elements:
        refs[el]  # raises MissingReferenceError

    formation: dict[str, float] = {}
    compositions: dict[str, Composition] = {}
    synthetic = []
    for el in elements:
        elemental = [e for e in entries if e.composition.elements == [el]]
        if not elemental or min(e.energy_per_atom for e in elemental) > refs[el]:
            synthetic.append(PhaseEntry(f"ref:{el}", Composition(((el, 1),)), refs[el], True))
    for e in [*entries, *synthetic]:
        if e.id in formation:
            raise HullError(f"duplicate entry id {e.id}")
        bad = set(e.composition.elements) - set(elements)
        if bad:
            raise HullError(f"entry {e.id} has elements outside the system: {sorted(bad)}")
        formation[e.id] = _formation(e, refs)
        compositions[e.id] = e.composition

    # lowest formation energy per reduced composition
    best: dict[tuple, str] = {}
    for eid in sorted(formation):
        key = compositions[eid].items
        if key not in best or formation[eid] < formation[best[key]]:
            best[key] = eid
    ids = sorted(best.values(), key=lambda i: (tuple(compositions[i].fractions(elements)), i))
    full = np.array([compositions[i].fractions(elements) for i in ids])
    x = full[:, 1:]
    ef = np.array([formation[i] for i in ids])
    perturbed = ef - PERTURBATION * np.sum(full**2, axis=1)

    if n == 2:
        simplices = _lower_chain(x[:, 0], perturbed)
    elif n == 3:
        simplices = _lower_triangles(x, perturbed)
    else:
        simplices = _lower_qhull(x, perturbed)

    facets: list[_Facet] = []
    covered = 0.0
    for simplex in simplices:
        mat = np.vstack([x[list(simplex)].T, np.ones(len(simplex))])
        vol = abs(np.linalg.det(mat)) / math.factorial(n - 1)
        if vol < 1e-14:
            continue
        covered += vol
        order = sorted(simplex, key=lambda k: ids[k])
        mat = np.vstack([x[order].T, np.ones(n)])
        facets.append(_Facet(tuple(ids[k] for k in order), np.linalg.inv(mat), ef[order]))
    simplex_volume = 1.0 / math.factorial(n - 1)
    if abs(covered - simplex_volume) > 1e-9:
        raise HullError(f"internal: lower hull covers {covered:.12g} of {simplex_volume:.12g}")
    facets.sort(key=lambda f: f.ids)

    vertex_ids = sorted({i for f in facets for i in f.ids})
    return ConvexHullResult(
        elements=elements,
        vertices=vertex_ids,
        facets=[f.ids for f in facets],
        refs=refs,
        formation=formation,
        compositions=compositions,
        synthetic=synthetic,
        _facets=facets,
        _vertex_by_comp={compositions[i].items: i for i in vertex_ids},
    )


@dataclass(frozen=True)
class Decomposition:
    parts: tuple[tuple[str, float], ...]
    hull_energy: float


def decompose(comp: Composition, hull: ConvexHullResult) -> Decomposition:
    """Hull phases (atomic-fraction weights) that ``comp`` separates into."""
    comp = comp.reduced()
    vid = hull._vertex_by_comp.get(comp.items)
    if vid is not None:
        return Decomposition(((vid, 1.0),), hull.formation[vid])
    q = np.append(hull.coords(comp), 1.0)
    best, best_min = None, -np.inf
    for f in hull._facets:
        lam = f.inverse @ q
        if lam.min() > best_min:
            best, best_min = (f, lam), lam.min()
    if best is None or best_min < -_BARY_TOL:
        raise HullError(f"composition {comp} lies outside every hull facet")
    f, lam = best
    lam = np.where(lam < 1e-12, 0.0, lam)
    lam = lam / lam.sum()
    parts = tuple((i, float(w)) for i, w in zip(f.ids, lam) if w > 0.0)
    return Decomposition(parts, float(lam @ f.energies))


def energy_above_hull(entry: PhaseEntry, hull: ConvexHullResult) -> float:
    ef = _formation(entry, hull.refs)
    return ef - decompose(entry.composition, hull).hull_energy


def entry_energies_above_hull(entries: Sequence[PhaseEntry], hull: ConvexHullResult) -> dict[str, float]:
    return {e.id: energy_above_hull(e, hull) for e in entries}


def promote_candidates(entries: Sequence[PhaseEntry], hull: ConvexHullResult, e_cut: float,
                       dest, structures: Mapping[str, CrystalStructure]) -> list[str]:
    """Copy structures of entries within ``e_cut`` of the hull to ``dest/<id>.vasp``.

    ``dest`` is emptied of ``*.vasp`` files first so repeated calls leave the
    same contents. Entries without a structure (synthetic references) are
    ranked but not copied.
    """
    dest = Path(dest)
    e_above = entry_energies_above_hull(entries, hull)
    chosen = sorted((ea, eid) for eid, ea in e_above.items() if ea <= e_cut + hull.tolerance)
    try:
        dest.mkdir(parents=True, exist_ok=True)
        for old in dest.glob("*.vasp"):
            old.unlink()
        for _, eid in chosen:
            s = structures.get(eid)
            if s is not None:
                (dest / f"{eid}.vasp").write_text(write_poscar(s), encoding="utf-8")
    except OSError as exc:
        raise HullError(f"cannot write promoted structures to {dest}: {exc}") from exc
    return [eid for _, eid in chosen]
