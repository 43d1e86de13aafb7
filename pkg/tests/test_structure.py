import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amdflow.structure import (CellVolumeError, Composition, CountMismatchError, CrystalStructure,
                               PoscarFormatError, StructureError, UnknownElementError, canonicalize,
                               composition_of, min_image_distance, neighbor_pairs, parse_poscar,
                               wrap_coordinate, write_poscar)
from conftest import cubic
from oracles import brute_force_min_image, brute_force_neighbors

CU = """Cu
1.0
3.6 0 0
0 3.6 0
0 0 3.6
Cu
1
Direct
0 0 0
"""


def test_parse_cubic_cu_volume():
    s = parse_poscar(CU)
    assert len(s) == 1
    assert s.volume == pytest.approx(46.656, abs=1e-9)


def test_cartesian_mode():
    s = parse_poscar(CU.replace("Direct\n0 0 0", "Cartesian\n1.8 1.8 1.8"))
    assert np.allclose(s.frac_coords, [[0.5, 0.5, 0.5]])


def test_count_mismatch_reports_coordinate_block():
    text = CU.replace("Cu\n1\n", "Cu Fe\n1 2\n") + "0.5 0.5 0.5\n"
    with pytest.raises(CountMismatchError) as exc:
        parse_poscar(text)
    assert exc.value.lineno is not None and exc.value.lineno >= 8


def test_unknown_element():
    with pytest.raises(UnknownElementError) as exc:
        parse_poscar(CU.replace("Cu\n1", "Xx\n1"))
    assert exc.value.lineno == 6


def test_degenerate_cell():
    with pytest.raises(CellVolumeError):
        parse_poscar(CU.replace("0 0 3.6", "0 0 0"))


def test_left_handed_cell_rejected():
    with pytest.raises(CellVolumeError):
        parse_poscar(CU.replace("0 0 3.6", "0 0 -3.6"))


def test_truncated_file():
    with pytest.raises(PoscarFormatError):
        parse_poscar("\n".join(CU.splitlines()[:4]))


def test_negative_scale_is_volume():
    s = parse_poscar(CU.replace("1.0\n3.6 0 0\n0 3.6 0\n0 0 3.6", "-64\n1 0 0\n0 1 0\n0 0 1"))
    assert s.volume == pytest.approx(64.0, rel=1e-12)
    assert s.matrix[0, 0] == pytest.approx(4.0)


def test_crlf_and_selective_dynamics():
    text = CU.replace("Direct", "Selective dynamics\nDirect").replace("0 0 0\n", "0 0 0 T T F\n")
    s = parse_poscar(text.replace("\n", "\r\n"))
    assert s == parse_poscar(CU)


def test_write_cu():
    lines = write_poscar(parse_poscar(CU)).splitlines()
    assert lines[5].strip() == "Cu" and lines[6].strip() == "1" and lines[7] == "Direct"


def test_write_sorts_sites():
    s = cubic(4.0, ["Fe", "Ce", "Fe"], [[0.5, 0.5, 0.5], [0, 0, 0], [0.25, 0, 0]])
    assert s.elements == ["Ce", "Fe", "Fe"]
    lines = write_poscar(s).splitlines()
    assert lines[5].split() == ["Ce", "Fe"] and lines[6].split() == ["1", "2"]
    assert [float(v) for v in lines[9].split()] == [0.25, 0, 0]


def test_wrap():
    assert wrap_coordinate(1.0) == 0.0
    assert wrap_coordinate(-0.25) == 0.75
    assert wrap_coordinate(-1e-20) == 0.0
    assert 0.0 <= wrap_coordinate(-1e-17) < 1.0


def test_composition_examples():
    s = cubic(4.0, ["Ce", "Fe", "Fe", "In"], [[0, 0, 0], [0.5, 0, 0], [0, 0.5, 0], [0, 0, 0.5]])
    assert composition_of(s).as_dict() == {"Ce": 1, "Fe": 2, "In": 1}
    assert composition_of(cubic(3, ["Cu"], [[0, 0, 0]])).as_dict() == {"Cu": 1}
    assert Composition.from_dict({"Ce": 2, "Fe": 4, "In": 2}).reduced().as_dict() == {"Ce": 1, "Fe": 2, "In": 1}
    assert Composition.from_formula("Ce2Fe4In2").reduced().formula == "CeFe2In"


def test_empty_structure_rejected():
    with pytest.raises(StructureError):
        CrystalStructure.from_arrays(np.eye(3), [], np.zeros((0, 3)))


def test_min_image_examples():
    s = cubic(2.0, ["Cu", "Cu"], [[0, 0, 0], [0.9, 0, 0]])
    assert min_image_distance(s, 0, 1) == pytest.approx(0.2, abs=1e-12)
    s = cubic(2.0, ["Cu", "Fe"], [[0, 0, 0], [0.5, 0.5, 0.5]])
    assert min_image_distance(s, 0, 1) == pytest.approx(math.sqrt(3), abs=1e-12)
    assert min_image_distance(s, 0, 0) == pytest.approx(2.0)
    with pytest.raises(IndexError):
        min_image_distance(s, 0, 2)


def test_min_image_skewed_cell():
    lat = np.array([[5.0, 0, 0], [4.6, 1.2, 0], [4.1, 0.7, 0.9]])
    rng = np.random.default_rng(3)
    frac = rng.random((4, 3))
    s = CrystalStructure.from_arrays(lat, ["Cu"] * 4, frac)
    f = s.frac_coords
    for i in range(4):
        for j in range(4):
            ref = brute_force_min_image(lat, f[i], f[j], exclude_zero=(i == j))
            assert min_image_distance(s, i, j) == pytest.approx(ref, abs=1e-10)


def test_neighbor_pairs_match_loops():
    lat = np.array([[3.0, 0, 0], [1.0, 2.8, 0], [0.5, 0.4, 3.1]])
    s = CrystalStructure.from_arrays(lat, ["Ce", "Fe"], [[0, 0, 0], [0.3, 0.6, 0.2]])
    i, j, d = neighbor_pairs(s, 6.0)
    ref = brute_force_neighbors(lat, s.frac_coords, 6.0)
    assert sorted(np.round(d, 9)) == sorted(round(x[2], 9) for x in ref)


lattices = st.lists(st.floats(-0.4, 0.4), min_size=6, max_size=6).map(
    lambda v: np.array([[3 + v[0], 0, 0], [v[1], 3 + v[2], 0], [v[3], v[4], 3 + v[5]]]))
fracs = st.lists(st.tuples(*[st.floats(-2, 2, allow_nan=False)] * 3), min_size=1, max_size=6)
species = st.sampled_from(["Ce", "Fe", "In", "Cu", "O"])


@st.composite
def structures(draw):
    f = draw(fracs)
    els = [draw(species) for _ in f]
    return CrystalStructure.from_arrays(draw(lattices), els, f, "hyp")


@settings(max_examples=150, deadline=None)
@given(structures())
def test_round_trip_property(s):
    back = parse_poscar(write_poscar(s))
    assert back == s
    assert back.lattice == s.lattice and back.sites == s.sites


@settings(max_examples=100, deadline=None)
@given(structures())
def test_canonicalization_idempotent(s):
    assert canonicalize(canonicalize(s)) == canonicalize(s)
    assert all(0.0 <= x < 1.0 for site in s.sites for x in site.frac)


@settings(max_examples=60, deadline=None)
@given(structures(), st.tuples(*[st.floats(-1, 1)] * 3))
def test_min_image_symmetric_and_translation_invariant(s, shift):
    n = len(s)
    t = s.translated(shift)
    for i in range(n):
        for j in range(n):
            d = min_image_distance(s, i, j)
            assert d == pytest.approx(min_image_distance(s, j, i), abs=1e-9)
    # translation keeps the multiset of pair distances
    a = sorted(min_image_distance(s, i, j) for i in range(n) for j in range(n))
    b = sorted(min_image_distance(t, i, j) for i in range(n) for j in range(n))
    assert np.allclose(a, b, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(structures(), st.randoms())
def test_composition_order_invariant(s, rnd):
    order = list(range(len(s)))
    rnd.shuffle(order)
    shuffled = CrystalStructure.from_arrays(s.matrix, [s.elements[k] for k in order], s.frac_coords[order], s.label)
    assert composition_of(shuffled) == composition_of(s)
    assert shuffled == s
