import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import smooth_random_field
from oracles import oracle_assd, oracle_boundary, oracle_dsc, oracle_to
from trajreg.errors import EmptyLabelError, GridMismatchError
from trajreg.field import DeformationField, VelocityField, exponentiate, identity_field
from trajreg.metrics import (MetricReport, assd, boundary_mask, dsc, evaluate, jacobian_stats,
                             roi_tissue_split, target_overlap)
from trajreg.volume import LabelVolume


def L(a, spacing=(1.0, 1.0, 1.0)):
    return LabelVolume(np.asarray(a).astype(int), spacing)


def _cube(shift=0):
    a = np.zeros((10, 8, 8), int)
    a[1 + shift:5 + shift, 2:6, 2:6] = 1
    return a


def test_dsc_examples():
    a = _cube()
    assert dsc(L(a), L(a), 1) == 1.0
    assert dsc(L(a), L(np.roll(a, 5, axis=0)), 1) == 0.0
    assert dsc(L(a), L(_cube(2)), 1) == 0.5
    assert dsc(L(np.zeros((3, 3, 3))), L(np.zeros((3, 3, 3))), 1) == 1.0
    assert dsc(L(a), L(np.zeros_like(a)), 1) == 0.0
    with pytest.raises(GridMismatchError):
        dsc(L(a), L(a[:-1]), 1)


def test_target_overlap_examples():
    a = _cube()
    assert target_overlap(L(a), L(a), 1) == 1.0
    assert target_overlap(L(_cube(2)), L(a), 1) == 0.5
    half = a.copy()
    half[1:3] = 0
    assert target_overlap(L(half), L(a), 1) == 0.5
    assert math.isnan(target_overlap(L(a), L(np.zeros_like(a)), 1))
    z = np.zeros_like(a)
    assert target_overlap(L(z), L(z), 1) == 1.0


def test_assd_examples():
    a = _cube()
    assert assd(L(a), L(a), 1) == 0.0
    p = np.zeros((10, 10, 8), int)
    p[1:9, 1:9, 2] = 1
    p[1:9, 1:9, 5] = 1
    q = np.zeros_like(p)
    q[1:9, 1:9, 2] = 1
    r = np.zeros_like(p)
    r[1:9, 1:9, 5] = 1
    assert assd(L(q), L(r), 1) == 3.0
    b = _cube(1)
    assert assd(L(a), L(b), 1) == pytest.approx(oracle_assd(a, b), abs=1e-12)
    with pytest.raises(EmptyLabelError):
        assd(L(a), L(np.zeros_like(a)), 1)


def test_assd_spacing_aware():
    q = np.zeros((4, 4, 8), int)
    q[:, :, 1] = 1
    r = np.zeros_like(q)
    r[:, :, 4] = 1
    assert assd(L(q, (1, 1, 2.5)), L(r, (1, 1, 2.5)), 1) == 7.5


def test_boundary_matches_oracle(rng):
    m = rng.random((6, 5, 7)) < 0.6
    got = set(map(tuple, np.argwhere(boundary_mask(m))))
    assert got == set(oracle_boundary(m))


def test_random_pairs_against_oracles():
    rng = np.random.default_rng(7)
    for _ in range(200):
        dims = tuple(rng.integers(1, 9, 3))
        p = rng.uniform(0.1, 0.9)
        a = (rng.random(dims) < p).astype(int)
        b = (rng.random(dims) < p).astype(int)
        assert dsc(L(a), L(b), 1) == oracle_dsc(a, b)
        to, ot = target_overlap(L(a), L(b), 1), oracle_to(a, b)
        assert (math.isnan(to) and math.isnan(ot)) or to == ot
        if a.any() and b.any():
            assert assd(L(a), L(b), 1) == oracle_assd(a, b)


@given(a=arrays(np.int64, (4, 3, 5), elements=st.integers(0, 3)),
       b=arrays(np.int64, (4, 3, 5), elements=st.integers(0, 3)),
       perm=st.permutations([0, 1, 2, 3]))
def test_relabel_invariance_and_symmetry(a, b, perm):
    pa, pb = np.take(perm, a), np.take(perm, b)
    for lab in range(4):
        assert dsc(L(a), L(b), lab) == dsc(L(pa), L(pb), perm[lab])
        assert dsc(L(a), L(b), lab) == dsc(L(b), L(a), lab)
        t1, t2 = target_overlap(L(a), L(b), lab), target_overlap(L(pa), L(pb), perm[lab])
        assert (math.isnan(t1) and math.isnan(t2)) or t1 == t2
        if (a == lab).any() and (b == lab).any():
            assert assd(L(a), L(b), lab) == pytest.approx(assd(L(b), L(a), lab), abs=1e-12)


def test_roi_tissue_split(rng):
    roi = rng.integers(0, 5, (6, 6, 6))
    gm = rng.integers(0, 2, (6, 6, 6))
    wm = rng.integers(0, 2, (6, 6, 6)) * (1 - gm)
    in_gm, in_wm = roi_tissue_split(L(roi), L(gm), L(wm))
    for (x, y, z), r in np.ndenumerate(roi):
        assert in_gm.data[x, y, z] == (r if gm[x, y, z] else 0)
        assert in_wm.data[x, y, z] == (r if wm[x, y, z] else 0)
    z = np.zeros_like(roi)
    e1, e2 = roi_tissue_split(L(roi), L(z), L(z))
    assert not e1.data.any() and not e2.data.any()
    full = np.full_like(roi, 9)
    s1, s2 = roi_tissue_split(L(full), L(gm), L(wm))
    assert np.array_equal(s1.data, gm * 9) and np.array_equal(s2.data, wm * 9)


def test_jacobian_stats(rng):
    idf = identity_field(L(np.zeros((6, 6, 6))))
    assert jacobian_stats(idf) == (1.0, 0.0)
    v = VelocityField(smooth_random_field(rng, (16, 16, 16), 2.0, 2.0))
    assert jacobian_stats(exponentiate(v))[1] == 0.0
    g = np.indices((8, 8, 8)).astype(float)
    folded = np.zeros((8, 8, 8, 3))
    folded[..., 0] = -2 * g[0]
    mn, frac = jacobian_stats(DeformationField(folded))
    assert mn == pytest.approx(-1.0) and frac == 1.0


def test_report_round_trip_and_exclusions(tmp_path):
    fixed = np.zeros((8, 8, 8), int)
    fixed[1:5, 1:5, 1:5] = 1
    fixed[5:7, 5:7, 5:7] = 2
    warped = np.roll(fixed, 1, axis=0)
    warped[0, 0, 0] = 3  # absent from fixed
    rep = evaluate(L(warped), L(fixed), phi=identity_field(L(fixed)))
    assert [s.label for s in rep.scores] == [1, 2, 3]
    assert rep.excluded == [(3, "empty in fixed")]
    assert rep.score(3).to is None
    assert rep.means()["dsc"] == pytest.approx((rep.score(1).dsc + rep.score(2).dsc) / 2)
    assert rep.jacobian_min == 1.0
    paths = rep.write(tmp_path / "r.tsv")
    assert MetricReport.from_json(paths[1].read_text()) == rep
    table = paths[0].read_text().splitlines()
    assert table[0].split("\t")[:4] == ["label", "DSC", "TO", "ASSD_mm"]
    assert "# excluded\t3\tempty in fixed" in table
