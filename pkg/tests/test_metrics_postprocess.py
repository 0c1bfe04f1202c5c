import itertools
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from udaseg.core_data import LabelMask
from udaseg.errors import UndefinedMetricError
from udaseg.metrics import assd, dice_score, surface_voxels
from udaseg.postprocess import (connected_components, largest_component_per_class, postprocess_mask,
                                remove_vs_false_positives)

# ---------------------------------------------------------------------------
# oracles


def _neighbours(p, shape, connectivity):
    for d in itertools.product((-1, 0, 1), repeat=3):
        if d == (0, 0, 0) or (connectivity == 6 and sum(map(abs, d)) != 1):
            continue
        q = tuple(a + b for a, b in zip(p, d))
        if all(0 <= c < n for c, n in zip(q, shape)):
            yield q


def _flood_fill(labels, k, connectivity):
    """Components as frozensets of voxel tuples, by breadth-first search."""
    todo = {tuple(int(c) for c in p) for p in np.argwhere(labels == k)}
    comps = []
    while todo:
        seed = min(todo)
        todo.discard(seed)
        comp, queue = {seed}, deque([seed])
        while queue:
            for q in _neighbours(queue.popleft(), labels.shape, connectivity):
                if q in todo:
                    todo.discard(q)
                    comp.add(q)
                    queue.append(q)
        comps.append(frozenset(comp))
    return comps


def _surface_oracle(b):
    out = []
    for p in map(tuple, np.argwhere(b)):
        for axis in range(3):
            for step in (-1, 1):
                q = list(p)
                q[axis] += step
                if not 0 <= q[axis] < b.shape[axis] or not b[tuple(q)]:
                    out.append(p)
                    break
            else:
                continue
            break
    return out


def _assd_oracle(p, g, spacing):
    sp, sg = _surface_oracle(p), _surface_oracle(g)

    def d(a, b):
        return math.sqrt(sum(((x - y) * s) ** 2 for x, y, s in zip(a, b, spacing)))
    total = sum(min(d(a, b) for b in sg) for a in sp) + sum(min(d(b, a) for a in sp) for b in sg)
    return total / (len(sp) + len(sg))


def _mask(arr, spacing=(1.0, 1.0, 1.0)):
    return LabelMask(np.asarray(arr, np.uint8), spacing)


# ---------------------------------------------------------------------------
# dice


def test_dice_identical_and_arithmetic():
    g = np.zeros((4, 4, 4), np.uint8)
    g[:2, :2, :2] = 1
    assert dice_score(_mask(g), _mask(g), 1) == 1.0
    p = np.zeros_like(g)
    p[1:3, :2, :2] = 1  # |P|=8, |G|=8, overlap 4
    assert dice_score(_mask(p), _mask(g), 1) == 0.5
    assert dice_score(_mask(np.zeros_like(g)), _mask(np.zeros_like(g)), 1) == 1.0
    assert dice_score(_mask(np.zeros_like(g)), _mask(g), 1) == 0.0
    with pytest.raises(ValueError):
        dice_score(_mask(g), _mask(g[:3]), 1)


def test_dice_matches_set_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = rng.integers(0, 3, (2, 4, 5, 6))
        for k in (1, 2):
            P = {tuple(x) for x in np.argwhere(a == k)}
            G = {tuple(x) for x in np.argwhere(b == k)}
            expected = 1.0 if not P and not G else 2 * len(P & G) / (len(P) + len(G))
            assert dice_score(a, b, k) == expected
            assert dice_score(b, a, k) == dice_score(a, b, k)


# ---------------------------------------------------------------------------
# assd


def test_surface_definition():
    b = np.zeros((5, 5, 5), bool)
    b[1:4, 1:4, 1:4] = True
    s = surface_voxels(b)
    assert s.sum() == 26 and not s[2, 2, 2]
    assert set(map(tuple, np.argwhere(s))) == set(_surface_oracle(b))


def test_assd_identical_is_zero():
    g = np.zeros((6, 6, 6), np.uint8)
    g[1:4, 2:5, 1:3] = 1
    assert assd(_mask(g), _mask(g), 1) == 0.0


def test_assd_parallel_planes():
    p, g = np.zeros((8, 5, 5), np.uint8), np.zeros((8, 5, 5), np.uint8)
    p[1], g[4] = 1, 1
    assert assd(_mask(p), _mask(g), 1, (1, 1, 1)) == pytest.approx(3.0, abs=1e-12)
    assert _assd_oracle(p == 1, g == 1, (1, 1, 1)) == pytest.approx(3.0, abs=1e-12)


def test_assd_matches_exhaustive_oracle():
    rng = np.random.default_rng(1)
    spacings = [(1.0, 1.0, 1.0), (1.5, 0.468975, 0.46875), (2.0, 0.5, 0.75)]
    for trial in range(40):
        a = (rng.random((5, 6, 6)) < 0.3).astype(np.uint8)
        b = (rng.random((5, 6, 6)) < 0.3).astype(np.uint8)
        if not a.any() or not b.any():
            continue
        sp = spacings[trial % 3]
        got = assd(a, b, 1, sp)
        assert got == pytest.approx(_assd_oracle(a == 1, b == 1, sp), abs=1e-9)
        assert assd(b, a, 1, sp) == pytest.approx(got, abs=1e-12)


def test_assd_undefined_on_empty():
    g = np.zeros((3, 3, 3), np.uint8)
    g[1, 1, 1] = 1
    with pytest.raises(UndefinedMetricError):
        assd(np.zeros_like(g), g, 1)


# ---------------------------------------------------------------------------
# connected components


def test_components_cube_and_diagonal():
    m = np.zeros((5, 5, 5), np.uint8)
    m[1:4, 1:4, 1:4] = 1
    comps = connected_components(m, 1)
    assert len(comps) == 1 and comps[0].centroid == (2.0, 2.0, 2.0) and comps[0].size == 27
    d = np.zeros((3, 3, 3), np.uint8)
    d[0, 0, 0] = d[1, 1, 1] = 1
    assert len(connected_components(d, 1, 26)) == 1
    assert len(connected_components(d, 1, 6)) == 2
    assert connected_components(np.zeros((2, 2, 2), np.uint8), 2) == []
    with pytest.raises(ValueError):
        connected_components(d, 0)


@pytest.mark.parametrize("connectivity", [6, 26])
def test_components_match_flood_fill(connectivity):
    rng = np.random.default_rng(connectivity)
    for _ in range(100):
        m = np.where(rng.random((5, 6, 7)) < 0.15, rng.integers(1, 3, (5, 6, 7)), 0)
        for k in (1, 2):
            got = {frozenset(map(tuple, c.voxels.tolist())) for c in connected_components(m, k, connectivity)}
            assert got == set(_flood_fill(m, k, connectivity))


# ---------------------------------------------------------------------------
# post-processing rules


def _blob_case(dz):
    """Cochlea at z=5 plus two VS blobs: a big one next to the cochlea and a small one dz slices below it."""
    m = np.zeros((30, 12, 12), np.uint8)
    m[4:7, 2:5, 2:5] = 2  # centroid z = 5
    m[3:8, 6:11, 6:11] = 1  # main VS, centroid z = 5
    m[5 + dz - 1:5 + dz + 2, 1:3, 8:10] = 1  # distractor, centroid z = 5 + dz
    return _mask(m)


def test_false_positive_rule_threshold_is_strict():
    removed, found = remove_vs_false_positives(_blob_case(16), 15)
    assert found and (removed.labels[18:, :, :] == 1).sum() == 0
    kept, _ = remove_vs_false_positives(_blob_case(14), 15)
    assert (kept.labels[17:21, 1:3, 8:10] == 1).sum() == 12
    edge, _ = remove_vs_false_positives(_blob_case(15), 15)
    assert (edge.labels[18:22, 1:3, 8:10] == 1).sum() == 12


def test_false_positive_rule_sign_and_missing_cochlea(caplog):
    flipped, _ = remove_vs_false_positives(_blob_case(16), 15, z_sign=-1)
    assert np.array_equal(flipped.labels, _blob_case(16).labels)
    m = _blob_case(16).labels.copy()
    m[m == 2] = 0
    with caplog.at_level("WARNING"):
        out, found = remove_vs_false_positives(_mask(m))
    assert not found and np.array_equal(out.labels, m) and "no cochlea" in caplog.text


def test_largest_component():
    m = np.zeros((6, 12, 12), np.uint8)
    m[0, 0, :10] = 1
    m[4, 8, :3] = 1
    m[2, 5:7, 5:7] = 2
    out = largest_component_per_class(_mask(m))
    assert (out.labels == 1).sum() == 10 and (out.labels[4] == 1).sum() == 0
    assert (out.labels == 2).sum() == 4
    single = _mask(m * (m == 2))
    assert np.array_equal(largest_component_per_class(single).labels, single.labels)
    tie = np.zeros((4, 4, 4), np.uint8)
    tie[3, 3, 3] = tie[0, 0, 0] = 1
    assert largest_component_per_class(_mask(tie)).labels[0, 0, 0] == 1


def test_chain_order_false_positive_first():
    # the distractor is the largest VS blob: removing it first leaves the near one
    m = np.zeros((40, 12, 12), np.uint8)
    m[4:7, 2:5, 2:5] = 2
    m[4:6, 6:8, 6:8] = 1
    m[25:32, 4:10, 4:10] = 1
    out = postprocess_mask(_mask(m))
    assert (out.labels == 1).sum() == 8


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.uint8, (8, 6, 6), elements=st.sampled_from([0, 0, 0, 1, 2])),
       st.sampled_from([6, 26]), st.integers(0, 4))
def test_postprocess_idempotent_and_never_adds(arr, connectivity, threshold):
    m = _mask(arr)
    once = postprocess_mask(m, threshold, connectivity)
    twice = postprocess_mask(once, threshold, connectivity)
    assert np.array_equal(once.labels, twice.labels)
    for k in (1, 2):
        assert not np.any((once.labels == k) & (arr != k))
        assert len(connected_components(once, k, connectivity)) <= 1
