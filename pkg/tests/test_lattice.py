import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from snsmix.lattice import (ModeSet, enumerate_modes, in_plus, modes_from_json, modes_to_json,
                            perp_basis, project_perp)

nonzero = st.tuples(*[st.integers(-6, 6)] * 3).filter(lambda k: any(k))


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_mode_count_and_order(n):
    ms = enumerate_modes(n)
    assert len(ms) == (2 * n + 1) ** 3 - 1
    keys = [tuple(k) for k in ms.modes]
    assert keys == sorted(keys)
    assert (0, 0, 0) not in keys
    assert ms.dim == 2 * len(ms)


def test_plus_minus_halves():
    ms = enumerate_modes(3)
    assert ms.plus.sum() == len(ms) // 2
    for k, p in zip(ms.modes, ms.plus):
        assert in_plus(-k) != p
    assert in_plus((1, 0, 0)) and in_plus((0, 1, -5)) and in_plus((0, 0, 2))
    assert not in_plus((0, 0, -1)) and not in_plus((-1, 5, 5))


@given(nonzero, st.floats(-3, 3))
def test_frames_orthonormal(k, twist):
    e1, e2 = perp_basis(k, twist)
    kf = np.asarray(k, float)
    assert abs(e1 @ kf) < 1e-12 * np.linalg.norm(kf)
    assert abs(e2 @ kf) < 1e-12 * np.linalg.norm(kf)
    assert abs(e1 @ e2) < 1e-14
    assert np.isclose(np.linalg.norm(e1), 1) and np.isclose(np.linalg.norm(e2), 1)


def test_frame_examples():
    e1, e2 = perp_basis((1, 0, 0))
    assert np.allclose(np.abs(e1) + np.abs(e2), [0, 1, 1])
    # parallel to z falls back to the x axis
    e1, e2 = perp_basis((0, 0, 3))
    assert abs(e1[2]) < 1e-15 and abs(e2[2]) < 1e-15


@given(nonzero, st.tuples(*[st.floats(-5, 5)] * 3))
def test_projection_idempotent(k, eta):
    p = project_perp(k, eta)
    assert abs(p @ np.asarray(k, float)) < 1e-10 * (1 + np.linalg.norm(eta))
    assert np.allclose(project_perp(k, p), p)


def test_index_roundtrip():
    ms = enumerate_modes(3)
    assert np.array_equal(ms.index(ms.modes), np.arange(len(ms)))
    assert ms.index((4, 0, 0)) == -1
    assert ms.index((0, 0, 0)) == -1


def test_low_mask_sizes():
    ms = enumerate_modes(3)
    assert ms.low_mask(1).sum() == 26
    assert ms.low_mask(2).sum() == 124
    assert ms.low_mask(3).all()


def test_json_roundtrip():
    ms = enumerate_modes(2)
    text = modes_to_json(ms.modes)
    assert json.loads(text)[0] == [-2, -2, -2]
    assert np.array_equal(modes_from_json(text), ms.modes)


def test_arrays_read_only():
    ms = enumerate_modes(1)
    with pytest.raises(ValueError):
        ms.modes[0, 0] = 5


def test_rejects_empty_box():
    with pytest.raises(ValueError):
        ModeSet(0)


def test_twist_changes_frames_only():
    a, b = enumerate_modes(2), enumerate_modes(2, 0.7)
    assert np.array_equal(a.modes, b.modes)
    assert not np.allclose(a.e1, b.e1)
    # same plane: both frames span k-perp
    for i in range(len(a)):
        F = np.stack([a.e1[i], a.e2[i]])
        G = np.stack([b.e1[i], b.e2[i]])
        assert np.allclose(F @ G.T @ G, F)
