from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from sfouda.descriptor import DescriptorField
from sfouda.propagation import (EmptySeedSet, PropagationConfig, geometric_similarities,
                                propagate)
from sfouda.selection import PseudoLabelSet


def _field(desc, isolated=None):
    desc = np.asarray(desc, dtype=float)
    iso = np.zeros(len(desc), dtype=bool) if isolated is None else np.asarray(isolated)
    return DescriptorField(desc, 0, iso)


def test_similarities():
    same = _field(np.ones((5, 4)))
    assert np.array_equal(geometric_similarities(2, same), np.zeros(4))
    basis = _field(np.vstack([[1.0, 0.0], np.tile([0.0, 1.0], (6, 1))]))
    d = geometric_similarities(0, basis)
    assert len(d) == 6 and np.allclose(d, np.sqrt(2))
    with pytest.raises(IndexError):
        geometric_similarities(7, basis)


def test_equidistant_point_goes_to_lower_seed():
    desc = _field([[0.0], [2.0], [1.0]])
    seeds = PseudoLabelSet.from_seeds([0, 1], [3, 5])
    out = propagate(seeds, desc, PropagationConfig(K=1))
    assert oracles.as_dict(out)[2] == (3, 0, 1, 1.0)


def test_saturation_labels_every_eligible_point(rng):
    desc = _field(rng.normal(size=(12, 3)), isolated=[False] * 11 + [True])
    out = propagate(PseudoLabelSet.from_seeds([4], [6]), desc, PropagationConfig(K=50))
    assert sorted(out.index.tolist()) == list(range(11))
    assert set(out.label) == {6}
    assert sorted(out.rank[~out.is_seed].tolist()) == list(range(1, 11))


def test_isolated_seed_claims_nothing(rng):
    desc = _field(rng.normal(size=(6, 2)), isolated=[True, False, False, False, False, False])
    out = propagate(PseudoLabelSet.from_seeds([0], [2]), desc, PropagationConfig(K=3))
    assert out.index.tolist() == [0]


def test_empty_seed_set():
    with pytest.raises(EmptySeedSet):
        propagate(PseudoLabelSet.empty(), _field(np.zeros((3, 2))))


def test_matches_oracle_on_twenty_points(rng):
    desc = rng.uniform(size=(20, 33))
    seeds = PseudoLabelSet.from_seeds([3, 8, 15], [1, 4, 7])
    got = oracles.as_dict(propagate(seeds, _field(desc), PropagationConfig(K=5)))
    assert got == oracles.propagate(desc, np.zeros(20, bool), [3, 8, 15], [1, 4, 7], 5)


def test_xyz_space_ablation(rng):
    pts = rng.normal(size=(30, 3))
    desc = _field(rng.normal(size=(30, 5)))
    seeds = PseudoLabelSet.from_seeds([0], [1])
    out = propagate(seeds, desc, PropagationConfig(K=4, space="xyz"), pts)
    want = oracles.propagate(pts, np.zeros(30, bool), [0], [1], 4)
    assert oracles.as_dict(out) == want
    with pytest.raises(ValueError):
        propagate(seeds, desc, PropagationConfig(K=4, space="xyz"))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 60), S=st.integers(1, 8), K=st.integers(1, 10), d=st.sampled_from([1, 2, 33]),
       seed=st.integers(0, 100_000), coarse=st.booleans(), exclude=st.booleans())
def test_matches_oracle_property(n, S, K, d, seed, coarse, exclude):
    r = np.random.default_rng(seed)
    desc = r.uniform(size=(n, d))
    if coarse:
        desc = np.round(desc * 2) / 2  # many exact collisions
    iso = r.random(n) < 0.1
    S = min(S, n)
    idx = r.choice(n, S, replace=False)
    lab = r.integers(1, 8, S)
    out = propagate(PseudoLabelSet.from_seeds(idx, lab), _field(desc, iso),
                    PropagationConfig(K=K, exclude_seeds=exclude))
    assert oracles.as_dict(out) == oracles.propagate(desc, iso, idx, lab, K, exclude)
