import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sweepreg import engine, matchcore
from sweepreg.engine import Tensor
from sweepreg.featnet import DescriptorGrid
from sweepreg.geometry import SINK, RigidPose
from sweepreg.matchcore import (GroundTruthCorrespondence, Match, MatchSet,
                                dual_softmax, extract_matches,
                                ground_truth_weights, matching_loss, similarity)

from oracles import dual_softmax_oracle, loss_oracle


def make_grids(us: np.ndarray, mr: np.ndarray, mr_dims=None):
    us_g = DescriptorGrid((us.shape[0], 1), us.shape[1], engine.parameter(us),
                          (1.0, 1.0), RigidPose.identity())
    dims = mr_dims or (mr.shape[0], 1, 1)
    mr_g = DescriptorGrid(dims, mr.shape[1], engine.parameter(mr),
                          (1.0, 1.0, 1.0), RigidPose.identity())
    return us_g, mr_g


def corr(i: int, j: int) -> GroundTruthCorrespondence:
    return GroundTruthCorrespondence(i, np.zeros(3), np.zeros(3), j)


# ---------------------------------------------------------------------------
# similarity

def test_similarity_unit_basis_vectors():
    e1 = np.zeros((1, 4), dtype=np.float32)
    e1[0, 0] = 1.0
    e2 = np.zeros((1, 4), dtype=np.float32)
    e2[0, 1] = 1.0
    us_g, mr_g = make_grids(e1, e1.copy())
    s = similarity(us_g, mr_g, engine.parameter(np.zeros(())))
    assert s.values.data[0, 0] == pytest.approx(1.0)
    us_g, mr_g = make_grids(e1, e2)
    s = similarity(us_g, mr_g, engine.parameter(np.zeros(())))
    assert s.values.data[0, 0] == pytest.approx(0.0)


def test_similarity_fills_sink_row_and_column():
    rng = np.random.default_rng(0)
    us_g, mr_g = make_grids(rng.normal(size=(3, 8)).astype(np.float32),
                            rng.normal(size=(5, 8)).astype(np.float32))
    s = similarity(us_g, mr_g, engine.parameter(np.array(0.25)))
    v = s.values.data
    assert v.shape == (4, 6)
    assert np.all(v[3, :] == np.float32(0.25))
    assert np.all(v[:, 5] == np.float32(0.25))


def test_similarity_rejects_dim_mismatch():
    rng = np.random.default_rng(1)
    us_g, _ = make_grids(rng.normal(size=(2, 8)).astype(np.float32),
                         rng.normal(size=(2, 8)).astype(np.float32))
    _, mr_g = make_grids(rng.normal(size=(2, 4)).astype(np.float32),
                         rng.normal(size=(2, 4)).astype(np.float32))
    with pytest.raises(ValueError, match="descriptor dims"):
        similarity(us_g, mr_g, engine.parameter(np.zeros(())))


def test_similarity_requires_2d_vs_3d_grids():
    rng = np.random.default_rng(2)
    d = rng.normal(size=(4, 8)).astype(np.float32)
    us_g, mr_g = make_grids(d, d.copy())
    with pytest.raises(ValueError, match="2D frame"):
        similarity(mr_g, mr_g, engine.parameter(np.zeros(())))
    with pytest.raises(ValueError, match="2D frame"):
        similarity(us_g, us_g, engine.parameter(np.zeros(())))


# ---------------------------------------------------------------------------
# dual softmax

def uniform_1x1_assignment():
    us = np.zeros((1, 2), dtype=np.float32)
    mr = np.zeros((1, 2), dtype=np.float32)
    us_g, mr_g = make_grids(us, mr)
    s = similarity(us_g, mr_g, engine.parameter(np.zeros(())))
    return dual_softmax(s)


def test_uniform_scores_give_quarter_everywhere():
    a = uniform_1x1_assignment()
    np.testing.assert_allclose(a.values.data, 0.25, atol=1e-6)


def test_two_entry_softmax_product_spot_value():
    us = np.zeros((1, 1), dtype=np.float32)
    us[0, 0] = 10.0
    mr = np.ones((1, 1), dtype=np.float32)
    us_g, mr_g = make_grids(us, mr)
    s = similarity(us_g, mr_g, engine.parameter(np.zeros(())))
    a = dual_softmax(s)
    want = (math.exp(10) / (math.exp(10) + 1)) ** 2
    assert a.values.data[0, 0] == pytest.approx(want, abs=1e-5)


def test_dual_softmax_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(5):
        s = rng.normal(scale=3.0, size=(5, 7))
        with engine.precision("float64"):
            sim = matchcore.SimilarityMatrix(engine.tensor(s), engine.tensor(s[-1, -1]),
                                             4, 6)
            a = dual_softmax(sim, temperature=1.0).values.data
        np.testing.assert_allclose(a, dual_softmax_oracle(s), atol=1e-12)


def test_dual_softmax_permutation_of_rows():
    rng = np.random.default_rng(4)
    us = rng.normal(size=(4, 6)).astype(np.float32)
    mr = rng.normal(size=(5, 6)).astype(np.float32)
    alpha = engine.parameter(np.array(0.1))
    us_g, mr_g = make_grids(us, mr)
    a = dual_softmax(similarity(us_g, mr_g, alpha)).values.data
    perm = np.array([2, 0, 3, 1])
    us_gp, mr_gp = make_grids(us[perm], mr)
    ap = dual_softmax(similarity(us_gp, mr_gp, alpha)).values.data
    np.testing.assert_allclose(ap[:4], a[perm], atol=1e-7)


def test_dual_softmax_rejects_bad_temperature():
    with pytest.raises(ValueError, match="temperature"):
        dual_softmax(matchcore.SimilarityMatrix(engine.tensor(np.zeros((2, 2))),
                                                engine.tensor(np.zeros(())), 1, 1), 0.0)


def test_lower_temperature_sharpens():
    rng = np.random.default_rng(5)
    s = rng.normal(size=(4, 5))
    sim = matchcore.SimilarityMatrix(engine.tensor(s), engine.tensor(np.zeros(())), 3, 4)
    hot = dual_softmax(sim, temperature=2.0).values.data.max()
    cold = dual_softmax(sim, temperature=0.5).values.data.max()
    assert cold > hot


def test_sink_monotonicity_in_alpha():
    rng = np.random.default_rng(6)
    us = rng.normal(size=(3, 8)).astype(np.float32)
    mr = rng.normal(size=(4, 8)).astype(np.float32)

    def assignment(alpha_val: float) -> np.ndarray:
        us_g, mr_g = make_grids(us, mr)
        s = similarity(us_g, mr_g, engine.parameter(np.array(alpha_val)))
        return dual_softmax(s).values.data

    lo = assignment(-1.0)
    hi = assignment(1.0)
    # the corner is constant: its row and column are all-alpha, so both
    # softmax factors are uniform regardless of the value
    assert np.all(hi[3, :4] > lo[3, :4])
    assert np.all(hi[:3, 4] > lo[:3, 4])
    assert hi[3, 4] == pytest.approx(lo[3, 4], abs=1e-7)
    assert hi[3, 4] == pytest.approx(1.0 / (4 * 5), abs=1e-6)
    assert np.all(hi[:3, :4] < lo[:3, :4])


def test_real_entries_bounded_by_row_and_column_softmax():
    rng = np.random.default_rng(7)
    s = rng.normal(size=(5, 6))
    with engine.precision("float64"):
        sim = matchcore.SimilarityMatrix(engine.tensor(s), engine.tensor(np.zeros(())), 4, 5)
        a = dual_softmax(sim).values.data
    r = np.exp(s - s.max(axis=1, keepdims=True))
    r /= r.sum(axis=1, keepdims=True)
    c = np.exp(s - s.max(axis=0, keepdims=True))
    c /= c.sum(axis=0, keepdims=True)
    assert np.all(a <= np.minimum(r, c) + 1e-12)
    assert np.all(a.sum(axis=1) <= 1.0 + 1e-9)


# ---------------------------------------------------------------------------
# ground-truth weights

def test_weight_is_one_at_target():
    w = ground_truth_weights([corr(0, 5)], 1.0, "outside_only", 2, (3, 3, 3)).weights
    assert w[0, 5] == pytest.approx(1.0)


def test_weight_one_cell_offset_is_exp_minus_beta():
    w = ground_truth_weights([corr(0, 0)], 1.0, "outside_only", 1, (3, 1, 1)).weights
    assert w[0, 1] == pytest.approx(math.exp(-1.0), abs=1e-9)


def test_weight_diagonal_offset_is_exp_minus_sqrt2():
    # cells (0,0,0) and (1,1,0) in a 2x2x1 grid sit sqrt(2) cells apart
    w = ground_truth_weights([corr(0, 0)], 1.0, "outside_only", 1, (2, 2, 1)).weights
    assert w[0, 3] == pytest.approx(math.exp(-math.sqrt(2.0)), abs=1e-9)
    assert w[0, 3] == pytest.approx(0.243117, abs=1e-6)


def test_outside_only_policy_routes_outside_cells_to_sink():
    w = ground_truth_weights([corr(0, SINK), corr(1, 2)], 1.0, "outside_only",
                             2, (2, 2, 1)).weights
    assert w[0, 4] == 1.0
    assert np.all(w[0, :4] == 0.0)
    assert w[2, :].sum() == 0.0  # sink row untouched
    assert w[1, 4] == 0.0


def test_full_sink_policy_fills_sink_row_and_column():
    w = ground_truth_weights([corr(0, 1)], 1.0, "full_sink", 2, (2, 1, 1)).weights
    assert np.all(w[2, :] == 1.0)
    assert np.all(w[:, 2] == 1.0)


def test_weights_validate_inputs():
    with pytest.raises(ValueError, match="beta"):
        ground_truth_weights([corr(0, 0)], 0.0, "outside_only", 1, (1, 1, 1))
    with pytest.raises(ValueError, match="policy"):
        ground_truth_weights([corr(0, 0)], 1.0, "sometimes", 1, (1, 1, 1))
    with pytest.raises(ValueError, match="correspondences"):
        ground_truth_weights([], 1.0, "outside_only", 1, (1, 1, 1))
    with pytest.raises(ValueError, match="us_cell"):
        ground_truth_weights([corr(5, 0)], 1.0, "outside_only", 2, (1, 1, 1))
    with pytest.raises(ValueError, match="mr_cell"):
        ground_truth_weights([corr(0, 9)], 1.0, "outside_only", 2, (2, 2, 2))


# ---------------------------------------------------------------------------
# loss

def test_uniform_1x1_loss_is_log4():
    a = uniform_1x1_assignment()
    w = ground_truth_weights([corr(0, 0)], 1.0, "outside_only", 1, (1, 1, 1))
    loss = matching_loss(a, w)
    assert loss.item() == pytest.approx(math.log(4.0), abs=1e-6)


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(8)
    with engine.precision("float64"):
        us_g, mr_g = make_grids(rng.normal(size=(4, 8)), rng.normal(size=(6, 8)),
                                mr_dims=(3, 2, 1))
        a = dual_softmax(similarity(us_g, mr_g, engine.parameter(np.array(0.2))))
        w = ground_truth_weights([corr(0, 2), corr(1, SINK), corr(2, 5), corr(3, 0)],
                                 1.3, "outside_only", 4, (3, 2, 1))
        got = matching_loss(a, w).item()
    want = loss_oracle(a.values.data, w.weights)
    assert got == pytest.approx(want, abs=1e-10)


def test_loss_near_zero_when_mass_on_confident_pair():
    us = np.zeros((1, 1), dtype=np.float32)
    us[0, 0] = 40.0
    mr = np.ones((1, 1), dtype=np.float32)
    us_g, mr_g = make_grids(us, mr)
    a = dual_softmax(similarity(us_g, mr_g, engine.parameter(np.zeros(()))))
    w = ground_truth_weights([corr(0, 0)], 1.0, "outside_only", 1, (1, 1, 1))
    assert matching_loss(a, w).item() < 1e-5


def test_loss_shape_mismatch_rejected():
    a = uniform_1x1_assignment()
    w = ground_truth_weights([corr(0, 0)], 1.0, "outside_only", 2, (1, 1, 1))
    with pytest.raises(ValueError, match="shape"):
        matching_loss(a, w)


def test_descent_on_descriptors_decreases_loss():
    rng = np.random.default_rng(9)
    us = rng.normal(size=(4, 6)).astype(np.float32)
    mr = rng.normal(size=(4, 6)).astype(np.float32)
    targets = [corr(i, i) for i in range(4)]
    losses = []
    for _ in range(100):
        us_g, mr_g = make_grids(us, mr, mr_dims=(4, 1, 1))
        alpha = engine.parameter(np.zeros(()))
        a = dual_softmax(similarity(us_g, mr_g, alpha))
        w = ground_truth_weights(targets, 1.0, "outside_only", 4, (4, 1, 1))
        loss = matching_loss(a, w)
        losses.append(loss.item())
        loss.backward()
        us = us - 0.5 * us_g.descriptors.grad
        mr = mr - 0.5 * mr_g.descriptors.grad
    assert losses[-1] < losses[0]
    assert all(b <= a + 1e-4 for a, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------------------
# extraction

def assignment_from(a: np.ndarray, n_us: int, n_mr: int) -> matchcore.AssignmentMatrix:
    t = engine.tensor(a)
    return matchcore.AssignmentMatrix(values=t, log_values=engine.tensor(np.log(a)),
                                      n_us=n_us, n_mr=n_mr)


def test_single_dominant_entry():
    a = np.full((3, 4), 0.01)
    a[1, 2] = 0.9
    ms = extract_matches(assignment_from(a, 2, 3), threshold=0.2)
    assert [(m.us_cell, m.mr_cell) for m in ms.entries] == [(1, 2)]
    assert ms.entries[0].confidence == pytest.approx(0.9)


def test_uniform_below_threshold_gives_empty_set():
    a = np.full((4, 4), 1.0 / 9.0)
    ms = extract_matches(assignment_from(a, 3, 3), threshold=0.2)
    assert ms.entries == []


def test_mutual_requirement_drops_one_sided_matches():
    a = np.full((3, 3), 0.01)
    a[0, 1] = 0.5   # row 0 prefers col 1
    a[1, 1] = 0.6   # col 1 prefers row 1: row 0 loses under mutuality
    ms = extract_matches(assignment_from(a, 2, 2), threshold=0.2, require_mutual=True)
    assert [(m.us_cell, m.mr_cell) for m in ms.entries] == [(1, 1)]
    ms = extract_matches(assignment_from(a, 2, 2), threshold=0.2, require_mutual=False)
    assert [(m.us_cell, m.mr_cell) for m in ms.entries] == [(1, 1), (0, 1)]


def test_sink_never_matched_even_when_dominant():
    a = np.full((3, 3), 0.01)
    a[0, 2] = 0.9  # sink column
    a[2, 1] = 0.9  # sink row
    ms = extract_matches(assignment_from(a, 2, 2), threshold=0.2)
    assert ms.entries == []


def test_entries_sorted_by_descending_confidence():
    a = np.full((4, 4), 0.001)
    a[0, 0] = 0.3
    a[1, 1] = 0.8
    a[2, 2] = 0.5
    ms = extract_matches(assignment_from(a, 3, 3), threshold=0.2)
    assert [m.us_cell for m in ms.entries] == [1, 2, 0]


def test_extract_rejects_bad_threshold():
    a = np.full((2, 2), 0.25)
    with pytest.raises(ValueError, match="threshold"):
        extract_matches(assignment_from(a, 1, 1), threshold=1.5)


def test_tie_breaks_to_lowest_flat_index():
    a = np.full((2, 3), 0.1)
    a[0, 0] = a[0, 1] = 0.4
    ms = extract_matches(assignment_from(a, 1, 2), threshold=0.2, require_mutual=False)
    assert [(m.us_cell, m.mr_cell) for m in ms.entries] == [(0, 0)]


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_extraction_invariant_to_cell_enumeration(seed):
    # oracle-free property: reversing row order relabels matches identically
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, 1.0, size=(5, 6))
    ms = extract_matches(assignment_from(a, 4, 5), 0.3, True)
    rev = a.copy()
    rev[:4] = a[:4][::-1]
    ms_rev = extract_matches(assignment_from(rev, 4, 5), 0.3, True)
    got = {(3 - m.us_cell, m.mr_cell) for m in ms_rev.entries}
    want = {(m.us_cell, m.mr_cell) for m in ms.entries}
    assert got == want


# ---------------------------------------------------------------------------
# serialization

def test_matchset_jsonl_round_trip():
    ms = MatchSet([Match(0, 5, 0.75), Match(3, 1, 0.5)], threshold=0.2, mutual=True)
    doc = ms.to_jsonl()
    back = MatchSet.from_jsonl(doc)
    assert back == ms
    assert doc.splitlines()[0].startswith('{"mutual": true')


def test_matchset_jsonl_validates():
    with pytest.raises(ValueError, match="header"):
        MatchSet.from_jsonl('{"us_cell": 0, "mr_cell": 1, "confidence": 0.5}\n')
    ms = MatchSet([Match(0, 1, 0.9)], 0.2, True)
    doc = ms.to_jsonl().splitlines()
    doc[0] = doc[0].replace('"n": 1', '"n": 2')
    with pytest.raises(ValueError, match="claims"):
        MatchSet.from_jsonl("\n".join(doc))
    with pytest.raises(ValueError, match="empty"):
        MatchSet.from_jsonl("")
