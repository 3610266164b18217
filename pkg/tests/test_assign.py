import math
import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from helpers import small_grid
from lad.assign import (
    NEGATIVE,
    EmptyCandidateWarning,
    LabeledObject,
    ObjectCosts,
    Prediction,
    Predictions,
    assign_from_costs,
    assignment_cost,
    candidate_select,
    lad_assign,
    paa_assign,
)
from lad.geometry import AnchorLevel, Box, generate_anchors
from lad.gmm import fit_gmm2


def _table(costs):
    costs = np.asarray(costs, dtype=float)
    return [ObjectCosts(0, np.arange(len(costs)), costs)]


class TestCandidates:
    def test_exact_match_selected(self):
        grid = generate_anchors([AnchorLevel(4, 4, 1, 1)])
        assert candidate_select(grid, LabeledObject(0, Box(0, 0, 4, 4))).tolist() == [0]

    def test_disjoint_excluded(self):
        grid = generate_anchors([AnchorLevel(4, 4, 1, 1)])
        assert candidate_select(grid, LabeledObject(0, Box(10, 10, 12, 12))).tolist() == []

    def test_iou_exactly_one_tenth_selected(self):
        # intersection 8, union 16 + 72 - 8 = 80
        grid = generate_anchors([AnchorLevel(4, 4, 1, 1)])
        assert candidate_select(grid, LabeledObject(0, Box(2, 0, 20, 4))).tolist() == [0]


class TestCost:
    def test_perfect_prediction(self):
        pred = Prediction(0, np.array([1 - 1e-7, 1e-7]), Box(0, 0, 2, 2))
        assert assignment_cost(pred, LabeledObject(0, Box(0, 0, 2, 2))) < 1e-6

    def test_focal_term_only(self):
        pred = Prediction(0, np.array([0.5]), Box(0, 0, 2, 2))
        assert_allclose(assignment_cost(pred, LabeledObject(0, Box(0, 0, 2, 2)), 0.0), math.log(2))

    def test_both_terms(self):
        pred = Prediction(0, np.array([0.5]), Box(5, 5, 6, 6))
        assert_allclose(assignment_cost(pred, LabeledObject(0, Box(0, 0, 2, 2)), 0.0), math.log(2) + 1)


class TestPositives:
    def test_single_candidate_positive(self):
        labels = assign_from_costs(1, _table([0.7]), [fit_gmm2([0.7])]).labels
        assert labels.tolist() == [0]

    def test_equal_costs_all_positive(self):
        costs = [0.4, 0.4, 0.4]
        assert assign_from_costs(3, _table(costs), [fit_gmm2(costs)]).labels.tolist() == [0, 0, 0]

    def test_low_cluster_posterior_rule(self):
        costs = [0.05, 0.06, 1.4, 1.5, 1.6]
        labels = assign_from_costs(5, _table(costs), [fit_gmm2(costs)], "posterior").labels
        assert labels.tolist() == [0, 0, NEGATIVE, NEGATIVE, NEGATIVE]

    def test_low_cluster_below_mean_rule(self):
        # mu1 = 0.055, and only 0.05 lies strictly below it
        costs = [0.05, 0.06, 1.4, 1.5, 1.6]
        fit = fit_gmm2(costs)
        assert_allclose(fit.model.mu1, 0.055)
        labels = assign_from_costs(5, _table(costs), [fit], "below_mean").labels
        assert labels.tolist() == [0, NEGATIVE, NEGATIVE, NEGATIVE, NEGATIVE]

    def test_cost_equal_to_mean_is_negative(self):
        costs = np.array([0.0, 0.0, 1.0, 1.0])
        fit = fit_gmm2(costs)
        assert fit.model.mu1 == 0.0
        assert assign_from_costs(4, _table(costs), [fit]).labels.tolist() == [NEGATIVE] * 4

    def test_shared_anchor_goes_to_cheaper_object(self):
        table = [
            ObjectCosts(0, np.array([0, 1]), np.array([0.3, 0.9])),
            ObjectCosts(1, np.array([0, 2]), np.array([0.2, 0.9])),
        ]
        fits = [fit_gmm2(t.costs) for t in table]
        labels = assign_from_costs(3, table, fits, "posterior").labels
        assert labels[0] == 1

    def test_cost_tie_goes_to_lower_object(self):
        table = [
            ObjectCosts(0, np.array([0, 1]), np.array([0.2, 0.9])),
            ObjectCosts(1, np.array([0, 2]), np.array([0.2, 0.9])),
        ]
        fits = [fit_gmm2(t.costs) for t in table]
        assert assign_from_costs(3, table, fits, "posterior").labels[0] == 0

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            assign_from_costs(1, _table([0.1, 0.2]), [fit_gmm2([0.1, 0.2])], "median")


def _perfect_teacher(grid, obj, hit):
    """Teacher that is exact at anchor ``hit`` and poor elsewhere."""
    probs = np.full((len(grid), 2), 0.5)
    boxes = grid.boxes.copy()
    probs[hit] = [1 - 1e-7, 1e-7]
    boxes[hit] = obj.box.as_array()
    return Predictions(probs, boxes)


class TestPipelines:
    def test_single_perfect_anchor(self):
        grid = small_grid()
        obj = LabeledObject(0, Box(4, 4, 20, 20))
        hit = 5
        preds = _perfect_teacher(grid, obj, hit)
        post = lad_assign(preds, grid, [obj], positive_rule="posterior")
        assert post.assignment.positive_ids.tolist() == [hit]
        costs = post.cost_table[0].costs
        assert costs[post.cost_table[0].anchor_ids == hit][0] < 1e-6
        assert np.all(np.delete(costs, np.flatnonzero(post.cost_table[0].anchor_ids == hit)) > 1.0)
        # with the literal threshold the perfect anchor sits at mu1 and is not strictly below it
        literal = lad_assign(preds, grid, [obj], positive_rule="below_mean")
        assert len(literal.assignment.positive_ids) <= 1

    def test_lad_equals_paa_on_same_predictions(self, rng):
        grid = small_grid()
        objs = [LabeledObject(1, Box(2, 3, 15, 18)), LabeledObject(0, Box(14, 10, 30, 28))]
        preds = Predictions(rng.uniform(0.05, 0.95, (len(grid), 2)), grid.boxes + rng.normal(0, 1, (len(grid), 4)))
        a = paa_assign(preds, grid, objs)
        b = lad_assign(preds, grid, objs)
        assert a.assignment == b.assignment
        assert all(x.costs.tobytes() == y.costs.tobytes() for x, y in zip(a.cost_table, b.cost_table))

    def test_labels_partition_anchors(self, rng):
        grid = small_grid()
        objs = [LabeledObject(0, Box(0, 0, 16, 16)), LabeledObject(1, Box(8, 8, 30, 30))]
        preds = Predictions(rng.uniform(0.05, 0.95, (len(grid), 2)), grid.boxes.copy())
        res = paa_assign(preds, grid, objs)
        labels = res.assignment.labels
        assert len(labels) == len(grid)
        assert set(labels.tolist()) <= {NEGATIVE, 0, 1}
        for entry in res.cost_table:
            assert np.all(entry.costs >= 0) and np.all(np.isfinite(entry.costs))

    def test_object_without_candidates_warns(self):
        grid = generate_anchors([AnchorLevel(4, 4, 1, 1)])
        preds = Predictions(np.full((1, 1), 0.5), grid.boxes.copy())
        with pytest.warns(EmptyCandidateWarning):
            res = paa_assign(preds, grid, [LabeledObject(0, Box(30, 30, 32, 32))])
        assert res.fits == [None]
        assert res.assignment.labels.tolist() == [NEGATIVE]

    def test_one_candidate_per_object(self):
        grid = generate_anchors([AnchorLevel(8, 4, 1, 3)])
        objs = [LabeledObject(0, Box(2, 2, 6, 6)), LabeledObject(0, Box(18, 2, 22, 6))]
        preds = Predictions(np.full((3, 1), 0.3), grid.boxes.copy())
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            res = paa_assign(preds, grid, objs)
        assert res.assignment.labels.tolist() == [0, NEGATIVE, 1]

    def test_class_out_of_range(self):
        grid = small_grid()
        preds = Predictions(np.full((len(grid), 2), 0.5), grid.boxes.copy())
        with pytest.raises(ValueError):
            paa_assign(preds, grid, [LabeledObject(5, Box(0, 0, 8, 8))])
