import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rcvmap.errors import CapacityError, ConfigurationError, ContractError
from rcvmap.map_model import MapClass, MapElement, permutation_group
from rcvmap.matching import (
    LossWeights,
    MatchResult,
    Targets,
    assign_instances,
    best_permutation,
    focal_loss,
    instance_match_cost,
    loss_cls,
    loss_dir,
    loss_p2p,
    manhattan_set_distance,
    softmax_np,
    solve_assignment,
    total_loss,
)

W = LossWeights()


def brute_force_assignment(cost):
    """Cheapest injection GT -> prediction by enumerating all of them."""
    m, n = cost.shape
    best = math.inf
    for rows in itertools.permutations(range(m), n):
        best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    return best


def random_targets(rng, n, n_points=6, closed_frac=0.3):
    closed = rng.random(n) < closed_frac
    labels = np.where(closed, 0, rng.integers(1, 3, n))
    return Targets(labels, rng.uniform(0.05, 0.95, size=(n, n_points, 2)), closed)


class TestFocal:
    def test_perfect(self):
        assert focal_loss([0, 1, 0, 0], 1) == 0.0

    def test_half(self):
        assert focal_loss([0.5, 0.5, 0, 0], 0, 0.25, 2.0) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-12)
        assert focal_loss([0.5, 0.5, 0, 0], 0) == pytest.approx(0.04332, abs=1e-5)

    def test_cross_entropy_limit(self):
        p = [0.2, 0.3, 0.4, 0.1]
        for t in range(4):
            assert focal_loss(p, t, alpha=1.0, gamma=0.0) == pytest.approx(-math.log(p[t]))

    def test_zero_probability_is_finite(self):
        v = focal_loss([1.0, 0.0, 0.0, 0.0], 2)
        assert math.isfinite(v) and v == pytest.approx(0.25 * -math.log(1e-12))

    def test_not_simplex(self):
        with pytest.raises(ContractError):
            focal_loss([0.5, 0.6], 0)


class TestManhattan:
    def test_identical(self):
        p = np.random.default_rng(0).random((5, 2))
        assert manhattan_set_distance(p, p, np.arange(5)) == 0.0

    def test_reversal_alignment(self):
        assert manhattan_set_distance([(0, 0), (1, 0)], [(1, 0), (0, 0)], [1, 0]) == 0.0

    def test_identity_on_reversed(self):
        pred, gt = [(0, 0), (1, 0)], [(1, 0), (0, 0)]
        brute = sum(abs(a - b) for pp, gg in zip(pred, gt) for a, b in zip(pp, gg))
        assert brute == 2
        assert manhattan_set_distance(pred, gt, [0, 1]) == 2.0

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            manhattan_set_distance(np.zeros((3, 2)), np.zeros((4, 2)), np.arange(3))


class TestBestPermutation:
    def test_equal(self):
        gt = MapElement(MapClass.DIVIDER, np.random.default_rng(1).random((6, 2)), False)
        assert best_permutation(gt.points, gt) == (0, 0.0)

    def test_reversed_open(self):
        gt = MapElement(MapClass.DIVIDER, np.random.default_rng(2).random((6, 2)), False)
        k, c = best_permutation(gt.points[::-1], gt)
        assert (k, c) == (1, 0.0)

    def test_cyclic_shift_of_quad(self):
        rng = np.random.default_rng(3)
        quad = rng.random((4, 2))
        gt = MapElement(MapClass.PED_CROSSING, quad, True)
        pred = np.roll(quad, -1, axis=0)
        perms = permutation_group(4, True).permutations
        costs = [manhattan_set_distance(pred, quad, p) for p in perms]
        expected = int(np.argmin(costs))
        assert costs[expected] == 0.0
        assert best_permutation(pred, gt) == (expected, 0.0)
        assert perms[expected].tolist() == [1, 2, 3, 0]

    def test_tie_breaks_low(self):
        # a symmetric square: several members tie at zero cost, identity must win
        sq = np.array([(0, 0), (1, 0), (1, 1), (0, 1)], float)
        assert best_permutation(sq, MapElement(MapClass.PED_CROSSING, sq, True))[0] == 0

    @pytest.mark.parametrize("closed", [False, True])
    def test_matches_enumeration(self, closed):
        rng = np.random.default_rng(10 + closed)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            gt = rng.random((n, 2))
            pred = rng.random((n, 2))
            costs = [manhattan_set_distance(pred, gt, p) for p in permutation_group(n, closed).permutations]
            k, c = best_permutation(pred, gt, closed)
            assert k == int(np.argmin(costs))
            assert c == pytest.approx(min(costs), abs=1e-12)


class TestInstanceCost:
    def test_perfect(self):
        pts = np.random.default_rng(0).random((5, 2))
        gt = MapElement(MapClass.BOUNDARY, pts, False)
        assert instance_match_cost([0, 0, 1.0, 0], pts, gt) == 0.0

    def test_monotone_in_perturbation(self):
        rng = np.random.default_rng(1)
        pts = rng.random((5, 2))
        gt = MapElement(MapClass.BOUNDARY, pts, False)
        probs = [0.1, 0.1, 0.7, 0.1]
        prev = instance_match_cost(probs, pts, gt)
        for delta in np.linspace(0.01, 0.3, 10):
            moved = pts.copy()
            moved[2, 0] += delta
            cur = instance_match_cost(probs, moved, gt)
            assert cur >= prev
            prev = cur

    def test_compositional(self):
        rng = np.random.default_rng(2)
        for closed in (False, True):
            pts = rng.random((6, 2))
            pred = rng.random((6, 2))
            probs = softmax_np(rng.normal(size=4))
            cls = 0 if closed else 1
            gt = MapElement(MapClass(cls), pts, closed)
            expected = focal_loss(probs, cls) + best_permutation(pred, gt)[1]
            assert instance_match_cost(probs, pred, gt) == pytest.approx(expected, abs=1e-12)


class TestAssignment:
    def test_diagonal(self):
        a = solve_assignment(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert a.tolist() == [0, 1]

    def test_single_gt_is_argmin(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            c = rng.random((7, 1))
            assert solve_assignment(c)[0] == int(np.argmin(c[:, 0]))

    def test_random_5x6_against_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            c = rng.random((6, 5))
            a = solve_assignment(c)
            assert len(set(a.tolist())) == 5
            assert sum(c[a[i], i] for i in range(5)) == pytest.approx(brute_force_assignment(c), abs=1e-12)

    def test_capacity(self):
        with pytest.raises(CapacityError):
            solve_assignment(np.zeros((2, 3)))
        rng = np.random.default_rng(0)
        with pytest.raises(CapacityError):
            assign_instances(np.zeros((2, 4)), np.zeros((2, 6, 2)), random_targets(rng, 3))

    def test_per_gt_argmin_mode(self):
        c = np.array([[0.1, 0.2], [0.9, 0.9]])
        assert solve_assignment(c, one_to_one=False).tolist() == [0, 0]
        assert solve_assignment(c, one_to_one=True).tolist() in ([0, 1], [1, 0])

    def test_assign_instances_optimal(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            n, m = int(rng.integers(1, 5)), 6
            tg = random_targets(rng, n)
            logits = rng.normal(size=(m, 4))
            pts = rng.random((m, 6, 2))
            res = assign_instances(logits, pts, tg)
            probs = softmax_np(logits)
            cost = np.array(
                [[instance_match_cost(probs[j], pts[j], (tg.labels[i], tg.points[i], tg.closed[i])) for i in range(n)] for j in range(m)]
            )
            assert res.total_cost == pytest.approx(brute_force_assignment(cost), abs=1e-9)
            for i in range(n):
                k, _ = best_permutation(pts[res.pred_idx[i]], tg.points[i], tg.closed[i])
                assert res.perm_idx[i] == k

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            c = rng.random((6, 4))
            assert solve_assignment(c).tolist() == solve_assignment(c * 7.3).tolist()

    def test_empty_gt(self):
        res = assign_instances(np.zeros((3, 4)), np.zeros((3, 5, 2)), Targets(np.zeros(0, int), np.zeros((0, 5, 2)), np.zeros(0, bool)))
        assert len(res.pred_idx) == 0 and res.unmatched(3).tolist() == [0, 1, 2]


def perfect_logits(m, assignment, labels, big=40.0):
    logits = torch.zeros(m, 4, dtype=torch.float64)
    logits[:, 3] = big
    for i, j in enumerate(assignment):
        logits[j] = 0.0
        logits[j, labels[i]] = big
    return logits


class TestLosses:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.tg = random_targets(rng, 3, n_points=5)
        self.m = 5
        self.pred_idx = np.array([4, 0, 2])
        pts = rng.random((self.m, 5, 2))
        for i, j in enumerate(self.pred_idx):
            pts[j] = self.tg.points[i]
        self.points = torch.tensor(pts)
        self.match = MatchResult(self.pred_idx, np.zeros(3, int), np.zeros(3), np.zeros(3))

    def test_cls_perfect(self):
        logits = perfect_logits(self.m, self.pred_idx, self.tg.labels)
        assert loss_cls(logits, self.tg, self.match, W).item() == pytest.approx(0.0, abs=1e-12)

    def test_cls_single_pair(self):
        tg = Targets(np.array([2]), np.zeros((1, 5, 2)), np.array([False]))
        logits = torch.tensor([[0.1, 0.3, 0.5, -0.2], [0.0, 0.0, 0.0, 30.0]], dtype=torch.float64)
        match = MatchResult(np.array([0]), np.zeros(1, int), np.zeros(1), np.zeros(1))
        probs = torch.softmax(logits, -1).numpy()
        expected = focal_loss(probs[0], 2) + focal_loss(probs[1], 3)
        assert loss_cls(logits, tg, match, W).item() == pytest.approx(expected, abs=1e-12)

    def test_cls_decreases_with_confidence(self):
        logits = torch.zeros(self.m, 4, dtype=torch.float64)
        base = loss_cls(logits, self.tg, self.match, W).item()
        j, c = self.pred_idx[0], self.tg.labels[0]
        bumped = logits.clone()
        bumped[j, c] += 1e-3
        assert loss_cls(bumped, self.tg, self.match, W).item() < base

    def test_p2p_perfect(self):
        assert loss_p2p(self.points, self.tg, self.match).item() == 0.0

    def test_p2p_single_offset(self):
        pts = self.points.clone()
        pts[self.pred_idx[1], 2, 0] += 0.1
        n, n_e = 3, 5
        assert loss_p2p(pts, self.tg, self.match).item() == pytest.approx(0.1 / (n * n_e), abs=1e-12)

    def test_p2p_reindex_invariant(self):
        rng = np.random.default_rng(9)
        pts = torch.tensor(rng.random((self.m, 5, 2)))
        logits = torch.tensor(rng.normal(size=(self.m, 4)))
        a = assign_instances(logits, pts, self.tg)
        order = [2, 0, 1]
        tg2 = self.tg.reindexed(order)
        b = assign_instances(logits, pts, tg2)
        assert loss_p2p(pts, self.tg, a).item() == pytest.approx(loss_p2p(pts, tg2, b).item(), abs=1e-12)

    def test_dir_identical(self):
        assert loss_dir(self.points, self.tg, self.match).item() == pytest.approx(0.0, abs=1e-12)

    def test_dir_reversed_edges(self):
        # each predicted edge points against its GT edge: mirror about the first vertex
        gt = np.array([[[0.1, 0.1], [0.2, 0.1], [0.3, 0.15], [0.4, 0.3]]])
        tg = Targets(np.array([1]), gt, np.array([False]))
        pred = torch.tensor(2 * gt[:, :1] - gt)
        match = MatchResult(np.array([0]), np.array([0]), np.zeros(1), np.zeros(1))
        assert loss_dir(pred, tg, match).item() == pytest.approx(2.0, abs=1e-12)

    def test_dir_perpendicular(self):
        tg = Targets(np.array([1]), np.array([[[0.2, 0.2], [0.4, 0.2]]]), np.array([False]))
        pred = torch.tensor([[[0.5, 0.5], [0.5, 0.7]]], dtype=torch.float64)
        match = MatchResult(np.array([0]), np.array([0]), np.zeros(1), np.zeros(1))
        assert loss_dir(pred, tg, match).item() == pytest.approx(1.0, abs=1e-12)

    def test_dir_closed_uses_wrap_edge(self):
        sq = np.array([[[0.2, 0.2], [0.4, 0.2], [0.4, 0.4], [0.2, 0.4]]])
        tg = Targets(np.array([0]), sq, np.array([True]))
        pred = torch.tensor(sq.copy())
        pred[0, 3] = torch.tensor([0.2, 0.2 + 1e-9])  # collapse the closing edge to ~zero length
        match = MatchResult(np.array([0]), np.array([0]), np.zeros(1), np.zeros(1))
        assert loss_dir(pred, tg, match).item() > 0.0

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-0.04, 0.04), st.floats(-0.04, 0.04), st.integers(0, 1000))
    def test_translation_invariance(self, dx, dy, seed):
        rng = np.random.default_rng(seed)
        tg = Targets(np.array([1, 0]), rng.uniform(0.05, 0.95, (2, 5, 2)), np.array([False, True]))
        pts = torch.tensor(rng.uniform(0.05, 0.95, (4, 5, 2)))
        match = assign_instances(torch.zeros(4, 4), pts, tg)
        shift = np.array([dx, dy])
        tg2 = Targets(tg.labels, tg.points + shift, tg.closed)
        pts2 = pts + torch.tensor(shift)
        assert loss_p2p(pts2, tg2, match).item() == pytest.approx(loss_p2p(pts, tg, match).item(), abs=1e-9)
        assert loss_dir(pts2, tg2, match).item() == pytest.approx(loss_dir(pts, tg, match).item(), abs=1e-9)


class TestTotalLoss:
    def layers(self, seed=0, n_layers=2):
        rng = np.random.default_rng(seed)
        return [
            (torch.tensor(rng.normal(size=(2, 6, 4))), torch.tensor(rng.random((2, 6, 5, 2))))
            for _ in range(n_layers)
        ]

    def targets(self):
        rng = np.random.default_rng(1)
        return [random_targets(rng, 3, 5), random_targets(rng, 2, 5)]

    def test_report_invariant(self):
        w = LossWeights(1.5, 3.0, 0.5)
        rep = total_loss(self.layers(), self.targets(), w)
        assert rep.total == pytest.approx(w.alpha_c * rep.cls + w.alpha_p * rep.p2p + w.alpha_d * rep.dir, abs=1e-12)
        assert len(rep.per_layer) == 2
        assert rep.total == pytest.approx(sum(r["total"] for r in rep.per_layer), abs=1e-12)

    def test_projection(self):
        rep = total_loss(self.layers(), self.targets(), LossWeights(1.0, 0.0, 0.0))
        assert rep.total == pytest.approx(rep.cls, abs=1e-12)

    def test_linearity_in_alpha_p(self):
        lay, tg = self.layers(), self.targets()
        a = total_loss(lay, tg, LossWeights(0.0, 2.0, 0.0))
        b = total_loss(lay, tg, LossWeights(0.0, 4.0, 0.0))
        assert b.total == pytest.approx(2 * a.total, abs=1e-12)

    def test_perfect(self):
        tg = self.targets()
        lay = []
        for _ in range(2):
            logits = torch.zeros(2, 6, 4, dtype=torch.float64)
            pts = torch.full((2, 6, 5, 2), 0.5, dtype=torch.float64)
            for s, t in enumerate(tg):
                logits[s] = perfect_logits(6, list(range(len(t))), t.labels)
                pts[s, : len(t)] = torch.tensor(t.points)
            lay.append((logits, pts))
        rep = total_loss(lay, tg)
        assert rep.total == pytest.approx(0.0, abs=1e-9)

    def test_all_nonnegative(self):
        rep = total_loss(self.layers(3), self.targets())
        assert min(rep.cls, rep.p2p, rep.dir) >= 0

    def test_negative_weights(self):
        with pytest.raises(ConfigurationError):
            LossWeights(alpha_c=-1.0)

    def test_no_layers(self):
        with pytest.raises(ContractError):
            total_loss([], self.targets())

    def test_log_record(self):
        rep = total_loss(self.layers(), self.targets())
        rec = rep.record(7, 1e-3)
        assert set(rec) == {"step", "lr", "total", "cls", "p2p", "dir"}
