"""Loss terms against hand values and a brute-force double-loop oracle."""

import math

import numpy as np
import pytest
import scipy.sparse as sp

from sacn.autodiff import Tape
from sacn.losses import (LossWeights, loss_cor, loss_de, loss_sacn, loss_stage_one,
                         loss_stage_two, loss_sup, loss_w2s, normalize_latent,
                         one_hot_targets)
from sacn.pseudo import PseudoLabelSet
from sacn.synth import generate_sbm


def brute_force_consensus(z1, z2, adjacency, lam, include_self=True):
    """Independent scalar-loop oracle for the combined consensus objective."""
    def normalize(z):
        n = z.shape[0]
        out = np.zeros_like(z, dtype=float)
        for j in range(z.shape[1]):
            col = z[:, j]
            mu = sum(col) / n
            sigma = math.sqrt(sum((v - mu) ** 2 for v in col) / n)
            for i in range(n):
                out[i, j] = (col[i] - mu) / (sigma + 1e-8) / math.sqrt(n)
        return out

    n1, n2 = normalize(np.asarray(z1, float)), normalize(np.asarray(z2, float))
    dense = np.asarray(adjacency.todense(), dtype=float)
    n = dense.shape[0]
    correlation = 0.0
    for i in range(n):
        for j in range(n):
            weight = dense[i, j] + (1.0 if include_self and i == j else 0.0)
            if weight:
                correlation -= weight * sum(n1[i, q] * n2[j, q] for q in range(n1.shape[1]))

    decorrelation = 0.0
    for z in (n1, n2):
        gram = z.T @ z
        for p in range(gram.shape[0]):
            for q in range(gram.shape[1]):
                target = 1.0 if p == q else 0.0
                decorrelation += (gram[p, q] - target) ** 2
    return correlation + lam * decorrelation


def on_tape(*arrays):
    tape = Tape()
    return tape, [tape.constant(np.asarray(a, dtype=float)) for a in arrays]


class TestNormalizeLatent:
    def test_two_row_column_hand_value(self):
        _, (z,) = on_tape(np.array([[1.0], [-1.0]]))
        np.testing.assert_allclose(normalize_latent(z).value,
                                   [[1 / math.sqrt(2)], [-1 / math.sqrt(2)]])

    def test_constant_column_maps_to_zeros(self):
        _, (z,) = on_tape(np.array([[2.0], [2.0], [2.0]]))
        np.testing.assert_allclose(normalize_latent(z).value, 0.0)

    def test_columns_have_zero_mean(self, rng):
        _, (z,) = on_tape(rng.normal(size=(17, 5)))
        out = normalize_latent(z).value
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)


class TestLossCor:
    def test_no_edges_reduces_to_self_pairs(self):
        _, (z1, z2) = on_tape(np.eye(2), np.eye(2))
        out = loss_cor(z1, z2, sp.csr_matrix((2, 2)))
        assert out.item() == pytest.approx(-2.0)

    def test_single_edge_hand_enumeration(self):
        # pairs (0,0),(0,1),(1,0),(1,1): -(1 + 0 + 0 + 1) = -2
        adjacency = sp.csr_matrix(np.array([[0, 1], [1, 0]], dtype=float))
        _, (z1, z2) = on_tape(np.eye(2), np.eye(2))
        assert loss_cor(z1, z2, adjacency).item() == pytest.approx(-2.0)

    def test_zero_latent_gives_zero(self, rng):
        adjacency = generate_sbm(10, 2, 0.5, 0.1, 4, 0.0, seed=0).adjacency
        _, (z1, z2) = on_tape(np.zeros((10, 3)), rng.normal(size=(10, 3)))
        assert loss_cor(z1, z2, adjacency).item() == 0.0

    def test_self_pairs_flag_off_uses_literal_adjacency(self):
        adjacency = sp.csr_matrix(np.array([[0, 1], [1, 0]], dtype=float))
        _, (z1, z2) = on_tape(np.eye(2), np.eye(2))
        assert loss_cor(z1, z2, adjacency, include_self=False).item() == pytest.approx(0.0)

    def test_rotating_neighbour_toward_view_one_decreases_loss(self):
        adjacency = sp.csr_matrix(np.array([[0, 1], [1, 0]], dtype=float))
        z1 = np.array([[1.0, 0.0], [1.0, 0.0]])
        losses = []
        for angle in (math.pi / 2, math.pi / 4, 0.0):
            z2 = np.array([[math.cos(angle), math.sin(angle)],
                           [math.cos(angle), math.sin(angle)]])
            _, (a, b) = on_tape(z1, z2)
            losses.append(loss_cor(a, b, adjacency).item())
        assert losses[0] > losses[1] > losses[2]


class TestLossDe:
    def test_orthonormal_columns_give_zero(self):
        q = np.linalg.qr(np.random.default_rng(0).normal(size=(6, 3)))[0]
        _, (z1, z2) = on_tape(q, q)
        assert loss_de(z1, z2).item() == pytest.approx(0.0, abs=1e-12)

    def test_known_gram_hand_value(self):
        # Z^T Z = [[1, .5], [.5, 1]] for both views: 2 * (0.25 + 0.25) = 1.0
        z = np.array([[1.0, 0.5], [0.0, math.sqrt(3) / 2]])
        _, (z1, z2) = on_tape(z, z)
        assert loss_de(z1, z2).item() == pytest.approx(1.0)

    def test_nonnegative_and_monotone_in_off_diagonal(self, rng):
        for _ in range(10):
            _, (z1, z2) = on_tape(rng.normal(size=(8, 3)), rng.normal(size=(8, 3)))
            assert loss_de(z1, z2).item() >= 0.0
        values = []
        for off in (0.9, 0.5, 0.1, 0.0):
            gram_root = np.linalg.cholesky(np.array([[1.0, off], [off, 1.0]]))
            z = gram_root.T  # 2x2 with Z^T Z = [[1, off], [off, 1]]
            _, (z1, z2) = on_tape(z, z)
            values.append(loss_de(z1, z2).item())
        assert values == sorted(values, reverse=True)
        assert values[-1] == pytest.approx(0.0, abs=1e-12)


class TestLossSacn:
    def test_lambda_zero_is_pure_correlation(self, rng):
        bundle = generate_sbm(12, 3, 0.4, 0.1, 4, 0.2, seed=1)
        z1, z2 = rng.normal(size=(12, 4)), rng.normal(size=(12, 4))
        tape, (t1, t2) = on_tape(z1, z2)
        combined = loss_sacn(t1, t2, bundle.adjacency, lam=0.0)
        cor_only = loss_cor(normalize_latent(t1), normalize_latent(t2), bundle.adjacency)
        assert combined.item() == pytest.approx(cor_only.item(), rel=1e-12)

    def test_large_lambda_dominated_by_decorrelation(self, rng):
        bundle = generate_sbm(12, 3, 0.4, 0.1, 4, 0.2, seed=1)
        z1, z2 = rng.normal(size=(12, 4)), rng.normal(size=(12, 4))
        tape, (t1, t2) = on_tape(z1, z2)
        big = loss_sacn(t1, t2, bundle.adjacency, lam=1e9)
        de_only = loss_de(normalize_latent(t1), normalize_latent(t2))
        assert big.item() == pytest.approx(1e9 * de_only.item(), rel=1e-3)

    def test_four_node_fixture_matches_oracle_closely(self):
        rng = np.random.default_rng(11)
        adjacency = sp.csr_matrix(np.array([
            [0, 1, 1, 0], [1, 0, 0, 1], [1, 0, 0, 0], [0, 1, 0, 0]], dtype=float))
        z1, z2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        _, (t1, t2) = on_tape(z1, z2)
        ours = loss_sacn(t1, t2, adjacency, lam=1.0).item()
        oracle = brute_force_consensus(z1, z2, adjacency, lam=1.0)
        assert ours == pytest.approx(oracle, abs=1e-10)

    def test_sparse_equals_brute_force_on_50_random_graphs(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(4, 51))
            d = int(rng.integers(2, 7))
            bundle = generate_sbm(n, 2, 0.5, 0.2, 4, 0.3, seed=seed)
            z1, z2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
            lam = float(rng.uniform(0, 2))
            _, (t1, t2) = on_tape(z1, z2)
            ours = loss_sacn(t1, t2, bundle.adjacency, lam).item()
            oracle = brute_force_consensus(z1, z2, bundle.adjacency, lam)
            assert ours == pytest.approx(oracle, abs=1e-10)

    def test_permutation_invariance(self, rng):
        bundle = generate_sbm(15, 3, 0.4, 0.1, 4, 0.2, seed=2)
        z1, z2 = rng.normal(size=(15, 4)), rng.normal(size=(15, 4))
        _, (t1, t2) = on_tape(z1, z2)
        base = loss_sacn(t1, t2, bundle.adjacency, lam=0.7).item()
        perm = rng.permutation(15)
        _, (p1, p2) = on_tape(z1[perm], z2[perm])
        permuted = loss_sacn(p1, p2, bundle.adjacency[perm][:, perm], lam=0.7).item()
        assert permuted == pytest.approx(base, rel=1e-9)


class TestLossSup:
    def test_perfect_one_hot_predictions_vanish(self):
        labels = np.array([0, 1, 2])
        targets = one_hot_targets(labels, np.arange(3), 3)
        _, (y,) = on_tape(np.eye(3))
        assert loss_sup(y, targets, np.arange(3)).item() < 1e-10

    def test_uniform_predictions_analytic_value(self):
        k, labeled = 4, 5
        y_val = np.full((8, k), 1.0 / k)
        labels = np.zeros(8, dtype=np.int64)
        idx = np.arange(labeled)
        _, (y,) = on_tape(y_val)
        out = loss_sup(y, one_hot_targets(labels, idx, k), idx)
        assert out.item() == pytest.approx(labeled * math.log(k))

    def test_two_nodes_three_classes_hand_value(self):
        y_val = np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6], [0.4, 0.4, 0.2]])
        labels = np.array([0, 2, 1])
        idx = np.array([0, 1])
        _, (y,) = on_tape(y_val)
        expected = -(math.log(0.7) + math.log(0.6))
        assert loss_sup(y, one_hot_targets(labels, idx, 3), idx).item() == \
            pytest.approx(expected)

    def test_empty_labeled_set_rejected(self):
        _, (y,) = on_tape(np.eye(2))
        with pytest.raises(ValueError):
            loss_sup(y, np.zeros((0, 2)), np.zeros(0, dtype=np.int64))


class TestLossW2s:
    def test_empty_selection_is_zero(self):
        _, (y1, y2) = on_tape(np.eye(2), np.eye(2))
        assert loss_w2s(PseudoLabelSet.empty(2), y1, y2).item() == 0.0

    def test_matching_one_hots_vanish(self):
        pseudo = PseudoLabelSet(np.array([0, 1]), np.eye(2), np.array([1, 1]))
        _, (y1, y2) = on_tape(np.eye(2), np.eye(2))
        assert loss_w2s(pseudo, y1, y2).item() < 1e-10

    def test_single_node_hand_value(self):
        pseudo = PseudoLabelSet(np.array([0]), np.array([[1.0, 0.0]]), np.array([1, 0]))
        _, (y1, y2) = on_tape(np.array([[0.5, 0.5]]), np.array([[0.25, 0.75]]))
        expected = -(math.log(0.5) + math.log(0.25))
        assert loss_w2s(pseudo, y1, y2).item() == pytest.approx(expected)
        assert expected == pytest.approx(2.0794415416798357)

    def test_targets_receive_no_gradient(self):
        pseudo = PseudoLabelSet(np.array([0]), np.array([[1.0, 0.0]]), np.array([1, 0]))
        tape = Tape()
        y1 = tape.parameter(np.array([[0.5, 0.5]]))
        y2 = tape.parameter(np.array([[0.25, 0.75]]))
        tape.backward(loss_w2s(pseudo, y1, y2))
        assert y1.grad is not None and y2.grad is not None
        assert not pseudo.targets.flags.writeable  # constants, not tape leaves


class TestStageLosses:
    def test_alpha1_zero_reduces_stage_one_to_supervision(self):
        tape = Tape()
        sup = tape.constant(np.asarray(3.0))
        sacn = tape.constant(np.asarray(123.0))
        assert loss_stage_one(sup, sacn, 0.0).item() == pytest.approx(3.0)

    def test_alpha2_zero_reduces_stage_two_to_stage_one(self):
        tape = Tape()
        sup = tape.constant(np.asarray(3.0))
        sacn = tape.constant(np.asarray(5.0))
        w2s = tape.constant(np.asarray(7.0))
        two = loss_stage_two(sup, sacn, w2s, alpha1=0.5, alpha2=0.0)
        one = loss_stage_one(sup, sacn, alpha1=0.5)
        assert two.item() == pytest.approx(one.item())

    def test_additivity_against_term_oracles(self, rng):
        bundle = generate_sbm(10, 2, 0.6, 0.1, 5, 0.2, seed=3)
        z1, z2 = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
        y_val = rng.dirichlet(np.ones(2), size=10)
        labels = np.array([0, 1] * 5)
        idx = np.array([0, 1])
        pseudo = PseudoLabelSet(np.array([4, 5]), np.eye(2), np.array([1, 1]))

        tape, (t1, t2, y) = on_tape(z1, z2, y_val)
        sup = loss_sup(y, one_hot_targets(labels, idx, 2), idx)
        sacn = loss_sacn(t1, t2, bundle.adjacency, lam=1.0)
        w2s = loss_w2s(pseudo, y, y)
        combined = loss_stage_two(sup, sacn, w2s, alpha1=1.0, alpha2=1.0)
        expected = sup.item() + brute_force_consensus(z1, z2, bundle.adjacency, 1.0) + \
            w2s.item()
        assert combined.item() == pytest.approx(expected, abs=1e-9)


def test_loss_weights_validate():
    with pytest.raises(ValueError):
        LossWeights(lam=-0.1)
