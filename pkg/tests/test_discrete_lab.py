"""
Tests for the finite tree laboratory.

Validates:
1. Tree construction and validation (probabilities, depth, coarse labels)
2. Conditional expectations, Doob decomposition, structure condition
3. Foellmer-Schweizer decomposition against the local-risk oracle
4. Brute-force optimality, including injected counterexamples
5. Hedging under incomplete information on the coarsened binomial tree

Exact mode runs on Fractions, so identities are checked with ==.
"""

from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from sim.discrete_lab import (
    TreeModel,
    TreeNode,
    brute_force_optimality,
    conditional_expectation,
    deflated_martingale_gap,
    doob_decomposition,
    fs_decompose,
    local_risk_oracle,
    make_multinomial_tree,
    predictable_projection,
    structure_condition,
    verify_incomplete_info,
    with_perturbation,
)
from sim.errors import AttainabilityError, StructureConditionError

TREES = Path(__file__).resolve().parents[1] / 'data' / 'trees'


@pytest.fixture
def trinomial():
    return TreeModel.from_json(TREES / 'trinomial.json')


@pytest.fixture
def coarsened():
    return TreeModel.from_json(TREES / 'coarsened_binomial.json')


# ==========================================
# TREE MODEL
# ==========================================

def test_shipped_trees_load_exactly(trinomial, coarsened):
    assert trinomial.exact and trinomial.n_paths == 27 and trinomial.n_steps == 3
    assert sum(trinomial.leaf_prob) == 1
    assert coarsened.n_paths == 16 and coarsened.has_coarse_labels
    assert set(coarsened.claims) == {'coin_weighted', 'terminal_asset'}

    built = make_multinomial_tree([1], [[Fraction(1, 4)], [0], [Fraction(-1, 4)]],
                                  [Fraction(1, 5), Fraction(1, 2), Fraction(3, 10)], 3, exact=True)
    assert built.n_paths == 27
    np.testing.assert_array_equal(built.asset_paths, trinomial.asset_paths)


def test_float_mode(trinomial):
    floats = TreeModel.from_json(TREES / 'trinomial.json', exact=False)
    assert not floats.exact
    assert floats.asset_paths.dtype == float
    assert sum(floats.leaf_prob) == pytest.approx(1.0)
    rebuilt = TreeModel.from_dict(trinomial.to_dict())
    assert rebuilt.leaf_ids == trinomial.leaf_ids


def test_invalid_trees():
    root = TreeNode('r', 0, None, 1, (1,))
    with pytest.raises(ValueError):
        TreeModel([root, TreeNode('a', 1, 'r', Fraction(1, 2), (1,))], exact=True)
    with pytest.raises(ValueError):
        TreeModel([root, TreeNode('r2', 0, None, 1, (1,))])
    with pytest.raises(ValueError):
        TreeModel([root, TreeNode('a', 1, 'r', 1, (-1,))])
    with pytest.raises(ValueError):
        TreeModel([root, TreeNode('a', 2, 'r', 1, (1,))])
    with pytest.raises(ValueError):
        TreeModel([root, TreeNode('a', 1, 'missing', 1, (1,))])
    # unequal leaf depths
    with pytest.raises(ValueError):
        TreeModel([root, TreeNode('a', 1, 'r', Fraction(1, 2), (1,)), TreeNode('b', 1, 'r', Fraction(1, 2), (1,)),
                   TreeNode('aa', 2, 'a', 1, (1,))], exact=True)
    # one coarse atom with two prices
    with pytest.raises(ValueError):
        TreeModel([root, TreeNode('a', 1, 'r', Fraction(1, 2), (2,), 'x'),
                   TreeNode('b', 1, 'r', Fraction(1, 2), (1,), 'x')], exact=True)
    with pytest.raises(ValueError):
        TreeModel.from_dict({'nodes': [{'id': 'r', 'time': 0}]})


# ==========================================
# DOOB AND STRUCTURE CONDITION
# ==========================================

def test_conditional_expectation_and_doob(trinomial):
    S = trinomial.asset_paths[:, :, 0]
    assert all(v == Fraction(37, 40) for v in conditional_expectation(trinomial, S[:, -1], 0))
    np.testing.assert_array_equal(conditional_expectation(trinomial, S[:, -1], 3), S[:, -1])

    M, V = doob_decomposition(trinomial, S)
    assert all(v == Fraction(-1, 40) for v in V.values[:, 1])
    assert np.all(S[:, :1] + M.values + V.values == S)
    assert all(m == 0 for m in conditional_expectation(trinomial, M.values[:, -1], 0))


def test_structure_condition(trinomial):
    lam, K, Z = structure_condition(trinomial)
    assert lam.kind == 'predictable' and lam.values.shape == (27, 3, 1)
    assert all(v == Fraction(-40, 49) for v in lam.values.ravel())
    # K accumulates lambda^2 Var = (1/40)^2 / (49/1600) per step
    assert all(k == 3 * Fraction(1, 49) for k in K.values[:, -1])
    assert deflated_martingale_gap(trinomial, Z) == 0
    print("✓ X Z_hat is an exact martingale on the trinomial tree")


def test_structure_condition_fails_without_variance():
    tree = TreeModel([TreeNode('r', 0, None, 1, (1,)), TreeNode('a', 1, 'r', 1, (2,))], exact=True)
    with pytest.raises(StructureConditionError):
        structure_condition(tree)


# ==========================================
# FOELLMER-SCHWEIZER DECOMPOSITION
# ==========================================

def test_traded_asset_is_bought_and_held(trinomial):
    result = fs_decompose(trinomial, trinomial.asset_paths[:, -1, 0])
    assert result.h0 == 1
    assert all(x == 1 for x in result.integrand.holdings.ravel())
    assert all(l == 0 for l in result.residual_path.ravel())


def test_top_leaf_claim_matches_oracle(trinomial):
    result = fs_decompose(trinomial, 'top_leaf')
    oracle = local_risk_oracle(trinomial, 'top_leaf')
    assert result.h0 == oracle.h0
    assert np.all(result.integrand.holdings == oracle.integrand.holdings)
    assert result.identity_residual(trinomial.claims['top_leaf']) == 0
    assert any(l != 0 for l in result.residual_terminal)
    assert result.diagnostics['filtration'] == 'fine' and result.diagnostics['degenerate'] == []

    floats = TreeModel.from_json(TREES / 'trinomial.json', exact=False)
    approx = fs_decompose(floats, 'top_leaf')
    assert approx.identity_residual(floats.claims['top_leaf']) < 1e-12
    assert approx.h0 == pytest.approx(float(result.h0), abs=1e-12)


def test_brute_force_accepts_optimal_strategy(trinomial):
    result = fs_decompose(trinomial, 'top_leaf')
    verdict = brute_force_optimality(trinomial, 'top_leaf', result)
    assert verdict.passed and not verdict.failures
    assert verdict.checks > 0


def test_brute_force_rejects_perturbed_strategy(trinomial):
    result = fs_decompose(trinomial, 'top_leaf')
    atom = trinomial.atoms(1)[0]
    perturbed = with_perturbation(trinomial, result, 2, atom, 0, Fraction(1, 10))
    verdict = brute_force_optimality(trinomial, 'top_leaf', perturbed)
    assert not verdict.passed
    assert not verdict.locally_minimal
    assert any('step 2' in message for message in verdict.failures)

    with pytest.raises(ValueError):
        with_perturbation(trinomial, result, 0, atom, 0, Fraction(1, 10))


def test_brute_force_guards(trinomial):
    result = fs_decompose(trinomial, 'top_leaf')
    with pytest.raises(ValueError):
        brute_force_optimality(trinomial, trinomial.asset_paths[:, -1, 0], result)

    deep = make_multinomial_tree([1], [[Fraction(1, 4)], [Fraction(-1, 4)]], [Fraction(1, 2), Fraction(1, 2)],
                                 5, exact=True)
    claim = deep.asset_paths[:, -1, 0]
    with pytest.raises(ValueError):
        brute_force_optimality(deep, claim, fs_decompose(deep, claim))


def test_unknown_claim(trinomial):
    with pytest.raises(ValueError):
        fs_decompose(trinomial, 'missing')
    with pytest.raises(ValueError):
        fs_decompose(trinomial, [1, 2, 3])


# ==========================================
# INCOMPLETE INFORMATION
# ==========================================

def test_predictable_projection(coarsened):
    fine = fs_decompose(coarsened, 'coin_weighted')
    projected = predictable_projection(coarsened, fine.integrand.holdings)
    # the coin is fair and hidden until maturity
    assert all(v == 1 for v in projected.values[:, 0, 0])
    assert all(v == Fraction(3, 2) for v in projected.values[:, 1:, 0].ravel())
    again = predictable_projection(coarsened, projected)
    assert np.all(again.values == projected.values)
    squares = predictable_projection(coarsened, fine.integrand.holdings ** 2)
    assert np.all(projected.values ** 2 <= squares.values)


def test_projection_requires_coarse_labels(trinomial):
    with pytest.raises(ValueError):
        predictable_projection(trinomial, fs_decompose(trinomial, 'top_leaf').integrand)


def test_incomplete_info_coin_claim(coarsened):
    fine = fs_decompose(coarsened, 'coin_weighted')
    assert fine.h0 == 1
    assert all(l == 0 for l in fine.residual_terminal)
    assert sorted({x for x in fine.integrand.holdings[:, 1, 0]}) == [1, 2]

    report = verify_incomplete_info(coarsened, 'coin_weighted')
    assert report.passed
    assert report.h0 == 1
    assert report.identity_residual == report.martingale_residual == report.orthogonality_residual == 0
    assert any(l != 0 for l in report.residual_path[:, -1])
    assert report.strategies_agree

    summary = report.to_dict()
    assert summary['residual_nonzero'] and summary['passed']
    assert summary['projected_strategy'][0] == [[1.0], [1.5], [1.5]]
    print("✓ Coarse hedge from the projected strategy is exact")


def test_incomplete_info_terminal_asset(coarsened):
    report = verify_incomplete_info(coarsened, 'terminal_asset')
    assert report.passed
    assert all(l == 0 for l in report.residual_path.ravel())


def test_unattainable_claim_is_rejected(trinomial):
    with pytest.raises(AttainabilityError):
        verify_incomplete_info(trinomial, 'top_leaf')
