"""
Bench Hedge - Finite Tree Laboratory

Exact computations on finite trees: Doob decomposition, the structure
condition and its density, Foellmer-Schweizer decompositions by backward
induction, a brute-force referee for local risk minimization, and the
predictable projection that turns a strategy under full information into one
under partial information.

Representation: the sample space is the set of leaves. Every process is an
array indexed (leaf, time), so conditional expectations are weighted means
over the leaves sharing an atom. The node graph is the fine filtration; the
optional coarse labels define what a less informed observer sees (the coarse
atom at t is the history of labels up to t).

Numbers are floats, or Fractions when the tree is loaded in exact mode; the
same code runs on both.
"""

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from sim.errors import AttainabilityError, NumericalError, StructureConditionError
from sim.hedging import DecompositionResult, Strategy

logger = logging.getLogger(__name__)

TOLERANCE = 1e-12
MAX_BRUTE_FORCE_LEVELS = 4
MAX_BRUTE_FORCE_BRANCHES = 4
MAX_BRUTE_FORCE_LEAVES = 256

Number = Union[float, Fraction]


# ==========================================
# TREE MODEL
# ==========================================

@dataclass
class TreeNode:
    """One node: transition probability from its parent and the benchmarked asset vector."""
    id: str
    time: int
    parent: Optional[str]
    prob: Number
    assets: Tuple[Number, ...]
    coarse_label: Optional[str] = None


def _number(value, exact: bool) -> Number:
    if exact:
        return value if isinstance(value, Fraction) else Fraction(str(value))
    return float(Fraction(value)) if isinstance(value, str) else float(value)


class TreeModel:
    """
    Finite tree with leaves at a common depth N.

    Args:
        nodes: Nodes in any order; exactly one root at time 0
        asset_names: Labels of the asset vector components
        exact: Use Fractions throughout
        claims: Optional named claims, leaf id -> payoff

    Raises:
        ValueError: On malformed trees (probabilities, depth, negative assets,
            asset prices not observable under the coarse labels)
    """

    def __init__(self, nodes: Sequence[TreeNode], asset_names: Optional[Sequence[str]] = None,
                 exact: bool = False, claims: Optional[Dict[str, Dict[str, object]]] = None):
        self.exact = exact
        self.nodes: List[TreeNode] = [
            TreeNode(n.id, int(n.time), n.parent, _number(n.prob, exact),
                     tuple(_number(a, exact) for a in n.assets), n.coarse_label)
            for n in nodes
        ]
        self.index = {n.id: k for k, n in enumerate(self.nodes)}
        if len(self.index) != len(self.nodes):
            raise ValueError("node ids must be unique")
        self.children: Dict[str, List[str]] = {n.id: [] for n in self.nodes}
        roots = []
        for node in self.nodes:
            if node.parent is None:
                roots.append(node)
                continue
            if node.parent not in self.index:
                raise ValueError(f"node '{node.id}' has unknown parent '{node.parent}'")
            if self.nodes[self.index[node.parent]].time != node.time - 1:
                raise ValueError(f"node '{node.id}' at time {node.time} must sit one level below its parent")
            self.children[node.parent].append(node.id)
        if len(roots) != 1 or roots[0].time != 0:
            raise ValueError("tree needs exactly one root at time 0")
        self.root = roots[0].id

        dims = {len(n.assets) for n in self.nodes}
        if len(dims) != 1 or 0 in dims:
            raise ValueError("every node needs the same non-empty asset vector")
        self.n_assets = dims.pop()
        self.asset_names = tuple(asset_names or (f'S{j + 1}' for j in range(self.n_assets)))
        if len(self.asset_names) != self.n_assets:
            raise ValueError(f"{len(self.asset_names)} asset names for {self.n_assets} assets")
        self._validate_nodes()

        self.n_steps = max(n.time for n in self.nodes)
        leaf_paths = self._leaf_paths()
        if {len(path) for path in leaf_paths} != {self.n_steps + 1}:
            raise ValueError("all leaves must sit at the final time")
        self.path_nodes = np.array(leaf_paths, dtype=int)
        self.leaf_ids = [self.nodes[k].id for k in self.path_nodes[:, -1]]
        dtype = object if exact else float
        probs = np.array([[self.nodes[k].prob for k in row[1:]] for row in self.path_nodes], dtype=dtype)
        self.leaf_prob = np.prod(probs, axis=1) if self.n_steps else np.ones(len(self.path_nodes), dtype=dtype)
        self.asset_paths = np.array([[list(self.nodes[k].assets) for k in row] for row in self.path_nodes],
                                    dtype=dtype)
        self.has_coarse_labels = any(n.coarse_label is not None for n in self.nodes)
        self._coarse_atoms = self._build_coarse_atoms()
        if self.has_coarse_labels:
            self._check_coarse_adapted()
        self.claims = {name: self._claim_array(name, values) for name, values in (claims or {}).items()}
        logger.debug("tree with %d nodes, %d leaves, %d steps", len(self.nodes), self.n_paths, self.n_steps)

    def _validate_nodes(self):
        for node in self.nodes:
            if any(a < 0 for a in node.assets):
                raise ValueError(f"node '{node.id}' has a negative benchmarked asset value")
            kids = self.children[node.id]
            if not kids:
                continue
            probs = [self.nodes[self.index[k]].prob for k in kids]
            if any(p <= 0 for p in probs):
                raise ValueError(f"children of '{node.id}' need strictly positive probabilities")
            total = sum(probs)
            if (total != 1) if self.exact else abs(total - 1.0) > TOLERANCE:
                raise ValueError(f"probabilities below '{node.id}' sum to {total}, not 1")

    def _leaf_paths(self) -> List[List[int]]:
        paths, stack = [], [[self.index[self.root]]]
        while stack:
            path = stack.pop()
            kids = self.children[self.nodes[path[-1]].id]
            if not kids:
                paths.append(path)
            for kid in reversed(kids):
                stack.append(path + [self.index[kid]])
        return paths

    def _build_coarse_atoms(self) -> np.ndarray:
        if not self.has_coarse_labels:
            return self.path_nodes
        atoms = np.zeros_like(self.path_nodes)
        for t in range(1, self.n_steps + 1):
            keys = {}
            for p, row in enumerate(self.path_nodes):
                history = tuple(self.nodes[k].coarse_label or self.nodes[k].id for k in row[1:t + 1])
                atoms[p, t] = keys.setdefault(history, len(keys))
        return atoms

    def _check_coarse_adapted(self):
        for t in range(self.n_steps + 1):
            for atom in np.unique(self._coarse_atoms[:, t]):
                values = self.asset_paths[self._coarse_atoms[:, t] == atom, t]
                if any(tuple(v) != tuple(values[0]) for v in values):
                    raise ValueError(f"asset prices differ inside a coarse atom at time {t}")

    def _claim_array(self, name: str, values: Dict[str, object]) -> np.ndarray:
        missing = [leaf for leaf in self.leaf_ids if leaf not in values]
        if missing:
            raise ValueError(f"claim '{name}' has no value at leaves {missing[:5]}")
        return self.as_numbers([values[leaf] for leaf in self.leaf_ids])

    @property
    def n_paths(self) -> int:
        return self.path_nodes.shape[0]

    @property
    def max_branching(self) -> int:
        return max(len(kids) for kids in self.children.values())

    def as_numbers(self, values) -> np.ndarray:
        """Array in this tree's number type."""
        values = np.asarray(values, dtype=object)
        converted = np.vectorize(lambda v: _number(v, self.exact), otypes=[object])(values)
        return converted if self.exact else converted.astype(float)

    def atoms(self, t: int, coarse: bool = False) -> np.ndarray:
        """Integer atom id of every leaf at time t."""
        return (self._coarse_atoms if coarse else self.path_nodes)[:, t]

    def zeros(self, shape) -> np.ndarray:
        return np.full(shape, Fraction(0), dtype=object) if self.exact else np.zeros(shape)

    # ------------------------------------------------------------------
    # serialisation

    @classmethod
    def from_dict(cls, data: dict, exact: Optional[bool] = None) -> 'TreeModel':
        """
        Build from {"assets": [...], "exact": bool, "nodes": [...], "claims": {...}}.

        Node entries carry id, time, parent, prob, assets and optionally
        coarse_label; numbers may be rational strings such as "3/10".
        """
        try:
            nodes = [TreeNode(str(n['id']), int(n['time']), n.get('parent'), n.get('prob', 1),
                              tuple(n['assets']), n.get('coarse_label')) for n in data['nodes']]
        except KeyError as e:
            raise ValueError(f"tree node is missing field {e}") from e
        use_exact = data.get('exact', False) if exact is None else exact
        return cls(nodes, data.get('assets'), use_exact, data.get('claims'))

    @classmethod
    def from_json(cls, path: Union[str, Path], exact: Optional[bool] = None) -> 'TreeModel':
        with open(path, 'r') as f:
            return cls.from_dict(json.load(f), exact)

    def to_dict(self) -> dict:
        def fmt(v):
            return str(v) if self.exact else v
        leaf_pos = {leaf: p for p, leaf in enumerate(self.leaf_ids)}
        return {
            'exact': self.exact,
            'assets': list(self.asset_names),
            'nodes': [{'id': n.id, 'time': n.time, 'parent': n.parent, 'prob': fmt(n.prob),
                       'assets': [fmt(a) for a in n.assets], 'coarse_label': n.coarse_label}
                      for n in self.nodes],
            'claims': {name: {leaf: fmt(values[pos]) for leaf, pos in leaf_pos.items()}
                       for name, values in self.claims.items()},
        }


def make_multinomial_tree(s0: Sequence[Number], moves: Sequence[Sequence[Number]], probs: Sequence[Number],
                          n_steps: int, exact: bool = False, names: Sequence[str] = ('u', 'm', 'd')) -> TreeModel:
    """
    Recombination-free tree where every node has one child per move.

    The asset vector of a child is its parent's plus the move; node ids are the
    concatenated move names ('r', 'ru', 'rud', ...).

    Example:
        >>> tree = make_multinomial_tree([1], [[Fraction(1, 4)], [0], [Fraction(-1, 4)]],
        ...                              [Fraction(1, 5), Fraction(1, 2), Fraction(3, 10)], 3, exact=True)
        >>> tree.n_paths
        27
    """
    if len(moves) != len(probs) or len(moves) > len(names):
        raise ValueError("need one probability and one name per move")
    nodes = [TreeNode('r', 0, None, 1, tuple(s0))]
    frontier = [nodes[0]]
    for t in range(1, n_steps + 1):
        nxt = []
        for parent in frontier:
            for name, move, prob in zip(names, moves, probs):
                assets = tuple(_number(a, exact) + _number(m, exact) for a, m in zip(parent.assets, move))
                child = TreeNode(parent.id + name, t, parent.id, prob, assets)
                nodes.append(child)
                nxt.append(child)
        frontier = nxt
    return TreeModel(nodes, exact=exact)


@dataclass
class TreeProcess:
    """
    Per-leaf values of a process.

    kind 'adapted': values[:, t] for t = 0..N. kind 'predictable':
    values[:, t - 1] is the value for step t, fixed at time t - 1.
    """
    values: np.ndarray
    kind: str = 'adapted'
    name: str = ''

    def __post_init__(self):
        if self.kind not in ('adapted', 'predictable'):
            raise ValueError(f"unknown process kind '{self.kind}'")


# ==========================================
# CONDITIONAL EXPECTATIONS AND LINEAR ALGEBRA
# ==========================================

def _weighted_mean(values: np.ndarray, weights: np.ndarray):
    w = weights.reshape((-1,) + (1,) * (values.ndim - 1))
    return (w * values).sum(axis=0) / weights.sum()


def conditional_expectation(tree: TreeModel, values, t: int, coarse: bool = False) -> np.ndarray:
    """
    E[values | F_t] as a per-leaf array (constant on the atoms of time t).

    values may carry trailing dimensions (e.g. one column per asset).
    """
    values = np.asarray(values)
    if values.shape[0] != tree.n_paths:
        raise ValueError(f"values need one entry per leaf ({tree.n_paths}), got {values.shape[0]}")
    atoms = tree.atoms(t, coarse)
    out = np.empty(values.shape, dtype=values.dtype)
    for atom in np.unique(atoms):
        mask = atoms == atom
        out[mask] = _weighted_mean(values[mask], tree.leaf_prob[mask])
    return out


def _running_sum(increments: np.ndarray) -> np.ndarray:
    """(n, N) step values -> (n, N + 1) partial sums starting at 0, keeping the dtype."""
    start = np.zeros((increments.shape[0], 1) + increments.shape[2:], dtype=increments.dtype)
    if increments.dtype == object:
        start[...] = Fraction(0)
    return np.concatenate([start, np.cumsum(increments, axis=1)], axis=1)


def _gauss_jordan(matrix, rhs) -> Tuple[Optional[list], int]:
    """Exact reduced row echelon solve; free variables are 0. Returns (None, rank) when inconsistent."""
    n_rows, n_cols = len(matrix), len(matrix[0])
    aug = [list(row) + [b] for row, b in zip(matrix, rhs)]
    pivots, r = [], 0
    for c in range(n_cols):
        pivot = next((i for i in range(r, n_rows) if aug[i][c] != 0), None)
        if pivot is None:
            continue
        aug[r], aug[pivot] = aug[pivot], aug[r]
        lead = aug[r][c]
        aug[r] = [v / lead for v in aug[r]]
        for i in range(n_rows):
            if i != r and aug[i][c] != 0:
                factor = aug[i][c]
                aug[i] = [a - factor * b for a, b in zip(aug[i], aug[r])]
        pivots.append(c)
        r += 1
        if r == n_rows:
            break
    if any(aug[i][-1] != 0 for i in range(r, n_rows)):
        return None, r
    x = [Fraction(0)] * n_cols
    for i, c in enumerate(pivots):
        x[c] = aug[i][-1]
    return x, r


def _solve_symmetric(A: np.ndarray, b: np.ndarray, exact: bool) -> Tuple[Optional[np.ndarray], int]:
    """
    Least-norm solution of A x = b for symmetric positive semi-definite A.

    Returns (None, rank) when b is not in the range of A.
    """
    d = A.shape[0]
    if exact:
        x, rank = _gauss_jordan(A.tolist(), list(b))
        if x is not None and rank < d:
            # x = A y with A^2 y = b lies in the row space: the least-norm solution
            y, _ = _gauss_jordan(A.dot(A).tolist(), list(b))
            x = None if y is None else list(A.dot(np.array(y, dtype=object)))
        return (None if x is None else np.array(x, dtype=object)), rank
    x, _, rank, _ = np.linalg.lstsq(A.astype(float), b.astype(float), rcond=None)
    scale = max(1.0, float(np.abs(b).max(initial=0.0)), float(np.abs(A).max(initial=0.0)))
    if np.max(np.abs(A @ x - b), initial=0.0) > 1e-10 * scale:
        return None, int(rank)
    return x, int(rank)


def _is_zero(values, exact: bool, tol: float = TOLERANCE) -> bool:
    values = np.asarray(values)
    if values.size == 0:
        return True
    worst = np.max(np.abs(values))
    return worst == 0 if exact else float(worst) <= tol


def _max_abs(values) -> float:
    values = np.asarray(values)
    return float(np.max(np.abs(values))) if values.size else 0.0


# ==========================================
# DOOB DECOMPOSITION AND STRUCTURE CONDITION
# ==========================================

def _values(process) -> np.ndarray:
    return process.values if isinstance(process, TreeProcess) else np.asarray(process)


def doob_decomposition(tree: TreeModel, process, coarse: bool = False) -> Tuple[TreeProcess, TreeProcess]:
    """
    Split an adapted process into martingale and predictable parts, X = X_0 + M + V.

        dV_t = E[dX_t | F_{t-1}],  dM_t = dX_t - dV_t,  M_0 = V_0 = 0

    Example:
        >>> M, V = doob_decomposition(tree, tree.asset_paths[:, :, 0])
        >>> V.values[:, 1]   # E[S_1] - S_0 on every leaf
    """
    X = _values(process)
    if X.shape[:2] != (tree.n_paths, tree.n_steps + 1):
        raise ValueError(f"process needs shape ({tree.n_paths}, {tree.n_steps + 1}, ...), got {X.shape}")
    dX = np.diff(X, axis=1)
    dV = np.empty_like(dX)
    for t in range(1, tree.n_steps + 1):
        dV[:, t - 1] = conditional_expectation(tree, dX[:, t - 1], t - 1, coarse)
    return (TreeProcess(_running_sum(dX - dV), 'adapted', 'M'),
            TreeProcess(_running_sum(dV), 'adapted', 'V'))


@dataclass
class _StepMoments:
    mean: np.ndarray
    cov: np.ndarray


def _step_moments(tree: TreeModel, dX: np.ndarray, mask: np.ndarray) -> _StepMoments:
    """Conditional mean and covariance of the (leaf, asset) increments on one atom."""
    w = tree.leaf_prob[mask]
    x = dX[mask]
    mean = _weighted_mean(x, w)
    centred = x - mean
    cov = _weighted_mean(centred[:, :, None] * centred[:, None, :], w)
    return _StepMoments(mean, cov)


def structure_condition(tree: TreeModel, coarse: bool = False) -> Tuple[TreeProcess, TreeProcess, TreeProcess]:
    """
    Solve <M> lambda = A step by step; return (lambda_hat, K_hat, Z_hat).

    lambda_hat is the least-norm solution of Cov(dX | F_{t-1}) lambda = E[dX | F_{t-1}],
    K_hat accumulates lambda' Cov lambda and Z_hat_t = Z_hat_{t-1} (1 - lambda . dM_t).
    X Z_hat is then a martingale on the tree.

    Raises:
        StructureConditionError: If the drift is not in the range of the covariance at some atom
    """
    X = tree.asset_paths
    dX = np.diff(X, axis=1)
    n, N, d = dX.shape
    lam = tree.zeros((n, N, d))
    k_steps = tree.zeros((n, N))
    z_steps = tree.zeros((n, N))
    for t in range(1, N + 1):
        atoms = tree.atoms(t - 1, coarse)
        for atom in np.unique(atoms):
            mask = atoms == atom
            moments = _step_moments(tree, dX[:, t - 1], mask)
            solution, rank = _solve_symmetric(moments.cov, moments.mean, tree.exact)
            if solution is None:
                raise StructureConditionError(
                    f"drift outside the range of the covariance at time {t - 1}: no numeraire portfolio")
            if rank < d:
                logger.warning("rank-deficient covariance (rank %d of %d) at time %d", rank, d, t - 1)
            lam[mask, t - 1] = solution
            k_steps[mask, t - 1] = solution.dot(moments.cov.dot(solution))
            dM = dX[mask, t - 1] - moments.mean
            z_steps[mask, t - 1] = 1 - dM.dot(solution)
    z_hat = np.cumprod(np.concatenate([tree.zeros((n, 1)) + 1, z_steps], axis=1), axis=1)
    return (TreeProcess(lam, 'predictable', 'lambda_hat'),
            TreeProcess(_running_sum(k_steps), 'adapted', 'K_hat'),
            TreeProcess(z_hat, 'adapted', 'Z_hat'))


def deflated_martingale_gap(tree: TreeModel, z_hat: TreeProcess, coarse: bool = False) -> float:
    """Max |E[d(X Z_hat) | F_{t-1}]| over steps, atoms and assets."""
    deflated = tree.asset_paths * _values(z_hat)[:, :, None]
    d_deflated = np.diff(deflated, axis=1)
    return max(_max_abs(conditional_expectation(tree, d_deflated[:, t - 1], t - 1, coarse))
               for t in range(1, tree.n_steps + 1))


# ==========================================
# FOELLMER-SCHWEIZER DECOMPOSITION
# ==========================================

def _check_claim(tree: TreeModel, claim, coarse: bool) -> np.ndarray:
    if isinstance(claim, str):
        if claim not in tree.claims:
            raise ValueError(f"tree has no claim '{claim}' (claims: {sorted(tree.claims)})")
        return tree.claims[claim]
    H = tree.as_numbers(claim)
    if H.shape != (tree.n_paths,):
        raise ValueError(f"claim needs one value per leaf ({tree.n_paths}), got shape {H.shape}")
    if coarse and not _is_zero(H - conditional_expectation(tree, H, tree.n_steps, True), tree.exact):
        raise ValueError("claim is not measurable with respect to the coarse information at maturity")
    return H


def _decomposition(tree: TreeModel, H: np.ndarray, holdings: np.ndarray, value: np.ndarray,
                   diagnostics: dict) -> DecompositionResult:
    dX = np.diff(tree.asset_paths, axis=1)
    strategy = Strategy(holdings, tree.asset_names)
    step_gains = strategy.gains(dX)
    h0 = value[0, 0]
    residual = value - h0 - _running_sum(step_gains)
    return DecompositionResult(h0, strategy, residual[:, -1], residual, step_gains.sum(axis=1), value, diagnostics)


def fs_decompose(tree: TreeModel, claim, coarse: bool = False) -> DecompositionResult:
    """
    Foellmer-Schweizer decomposition H = H_0 + sum xi . dX + L_T by backward induction.

    At every atom of time t - 1:
        Cov(dX) xi = Cov(dX, V_t),   V_{t-1} = E[V_t] - xi . E[dX]
    so the cost V - int xi dX is a martingale and its increments are
    uncorrelated with dX. Degenerate covariances use the least-norm xi and
    are listed in diagnostics['degenerate'].

    Args:
        tree: Tree model
        claim: Name of a shipped claim or per-leaf payoffs
        coarse: Use the coarse filtration instead of the node graph
    """
    H = _check_claim(tree, claim, coarse)
    dX = np.diff(tree.asset_paths, axis=1)
    n, N, d = dX.shape
    value = tree.zeros((n, N + 1))
    value[:, N] = H
    holdings = tree.zeros((n, N, d))
    degenerate = []
    for t in range(N, 0, -1):
        atoms = tree.atoms(t - 1, coarse)
        for atom in np.unique(atoms):
            mask = atoms == atom
            w = tree.leaf_prob[mask]
            moments = _step_moments(tree, dX[:, t - 1], mask)
            v_next = value[mask, t]
            v_mean = _weighted_mean(v_next, w)
            cov_xv = _weighted_mean((dX[mask, t - 1] - moments.mean) * (v_next - v_mean)[:, None], w)
            xi, rank = _solve_symmetric(moments.cov, cov_xv, tree.exact)
            if xi is None:
                raise NumericalError(f"covariance system inconsistent at time {t - 1}")
            if rank < d:
                degenerate.append({'time': t - 1, 'atom': int(atom), 'rank': rank})
            holdings[mask, t - 1] = xi
            value[mask, t - 1] = v_mean - xi.dot(moments.mean)
    if degenerate:
        logger.warning("%d degenerate one-step covariances, least-norm holdings used", len(degenerate))
    return _decomposition(tree, H, holdings, value,
                          {'filtration': 'coarse' if coarse else 'fine', 'degenerate': degenerate})


def local_risk_oracle(tree: TreeModel, claim, coarse: bool = False) -> DecompositionResult:
    """
    Independent referee for fs_decompose: at each atom, minimise
    E[(V_t - c - xi . dX)^2 | F_{t-1}] over (c, xi) by weighted least squares
    on the design [1, dX]; V_{t-1} = c.
    """
    H = _check_claim(tree, claim, coarse)
    dX = np.diff(tree.asset_paths, axis=1)
    n, N, d = dX.shape
    value = tree.zeros((n, N + 1))
    value[:, N] = H
    holdings = tree.zeros((n, N, d))
    for t in range(N, 0, -1):
        atoms = tree.atoms(t - 1, coarse)
        for atom in np.unique(atoms):
            mask = atoms == atom
            w = tree.leaf_prob[mask]
            design = np.concatenate([tree.zeros((int(mask.sum()), 1)) + 1, dX[mask, t - 1]], axis=1)
            normal = (design.T * w).dot(design)
            rhs = (design.T * w).dot(value[mask, t])
            beta, _ = _solve_symmetric(normal, rhs, tree.exact)
            value[mask, t - 1] = beta[0]
            holdings[mask, t - 1] = beta[1:]
    return _decomposition(tree, H, holdings, value, {'filtration': 'coarse' if coarse else 'fine', 'oracle': True})


# ==========================================
# BRUTE-FORCE OPTIMALITY
# ==========================================

def with_perturbation(tree: TreeModel, result: DecompositionResult, step: int, atom: int, asset: int,
                      amount: Number, coarse: bool = False) -> DecompositionResult:
    """
    The same value process with holdings of one asset shifted by amount on one atom of time step - 1.

    The terminal value is unchanged, so the cost absorbs the shift.
    """
    if not 1 <= step <= tree.n_steps:
        raise ValueError(f"step must lie in 1..{tree.n_steps}, got {step}")
    holdings = result.integrand.holdings.copy()
    mask = tree.atoms(step - 1, coarse) == atom
    holdings[mask, step - 1, asset] = holdings[mask, step - 1, asset] + amount
    H = result.value_path[:, -1]
    return _decomposition(tree, H, holdings, result.value_path,
                          {**result.diagnostics, 'perturbed': (step, int(atom), asset)})


@dataclass
class OptimalityVerdict:
    """Outcome of the three brute-force checks, with the atoms where they failed."""
    cost_martingale: bool
    orthogonal: bool
    locally_minimal: bool
    failures: List[str] = field(default_factory=list)
    checks: int = 0

    @property
    def passed(self) -> bool:
        return self.cost_martingale and self.orthogonal and self.locally_minimal


def _remaining_risk(tree: TreeModel, cost: np.ndarray, t: int, mask: np.ndarray):
    return _weighted_mean((cost[mask, -1] - cost[mask, t]) ** 2, tree.leaf_prob[mask])


def brute_force_optimality(tree: TreeModel, claim, candidate: DecompositionResult, coarse: bool = False,
                           epsilon: Optional[Number] = None) -> OptimalityVerdict:
    """
    Check a candidate decomposition by enumeration.

    (a) the cost C = h0 + L is a martingale;
    (b) E[(C_T - C_t) 1_a dX^j_s] = 0 for every atom a of time s - 1 and
        every t < s (indicators of atoms span all predictable perturbations);
    (c) shifting the holdings by +-epsilon on any atom never lowers the
        remaining risk E[(C_T - C_t)^2 | F_t] at that atom's ancestors.

    Raises:
        ValueError: If the tree exceeds 4 levels, 4 branches or 256 leaves
    """
    if (tree.n_steps > MAX_BRUTE_FORCE_LEVELS or tree.max_branching > MAX_BRUTE_FORCE_BRANCHES
            or tree.n_paths > MAX_BRUTE_FORCE_LEAVES):
        raise ValueError(f"brute force limited to {MAX_BRUTE_FORCE_LEVELS} levels, "
                         f"{MAX_BRUTE_FORCE_BRANCHES} branches and {MAX_BRUTE_FORCE_LEAVES} leaves")
    H = _check_claim(tree, claim, coarse)
    if not _is_zero(candidate.value_path[:, -1] - H, tree.exact):
        raise ValueError("candidate value process does not end at the claim")
    eps = epsilon if epsilon is not None else (Fraction(1, 1000) if tree.exact else 1e-3)
    cost = candidate.h0 + candidate.residual_path
    dX = np.diff(tree.asset_paths, axis=1)
    verdict = OptimalityVerdict(True, True, True)

    for t in range(1, tree.n_steps + 1):
        drift = conditional_expectation(tree, cost[:, t] - cost[:, t - 1], t - 1, coarse)
        verdict.checks += 1
        if not _is_zero(drift, tree.exact):
            verdict.cost_martingale = False
            verdict.failures.append(f"cost drifts over step {t} (max {_max_abs(drift):.3e})")

    for step in range(1, tree.n_steps + 1):
        atoms_s = tree.atoms(step - 1, coarse)
        for atom in np.unique(atoms_s):
            mask = atoms_s == atom
            leaf = int(np.argmax(mask))
            for j in range(tree.n_assets):
                for t in range(step):
                    moment = (tree.leaf_prob[mask] * (cost[mask, -1] - cost[mask, t]) * dX[mask, step - 1, j]).sum()
                    verdict.checks += 1
                    if not _is_zero(moment, tree.exact):
                        verdict.orthogonal = False
                        verdict.failures.append(f"cost correlated with asset {j} on atom {atom} of step {step} "
                                                f"seen from time {t}")
                for sign in (1, -1):
                    shifted = with_perturbation(tree, candidate, step, atom, j, sign * eps, coarse)
                    shifted_cost = shifted.h0 + shifted.residual_path
                    for t in range(step):
                        ancestor = tree.atoms(t, coarse) == tree.atoms(t, coarse)[leaf]
                        base = _remaining_risk(tree, cost, t, ancestor)
                        moved = _remaining_risk(tree, shifted_cost, t, ancestor)
                        verdict.checks += 1
                        lower = moved < base if tree.exact else moved < base - TOLERANCE
                        if lower:
                            verdict.locally_minimal = False
                            verdict.failures.append(f"shifting asset {j} by {'+' if sign > 0 else '-'}eps on atom "
                                                    f"{atom} of step {step} lowers the risk at time {t}")
    logger.info("brute force: %d checks, %d failures", verdict.checks, len(verdict.failures))
    return verdict


# ==========================================
# INCOMPLETE INFORMATION
# ==========================================

def predictable_projection(tree: TreeModel, fine_strategy) -> TreeProcess:
    """
    Project a strategy chosen with full information onto the coarse filtration.

    On a tree the predictable projection at step t is the conditional
    expectation given the coarse atom at time t - 1.

    Raises:
        ValueError: If the tree carries no coarse labels
    """
    if not tree.has_coarse_labels:
        raise ValueError("predictable projection needs coarse labels on the tree")
    xi = _values(fine_strategy)
    if xi.shape[:2] != (tree.n_paths, tree.n_steps):
        raise ValueError(f"strategy needs shape ({tree.n_paths}, {tree.n_steps}, ...), got {xi.shape}")
    projected = np.empty_like(xi)
    for t in range(1, tree.n_steps + 1):
        projected[:, t - 1] = conditional_expectation(tree, xi[:, t - 1], t - 1, coarse=True)
    return TreeProcess(projected, 'predictable', 'projected_strategy')


@dataclass
class IncompleteInfoReport:
    """Decomposition under coarse information built from the fine-information hedge."""
    h0: Number
    fine: DecompositionResult
    projected: TreeProcess
    residual_path: np.ndarray
    identity_residual: float
    representation_residual: float
    martingale_residual: float
    orthogonality_residual: float
    coarse_fs: DecompositionResult
    strategies_agree: bool

    @property
    def passed(self) -> bool:
        if self.fine.residual_path.dtype == object:
            return self.identity_residual == self.representation_residual == self.martingale_residual \
                == self.orthogonality_residual == 0
        return max(self.identity_residual, self.representation_residual, self.martingale_residual,
                   self.orthogonality_residual) <= TOLERANCE

    def to_dict(self) -> dict:
        return {
            'h0': float(self.h0),
            'identity_residual': self.identity_residual,
            'representation_residual': self.representation_residual,
            'martingale_residual': self.martingale_residual,
            'orthogonality_residual': self.orthogonality_residual,
            'residual_nonzero': _max_abs(self.residual_path) > TOLERANCE,
            'strategies_agree': self.strategies_agree,
            'passed': self.passed,
            'projected_strategy': np.asarray(self.projected.values, dtype=float).tolist(),
            'coarse_fs_strategy': np.asarray(self.coarse_fs.integrand.holdings, dtype=float).tolist(),
        }


def verify_incomplete_info(tree: TreeModel, claim) -> IncompleteInfoReport:
    """
    Hedge under coarse information by projecting the fine-information replicating strategy.

    Checks exactly (or to 1e-12 in float mode):
      (i) H = H_0 + sum xi dX + L_T leaf by leaf, with L_T equal to
          sum (xi_fine - xi) dX;
      (ii) L_t = E[L_T | F_t] is a martingale with L_0 = 0;
      (iii) E[dL dM | F_{t-1}] = 0 for the coarse martingale part M of X.
    The coarse Foellmer-Schweizer decomposition is computed alongside; the
    two strategies need not coincide when X has drift.

    Raises:
        AttainabilityError: If the claim is not replicable with full information
    """
    H = _check_claim(tree, claim, coarse=False)
    fine = fs_decompose(tree, H, coarse=False)
    if not _is_zero(fine.residual_terminal, tree.exact):
        raise AttainabilityError(f"claim is not attainable under full information "
                                 f"(max residual {_max_abs(fine.residual_terminal):.3e})")
    projected = predictable_projection(tree, fine.integrand.holdings)
    dX = np.diff(tree.asset_paths, axis=1)
    h0 = fine.h0
    gains = (projected.values * dX).sum(axis=(1, 2))
    terminal = H - h0 - gains
    representation = (fine.integrand.holdings - projected.values) * dX
    representation_gap = _max_abs(terminal - representation.sum(axis=(1, 2)))

    residual = tree.zeros((tree.n_paths, tree.n_steps + 1))
    for t in range(tree.n_steps + 1):
        residual[:, t] = conditional_expectation(tree, terminal, t, coarse=True)
    identity = _max_abs(H - h0 - gains - residual[:, -1])
    martingale_gap = _max_abs(residual[:, 0])

    M, _ = doob_decomposition(tree, tree.asset_paths, coarse=True)
    dM = np.diff(M.values, axis=1)
    dL = np.diff(residual, axis=1)
    orthogonality = 0.0
    for t in range(1, tree.n_steps + 1):
        moment = conditional_expectation(tree, dL[:, t - 1, None] * dM[:, t - 1], t - 1, coarse=True)
        orthogonality = max(orthogonality, _max_abs(moment))

    coarse_fs = fs_decompose(tree, H, coarse=True)
    agree = _is_zero(coarse_fs.integrand.holdings - projected.values, tree.exact)
    if not agree:
        logger.info("projected strategy differs from the coarse Foellmer-Schweizer strategy")
    return IncompleteInfoReport(h0, fine, projected, residual, identity, representation_gap, martingale_gap,
                                orthogonality, coarse_fs, agree)
