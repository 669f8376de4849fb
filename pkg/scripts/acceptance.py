#!/usr/bin/env python3
"""
Acceptance run for Bench Hedge

Reproduces every closed form against its Monte Carlo or exact oracle at desk
scale and writes the verdicts to data/acceptance.json.

Usage:
    python scripts/acceptance.py [--workers N]
"""

import argparse
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from scipy import stats

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cli.runner import run
from sim.discrete_lab import (
    TreeModel,
    brute_force_optimality,
    fs_decompose,
    verify_incomplete_info,
    with_perturbation,
)
from sim.distributions import NcChiSqParams, ncx2_cdf, ncx2_sample
from sim.hedging import (
    defaultable_put_hedge,
    gkw_regression,
    replication_convergence,
    stylized_asset_hedge,
)
from sim.models import StylizedMmmParams, simulate_primary_accounts, simulate_stylized_mmm
from sim.pricing import (
    DefaultModel,
    RecoveryFunction,
    attach_bond_channel,
    compensated_default,
    default_times,
    defaultable_put_payoff,
    defaultable_put_price,
    psi_process,
    put_price,
    real_world_price_mc,
    zcb_benchmarked,
)
from sim.stochastic_core import RngStream, TimeGrid
from sim.verify import (
    cost_numeraire_relation,
    martingale_check,
    orthogonality_preservation,
    strict_local_martingale_check,
)

ROOT = Path(__file__).resolve().parent.parent
TREES = ROOT / 'data' / 'trees'
OUTPUT = ROOT / 'data' / 'acceptance.json'
BASE = StylizedMmmParams(alpha0=0.05, beta=0.05, r=0.0, z0=1.0)


def print_header(title):
    print(f"\n{'='*70}")
    print(f"{title:^70}")
    print(f"{'='*70}\n")


def verdict(name, passed, **detail):
    print(f"  {'✅' if passed else '❌'} {name}")
    for key, value in detail.items():
        print(f"      {key}: {value}")
    return {'check': name, 'passed': bool(passed), **detail}


def zscore(estimate, theory, stderr):
    return (estimate - theory) / stderr if stderr > 0 else 0.0


def bond_vs_monte_carlo(workers):
    checks = []
    for T in (2.0, 10.0, 30.0):
        start = time.time()
        paths = simulate_stylized_mmm(BASE, TimeGrid(0.0, T, 1), 100_000, seed=101, n_workers=workers)
        estimate = real_world_price_mc(lambda p: p['s_hat_0'][:, -1], paths)
        theory = float(zcb_benchmarked(0.0, 1.0, BASE, T))
        z = zscore(estimate.estimate, theory, estimate.stderr)
        elapsed = time.time() - start
        checks.append(verdict(f"bond T={T:g}", abs(z) <= 3 and elapsed < 30, closed_form=theory,
                              estimate=estimate.estimate, z=z, seconds=elapsed))
    return checks


def supermartingale_defect(workers):
    T = 10.0
    paths = simulate_stylized_mmm(BASE, TimeGrid(0.0, T, 1), 100_000, seed=202, n_workers=workers)
    theory = float(-np.expm1(-BASE.f(0.0, T) * BASE.z0))
    savings = real_world_price_mc(lambda p: p['s_hat_0'][:, -1], paths)
    density = strict_local_martingale_check(paths, BASE)
    z_savings = zscore(savings.estimate, theory, savings.stderr)
    below = (1.0 - savings.estimate) / savings.stderr
    return [
        verdict("E[S_hat0_T] matches 1 - exp(-f Z0)", abs(z_savings) <= 3, estimate=savings.estimate, theory=theory,
                z=z_savings),
        verdict("E[Lambda_T] matches 1 - exp(-f Z0)", density.passed, estimate=density.estimate, z=density.zscore),
        verdict("E[S_hat0_T] below 1 by >= 5 SE", below >= 5, standard_errors_below_one=below),
    ]


def put_vs_monte_carlo(workers):
    T = 10.0
    paths = simulate_stylized_mmm(BASE, TimeGrid(0.0, T, 1), 100_000, seed=303, n_workers=workers)
    checks = []
    for K in (0.5, 1.0, 2.0):
        closed = float(put_price(0.0, K, 1.0, BASE, T))
        estimate = real_world_price_mc(lambda p, K=K: np.maximum(K * p['s_hat_0'][:, -1] - 1.0, 0.0), paths)
        z = zscore(estimate.estimate, closed, estimate.stderr)
        checks.append(verdict(f"put K={K:g}", abs(z) <= 3, closed_form=closed, estimate=estimate.estimate, z=z))
    checks.append(verdict("put K=0 is 0", float(put_price(0.0, 0.0, 1.0, BASE, T)) == 0.0))
    bond = float(zcb_benchmarked(0.0, 1.0, BASE, T))
    large = float(put_price(0.0, 100.0, 1.0, BASE, T))
    asymptote = 100.0 * bond - 1.0
    checks.append(verdict("put K=100 near K P_hat - 1", abs(large - asymptote) <= 0.01 * asymptote,
                          put=large, asymptote=asymptote))
    return checks


def hedging_replication(workers, n_paths):
    T = 5.0
    table, slope = replication_convergence(BASE, [2 ** k for k in range(5, 11)], n_paths, seed=404, T=T,
                                           n_workers=workers)
    paths = simulate_stylized_mmm(BASE, TimeGrid(0.0, T, 256), n_paths, seed=405, n_workers=workers)
    hedge = stylized_asset_hedge(paths, BASE, 1, T)
    max_z = float(np.max(np.abs(hedge.cost_hat.drift_zscores())))
    cost = hedge.cost_hat.cost[:, -1]
    gap = (cost - cost.mean()) ** 2 - (hedge.nu ** 2).sum(axis=1) * paths.grid.dt
    variance_z = gap.mean() / (gap.std(ddof=1) / np.sqrt(gap.size))
    return [
        verdict("replication RMS log-log slope >= 0.4", slope >= 0.4, slope=slope,
                rms=table['rms_error'].tolist()),
        verdict("cost martingale |z| <= 4 at every node", max_z <= 4, max_abs_z=max_z),
        verdict("Var(cost) matches E[int nu^2 dt]", abs(variance_z) <= 4, z=float(variance_z)),
    ]


def gkw_oracle(workers):
    T = 5.0
    paths = simulate_stylized_mmm(BASE, TimeGrid(0.0, T, 50), 100_000, seed=505, n_workers=workers)
    paths = attach_bond_channel(simulate_primary_accounts(paths, BASE), BASE, T)
    state = np.stack([paths['Z'], paths['s_hat_1']], axis=-1)
    result = gkw_regression(paths['s_hat_1'][:, -1], np.diff(paths['p_hat'], axis=1), state, degree=3,
                            instruments=['p_hat'])
    eta = stylized_asset_hedge(paths, BASE, 1, T).eta
    relative = float(np.sqrt(np.mean((result.integrand.holdings[:, :, 0] - eta) ** 2)) / np.sqrt(np.mean(eta ** 2)))
    return [verdict("regression eta within 5% of closed form", relative <= 0.05, relative_rms=relative)]


def numeraire_identity(workers, n_paths):
    T = 5.0
    paths = simulate_stylized_mmm(BASE, TimeGrid(0.0, T, 128), n_paths, seed=606, n_workers=workers)
    paths = attach_bond_channel(simulate_primary_accounts(paths, BASE), BASE, T)
    hedge = stylized_asset_hedge(paths, BASE, 1, T)
    residual = cost_numeraire_relation(hedge.cost_bar.cost, paths['s_hat_0'], hedge.cost_hat.cost)
    orthogonality = orthogonality_preservation(hedge.cost_bar.cost, hedge.cost_hat.cost, paths['p_hat'],
                                               paths['s_hat_0'])
    return [
        verdict("cost numeraire relation", residual <= 1e-9, max_residual=residual),
        verdict("orthogonality preserved", orthogonality.passed, z_bar=orthogonality.z_bar,
                z_hat=orthogonality.z_hat),
    ]


def tree_lab():
    start = time.time()
    checks = []
    trinomial = TreeModel.from_json(TREES / 'trinomial.json')
    result = fs_decompose(trinomial, 'top_leaf')
    checks.append(verdict("trinomial identity exact", result.identity_residual(trinomial.claims['top_leaf']) == 0))
    checks.append(verdict("trinomial brute force", brute_force_optimality(trinomial, 'top_leaf', result).passed))
    shifted = with_perturbation(trinomial, result, 2, int(trinomial.atoms(1)[0]), 0, 1)
    checks.append(verdict("perturbed strategy rejected",
                          not brute_force_optimality(trinomial, 'top_leaf', shifted).passed))

    coarsened = TreeModel.from_json(TREES / 'coarsened_binomial.json')
    report = verify_incomplete_info(coarsened, 'coin_weighted')
    summary = {k: v for k, v in report.to_dict().items() if k.endswith('residual') or k == 'strategies_agree'}
    checks.append(verdict("incomplete information identities exact", report.passed, **summary))
    coarse = fs_decompose(coarsened, 'coin_weighted', coarse=True)
    checks.append(verdict("coarse brute force", brute_force_optimality(coarsened, 'coin_weighted', coarse,
                                                                        coarse=True).passed))
    elapsed = time.time() - start
    checks.append(verdict("tree lab under 5 s", elapsed < 5, seconds=elapsed))
    return checks


def defaultable_put(workers):
    T, K = 10.0, 1.0
    put = float(put_price(0.0, K, 1.0, BASE, T))
    full = DefaultModel(0.05, RecoveryFunction('constant', 1.0), T)
    safe = DefaultModel(0.0, RecoveryFunction('constant', 0.3), T)
    wiped = DefaultModel(0.05, RecoveryFunction('constant', 0.0), T)
    checks = [
        verdict("h = 1 reduces to the default-free put",
                defaultable_put_price(0.0, K, 1.0, BASE, T, full.pre_default_value(0.0)) == put),
        verdict("lambda = 0 reduces to the default-free put",
                defaultable_put_price(0.0, K, 1.0, BASE, T, safe.pre_default_value(0.0)) == put),
        verdict("h = 0 is the survival-scaled put",
                defaultable_put_price(0.0, K, 1.0, BASE, T, wiped.pre_default_value(0.0)) == put * np.exp(-0.05 * T)),
    ]
    model = DefaultModel(0.05, RecoveryFunction('linear', 0.4, 0.02), T)
    grid = TimeGrid(0.0, T, 10)
    paths = simulate_stylized_mmm(BASE, grid, 20_000, seed=707, n_workers=workers)
    default = default_times(model, grid, paths.n_paths, seed=707)
    closed = defaultable_put_price(0.0, K, 1.0, BASE, T, model.pre_default_value(0.0))
    estimate = real_world_price_mc(lambda p: defaultable_put_payoff(p, default, model, K, BASE), paths)
    z = zscore(estimate.estimate, closed, estimate.stderr)
    psi = psi_process(model, default, grid)
    hedge = defaultable_put_hedge(paths, default, psi, model, BASE, K)
    compensated = martingale_check(compensated_default(default, grid, model))
    checks += [
        verdict("defaultable put vs Monte Carlo", abs(z) <= 3, closed_form=closed, estimate=estimate.estimate, z=z),
        verdict("U_hat = p_hat Psi path identity", max(hedge.cost_identity_residual,
                                                       hedge.product_rule_residual) <= 1e-8,
                cost_identity=hedge.cost_identity_residual, product_rule=hedge.product_rule_residual),
        verdict("compensated default has zero mean", compensated.passed, max_abs_z=compensated.max_abs_z),
    ]
    return checks


def distribution_kernel():
    atom = ncx2_cdf(0.0, NcChiSqParams(0.0, 3.0))
    quantile = stats.chi2.ppf(0.95, 4)
    central = ncx2_cdf(quantile, NcChiSqParams(4.0, 0.0))
    params = NcChiSqParams(4.0, 3.0)
    draws = ncx2_sample(params, RngStream(909, 0), size=100_000)
    ks = stats.kstest(draws, lambda x: ncx2_cdf(x, params)).statistic
    return [
        verdict("nu = 0 atom", abs(atom - np.exp(-1.5)) <= 1e-12, value=atom),
        verdict("central chi-square quantile", abs(central - 0.95) <= 1e-6, value=central),
        verdict("sampling KS distance < 0.01", ks < 0.01, ks=float(ks)),
    ]


def determinism(workers):
    config = {
        "model": {"variant": "stylized", "preset": "stylized_base"},
        "grid": {"t0": 0.0, "T": 5.0, "n_steps": 20},
        "mc": {"n_paths": 5000, "master_seed": 77},
        "task": {"name": "hedge"},
    }
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / 'config.json'
        path.write_text(json.dumps(config))
        outputs = []
        for threads in (1, workers):
            out = Path(tmp) / f'out_{threads}_{len(outputs)}'
            code = run(path, 'hedge', threads=threads, out=str(out))
            outputs.append((code, sorted(p.read_bytes() for p in out.glob('hedge_*.csv'))))
        repeat_out = Path(tmp) / 'repeat'
        run(path, 'hedge', threads=workers, out=str(repeat_out))
        outputs.append((0, sorted(p.read_bytes() for p in repeat_out.glob('hedge_*.csv'))))
    identical = all(code == 0 for code, _ in outputs) and outputs[0][1] == outputs[1][1] == outputs[2][1]
    return [verdict("byte-identical CSV across runs and thread counts", identical)]


def main():
    parser = argparse.ArgumentParser(description="Run the acceptance criteria at desk scale")
    parser.add_argument("--workers", type=int, default=min(os.cpu_count() or 1, 8))
    parser.add_argument("--hedge-paths", type=int, default=4000,
                        help="paths for the replication study (memory grows with paths x 1024 steps)")
    args = parser.parse_args()

    print_header("BENCH HEDGE ACCEPTANCE")
    sections = [
        ("Bond formula vs Monte Carlo", lambda: bond_vs_monte_carlo(args.workers)),
        ("Strict supermartingale defect", lambda: supermartingale_defect(args.workers)),
        ("Put closed form", lambda: put_vs_monte_carlo(args.workers)),
        ("Hedging replication", lambda: hedging_replication(args.workers, args.hedge_paths)),
        ("GKW regression oracle", lambda: gkw_oracle(args.workers)),
        ("Numeraire change", lambda: numeraire_identity(args.workers, args.hedge_paths)),
        ("Tree lab", tree_lab),
        ("Defaultable put", lambda: defaultable_put(args.workers)),
        ("Distribution kernel", distribution_kernel),
        ("Determinism", lambda: determinism(args.workers)),
    ]
    results = {}
    for title, section in sections:
        print(f"\n>>> {title}")
        results[title] = section()

    passed = sum(c['passed'] for checks in results.values() for c in checks)
    total = sum(len(checks) for checks in results.values())
    with open(OUTPUT, 'w') as f:
        json.dump({'passed': passed, 'total': total, 'sections': results}, f, indent=2, default=float)

    print_header("ACCEPTANCE COMPLETE")
    print(f"  {passed}/{total} checks passed")
    print(f"  Results saved to: {OUTPUT}")
    return 0 if passed == total else 1


if __name__ == '__main__':
    sys.exit(main())
