"""
Task execution for the batch driver.

Each task turns a validated config into a TaskResult (a CSV table, a JSON
report and plot series). run() writes them atomically as
<task>_<hash12>.csv/.json/_plot.csv next to manifest.json, or error.json
with exit code 1 (bad input) or 2 (numerical failure).
"""

import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from cli import __version__
from cli.analysis import emit_plot_data, path_series, series_frame
from cli.config import (
    ErrorReport,
    ExperimentConfig,
    RunManifest,
    config_hash,
    format_validation_error,
    load_config,
)
from cli.perf import get_host_metrics, package_versions, resolve_workers
from sim.discrete_lab import (
    TreeModel,
    brute_force_optimality,
    deflated_martingale_gap,
    fs_decompose,
    local_risk_oracle,
    structure_condition,
    verify_incomplete_info,
)
from sim.errors import NumericalError
from sim.hedging import (
    defaultable_put_hedge,
    gkw_regression,
    minimality_check,
    replication_convergence,
    stylized_asset_hedge,
)
from sim.models import StylizedMmmParams, simulate_primary_accounts, simulate_random_scaling_mmm, simulate_stylized_mmm
from sim.pricing import (
    attach_bond_channel,
    bond_curve,
    compensated_default,
    default_times,
    defaultable_put_price,
    defaultable_put_payoff,
    psi_process,
    put_price,
    real_world_price_mc,
    zcb_benchmarked,
)
from sim.stochastic_core import make_time_grid
from sim.verify import (
    VerificationReport,
    cost_numeraire_relation,
    martingale_check,
    np_drift_check,
    orthogonality_preservation,
    strict_local_martingale_check,
    supermartingale_check,
)

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'
NUMERAIRE_TOLERANCE = 1e-9
EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2


@dataclass
class TaskResult:
    table: pd.DataFrame
    report: object
    series: List[pd.DataFrame] = field(default_factory=list)


@dataclass
class TaskContext:
    config: ExperimentConfig
    workers: int
    config_dir: Path


# ==========================================
# SHARED HELPERS
# ==========================================

def _simulate(ctx: TaskContext):
    config = ctx.config
    params = config.model.params()
    grid = config.grid.time_grid()
    simulate = simulate_stylized_mmm if isinstance(params, StylizedMmmParams) else simulate_random_scaling_mmm
    paths = simulate(params, grid, config.mc.n_paths, config.mc.master_seed, ctx.workers)
    return params, simulate_primary_accounts(paths, params)


def _estimate_record(estimate, theory: Optional[float] = None) -> dict:
    record = {'mc_estimate': estimate.estimate, 'mc_stderr': estimate.stderr}
    if theory is not None:
        record['zscore'] = (estimate.estimate - theory) / estimate.stderr if estimate.stderr > 0 else 0.0
    return record


def _max_abs(values) -> float:
    return float(np.max(np.abs(np.asarray(values, dtype=float)), initial=0.0))


def _put_payoff(K: float, params, T: float):
    def payoff(paths):
        return np.maximum(K * np.exp(-params.r * T) * paths['s_hat_0'][:, -1] - 1.0, 0.0)
    return payoff


# ==========================================
# TASKS
# ==========================================

def task_simulate(ctx: TaskContext) -> TaskResult:
    params, paths = _simulate(ctx)
    table = paths.node_summary()
    times = paths.grid.times
    series = [path_series(name, times, paths[name]) for name in ('s_hat_0', 'discounted_np', 's_hat_1', 's_hat_2')]
    report = {'n_paths': paths.n_paths, 'n_steps': paths.grid.n_steps, 'channels': sorted(paths.channels),
              'meta': paths.meta}
    print(f"✓ Simulated {paths.n_paths} paths over {paths.grid.n_steps} steps")
    return TaskResult(table, report, series)


def task_price_zcb(ctx: TaskContext) -> TaskResult:
    config = ctx.config
    params = config.model.params()
    grid = config.grid
    maturities = config.task.maturities or [grid.T]
    s_hat_0 = 1.0 / params.z0
    table = bond_curve(params, maturities, s_hat_0, t=grid.t0)
    series = [series_frame('bond_curve', table['T'], table['p_hat'])]

    if config.task.monte_carlo:
        records = []
        for T in maturities:
            mc_grid = make_time_grid(grid.t0, T, grid.n_steps)
            paths = simulate_stylized_mmm(params, mc_grid, config.mc.n_paths, config.mc.master_seed, ctx.workers)
            estimate = real_world_price_mc(lambda p, T=T: np.exp(-params.r * T) * p['s_hat_0'][:, -1], paths)
            theory = float(zcb_benchmarked(grid.t0, s_hat_0, params, T))
            records.append(_estimate_record(estimate, theory))
        table = pd.concat([table, pd.DataFrame(records)], axis=1)
        series.append(series_frame('bond_curve_mc', table['T'], table['mc_estimate'], table['mc_stderr']))
    print(f"✓ Priced {len(maturities)} zero-coupon bond(s)")
    return TaskResult(table, table.to_dict(orient='records'), series)


def task_price_put(ctx: TaskContext) -> TaskResult:
    config = ctx.config
    params = config.model.params()
    grid = config.grid
    T = grid.T
    s_hat_0 = 1.0 / params.z0
    bond = float(zcb_benchmarked(grid.t0, s_hat_0, params, T))
    rows = [{'t': grid.t0, 'T': T, 'K': K, 'p_hat': float(put_price(grid.t0, K, s_hat_0, params, T)),
             'bond_floor': max(K * bond - 1.0, 0.0)} for K in config.task.strikes]
    table = pd.DataFrame(rows)
    series = [series_frame('put_price', table['K'], table['p_hat'])]

    if config.task.monte_carlo:
        _, paths = _simulate(ctx)
        records = [_estimate_record(real_world_price_mc(_put_payoff(row['K'], params, T), paths), row['p_hat'])
                   for row in rows]
        table = pd.concat([table, pd.DataFrame(records)], axis=1)
        series.append(series_frame('put_price_mc', table['K'], table['mc_estimate'], table['mc_stderr']))
    print(f"✓ Priced {len(rows)} put(s) at T={T}")
    return TaskResult(table, table.to_dict(orient='records'), series)


def task_price_defaultable_put(ctx: TaskContext) -> TaskResult:
    config = ctx.config
    params = config.model.params()
    grid = config.grid.time_grid()
    T = grid.T
    model = config.model.default_model(T)
    s_hat_0 = 1.0 / params.z0
    psi_0 = float(model.pre_default_value(grid.t0))
    rows = [{'K': K, 'put': float(put_price(grid.t0, K, s_hat_0, params, T)), 'psi_0': psi_0,
             'u_hat': float(defaultable_put_price(grid.t0, K, s_hat_0, params, T, psi_0))}
            for K in config.task.strikes]
    table = pd.DataFrame(rows)
    report = {'default_probability': float(model.default_cdf(T)), 'psi_0': psi_0}
    series = [series_frame('defaultable_put', table['K'], table['u_hat'])]

    if config.task.monte_carlo:
        _, paths = _simulate(ctx)
        default = default_times(model, grid, paths.n_paths, config.mc.master_seed)
        records = [_estimate_record(real_world_price_mc(
            lambda p, K=row['K']: defaultable_put_payoff(p, default, model, K, params), paths), row['u_hat'])
            for row in rows]
        table = pd.concat([table, pd.DataFrame(records)], axis=1)
        series.append(series_frame('defaultable_put_mc', table['K'], table['mc_estimate'], table['mc_stderr']))

        psi = psi_process(model, default, grid)
        hedge = defaultable_put_hedge(paths, default, psi, model, params, rows[0]['K'])
        report.update({
            'defaults': int((default.tau < T).sum()),
            'psi_representation_residual': _max_abs(psi.values - psi.representation),
            'compensated_default': martingale_check(compensated_default(default, grid, model)).to_record().to_dict(),
            'hedge_strike': rows[0]['K'],
            'cost_identity_residual': hedge.cost_identity_residual,
            'product_rule_residual': hedge.product_rule_residual,
            'cost_max_abs_z': float(np.max(np.abs(hedge.cost.drift_zscores()), initial=0.0)),
        })
        series.append(path_series('psi', grid.times, psi.values))
        series.append(path_series('defaultable_put_value', grid.times, hedge.value))
    report['prices'] = table.to_dict(orient='records')
    print(f"✓ Priced {len(rows)} defaultable put(s), default probability {report['default_probability']:.4f}")
    return TaskResult(table, report, series)


def task_hedge(ctx: TaskContext) -> TaskResult:
    config = ctx.config
    task = config.task
    params, paths = _simulate(ctx)
    grid = paths.grid
    paths = attach_bond_channel(paths, params, grid.T)
    hedge = stylized_asset_hedge(paths, params, task.asset_index, grid.T)

    value = paths[hedge.asset]
    cost = hedge.cost_hat.cost
    risk = ((cost[:, -1:] - cost) ** 2).mean(axis=0)
    n = paths.n_paths
    drift_z = np.concatenate([[np.nan], hedge.cost_hat.drift_zscores()])
    table = pd.DataFrame({
        't': grid.times,
        'value': value.mean(axis=0),
        'value_stderr': value.std(axis=0, ddof=1) / np.sqrt(n),
        'cost': cost.mean(axis=0),
        'cost_stderr': cost.std(axis=0, ddof=1) / np.sqrt(n),
        'cost_drift_z': drift_z,
        'risk': risk,
        'eta': np.concatenate([hedge.eta.mean(axis=0), [np.nan]]),
        'nu': np.concatenate([hedge.nu.mean(axis=0), [np.nan]]),
    })

    # terminal cost variance against E[int nu^2 dt], path by path
    terminal = cost[:, -1] - cost[:, -1].mean()
    gap = terminal ** 2 - (hedge.nu ** 2).sum(axis=1) * grid.dt
    variance_z = float(gap.mean() / (gap.std(ddof=1) / np.sqrt(n)))
    s_hat_0 = paths['s_hat_0']
    report = {
        'asset': hedge.asset,
        'h0': hedge.h0,
        'rms_error': hedge.rms_error,
        'cost_max_abs_z': float(np.max(np.abs(hedge.cost_hat.drift_zscores()))),
        'cost_variance_z': variance_z,
        'numeraire_cost_residual': cost_numeraire_relation(hedge.cost_bar.cost, s_hat_0, cost),
        'orthogonality': orthogonality_preservation(hedge.cost_bar.cost, cost, paths['p_hat'],
                                                    s_hat_0).to_record().to_dict(),
    }
    series = [path_series('value', grid.times, value), path_series('cost', grid.times, cost),
              series_frame('risk', grid.times, risk)]

    if task.n_steps_list:
        convergence, slope = replication_convergence(params, task.n_steps_list, config.mc.n_paths,
                                                     config.mc.master_seed, grid.T, task.asset_index, ctx.workers)
        report['convergence'] = {'slope': slope, 'table': convergence.to_dict(orient='records')}
        series.append(series_frame('rms_error', convergence['dt'], convergence['rms_error'],
                                   convergence['rms_stderr']))
    print(f"✓ Hedged {hedge.asset}: replication RMS {hedge.rms_error:.4e}")
    return TaskResult(table, report, series)


def task_gkw_regress(ctx: TaskContext) -> TaskResult:
    config = ctx.config
    task = config.task
    params, paths = _simulate(ctx)
    grid = paths.grid
    stylized = isinstance(params, StylizedMmmParams)
    if stylized:
        paths = attach_bond_channel(paths, params, grid.T)
    instruments = task.instruments or (['p_hat'] if stylized else ['s_hat_1'])
    if task.state_channels:
        state_channels = task.state_channels
    else:
        state_channels = ['Z'] if stylized else ['Z', 'gamma']
        if task.payoff == 'asset':
            state_channels.append(f's_hat_{task.asset_index}')
    for name in (*instruments, *state_channels):
        if name not in paths.channels:
            raise ValueError(f"unknown channel '{name}' (available: {sorted(paths.channels)})")

    if task.payoff == 'asset':
        payoff = paths[f's_hat_{task.asset_index}'][:, -1]
    else:
        payoff = _put_payoff(task.strike, params, grid.T)(paths)
    dX = np.diff(np.stack([paths[name] for name in instruments], axis=-1), axis=1)
    state = np.stack([paths[name] for name in state_channels], axis=-1)
    result = gkw_regression(payoff, dX, state, task.degree, instruments=instruments)
    minimality = minimality_check(result, dX, state, task.n_perturbations, config.mc.master_seed)

    holdings = result.integrand.holdings
    table = pd.DataFrame({'t': grid.times[:-1], 'value': result.value_path[:, :-1].mean(axis=0),
                          'residual': result.residual_path[:, :-1].mean(axis=0)})
    for j, name in enumerate(instruments):
        table[f'holding_{name}'] = holdings[:, :, j].mean(axis=0)
    report = {
        'h0': result.h0,
        'payoff_mean': float(payoff.mean()),
        'identity_residual': result.identity_residual(payoff),
        'residual_variance': float(result.residual_terminal.var()),
        'diagnostics': result.diagnostics,
        'minimality_passed': minimality.passed,
        'minimality': minimality.to_frame().to_dict(orient='records'),
    }
    series = [path_series('value', grid.times, result.value_path)]
    series += [series_frame(f'holding_{name}', grid.times[:-1], holdings[:, :, j].mean(axis=0))
               for j, name in enumerate(instruments)]

    if stylized and task.payoff == 'asset' and instruments == ['p_hat']:
        closed = stylized_asset_hedge(paths, params, task.asset_index, grid.T).eta
        fitted = holdings[:, :, 0]
        report['eta_relative_rms'] = float(np.sqrt(np.mean((fitted - closed) ** 2)) / np.sqrt(np.mean(closed ** 2)))
        table['eta_closed_form'] = closed.mean(axis=0)
        series.append(series_frame('eta_closed_form', grid.times[:-1], closed.mean(axis=0)))
    print(f"✓ GKW regression: h0={result.h0:.6f}, minimality {'passed' if minimality.passed else 'FAILED'}")
    return TaskResult(table, report, series)


def task_verify(ctx: TaskContext) -> TaskResult:
    config = ctx.config
    params, paths = _simulate(ctx)
    stylized = isinstance(params, StylizedMmmParams)
    requested = config.task.checks
    checks = requested or ['supermartingale', 'martingale', 'np_dynamics']
    if requested is None:
        if getattr(params, 'rho', 0.0) == 0:
            checks.append('strict_local_martingale')
        if stylized:
            checks += ['numeraire_cost', 'orthogonality']
    if stylized:
        paths = attach_bond_channel(paths, params, paths.grid.T)

    records: List[VerificationReport] = []
    hedge = None
    for check in checks:
        if check == 'supermartingale':
            records += [supermartingale_check(name, paths).to_record() for name in ('s_hat_0', 's_hat_1', 's_hat_2')]
        elif check == 'martingale':
            names = ['s_hat_1', 's_hat_2'] + (['p_hat'] if stylized else [])
            records += [martingale_check(name, paths).to_record() for name in names]
        elif check == 'strict_local_martingale':
            records.append(strict_local_martingale_check(paths, params).to_record())
        elif check == 'np_dynamics':
            records += np_drift_check(paths).to_records()
        else:
            if not stylized:
                raise ValueError(f"check '{check}' is defined for the stylized model only")
            hedge = hedge or stylized_asset_hedge(paths, params, config.task.asset_index, paths.grid.T)
            if check == 'numeraire_cost':
                residual = cost_numeraire_relation(hedge.cost_bar.cost, paths['s_hat_0'], hedge.cost_hat.cost)
                records.append(VerificationReport('numeraire_cost_relation', residual, NUMERAIRE_TOLERANCE,
                                                  residual <= NUMERAIRE_TOLERANCE))
            else:
                records.append(orthogonality_preservation(hedge.cost_bar.cost, hedge.cost_hat.cost, paths['p_hat'],
                                                          paths['s_hat_0']).to_record())

    report = [record.to_dict() for record in records]
    table = pd.DataFrame([{k: r[k] for k in ('test', 'statistic', 'threshold', 'passed')} for r in report])
    series = [path_series('s_hat_0', paths.grid.times, paths['s_hat_0']),
              path_series('discounted_np', paths.grid.times, paths['discounted_np'])]
    passed = sum(r.passed for r in records)
    print(f"✓ Verification: {passed}/{len(records)} checks passed")
    return TaskResult(table, report, series)


def _tree_path(ctx: TaskContext, tree: str) -> Path:
    path = Path(tree)
    if not path.is_absolute() and not path.exists() and (ctx.config_dir / path).exists():
        return ctx.config_dir / path
    return path


def task_tree_lab(ctx: TaskContext) -> TaskResult:
    task = ctx.config.task
    tree = TreeModel.from_json(_tree_path(ctx, task.tree))
    if task.claim not in tree.claims:
        raise ValueError(f"tree has no claim '{task.claim}' (claims: {sorted(tree.claims)})")
    H = tree.claims[task.claim]
    coarse = task.coarse
    if coarse and not tree.has_coarse_labels:
        raise ValueError("task.coarse needs a tree with coarse labels")

    _, k_hat, z_hat = structure_condition(tree, coarse)
    result = fs_decompose(tree, task.claim, coarse)
    oracle = local_risk_oracle(tree, task.claim, coarse)
    report = {
        'exact': tree.exact,
        'leaves': tree.n_paths,
        'steps': tree.n_steps,
        'filtration': 'coarse' if coarse else 'fine',
        'h0': result.h0,
        'identity_residual': result.identity_residual(H),
        'oracle_gap': max(_max_abs(result.integrand.holdings - oracle.integrand.holdings),
                          _max_abs(result.value_path - oracle.value_path)),
        'deflated_martingale_gap': deflated_martingale_gap(tree, z_hat, coarse),
        'max_tradeoff': _max_abs(k_hat.values[:, -1]),
        'degenerate_steps': result.diagnostics['degenerate'],
    }
    if task.brute_force:
        verdict = brute_force_optimality(tree, task.claim, result, coarse)
        report['brute_force'] = {'passed': verdict.passed, 'cost_martingale': verdict.cost_martingale,
                                 'orthogonal': verdict.orthogonal, 'locally_minimal': verdict.locally_minimal,
                                 'checks': verdict.checks, 'failures': verdict.failures}
    if tree.has_coarse_labels:
        report['incomplete_info'] = verify_incomplete_info(tree, task.claim).to_dict()

    rows = []
    holdings = np.asarray(result.integrand.holdings, dtype=float)
    values = np.asarray(result.value_path, dtype=float)
    residual = np.asarray(result.residual_path, dtype=float)
    for leaf_index, leaf in enumerate(tree.leaf_ids):
        for t in range(tree.n_steps + 1):
            row = {'leaf': leaf, 't': t, 'value': values[leaf_index, t], 'residual': residual[leaf_index, t]}
            for j, name in enumerate(tree.asset_names):
                row[f'holding_{name}'] = holdings[leaf_index, t, j] if t < tree.n_steps else np.nan
            rows.append(row)
    table = pd.DataFrame(rows)

    weights = np.asarray(tree.leaf_prob, dtype=float)
    cost = float(result.h0) + residual
    steps = np.arange(tree.n_steps + 1)
    series = [series_frame('value', steps, weights @ values),
              series_frame('risk', steps, weights @ (cost[:, -1:] - cost) ** 2)]
    print(f"✓ Tree lab: {tree.n_paths} leaves, h0={float(result.h0):.6f}")
    return TaskResult(table, report, series)


TASK_RUNNERS: Dict[str, Callable[[TaskContext], TaskResult]] = {
    'simulate': task_simulate,
    'price-zcb': task_price_zcb,
    'price-put': task_price_put,
    'price-defaultable-put': task_price_defaultable_put,
    'hedge': task_hedge,
    'gkw-regress': task_gkw_regress,
    'verify': task_verify,
    'tree-lab': task_tree_lab,
}


# ==========================================
# ARTIFACTS
# ==========================================

def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Fraction):
        return str(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serialisable")


def _atomic_write(path: Path, write: Callable) -> Path:
    with tempfile.NamedTemporaryFile(mode='w', dir=path.parent, suffix=path.suffix, delete=False) as tmp:
        write(tmp)
    os.replace(tmp.name, path)
    return path


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    return _atomic_write(path, lambda f: frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator='\n'))


def write_json(payload, path: Path) -> Path:
    return _atomic_write(path, lambda f: json.dump(payload, f, indent=2, default=_jsonable))


def write_artifacts(result: TaskResult, config: ExperimentConfig, out_dir: Path, stem: str) -> List[Path]:
    written = []
    if 'csv' in config.output.formats:
        written.append(write_csv(result.table, out_dir / f"{stem}.csv"))
    if 'json' in config.output.formats:
        written.append(write_json(result.report, out_dir / f"{stem}.json"))
    if config.output.plot_data:
        written.append(write_csv(emit_plot_data(result.series), out_dir / f"{stem}_plot.csv"))
    return written


def resolve_output_dir(out: Optional[str], config: Optional[ExperimentConfig]) -> Path:
    """--out wins over OUTPUT_DIR, which wins over output.directory."""
    if out:
        return Path(out)
    if os.getenv('OUTPUT_DIR'):
        return Path(os.environ['OUTPUT_DIR'])
    return Path(config.output.directory if config is not None else 'runs')


def _fail(code: int, message: str, detail: str, task: Optional[str], out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    error = ErrorReport(code=code, message=message, detail=detail, task=task)
    write_json(error.model_dump(), out_dir / 'error.json')
    logger.error("%s: %s", message, detail)
    print(f"✗ {message}: {detail}")
    return code


def run(config_path, task: Optional[str] = None, threads: Optional[int] = None, out: Optional[str] = None) -> int:
    """
    Run one task from a config file and write its artifacts.

    Returns:
        Exit code: 0 on success, 1 on config or input errors, 2 on numerical failure
    """
    start_time = time.time()
    config = None
    try:
        config = load_config(config_path)
        out_dir = resolve_output_dir(out, config)
        if task is not None and task != config.task.name:
            raise ValueError(f"command line task '{task}' differs from task.name '{config.task.name}' in the config")
        workers = resolve_workers(threads)
        out_dir.mkdir(parents=True, exist_ok=True)

        name = config.task.name
        digest = config_hash(config)
        logger.info("running %s (config %s) on %d worker(s)", name, digest, workers)
        ctx = TaskContext(config, workers, Path(config_path).resolve().parent)
        result = TASK_RUNNERS[name](ctx)
        artifacts = write_artifacts(result, config, out_dir, f"{name.replace('-', '_')}_{digest}")

        elapsed = time.time() - start_time
        manifest = RunManifest(
            task=name,
            config_path=str(config_path),
            config_hash=digest,
            master_seed=config.mc.master_seed if config.mc else None,
            n_paths=config.mc.n_paths if config.mc else None,
            threads=workers,
            versions={'bench-hedge': __version__, **package_versions()},
            host=get_host_metrics(),
            created_utc=datetime.now(timezone.utc).isoformat(),
            wall_time_sec=elapsed,
            artifacts=[path.name for path in artifacts],
        )
        write_json(manifest.model_dump(), out_dir / 'manifest.json')
        print(f"✓ Completed {name} in {elapsed:.2f}s")
        print(f"  Saved to: {out_dir}")
        return EXIT_OK
    except ValidationError as exc:
        return _fail(EXIT_INPUT, 'invalid config', format_validation_error(exc), task,
                     resolve_output_dir(out, None))
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, 'numerical failure', f"{type(exc).__name__}: {exc}", task,
                     resolve_output_dir(out, config))
    except (ValueError, FileNotFoundError) as exc:
        return _fail(EXIT_INPUT, 'invalid input', f"{type(exc).__name__}: {exc}", task,
                     resolve_output_dir(out, config))
