import argparse
import copy
import glob
import io
import json
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from setproctitle import setproctitle

from config import Config
from convexify import bipolar, decompose, detached_radius, envelope_gap, sample
from display import format_table, summary_columns, summary_rows
from errors import ConfigError, NumericalError, RelaxoError, ValidationError
from lavrentiev import GapReport, SpaceFamily, gap_probe, transfer_check
from logger import RunLogger, set_verbose
from mesh import P1Function, build_box_mesh, interpolate
from plots import plot_convergence, plot_envelope, plot_plateaus
from records import ExperimentConfig, ResultRecord, atomic_write, to_csv, utc_now, write_json
from relaxation import recover_general, recover_sequence, truncation_limit

run_log = RunLogger('relaxo.cli')
log = run_log.log

MANIA_DEFAULTS = {
    'phi': 'x',
    'lipschitz': {'resolutions': [8, 16, 32], 'cap': 4.0},
    'sobolev': {'kind': 'mapped', 'resolutions': [8, 16, 32], 'gamma': 1 / 3, 'seeds': ['x^(1/3)']},
    'restarts': 4,
    'max_iter': 1500,
    'relaxed_K': 8.0,
    'tol_transfer': 1e-6,
}


# Shared plumbing

def _start(config: ExperimentConfig, out: str) -> ResultRecord:
    os.makedirs(out, exist_ok=True)
    record = ResultRecord(config.command, config.hash, utc_now())
    record.artifacts['config'] = os.path.basename(config.save(os.path.join(out, 'config.yaml')))
    return record


def _finish(record: ResultRecord, out: str) -> ResultRecord:
    record.finished = utc_now()
    record.save(os.path.join(out, 'record.json'))
    return record


def _artifact(record: ResultRecord, key: str, path: str):
    record.artifacts[key] = os.path.basename(path)


def _schedule(sec: dict, key: str = 'eps', levels_key: str = 'levels', default_levels: int = 6) -> List[float]:
    if key in sec:
        values = [float(e) for e in sec[key]]
    else:
        values = [2.0 ** -k for k in range(1, int(sec.get(levels_key, default_levels)) + 1)]
    if not values or any(e <= 0 for e in values):
        raise ConfigError(f"'{key}' must list positive numbers", value=values)
    return values


def _grid_csv(columns: Sequence[np.ndarray], header: str) -> str:
    buf = io.StringIO()
    np.savetxt(buf, np.column_stack(columns), delimiter=',', fmt='%.17g', header=header, comments='')
    return buf.getvalue()


# convexify

def cmd_convexify(config: ExperimentConfig, out: str, workers: int = 1) -> ResultRecord:
    """Sample one gradient slice, take its envelope, optionally decompose at given targets."""
    record = _start(config, out)
    spec = config.resolve_lagrangian()
    sec = config.section('convexify')
    dim = spec.dim
    radius = float(sec.get('radius', 4.0))
    box = sec.get('xi_box') or (spec.xi_bounds if spec.is_sampled else [[-radius, radius]] * dim)
    samples = sample(spec, sec.get('x'), float(sec.get('u', 0.0)), box, sec.get('counts'))
    env = bipolar(samples)
    gap = envelope_gap(samples, env)
    env_values = env.as_samples(samples).values

    nodes = samples.nodes().reshape(-1, dim)
    names = 'xi' if dim == 1 else 'xi1,xi2'
    path = atomic_write(os.path.join(out, 'envelope.csv'),
                        _grid_csv([nodes, samples.values.ravel(), env_values.ravel()], f"{names},f,fss"))
    _artifact(record, 'envelope_csv', path)
    _artifact(record, 'hull_csv', atomic_write(os.path.join(out, 'hull.csv'), env.to_csv()))
    _artifact(record, 'samples_bin', atomic_write(os.path.join(out, 'samples.bin'), samples.to_bytes()))

    eps = float(sec.get('eps', max(1e-6, env.tol_hull)))
    rows = []
    for target in sec.get('decompose', []):
        try:
            dec = decompose(env, samples, target, eps)
        except RelaxoError as e:
            record.warnings.append(f"decomposition at {target}: {e.message}")
            rows.append({'target': target, 'error': e.code})
            continue
        rows.append({'target': target, 'size': dec.size, 'points': dec.points.ravel(), 'weights': dec.weights,
                     'gap': dec.gap, 'residual': dec.residual, 'envelope_value': dec.envelope_value})
    if rows:
        _artifact(record, 'decompositions_csv', atomic_write(os.path.join(out, 'decompositions.csv'), to_csv(rows)))

    if dim == 1:
        xi, f_line, env_line, title = samples.axes()[0], samples.values, env_values, spec.describe()
    else:
        mid = samples.counts[1] // 2
        xi, f_line, env_line = samples.axes()[0], samples.values[:, mid], env_values[:, mid]
        title = f"{spec.describe()} at xi2={samples.axes()[1][mid]:.4g}"
    bps = env.points if dim == 1 else None
    _artifact(record, 'envelope_svg', plot_envelope(xi, f_line, env_line, os.path.join(out, 'envelope.svg'),
                                                    title, bps))

    zero = 0.0 if dim == 1 else np.zeros(dim)
    record.headline = {
        'lagrangian': spec.name or spec.describe(),
        'dim': dim,
        'envelope_gap': gap,
        'tol_hull': env.tol_hull,
        'support_radius': env.support_radius,
        'detached_radius': detached_radius(samples, env),
        'hull_vertices': int(len(env.points)),
        'envelope_at_zero': float(env.evaluate(zero)),
        'decompositions': sum(1 for r in rows if 'error' not in r),
    }
    log.info(f"✅ envelope of {record.headline['lagrangian']}: gap {gap:.3e}, "
             f"{record.headline['hull_vertices']} hull vertices")
    return _finish(record, out)


# recover

def _load_recovery(directory: str, dim: int) -> P1Function:
    """The v_*.csv files of an earlier recover run, as the u of this one."""
    files = {}
    for name in ('nodes.csv', 'cells.csv', 'values.csv'):
        path = os.path.join(directory, f"v_{name}")
        if not os.path.isfile(path):
            raise ConfigError(f"recovery file '{path}' does not exist", path=path)
        with open(path, 'r', encoding='utf-8') as f:
            files[name] = f.read()
    u = P1Function.from_csv(files)
    if u.mesh.dim != dim:
        raise ConfigError(f"recovery in {directory} is {u.mesh.dim}D, the Lagrangian is {dim}D")
    return u


def cmd_recover(config: ExperimentConfig, out: str, workers: int = 1) -> ResultRecord:
    """Recovery sequence for u (boundary expression, or an earlier recovery via u_from), then a truncation trace."""
    record = _start(config, out)
    spec = config.resolve_lagrangian()
    sec = config.section('recover')
    if sec.get('u_from'):
        u = _load_recovery(os.path.join(config.base_dir, sec['u_from']), spec.dim)
    else:
        mesh = build_box_mesh(spec.dim, config.box_tuple(), sec.get('resolution', 16), grading=sec.get('grading'))
        u = interpolate(config.boundary, mesh)
    K = float(sec.get('K', 4.0))
    schedule = _schedule(sec)
    counts = sec.get('counts')

    payload = {'K': K, 'schedule': schedule}
    if spec.depends_on_u:
        result = recover_general(spec, u, K, len(schedule), schedule, counts)
        steps, diagnostic = result.steps, result.diagnostic
        payload.update(pipeline='frozen', energies=result.energies, frozen_energies=result.frozen_energies,
                       swap_errors=result.swap_errors, relaxed=result.relaxed)
    else:
        run = recover_sequence(spec, u, schedule, K, counts)
        steps, diagnostic = run.steps, run.diagnostic
        payload['pipeline'] = 'direct'
    certs = [cert for _, cert in steps]
    payload['certificates'] = [c.to_dict() for c in certs]
    payload['diagnostic'] = diagnostic

    if sec.get('truncation'):
        trace = truncation_limit(spec, u, sec['truncation'], sec.get('truncation_levels'), counts)
        payload['truncation'] = trace.to_dict()
        if trace.flagged:
            record.warnings.append("truncation trace has no plateau")

    _artifact(record, 'certificates_json', write_json(os.path.join(out, 'certificates.json'), payload))
    if certs:
        rows = [c.to_dict() for c in certs]
        _artifact(record, 'certificates_csv', atomic_write(os.path.join(out, 'certificates.csv'), to_csv(rows)))
        for name, text in steps[-1][0].to_csv().items():
            atomic_write(os.path.join(out, f"v_{name}"), text)
        _artifact(record, 'recovery_values', 'v_values.csv')
        series = {'energy_gap': [c.energy_gap for c in certs], 'sup_dev': [c.sup_dev for c in certs]}
        path = plot_convergence([c.eps for c in certs], series, os.path.join(out, 'convergence.svg'),
                                title=spec.name or spec.describe())
        _artifact(record, 'convergence_svg', path)

    record.headline = {
        'lagrangian': spec.name or spec.describe(),
        'pipeline': payload['pipeline'],
        'steps': len(certs),
        'finest_eps': certs[-1].eps if certs else None,
        'energy': certs[-1].energy if certs else None,
        'relaxed_energy': certs[-1].relaxed_energy if certs else None,
        'max_energy_gap': max((c.energy_gap for c in certs), default=None),
        'max_sup_dev': max((c.sup_dev for c in certs), default=None),
        'max_grad_bound': max((c.grad_bound for c in certs), default=None),
        'excluded_measure': max((c.excluded_measure for c in certs), default=None),
        'excluded_contribution': max((c.excluded_contribution for c in certs), default=None),
    }
    if 'truncation' in payload:
        record.headline['truncation_limit'] = payload['truncation']['limit']
    if diagnostic is not None:
        record.diagnostic = diagnostic
        record.warnings.append(f"recovery stopped: {diagnostic.get('message', diagnostic.get('error'))}")
    return _finish(record, out)


# gap and mania

def _families(sec: dict):
    lip = sec.get('lipschitz')
    sob = sec.get('sobolev')
    if not isinstance(lip, dict) or not isinstance(sob, dict):
        raise ConfigError("gap needs 'lipschitz' and 'sobolev' family sections")
    lipschitz = SpaceFamily.lipschitz(lip['resolutions'], float(lip.get('cap', 2.0)), lip.get('seeds', ()))
    kind = sob.get('kind', 'graded')
    if kind == 'mapped':
        sobolev = SpaceFamily.singular(sob['resolutions'], float(sob.get('gamma', 1 / 3)), sob.get('seeds', ()))
    elif kind == 'graded':
        sobolev = SpaceFamily.sobolev(sob['resolutions'], float(sob.get('p_hat', 2.0)),
                                      float(sob.get('grading', 2.0)), float(sob.get('cap0', 2.0)),
                                      sob.get('seeds', ()))
    else:
        raise ConfigError(f"unknown Sobolev family kind '{kind}'", available=['graded', 'mapped'])
    return lipschitz, sobolev


def _gap_rows(report: GapReport) -> List[dict]:
    rows = []
    for rep in [report] + ([report.relaxed] if report.relaxed is not None else []):
        for label, trace in (('lipschitz', rep.lipschitz), ('sobolev', rep.sobolev)):
            for k, n in enumerate(trace.family.resolutions):
                rows.append({'objective': rep.objective, 'family': label, 'kind': trace.family.kind, 'cells': n,
                             'value': trace.values[k], 'converged': trace.converged[k],
                             'starts': trace.starts[k], 'first_cell_energy': trace.first_cell[k]})
    return rows


def _run_gap(config: ExperimentConfig, sec: dict, phi: str, out: str, workers: int):
    spec = config.resolve_lagrangian()
    if spec.dim != 1:
        raise ValidationError('unsupported', "gap probes run on 1D boxes")
    record = _start(config, out)
    lipschitz, sobolev = _families(sec)
    report = gap_probe(spec, phi, lipschitz, sobolev, (config.box_tuple(),), restarts=sec.get('restarts'),
                       seed=config.seed, relaxed=bool(sec.get('relaxed', True)),
                       relaxed_K=float(sec.get('relaxed_K', 8.0)), max_iter=sec.get('max_iter'), workers=workers)
    verdict = transfer_check(report=report, tol=sec.get('tol_transfer'))
    record.warnings.extend(report.warnings)

    payload = report.to_dict()
    payload['transfer'] = verdict
    _artifact(record, 'gap_report_json', write_json(os.path.join(out, 'gap_report.json'), payload))
    _artifact(record, 'gap_csv', atomic_write(os.path.join(out, 'gap.csv'), to_csv(_gap_rows(report))))
    traces = {'Lipschitz': (lipschitz.resolutions, report.lipschitz.values),
              f"Sobolev ({sobolev.kind})": (sobolev.resolutions, report.sobolev.values)}
    if report.relaxed is not None and report.relaxed.lipschitz is not report.lipschitz:
        traces['Lipschitz, f**'] = (lipschitz.resolutions, report.relaxed.lipschitz.values)
        traces[f"Sobolev ({sobolev.kind}), f**"] = (sobolev.resolutions, report.relaxed.sobolev.values)
    path = plot_plateaus(traces, os.path.join(out, 'plateaus.svg'), title=spec.name or spec.describe())
    _artifact(record, 'plateaus_svg', path)

    record.headline = {
        'lagrangian': spec.name or spec.describe(),
        'lipschitz_plateau': report.lipschitz.plateau,
        'sobolev_plateau': report.sobolev.plateau,
        'gap': report.gap,
        'relaxed_gap': report.relaxed_gap,
        'plateaus_reached': report.lipschitz.reached and report.sobolev.reached,
        'verdict': verdict['verdict'],
    }
    return record, report


def cmd_gap(config: ExperimentConfig, out: str, workers: int = 1) -> ResultRecord:
    """Lipschitz against Sobolev plateaus for the configured Lagrangian and boundary data."""
    sec = config.section('gap')
    record, _ = _run_gap(config, sec, sec.get('phi', config.boundary), out, workers)
    return _finish(record, out)


def mania_config(seed: Optional[int] = None) -> ExperimentConfig:
    return ExperimentConfig('mania', lagrangian='mania', box=[0.0, 1.0], boundary='x',
                            seed=Config.DEFAULT_SEED if seed is None else seed,
                            sections={'mania': copy.deepcopy(MANIA_DEFAULTS)})


def _check_regression(record: ResultRecord, out: str):
    """Store the Lipschitz plateau on first run; later runs must stay within the stability band."""
    path = os.path.join(out, 'mania_regression.json')
    value = record.headline['lipschitz_plateau']
    stored = None
    if os.path.isfile(path):
        with open(path, 'r', encoding='utf-8') as f:
            stored = json.load(f)
        if stored.get('config_hash') != record.config_hash:
            record.warnings.append("regression constant belongs to another config; replaced")
            stored = None
    if stored is None:
        write_json(path, {'config_hash': record.config_hash, 'lipschitz_plateau': value})
        record.headline['regression_stable'] = None
        log.info(f"📌 recorded Lipschitz plateau {value:.6e} as regression constant")
    else:
        ref = float(stored['lipschitz_plateau'])
        drift = abs(value - ref) / max(abs(ref), 1e-300)
        stable = drift <= Config.MANIA_STABILITY
        record.headline['regression_stable'] = stable
        record.headline['regression_drift'] = drift
        if not stable:
            record.diagnostic = {'error': 'regression_drift', 'kind': 'NumericalError',
                                 'message': f"Lipschitz plateau moved by {drift:.2%}",
                                 'details': {'stored': ref, 'value': value}}
    _artifact(record, 'regression', path)


def cmd_mania(config: Optional[ExperimentConfig] = None, out: str = '', workers: int = 1) -> ResultRecord:
    """The built-in (x - u^3)^2 u'^6 experiment with phi = x on [0, 1]."""
    config = config or mania_config()
    out = out or os.path.join(Config.OUTPUT_DIR, 'mania')
    if not config.lagrangian and not config.lagrangian_file:
        config.lagrangian = 'mania'
    sec = dict(MANIA_DEFAULTS, **config.section('mania'))
    config.sections['mania'] = sec
    record, report = _run_gap(config, sec, sec['phi'], out, workers)
    record.headline['first_cell_lower_bound'] = min(report.lipschitz.first_cell)
    record.headline['gap_positive'] = report.gap > 0 and report.sobolev.plateau < 0.5 * report.lipschitz.plateau
    if not record.headline['gap_positive']:
        record.warnings.append("no positive gap separated the Lipschitz and Sobolev plateaus")
    _check_regression(record, out)
    return _finish(record, out)


# report

def _record_paths(paths: Sequence[str]) -> List[str]:
    found = []
    for p in paths:
        if os.path.isdir(p):
            found.extend(sorted(glob.glob(os.path.join(p, '**', 'record.json'), recursive=True)))
        else:
            found.append(p)
    if not found:
        raise ConfigError("no result records found", paths=list(paths))
    return found


def cmd_report(paths: Sequence[str], out: str) -> str:
    """Fixed-width summary of result records, with the same rows written to summary.csv."""
    records = [ResultRecord.load(p) for p in _record_paths(paths)]
    rows = summary_rows(records)
    columns = summary_columns(rows)
    os.makedirs(out, exist_ok=True)
    atomic_write(os.path.join(out, 'summary.csv'), to_csv(rows, columns))
    return format_table(rows, columns, title=f"{len(records)} result record(s)")


COMMANDS: Dict[str, Callable] = {
    'convexify': cmd_convexify,
    'recover': cmd_recover,
    'gap': cmd_gap,
    'mania': cmd_mania,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='PATH', default=argparse.SUPPRESS, help="experiment config (YAML)")
    common.add_argument('--seed', type=int, default=argparse.SUPPRESS, help="random seed for multistart")
    common.add_argument('--workers', type=int, default=argparse.SUPPRESS, help="worker processes")
    common.add_argument('--out', metavar='DIR', default=argparse.SUPPRESS, help="output directory")
    common.add_argument('--verbose', action='store_true', default=argparse.SUPPRESS, help="debug logging")

    parser = argparse.ArgumentParser(prog='relaxo', parents=[common],
                                     description="Relaxation and Lavrentiev gap experiments for integral functionals.")
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('convexify', parents=[common], help="envelope of a sampled Lagrangian")
    sub.add_parser('recover', parents=[common], help="recovery sequence with certificates")
    sub.add_parser('gap', parents=[common], help="Lipschitz against Sobolev energy plateaus")
    sub.add_parser('mania', parents=[common], help="built-in Mania experiment")
    report = sub.add_parser('report', parents=[common], help="summarize result records")
    report.add_argument('paths', nargs='+', help="record.json files or directories holding them")
    return parser


def _load_config(args) -> Optional[ExperimentConfig]:
    path = getattr(args, 'config', None)
    seed = getattr(args, 'seed', None)
    if path is None:
        if args.command == 'mania':
            return mania_config(seed)
        raise ConfigError(f"'{args.command}' needs --config")
    config = ExperimentConfig.load(path)
    if config.command != args.command:
        raise ConfigError(f"config is for '{config.command}', not '{args.command}'", path=path)
    if seed is not None:
        config.seed = seed
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    set_verbose(getattr(args, 'verbose', False))
    setproctitle(f"relaxo {args.command}")
    base = Config.OUTPUT_OVERRIDE or getattr(args, 'out', None) or Config.OUTPUT_DIR
    workers = getattr(args, 'workers', None) or Config.WORKERS
    task_id = run_log.log_task_start(f"relaxo {args.command}")
    try:
        if args.command == 'report':
            sys.stdout.write(cmd_report(args.paths, base))
            run_log.log_task_done(task_id)
            return 0
        config = _load_config(args)
        record = COMMANDS[args.command](config, os.path.join(base, args.command), workers)
    except RelaxoError as e:
        run_log.log_task_failed(task_id, e)
        sys.stderr.write(e.to_json() + '\n')
        return e.exit_code
    rows = summary_rows([record])
    sys.stdout.write(format_table(rows, summary_columns(rows)))
    for warning in record.warnings:
        log.warning(f"⚠️ {warning}")
    if record.failed:
        run_log.log_task_failed(task_id, RuntimeError(record.diagnostic.get('message', 'numerical failure')))
        sys.stderr.write(json.dumps(record.diagnostic, sort_keys=True, default=str) + '\n')
        return NumericalError.exit_code
    run_log.log_task_done(task_id)
    return 0


if __name__ == "__main__":
    sys.exit(main())
