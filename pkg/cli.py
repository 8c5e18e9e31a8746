"""Command-line front end: trs, solve, gen, pca, bench and runs.

Reports go to stdout as JSON lines (CSV for tables); logs go to stderr.
Exit codes: 0 success, 1 bad input, 2 infeasible, 3 solver failure.
"""

import csv
import logging
import os
import sys

import click

from config import Config
from services import run_log
from services.errors import ProblemParseError
from services.options import SolverOptions
from services.problem_io import load_problem
from services.solver_api import (
    EXIT_INPUT,
    bench_report,
    generate_report,
    pca_report,
    solve_report,
    to_json,
    trs_report,
)

TRACE_FIELDS = ['iter', 'W', 'f', 'step_type', 'kkt_err']


def _int_list(ctx, param, value):
    try:
        return [int(v) for v in value.split(',') if v.strip()]
    except ValueError:
        raise click.BadParameter('expected a comma-separated list of integers')


def _float_list(ctx, param, value):
    if value is None:
        return None
    try:
        return [float(v) for v in value.split(',') if v.strip()]
    except ValueError:
        raise click.BadParameter('expected a comma-separated list of numbers')


def _fail(failure):
    click.echo(f'error: {failure}', err=True)
    sys.exit(failure.exit_code)


def _load(path):
    try:
        return load_problem(path)
    except ProblemParseError as e:
        click.echo(f'error: {path}: {e}', err=True)
        sys.exit(EXIT_INPUT)
    except OSError as e:
        click.echo(f'error: {e}', err=True)
        sys.exit(EXIT_INPUT)


@click.group()
@click.option('--log-level', default=None, help='Overrides LOG_LEVEL.')
@click.pass_context
def cli(ctx, log_level):
    """Nonconvex QPs with linear inequalities and a two-sided norm bound."""
    logging.basicConfig(stream=sys.stderr, level=(log_level or Config.LOG_LEVEL).upper(),
                        format='%(levelname)s %(name)s: %(message)s')
    run_log.configure(os.environ.get('RUN_LOG_PATH', run_log.DB_PATH))
    ctx.obj = SolverOptions.from_config(Config)


@cli.command()
@click.argument('infile', type=click.Path(dir_okay=False))
@click.option('--ball', is_flag=True, help='Solve ||x|| <= r instead of ||x|| = r.')
@click.option('--tol', type=float, default=None, help='Arnoldi convergence tolerance.')
@click.option('--dense-fallback', is_flag=True, help='Use the dense eigensolver directly.')
@click.pass_obj
def trs(opts, infile, ball, tol, dense_fallback):
    """Trust-region subproblem on ||x|| = r_max with A x = b."""
    problem = _load(infile)
    opts = opts.replace(arnoldi_tol=tol, force_dense=dense_fallback or None)
    success, data = trs_report(problem, ball=ball, opts=opts, target=infile)
    if not success:
        _fail(data)
    click.echo(to_json(data))


@cli.command()
@click.argument('infile', type=click.Path(dir_okay=False))
@click.option('--x0', callback=_float_list, default=None, help='Comma-separated feasible start point.')
@click.option('--max-iter', type=int, default=None, help='Outer-iteration cap (0: 100(m+n)).')
@click.option('--trace', type=click.File('w'), default=None, help='Write a per-iteration CSV trace ("-" for stdout).')
@click.pass_obj
def solve(opts, infile, x0, max_iter, trace):
    """Local minimizer of the QP on r_min <= ||x|| <= r_max, A x <= b."""
    problem = _load(infile)
    opts = opts.replace(max_iter=max_iter)
    events = []
    success, data = solve_report(problem, x0=x0, opts=opts, callback=events.append, target=infile)
    if not success:
        click.echo(to_json({'status': data.status, 'error': str(data)}))
        _fail(data)
    if trace is not None:
        writer = csv.DictWriter(trace, fieldnames=TRACE_FIELDS, lineterminator='\n')
        writer.writeheader()
        for event in events:
            writer.writerow(event.as_row())
        trace.flush()
    click.echo(to_json(data))


@cli.command()
@click.option('--n', 'n', type=int, required=True, help='Number of variables.')
@click.option('--m-factor', type=float, default=1.5, show_default=True, help='Rows of A per variable.')
@click.option('--r', 'r', type=float, default=100.0, show_default=True, help='Sphere radius.')
@click.option('--seed', type=int, default=0, show_default=True)
def gen(n, m_factor, r, seed):
    """Random dense instance as a problem file on stdout."""
    success, data = generate_report(n, m_factor=m_factor, r=r, seed=seed)
    if not success:
        _fail(data)
    click.echo(data['text'], nl=False)


@cli.command()
@click.argument('docword', type=click.Path(dir_okay=False))
@click.argument('vocab', type=click.Path(dir_okay=False))
@click.option('--k', 'k', type=int, default=1, show_default=True, help='Number of components.')
@click.option('--cardinality', type=int, default=5, show_default=True, help='Nonzeros per component.')
@click.option('--nonneg', is_flag=True, help='Restrict loadings to be nonnegative.')
@click.option('--transpose', is_flag=True, help='Treat words as samples and documents as variables.')
@click.pass_obj
def pca(opts, docword, vocab, k, cardinality, nonneg, transpose):
    """Sparse principal components of a bag-of-words corpus."""
    success, data = pca_report(docword, vocab, k=k, cardinality=cardinality, nonneg=nonneg,
                               transpose=transpose, opts=opts)
    if not success:
        _fail(data)
    writer = csv.writer(sys.stdout, lineterminator='\n')
    writer.writerow(['component', 'variance', 'cardinality', 'tokens'])
    for row in data['components']:
        tokens = ' '.join(f'{t}:{w:.6f}' for t, w in zip(row['tokens'], row['weights']))
        writer.writerow([row['component'], f'{row["variance"]:.10g}', row['cardinality'], tokens])


@cli.command()
@click.option('--sizes', callback=_int_list, default='10', show_default=True, help='Comma-separated n values.')
@click.option('--seeds', callback=_int_list, default='0', show_default=True, help='Comma-separated seeds.')
@click.option('--m-factor', type=float, default=1.5, show_default=True)
@click.option('--r', 'r', type=float, default=100.0, show_default=True)
@click.option('--workers', type=int, default=None, help='Parallel instances (default NORMQP_WORKERS).')
@click.option('--no-timing', is_flag=True, help='Leave the time columns empty for byte-stable output.')
@click.pass_obj
def bench(opts, sizes, seeds, m_factor, r, workers, no_timing):
    """Generate and solve instances; one CSV row per (n, seed)."""
    from services.bench import write_csv
    success, data = bench_report(sizes, seeds, opts, m_factor=m_factor, r=r,
                                 workers=workers or opts.workers, timing=not no_timing)
    if not success:
        _fail(data)
    write_csv(data['rows'], sys.stdout)


@cli.command()
@click.option('--limit', type=int, default=20, show_default=True)
@click.option('--command', 'command_filter', default='', help='Filter by subcommand name.')
def runs(limit, command_filter):
    """Recent entries of the run log."""
    rows, total = run_log.get_run_log(limit=limit, command_filter=command_filter)
    for row in rows:
        click.echo(to_json(row))
    click.echo(f'{len(rows)} of {total} runs', err=True)


if __name__ == '__main__':
    cli()
