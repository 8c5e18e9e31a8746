import io

import numpy as np
import pytest
import scipy.sparse.linalg as spla
from numpy.testing import assert_array_equal

from services import bench, run_log
from services.bench import BENCH_FIELDS, bench_instance, feasibility_violation, run_bench, write_csv
from services.errors import PreconditionError
from services.generator import generate, row_count
from services.options import SolverOptions
from services.problem_io import format_problem


class TestGenerator:

    def test_row_count_rounds_half_up(self):
        assert row_count(10, 1.5) == 15
        assert row_count(5, 1.5) == 8
        assert row_count(3, 0.5) == 2

    def test_shapes(self):
        problem = generate(10)
        assert problem.m == 15
        assert problem.A.shape == (15, 10)
        assert problem.b.shape == (15,)
        assert problem.r_min == problem.r_max == 100.0
        assert_array_equal(problem.P, problem.P.T)

    def test_deterministic(self):
        assert format_problem(generate(10, seed=4)) == format_problem(generate(10, seed=4))
        assert format_problem(generate(10, seed=4)) != format_problem(generate(10, seed=5))

    def test_rejects_tiny_problems(self):
        with pytest.raises(PreconditionError):
            generate(1)


def test_feasibility_violation():
    prob = generate(4, r=2.0).to_norm_qp()
    x = np.zeros(4)
    assert feasibility_violation(prob, x) == pytest.approx(max(4.0, float(np.max(-prob.b, initial=0.0))))


class TestBench:

    def test_instance_row(self):
        row = bench_instance(6, 0, SolverOptions(), r=5.0, timing=False)
        assert set(row) == set(BENCH_FIELDS)
        assert row['time'] == ''
        assert row['status']

    def test_rows_sorted_and_csv(self):
        rows = run_bench([6, 5], [1, 0], SolverOptions(), r=5.0, timing=False)
        assert [(r['n'], r['seed']) for r in rows] == [(5, 0), (5, 1), (6, 0), (6, 1)]
        out = io.StringIO()
        write_csv(rows, out)
        lines = out.getvalue().splitlines()
        assert lines[0] == ','.join(BENCH_FIELDS)
        assert len(lines) == 5

    @pytest.mark.slow
    def test_worker_count_does_not_change_output(self):
        serial = run_bench([6, 8], [0, 1, 2], SolverOptions(), r=5.0, timing=False)
        parallel = run_bench([6, 8], [0, 1, 2], SolverOptions(), r=5.0, workers=3, timing=False)
        assert serial == parallel

    @pytest.mark.parametrize('error', [
        np.linalg.LinAlgError('singular matrix'),
        spla.ArpackNoConvergence('no convergence', np.zeros(0), np.zeros((0, 0))),
    ])
    def test_numerical_failure_becomes_row(self, monkeypatch, error):
        real = bench.initial_point

        def failing(A, b, r_min, r_max, opts):
            if A.shape[1] == 6:
                raise error
            return real(A, b, r_min, r_max, opts)

        monkeypatch.setattr(bench, 'initial_point', failing)
        rows = run_bench([5, 6], [0, 1], SolverOptions(), r=5.0, timing=False)
        assert [(r['n'], r['seed']) for r in rows] == [(5, 0), (5, 1), (6, 0), (6, 1)]
        assert [r['status'] for r in rows[2:]] == ['solver_failure'] * 2
        assert all(r['status'] != 'solver_failure' for r in rows[:2])


class TestRunLog:

    def test_records_and_filters(self, run_log_path):
        run_log.init_db()
        run_log.log_run('solve', 'a.txt', 'optimal', objective=-1.0, kkt_error=1e-12, elapsed=0.1)
        run_log.log_run('trs', 'b.txt', 'UniqueGlobal')
        rows, total = run_log.get_run_log()
        assert total == 2
        assert rows[0]['command'] == 'trs'
        rows, total = run_log.get_run_log(command_filter='solve')
        assert total == 1
        assert rows[0]['objective'] == -1.0

    def test_disabled(self, monkeypatch):
        monkeypatch.setattr(run_log, 'DB_PATH', '')
        run_log.log_run('solve', 'a.txt', 'optimal')
        assert run_log.get_run_log() == ([], 0)
