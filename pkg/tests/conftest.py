import numpy as np
import pytest
from click.testing import CliRunner

from services import run_log


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def run_log_path(tmp_path, monkeypatch):
    path = str(tmp_path / 'runs.db')
    monkeypatch.setenv('RUN_LOG_PATH', path)
    monkeypatch.setattr(run_log, 'DB_PATH', path)
    return path


@pytest.fixture
def app(run_log_path):
    from app import create_app
    return create_app({'TESTING': True, 'RUN_LOG_PATH': run_log_path})


@pytest.fixture
def client(app):
    return app.test_client()


@pytest.fixture
def runner(run_log_path):
    return CliRunner()


@pytest.fixture
def problem_file(tmp_path):
    """Write problem text to a file and return its path."""
    def _write(text, name='problem.txt'):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return _write
