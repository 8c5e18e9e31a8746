import sqlite3
import os
from datetime import datetime, timezone


DB_PATH = os.environ.get('RUN_LOG_PATH', '/app/data/runs.db')


def configure(path):
    """Point the run log at path; an empty path disables recording."""
    global DB_PATH
    DB_PATH = path


def _get_db():
    directory = os.path.dirname(DB_PATH)
    if directory:
        os.makedirs(directory, exist_ok=True)
    conn = sqlite3.connect(DB_PATH)
    conn.row_factory = sqlite3.Row
    return conn


def init_db():
    if not DB_PATH:
        return
    db = _get_db()
    db.execute('''
        CREATE TABLE IF NOT EXISTS solver_runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            timestamp TEXT NOT NULL,
            command TEXT NOT NULL,
            target TEXT NOT NULL,
            status TEXT NOT NULL,
            objective REAL,
            kkt_error REAL,
            elapsed REAL,
            details TEXT
        )
    ''')
    db.commit()
    db.close()


def log_run(command, target, status, objective=None, kkt_error=None, elapsed=None, details=''):
    if not DB_PATH:
        return
    timestamp = datetime.now(timezone.utc).strftime('%Y-%m-%d %H:%M:%S')
    try:
        init_db()
        db = _get_db()
        db.execute(
            'INSERT INTO solver_runs (timestamp, command, target, status, objective, kkt_error, elapsed, details) '
            'VALUES (?, ?, ?, ?, ?, ?, ?, ?)',
            (timestamp, command, target, status, objective, kkt_error, elapsed, details)
        )
        db.commit()
        db.close()
    except Exception:
        pass


def get_run_log(limit=200, offset=0, command_filter=''):
    if not DB_PATH:
        return [], 0
    try:
        db = _get_db()
        query = 'SELECT * FROM solver_runs WHERE 1=1'
        params = []
        if command_filter:
            query += ' AND command LIKE ?'
            params.append(f'%{command_filter}%')
        total = db.execute(query.replace('SELECT *', 'SELECT COUNT(*)'), params).fetchone()[0]
        query += ' ORDER BY id DESC LIMIT ? OFFSET ?'
        params.extend([limit, offset])
        rows = db.execute(query, params).fetchall()
        db.close()
        return [dict(r) for r in rows], total
    except Exception:
        return [], 0
