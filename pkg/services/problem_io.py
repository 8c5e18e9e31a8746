"""Text problem files.

Layout, one keyword per line, '#' comments and blank lines ignored:

    n 3
    m 2
    r_min 1.0
    r_max 1.0
    P dense                 (then n rows of n numbers)
    P sparse 4              (or: nnz lines "i j value", 1-indexed)
    q 0.5 -1.0 2.0
    A                       (then m rows of n numbers)
    b 1.0 0.0
    x0 0.1 0.2 0.3          (optional)

Floats are written with repr(), which round-trips exactly.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from services.activeset import NormQP
from services.errors import ProblemParseError
from services.trs import TrsProblem

logger = logging.getLogger(__name__)

REQUIRED = ('n', 'm', 'r_min', 'r_max', 'P', 'q', 'A', 'b')


@dataclass
class ProblemFile:
    n: int
    m: int
    P: object
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    r_min: float
    r_max: float
    x0: Optional[np.ndarray] = None

    def to_norm_qp(self):
        return NormQP(P=self.P, q=self.q, A=self.A, b=self.b, r_min=self.r_min, r_max=self.r_max)

    def to_trs_problem(self, ball=False):
        """TRS on ||x|| = r_max (or <= with ball) with A x = b as equalities."""
        return TrsProblem(P=self.P, q=self.q, r=self.r_max, A=self.A if self.m else None,
                          b=self.b if self.m else None, boundary_only=not ball)


def _number(token, lineno):
    try:
        value = float(token)
    except ValueError:
        raise ProblemParseError(f'not a number: {token!r}', line=lineno)
    if not np.isfinite(value):
        raise ProblemParseError(f'non-finite value {token!r}', line=lineno)
    return value


def _vector(tokens, size, name, lineno):
    if len(tokens) != size:
        raise ProblemParseError(f'{name} needs {size} values, got {len(tokens)}', line=lineno)
    return np.array([_number(t, lineno) for t in tokens])


def _count(tokens, name, lineno):
    if len(tokens) != 1:
        raise ProblemParseError(f'{name} takes one integer', line=lineno)
    try:
        value = int(tokens[0])
    except ValueError:
        raise ProblemParseError(f'{name} must be an integer, got {tokens[0]!r}', line=lineno)
    if value < 0:
        raise ProblemParseError(f'{name} must be nonnegative', line=lineno)
    return value


def parse_problem(text):
    lines = [(i, line.split('#', 1)[0].split()) for i, line in enumerate(text.splitlines(), start=1)]
    lines = [(i, tokens) for i, tokens in lines if tokens]
    fields = {}
    pos = 0

    def take_rows(count, width, name, lineno):
        nonlocal pos
        if pos + count > len(lines):
            raise ProblemParseError(f'{name} needs {count} rows, file ends early', line=lineno)
        rows = [_vector(tokens, width, f'{name} row', i) for i, tokens in lines[pos:pos + count]]
        pos += count
        return np.array(rows).reshape(count, width)

    while pos < len(lines):
        lineno, tokens = lines[pos]
        key, rest = tokens[0], tokens[1:]
        pos += 1
        if key in fields:
            raise ProblemParseError(f'duplicate field {key}', line=lineno)
        if key in ('n', 'm'):
            fields[key] = _count(rest, key, lineno)
        elif key in ('r_min', 'r_max'):
            if len(rest) != 1:
                raise ProblemParseError(f'{key} takes one value', line=lineno)
            fields[key] = _number(rest[0], lineno)
        elif key in ('q', 'b', 'x0'):
            size_key = 'm' if key == 'b' else 'n'
            if size_key not in fields:
                raise ProblemParseError(f'{key} before {size_key}', line=lineno)
            fields[key] = _vector(rest, fields[size_key], key, lineno)
        elif key == 'P':
            if 'n' not in fields:
                raise ProblemParseError('P before n', line=lineno)
            n = fields['n']
            if rest == ['dense']:
                P = take_rows(n, n, 'P', lineno)
                if np.abs(P - P.T).max(initial=0.0) > 0:
                    raise ProblemParseError('dense P is not symmetric', line=lineno)
                fields['P'] = P
            elif len(rest) == 2 and rest[0] == 'sparse':
                nnz = _count(rest[1:], 'P nnz', lineno)
                fields['P'] = _sparse_block(lines[pos:pos + nnz], n, nnz, lineno)
                pos += nnz
            else:
                raise ProblemParseError('P must be "P dense" or "P sparse NNZ"', line=lineno)
        elif key == 'A':
            if 'n' not in fields or 'm' not in fields:
                raise ProblemParseError('A before n and m', line=lineno)
            if rest:
                raise ProblemParseError('A takes no values on its own line', line=lineno)
            fields['A'] = take_rows(fields['m'], fields['n'], 'A', lineno)
        else:
            raise ProblemParseError(f'unknown field {key!r}', line=lineno)

    missing = [k for k in REQUIRED if k not in fields]
    if missing:
        raise ProblemParseError(f'missing fields: {", ".join(missing)}')
    if not 0 <= fields['r_min'] <= fields['r_max'] or fields['r_max'] <= 0:
        raise ProblemParseError('need 0 <= r_min <= r_max and r_max > 0')
    return ProblemFile(**fields)


def _sparse_block(block, n, nnz, lineno):
    if len(block) < nnz:
        raise ProblemParseError(f'P needs {nnz} triplets, file ends early', line=lineno)
    rows, cols, vals = [], [], []
    for i, tokens in block:
        if len(tokens) != 3:
            raise ProblemParseError('P triplet must be "i j value"', line=i)
        r, c = _count(tokens[:1], 'row', i), _count(tokens[1:2], 'column', i)
        if not (1 <= r <= n and 1 <= c <= n):
            raise ProblemParseError(f'index ({r}, {c}) outside 1..{n}', line=i)
        rows.append(r - 1)
        cols.append(c - 1)
        vals.append(_number(tokens[2], i))
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    if abs(P - P.T).max() > 0:
        raise ProblemParseError('sparse P is not symmetric', line=lineno)
    return P


def _fmt(values):
    return ' '.join(repr(float(v)) for v in values)


def format_problem(problem):
    out = [f'n {problem.n}', f'm {problem.m}',
           f'r_min {float(problem.r_min)!r}', f'r_max {float(problem.r_max)!r}']
    if sp.issparse(problem.P):
        P = sp.coo_matrix(problem.P)
        order = np.lexsort((P.col, P.row))
        out.append(f'P sparse {P.nnz}')
        out.extend(f'{P.row[k] + 1} {P.col[k] + 1} {float(P.data[k])!r}' for k in order)
    else:
        out.append('P dense')
        out.extend(_fmt(row) for row in np.asarray(problem.P))
    out.append(f'q {_fmt(problem.q)}'.rstrip())
    out.append('A')
    out.extend(_fmt(row) for row in np.asarray(problem.A).reshape(problem.m, problem.n))
    out.append(f'b {_fmt(problem.b)}'.rstrip())
    if problem.x0 is not None:
        out.append(f'x0 {_fmt(problem.x0)}')
    return '\n'.join(out) + '\n'


def load_problem(path):
    with open(path, 'r', encoding='utf-8') as fh:
        problem = parse_problem(fh.read())
    logger.debug('loaded %s: n=%d m=%d', path, problem.n, problem.m)
    return problem
