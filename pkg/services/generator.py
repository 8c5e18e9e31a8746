"""Random dense benchmark instances.

P = (G + G^T) / 2 for a standard normal G; q, A and b are standard normal
with m = round(m_factor * n) rows, and r_min = r_max = r. b has m entries.
"""

import numpy as np

from services.errors import PreconditionError
from services.problem_io import ProblemFile


def row_count(n, m_factor):
    # half-up rounding, so n = 5 with the default factor gives 8 rows
    return int(np.floor(m_factor * n + 0.5))


def generate(n, m_factor=1.5, r=100.0, seed=0):
    if n < 2:
        raise PreconditionError(f'need n >= 2, got {n}')
    if r <= 0:
        raise PreconditionError(f'radius must be positive, got {r}')
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    m = row_count(n, m_factor)
    return ProblemFile(
        n=n, m=m,
        P=(G + G.T) / 2,
        q=rng.standard_normal(n),
        A=rng.standard_normal((m, n)),
        b=rng.standard_normal(m),
        r_min=float(r), r_max=float(r),
    )
