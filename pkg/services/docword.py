"""Bag-of-words corpus ingestion.

docword files hold three header lines (documents, vocabulary size, number
of nonzeros) followed by one "docID wordID count" triplet per line, both
ids 1-indexed. vocab files hold one token per line, line number = wordID.
Either may be gzip-compressed.
"""

import gzip
import logging

import numpy as np
import scipy.sparse as sp

from services.errors import ProblemParseError

logger = logging.getLogger(__name__)


def _open_text(path):
    if str(path).endswith('.gz'):
        return gzip.open(path, 'rt', encoding='utf-8')
    return open(path, 'r', encoding='utf-8')


def _header_int(line, lineno, name):
    try:
        value = int(line.strip())
    except ValueError:
        raise ProblemParseError(f'expected {name} as an integer, got {line.strip()!r}', line=lineno)
    if value < 0 or (name != 'NNZ' and value == 0):
        raise ProblemParseError(f'{name} must be positive, got {value}', line=lineno)
    return value


def parse_docword(lines):
    """(documents x words) CSR count matrix from docword lines."""
    it = iter(lines)
    header = []
    for lineno, name in ((1, 'D'), (2, 'W'), (3, 'NNZ')):
        try:
            line = next(it)
        except StopIteration:
            raise ProblemParseError(f'missing header field {name}', line=lineno)
        header.append(_header_int(line, lineno, name))
    n_docs, n_words, nnz = header

    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz, dtype=float)
    count = 0
    lineno = 3
    for lineno, line in enumerate(it, start=4):
        if not line.strip():
            continue
        if count >= nnz:
            raise ProblemParseError(f'more triplets than NNZ = {nnz}', line=lineno)
        parts = line.split()
        if len(parts) != 3:
            raise ProblemParseError(f'expected "docID wordID count", got {line.strip()!r}', line=lineno)
        try:
            doc, word, value = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise ProblemParseError(f'non-numeric triplet {line.strip()!r}', line=lineno)
        if not 1 <= doc <= n_docs:
            raise ProblemParseError(f'docID {doc} outside 1..{n_docs}', line=lineno)
        if not 1 <= word <= n_words:
            raise ProblemParseError(f'wordID {word} outside 1..{n_words}', line=lineno)
        if not np.isfinite(value):
            raise ProblemParseError(f'count {parts[2]} is not finite', line=lineno)
        rows[count], cols[count], vals[count] = doc - 1, word - 1, value
        count += 1
    if count != nnz:
        raise ProblemParseError(f'found {count} triplets, header says NNZ = {nnz}', line=lineno + 1)
    return sp.coo_matrix((vals, (rows, cols)), shape=(n_docs, n_words)).tocsr()


def load_docword(path, transpose=False):
    """Count matrix with documents as rows, or words as rows when transpose."""
    with _open_text(path) as fh:
        counts = parse_docword(fh)
    logger.info('loaded %s: %d documents, %d words, %d nonzeros', path, counts.shape[0], counts.shape[1], counts.nnz)
    return counts.T.tocsr() if transpose else counts


def load_vocab(path):
    with _open_text(path) as fh:
        return [line.strip() for line in fh if line.strip()]
