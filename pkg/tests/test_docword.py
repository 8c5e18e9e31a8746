import gzip

import numpy as np
import pytest
from numpy.testing import assert_allclose

from services.docword import load_docword, load_vocab, parse_docword
from services.errors import ProblemParseError

SAMPLE = """3
4
5
1 1 2
1 3 1
2 2 4
3 1 1
3 4 3
"""


def test_parse_docword():
    counts = parse_docword(SAMPLE.splitlines(keepends=True))
    assert counts.shape == (3, 4)
    assert counts.nnz == 5
    assert_allclose(counts.toarray(), [[2, 0, 1, 0], [0, 4, 0, 0], [1, 0, 0, 3]])


def test_blank_lines_ignored():
    counts = parse_docword((SAMPLE + '\n\n').splitlines(keepends=True))
    assert counts.nnz == 5


@pytest.mark.parametrize('text, line', [
    ('3\n4\n', 3),
    ('x\n4\n5\n', 1),
    ('3\n4\n1\n1 5 1\n', 4),
    ('3\n4\n1\n4 1 1\n', 4),
    ('3\n4\n1\n1 1\n', 4),
    ('3\n4\n2\n1 1 1\n', 5),
    ('3\n4\n1\n1 1 1\n2 2 2\n', 5),
])
def test_malformed_input_reports_line(text, line):
    with pytest.raises(ProblemParseError) as info:
        parse_docword(text.splitlines(keepends=True))
    assert info.value.line == line


def test_load_gzip_and_transpose(tmp_path):
    path = tmp_path / 'docword.test.txt.gz'
    with gzip.open(path, 'wt', encoding='utf-8') as fh:
        fh.write(SAMPLE)
    counts = load_docword(str(path))
    words = load_docword(str(path), transpose=True)
    assert counts.shape == (3, 4)
    assert words.shape == (4, 3)
    assert_allclose(words.toarray(), counts.toarray().T)


def test_load_vocab(tmp_path):
    path = tmp_path / 'vocab.test.txt'
    path.write_text('apple\nbanana\n\ncherry\n')
    assert load_vocab(str(path)) == ['apple', 'banana', 'cherry']


def test_duplicate_entries_are_summed():
    counts = parse_docword('1\n2\n2\n1 1 1\n1 1 2\n'.splitlines(keepends=True))
    assert counts[0, 0] == 3
    assert np.isclose(counts.sum(), 3)
