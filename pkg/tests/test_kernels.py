import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reroute import kernels

text = st.text(alphabet="0123456789,-", max_size=24)


def dp_levenshtein(a: str, b: str) -> int:
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[len(a)][len(b)]


def codes(s):
    return np.frombuffer(s.encode(), dtype=np.uint8).astype(np.int64)


@given(text, text)
def test_levenshtein_paths_match_dp(a, b):
    want = dp_levenshtein(a, b)
    assert kernels.levenshtein(a, b) == want
    assert kernels.levenshtein_loop(codes(a), codes(b)) == want
    assert kernels.levenshtein_numpy(codes(a), codes(b)) == want


@pytest.mark.parametrize("a,b,d", [("", "", 0), ("abc", "", 3), ("kitten", "sitting", 3), ("3,1-5,2", "3,1-5,4", 1)])
def test_levenshtein_examples(a, b, d):
    assert kernels.levenshtein(a, b) == d


@given(st.lists(st.lists(st.integers(-3, 3), min_size=5, max_size=5), min_size=1, max_size=8), st.integers(1, 5))
def test_topk_paths_agree_and_prefer_lower_index(rows, k):
    v = np.array(rows, dtype=np.float64)
    a = kernels.topk_rows_loop(v, k)
    b = kernels.topk_rows_numpy(v, k)
    assert np.array_equal(a, b)
    for row, sel in zip(v, a):
        assert list(sel) == sorted(range(len(row)), key=lambda i: (-row[i], i))[:k]


def test_expert_counts_paths_agree():
    rng = np.random.default_rng(0)
    sel = rng.integers(0, 6, size=(40, 3, 2))
    want = np.zeros((3, 6), dtype=np.int64)
    for t in range(40):
        for l in range(3):
            for e in sel[t, l]:
                want[l, e] += 1
    assert np.array_equal(kernels.expert_counts_loop(sel, 6), want)
    assert np.array_equal(kernels.expert_counts_numpy(sel, 6), want)


def test_env_flag_selects_numpy_path():
    code = "from reroute import _accel, kernels; print(_accel.JIT_ENABLED, kernels.levenshtein('ab', 'b'))"
    env = dict(os.environ, REROUTE_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "1"]
