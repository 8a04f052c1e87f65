import os
import subprocess
import sys

import pytest
from hypothesis import given
from hypothesis import strategies as st

from honeydoc import _kernels_py as pure
from honeydoc import kernels
from honeydoc.scenario import SCENARIO_DIR, load_scenario, run
from oracles import seq_add_ref

compiled = pytest.importorskip("honeydoc._kernels")

u32 = st.integers(0, 2**32 - 1)
small = st.integers(0, 3)  # narrow values so rows and keys collide often

row = st.tuples(st.integers(0, 63), small, small, small, small, small, small)
key = st.tuples(small, small, small, small, small, small)


def test_backend_selected():
    assert kernels.BACKEND in ("python", "cython")
    assert compiled.BACKEND == "cython"
    assert compiled.HEADER_WIDTH == pure.HEADER_WIDTH


@given(u32, st.integers(-2**32, 2**32))
def test_seq_add_agrees(base, delta):
    assert compiled.seq_add(base, delta) == pure.seq_add(base, delta) == seq_add_ref(base, delta)


@given(st.lists(row, max_size=30), key)
def test_match_first_agrees(rows, k):
    assert compiled.match_first(compiled.pack_rows(rows), k) == \
        pure.match_first(pure.pack_rows(rows), k)


@given(st.lists(st.tuples(row, st.sampled_from([None, b"ab", b"x", b""])), max_size=20), key,
       st.binary(max_size=8))
def test_first_rule_match_agrees(rules, k, payload):
    rows = [r for r, _ in rules]
    contents = [c for _, c in rules]
    assert compiled.first_rule_match(compiled.pack_rows(rows), contents, k, payload) == \
        pure.first_rule_match(pure.pack_rows(rows), contents, k, payload)


@given(st.lists(st.integers(0, 10**7), max_size=200), st.integers(1, 10**6))
def test_bin_counts_agree(times, width):
    assert compiled.bin_counts(times, width) == pure.bin_counts(times, width)


def test_empty_table():
    assert compiled.match_first(compiled.pack_rows([]), (0,) * 6) == -1


def test_pure_backend_gives_identical_trace():
    code = ("import sys; from honeydoc import kernels; assert kernels.BACKEND == 'python';"
            "from honeydoc.scenario import load_scenario, run;"
            f"sys.stdout.write(run(load_scenario({str(SCENARIO_DIR / 'ssh-handover.scn')!r}))"
            ".trace.to_text())")
    env = dict(os.environ, HONEYDOC_PURE="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                         text=True, check=True).stdout
    assert out == run(load_scenario(SCENARIO_DIR / "ssh-handover.scn")).trace.to_text()
