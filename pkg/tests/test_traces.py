from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfmod.errors import InputError
from perfmod.traces import make_trace, trace_sylvester, trace_trinv, variants_of
from refimpl import random_lower, replay

EPS = np.finfo(float).eps


def shape(trace):
    return [(c.kernel, c.flags.get("side"), tuple(v for _, v in c.sizes)) for c in trace.calls]


class TestTrinvStructure:
    @pytest.mark.parametrize("variant", [1, 2, 3, 4])
    def test_single_block(self, variant):
        assert shape(trace_trinv(variant, 9, 9)) == [("TRTRI", None, (9,))]

    def test_variant3_n4_b2(self):
        assert shape(trace_trinv(3, 4, 2)) == [
            ("TRTRI", None, (2,)),
            ("TRMM", "R", (2, 2)),
            ("TRTRI", None, (2,)),
            ("TRMM", "L", (2, 2)),
        ]

    def test_variant1_n4_b2(self):
        assert shape(trace_trinv(1, 4, 2)) == [
            ("TRTRI", None, (2,)),
            ("TRMM", "R", (2, 2)),
            ("TRSM", "L", (2, 2)),
            ("TRTRI", None, (2,)),
        ]

    def test_variant2_reverses_panel_order(self):
        one, two = trace_trinv(1, 10, 3), trace_trinv(2, 10, 3)
        assert one.kernels() != two.kernels()
        assert sorted(one.calls, key=repr) == sorted(two.calls, key=repr)

    def test_last_block_smaller(self):
        sizes = [c.size_map["n"] for c in trace_trinv(4, 10, 4).calls if c.kernel == "TRTRI"]
        assert sizes == [4, 4, 2]

    @pytest.mark.parametrize("b", [0, 11])
    def test_bad_block_size(self, b):
        with pytest.raises(InputError):
            trace_trinv(1, 10, b)

    def test_bad_variant(self):
        with pytest.raises(InputError):
            trace_trinv(5, 10, 2)

    def test_csv_export(self):
        text = trace_trinv(3, 4, 2).to_csv()
        lines = text.splitlines()
        assert lines[0] == "seq,kernel,flags,sizes,threads"
        assert lines[1] == '0,TRTRI,"diag=N,uplo=L",n=2,1'
        assert len(lines) == 5


class TestSylvesterStructure:
    def test_single_block(self):
        assert shape(trace_sylvester("column-sweep", 6, 5, 5)) == [("TRSYL-UNB", None, (6, 5))]

    def test_column_sweep_4_4_2(self):
        assert shape(trace_sylvester("column-sweep", 4, 4, 2)) == [
            ("TRSYL-UNB", None, (4, 2)), ("GEMM", None, (4, 2, 2)), ("TRSYL-UNB", None, (4, 2))]

    @pytest.mark.parametrize("n,b", [(8, 2), (9, 4), (33, 8), (64, 64)])
    def test_sweeps_equal_gemm_flops(self, n, b):
        def gemm(t):
            return sum(c.flop_count() for c in t.calls if c.kernel == "GEMM")
        assert gemm(trace_sylvester("row-sweep", n, n, b)) == gemm(trace_sylvester("column-sweep", n, n, b))

    def test_bad_block(self):
        with pytest.raises(InputError):
            trace_sylvester("row-sweep", 4, 8, 5)

    def test_variants(self):
        assert variants_of("sylvester") == ("row-sweep", "column-sweep")
        with pytest.raises(InputError):
            make_trace("lu", 1, 4, 2)


class TestFlops:
    @settings(max_examples=300, deadline=None)
    @given(n=st.integers(1, 600), data=st.data(), variant=st.integers(1, 4))
    def test_trinv_total_is_n_cubed_over_3(self, n, data, variant):
        b = data.draw(st.integers(1, n))
        assert trace_trinv(variant, n, b).total_flops() == Fraction(n ** 3, 3)

    def test_calls_have_positive_sizes(self):
        for v in (1, 2, 3, 4):
            for c in trace_trinv(v, 17, 5).calls:
                assert all(x >= 1 for _, x in c.sizes)


def _bound_trinv(n):
    return 64 * n * EPS


@pytest.mark.parametrize("n", [7, 16, 33, 64])
@pytest.mark.parametrize("b", [1, 3, 8, None])
@pytest.mark.parametrize("variant", [1, 2, 3, 4])
def test_trinv_numeric(n, b, variant, rng):
    b = n if b is None else min(b, n)
    L = random_lower(n, rng)
    M = replay(trace_trinv(variant, n, b), {"L": L.copy()})["L"]
    assert np.abs(L @ M - np.eye(n)).max() <= _bound_trinv(n)


@pytest.mark.parametrize("m,n", [(7, 7), (16, 9), (12, 33), (64, 64)])
@pytest.mark.parametrize("b", [1, 3, 8, None])
@pytest.mark.parametrize("variant", ["row-sweep", "column-sweep"])
def test_sylvester_numeric(m, n, b, variant, rng):
    b = min(m, n) if b is None else min(b, m, n)
    L = random_lower(m, rng)
    U = random_lower(n, rng).T
    C = rng.standard_normal((m, n))
    X = replay(trace_sylvester(variant, m, n, b), {"L": L, "U": U, "C": C.copy()})["C"]
    assert np.abs(L @ X + X @ U - C).max() <= 64 * (m + n) * EPS


def test_replay_detects_broken_trace(rng):
    # sanity check on the oracle: dropping one call must break the inverse
    n = 16
    L = random_lower(n, rng)
    t = trace_trinv(3, n, 4)
    broken = type(t)(t.algorithm, t.variant, t.parameters, t.calls[:-2] + t.calls[-1:])
    M = replay(broken, {"L": L.copy()})["L"]
    assert np.abs(L @ M - np.eye(n)).max() > _bound_trinv(n)
