from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfmod.core import (Expr, FlagBinding, KernelRegistry, MachineProfile, creation_time,
                          default_registry, demo_profile, efficiency, flops)
from perfmod.errors import InputError


class TestExpr:
    def test_power_and_division_exact(self):
        assert Expr("n^3/3").evaluate({"n": 6}) == 72
        assert Expr("n^3/3").evaluate({"n": 4}) == Fraction(64, 3)

    def test_float_literal_is_decimal_exact(self):
        assert Expr("0.1*n").evaluate({"n": 10}) == 1

    def test_names(self):
        assert Expr("m*n*(m+n)").names == {"m", "n"}

    @pytest.mark.parametrize("bad", ["__import__('os')", "n**-1", "f(n)", "n.real", "n^m", "[n]"])
    def test_rejects_unsafe_or_unsupported(self, bad):
        with pytest.raises(InputError):
            Expr(bad)

    def test_unbound_name(self):
        with pytest.raises(InputError):
            Expr("m*n").evaluate({"m": 1})


class TestFlagBinding:
    def test_parse_is_sorted_and_round_trips(self):
        b = FlagBinding.parse("uplo=L,side=R")
        assert str(b) == "side=R,uplo=L"
        assert FlagBinding.parse(str(b)) == b
        assert b.canonical() == "side=R_uplo=L"

    def test_empty_binding(self):
        assert FlagBinding.parse("").canonical() == "none"

    def test_duplicate_name(self):
        with pytest.raises(InputError):
            FlagBinding.parse("side=L,side=R")


class TestFlops:
    def test_gemm(self, registry):
        assert flops(registry["GEMM"], "transa=N,transb=N", {"m": 100, "n": 100, "k": 100}) == 2_000_000

    def test_trtri(self, registry):
        assert flops(registry["TRTRI"], "uplo=L,diag=N", {"n": 6}) == 72

    def test_trsm_left(self, registry):
        f = flops(registry["TRSM"], "side=L,uplo=L,transa=N,diag=N", {"m": 10, "n": 4})
        assert f == 400

    def test_trmm_right(self, registry):
        assert flops(registry["TRMM"], "side=R,uplo=U,transa=T,diag=U", {"m": 4, "n": 10}) == 400

    def test_trsyl(self, registry):
        assert flops(registry["TRSYL-UNB"], "trana=N,tranb=N", {"m": 3, "n": 5}) == 120

    @pytest.mark.parametrize("sizes", [{"m": 0, "n": 3}, {"m": 2}, {"m": 2, "n": 3, "k": 1}, {"m": 2.5, "n": 3}])
    def test_invalid_sizes(self, registry, sizes):
        with pytest.raises(InputError):
            flops(registry["TRSM"], "side=L,uplo=L,transa=N,diag=N", sizes)

    @pytest.mark.parametrize("flags", ["side=X,uplo=L,transa=N,diag=N", "side=L", "side=L,uplo=L,transa=N,diag=N,foo=1"])
    def test_invalid_binding(self, registry, flags):
        with pytest.raises(InputError):
            flops(registry["TRSM"], flags, {"m": 2, "n": 2})

    @settings(max_examples=200, deadline=None)
    @given(data=st.data())
    def test_strictly_increasing_in_each_size(self, data):
        reg = default_registry()
        name = data.draw(st.sampled_from(reg.names()))
        k = reg[name]
        binding = {f: data.draw(st.sampled_from(sorted(vals))) for f, vals in k.flag_params}
        sizes = {s: data.draw(st.integers(1, 500)) for s in k.size_params}
        base = flops(k, binding, sizes)
        assert base > 0
        for s in k.size_params:
            assert flops(k, binding, {**sizes, s: sizes[s] + 1}) > base


class TestRegistry:
    def test_default_kernels(self, registry):
        assert set(registry.names()) == {"GEMM", "TRMM", "TRSM", "TRTRI", "TRSYL-UNB"}

    def test_parse_custom_kernel(self):
        reg = KernelRegistry.parse("kernel SYRK\nflag uplo {L,U}\nsize n, k\nflops n^2*k\n")
        assert flops(reg["SYRK"], "uplo=U", {"n": 3, "k": 2}) == 18

    def test_duplicate_name_rejected(self):
        text = "kernel A\nsize n\nflops n\nkernel A\nsize n\nflops 2*n\n"
        with pytest.raises(InputError):
            KernelRegistry.parse(text)

    def test_merged_rejects_clash(self, registry):
        with pytest.raises(InputError):
            registry.merged(KernelRegistry.parse("kernel GEMM\nsize n\nflops n\n"))

    def test_unknown_kernel_lists_known(self, registry):
        with pytest.raises(InputError, match="GEMM"):
            registry["SYMM"]

    def test_formula_with_unknown_name_rejected(self):
        with pytest.raises(InputError):
            KernelRegistry.parse("kernel A\nsize n\nflops n*q\n")


class TestEfficiency:
    @pytest.mark.parametrize("time,fl,threads,expected", [
        (1.0, 5e9, 1, 0.5),
        (1.0, 1e10, 2, 0.5),
        (2.0, 2e10, 1, 1.0),
    ])
    def test_examples(self, time, fl, threads, expected):
        p = MachineProfile("x", 1e10, 4)
        assert efficiency(time, fl, p, threads) == pytest.approx(expected, rel=1e-15)

    def test_no_clamping_above_peak(self):
        assert efficiency(1.0, 3e10, MachineProfile("x", 1e10, 1)) == pytest.approx(3.0)

    @pytest.mark.parametrize("time,threads", [(0.0, 1), (-1.0, 1), (1.0, 0), (1.0, 5)])
    def test_preconditions(self, time, threads):
        with pytest.raises(InputError):
            efficiency(time, 1e9, MachineProfile("x", 1e10, 4), threads)

    @settings(max_examples=200, deadline=None)
    @given(t=st.floats(1e-6, 1e3), f=st.floats(1.0, 1e15), k=st.floats(1e-3, 1e3))
    def test_scale_invariance(self, t, f, k):
        p = demo_profile()
        assert efficiency(k * t, k * f, p) == pytest.approx(efficiency(t, f, p), rel=1e-12)


class TestMachineProfile:
    def test_text_round_trip(self, tmp_path):
        p = MachineProfile("sandy", 2.08e10, 8, 5e-8)
        path = tmp_path / "m.profile"
        path.write_text(p.to_text())
        assert MachineProfile.load(path) == p

    @pytest.mark.parametrize("kw", [dict(peak_flops_per_core=0), dict(core_count=0), dict(timer_floor=0)])
    def test_invariants(self, kw):
        args = dict(id="x", peak_flops_per_core=1e9, core_count=1, timer_floor=1e-9) | kw
        with pytest.raises(InputError):
            MachineProfile(**args)

    def test_missing_key(self):
        with pytest.raises(InputError):
            MachineProfile.from_text("id=x\ncore_count=2\n")

    def test_demo(self):
        assert demo_profile().id == "demo"


def test_creation_time_honours_source_date_epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "86400")
    assert creation_time() == "1970-01-02T00:00:00+00:00"
