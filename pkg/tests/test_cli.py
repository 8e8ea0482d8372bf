import json
import subprocess
import sys

import pytest

from perfmod.cli import main
from perfmod.sampler import ingest_csv

TRI = "uplo=L,transa=N,diag=N"
KERNELS = [
    ("GEMM", "transa=N,transb=N", ["m=8:2048", "n=8:2048", "k=8:2048"]),
    ("TRMM", "side=L," + TRI, ["m=8:2048", "n=8:2048"]),
    ("TRMM", "side=R," + TRI, ["m=8:2048", "n=8:2048"]),
    ("TRSM", "side=L," + TRI, ["m=8:2048", "n=8:2048"]),
    ("TRTRI", "uplo=L,diag=N", ["n=8:2048"]),
]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def fit_args(kernel, flags, domain, repo, *extra):
    args = ["fit", "--kernel", kernel, "--flags", flags, "--repo", repo, "--reps", 3]
    for d in domain:
        args += ["--domain", d]
    return args + list(extra)


@pytest.fixture
def machine_file(tmp_path):
    path = tmp_path / "m.profile"
    path.write_text("id=lab\npeak_flops_per_core=1e10\ncore_count=4\ntimer_floor=1e-9\n")
    return path


@pytest.fixture
def repo(tmp_path, capsys, machine_file, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    root = tmp_path / "repo"
    for kernel, flags, domain in KERNELS:
        code, _, err = run(capsys, *fit_args(kernel, flags, domain, root, "--machine", machine_file))
        assert code == 0, err
    return root


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        code, _, err = run(capsys, "frobnicate")
        assert code == 1 and "usage" in err

    def test_unknown_flag(self, capsys):
        code, _, err = run(capsys, "rank", "--n", 10, "--b", 2, "--bogus")
        assert code == 1 and "usage" in err

    def test_no_subcommand(self, capsys):
        assert run(capsys)[0] == 1

    def test_help(self, capsys):
        code, out, _ = run(capsys, "--help")
        assert code == 0 and "compare-strategies" in out

    def test_no_repo(self, capsys, monkeypatch):
        monkeypatch.delenv("PERFMOD_REPO", raising=False)
        code, _, err = run(capsys, "rank", "--n", 100, "--b", 10)
        assert code == 1 and "PERFMOD_REPO" in err


class TestPipeline:
    def test_rank_happy_path(self, capsys, repo, machine_file):
        code, out, err = run(capsys, "rank", "--algo", "trinv", "--n", 1000, "--b", 96,
                             "--repo", repo, "--machine", machine_file)
        assert code == 0, err
        rows = out.splitlines()
        assert rows[0].split()[:2] == ["rank", "variant"]
        assert sorted(r.split()[1] for r in rows[1:]) == ["1", "2", "3", "4"]

    def test_repo_from_environment(self, capsys, repo, machine_file, monkeypatch):
        monkeypatch.setenv("PERFMOD_REPO", str(repo))
        code, out, _ = run(capsys, "rank", "--n", 500, "--b", 50, "--machine", machine_file)
        assert code == 0 and len(out.splitlines()) == 5

    def test_predict_json_and_trace(self, capsys, repo, machine_file, tmp_path):
        out_file, trace_file = tmp_path / "p.json", tmp_path / "t.csv"
        code, out, _ = run(capsys, "predict", "--variant", 3, "--n", 300, "--b", 64, "--repo", repo,
                           "--machine", machine_file, "--out", out_file, "--trace-out", trace_file)
        assert code == 0 and out == ""
        doc = json.loads(out_file.read_text())
        assert doc["flops"] == "9000000" and doc["machine"] == "lab"
        assert trace_file.read_text().startswith("seq,kernel,flags,sizes,threads\n")

    def test_predict_empty_repo(self, capsys, tmp_path, machine_file):
        code, out, err = run(capsys, "predict", "--variant", 1, "--n", 64, "--b", 16,
                             "--repo", tmp_path / "empty", "--machine", machine_file)
        assert code == 2 and out == ""
        assert "missing: TRTRI [diag=N,uplo=L] machine=lab threads=1" in err
        assert "missing: TRMM" in err and "missing: TRSM" in err

    def test_predict_allow_missing(self, capsys, tmp_path, machine_file, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
        root = tmp_path / "r"
        run(capsys, *fit_args("TRTRI", "uplo=L,diag=N", ["n=8:512"], root, "--machine", machine_file))
        code, out, err = run(capsys, "predict", "--variant", 1, "--n", 64, "--b", 16, "--repo", root,
                             "--machine", machine_file, "--allow-missing")
        assert code == 0
        assert "missing_models" in json.loads(out)["flags"]
        assert "without models" in err

    def test_tune(self, capsys, repo, machine_file):
        code, out, err = run(capsys, "tune", "--variant", 3, "--n", 1024, "--b-grid", "16:256:16",
                             "--repo", repo, "--machine", machine_file)
        assert code == 0
        assert out.splitlines()[0] == "param,variant,median_s,low_s,high_s,efficiency,flags"
        assert len(out.splitlines()) == 17
        assert err.startswith("b*=")

    def test_tune_wide_to_file(self, capsys, repo, machine_file, tmp_path):
        dest = tmp_path / "tune.dat"
        code, out, _ = run(capsys, "tune", "--variant", 1, "--n", 512, "--b-grid", "32,64,128", "--wide",
                           "--repo", repo, "--machine", machine_file, "--out", dest)
        assert code == 0 and out.startswith("b*=")
        assert dest.read_text().splitlines()[1] == "# b 1"

    def test_sweep(self, capsys, repo, machine_file):
        code, out, _ = run(capsys, "sweep", "--n-grid", "256:1024:256", "--b", 64, "--repo", repo,
                           "--machine", machine_file, "--wide", "--quantity", "median")
        assert code == 0
        assert out.splitlines()[1] == "# n 1 2 3 4"
        assert len(out.splitlines()) == 6

    def test_models(self, capsys, repo):
        code, out, _ = run(capsys, "models", "--repo", repo, "--kernel", "TRMM")
        assert code == 0 and len(out.splitlines()) == 3

    def test_bad_block_size_is_input_error(self, capsys, repo, machine_file):
        code, _, err = run(capsys, "rank", "--n", 10, "--b", 20, "--repo", repo, "--machine", machine_file)
        assert code == 1 and "block size" in err


class TestFit:
    def test_deterministic_with_seed(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
        paths = []
        for name in ("a", "b"):
            code, out, _ = run(capsys, *fit_args("GEMM", "transa=N,transb=N", ["m=32:512 n=32:512 k=32:512"],
                                                 tmp_path / name, "--strategy", "expansion", "--seed", 7,
                                                 "--noise", "gaussian:0.03"))
            assert code == 0
            paths.append(out.split("\t")[0])
        a, b = (open(p, "rb").read() for p in paths)
        assert a == b

    def test_conflict_and_force(self, capsys, tmp_path):
        args = fit_args("TRTRI", "uplo=L,diag=N", ["n=8:256"], tmp_path)
        assert run(capsys, *args)[0] == 0
        code, _, err = run(capsys, *args)
        assert code == 1 and "force" in err
        assert run(capsys, *args, "--force")[0] == 0

    def test_corrupt_model_is_io_error(self, capsys, tmp_path):
        code, out, _ = run(capsys, *fit_args("TRTRI", "uplo=L,diag=N", ["n=8:256"], tmp_path))
        path = out.split("\t")[0]
        with open(path, "a") as fh:
            fh.write("garbage")
        code, _, err = run(capsys, "predict", "--variant", 1, "--n", 8, "--b", 8, "--repo", tmp_path)
        assert code == 3 and path in err

    def test_refinement_with_config_file(self, capsys, tmp_path):
        cfg = tmp_path / "fit.cfg"
        cfg.write_text("# refinement settings\nstrategy = refinement\neps = 0.02\nbasis = 1,n^2\n"
                       "min_cell_width = 4\n")
        truths = tmp_path / "jump.truths"
        truths.write_text("TRTRI * 1e-8*n^2 + 2e-8*n^2*(n >= 256)\n")
        code, _, err = run(capsys, *fit_args("TRTRI", "uplo=L,diag=N", ["n=32:1024"], tmp_path / "r",
                                             "--config", cfg, "--executor", f"synthetic:{truths}"))
        assert code == 1 and "truth" in err  # comparisons are not part of the expression language
        truths.write_text("TRTRI * 1e-8*n^2 + 1e-6\n")
        code, out, err = run(capsys, *fit_args("TRTRI", "uplo=L,diag=N", ["n=32:1024"], tmp_path / "r",
                                               "--config", cfg, "--executor", f"synthetic:{truths}"))
        assert code == 0, err
        doc = json.loads(open(out.split("\t")[0]).read())
        assert doc["metadata"]["strategy"] == "refinement"
        assert doc["cells"][0]["basis"] == [[0], [2]]

    def test_unknown_config_key(self, capsys, tmp_path):
        cfg = tmp_path / "fit.cfg"
        cfg.write_text("epsilon=0.1\n")
        code, _, err = run(capsys, *fit_args("TRTRI", "uplo=L,diag=N", ["n=8:256"], tmp_path, "--config", cfg))
        assert code == 1 and "epsilon" in err

    def test_domain_must_cover_sizes(self, capsys, tmp_path):
        code, _, err = run(capsys, *fit_args("GEMM", "transa=N,transb=N", ["m=8:64"], tmp_path))
        assert code == 1 and "n" in err

    def test_writes_only_repo(self, capsys, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        run(capsys, *fit_args("TRTRI", "uplo=L,diag=N", ["n=8:256"], tmp_path / "repo"))
        assert sorted(p.name for p in tmp_path.iterdir()) == ["repo"]


class TestSample:
    def test_csv_round_trip(self, capsys, tmp_path):
        dest = tmp_path / "s.csv"
        code, out, _ = run(capsys, "sample", "--kernel", "GEMM", "--flags", "transa=N,transb=N",
                           "--grid", "m=log:16:256:3", "--grid", "n=lin:10:30:3", "--grid", "k=8",
                           "--reps", 4, "--noise", "gaussian:0.05", "--seed", 3, "--out", dest)
        assert code == 0 and out == ""
        ss = ingest_csv(dest)
        assert len(ss.samples) == 9 and ss.machine == "demo"

    def test_seed_reproduces(self, capsys, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
        args = ["sample", "--kernel", "TRTRI", "--flags", "uplo=L,diag=N", "--grid", "n=log:8:512:5",
                "--noise", "gaussian:0.1", "--seed", 11]
        assert run(capsys, *args)[1] == run(capsys, *args)[1]
        assert run(capsys, *args)[1] != run(capsys, *args[:-1], 12)[1]

    def test_failing_executor(self, capsys, tmp_path):
        dest = tmp_path / "s.csv"
        script = tmp_path / "exe.py"
        script.write_text("import sys\njob = open(sys.argv[1]).read()\n"
                          "sys.exit(1) if 'n=20' in job else print('1e-3 ' * 4)\n")
        code, _, err = run(capsys, "sample", "--kernel", "TRTRI", "--flags", "uplo=L,diag=N",
                           "--grid", "n=10,20", "--reps", 3, "--out", dest,
                           "--executor", f"cmd:{sys.executable} {script}")
        assert code == 3 and "{'n': 20}" in err
        assert len(ingest_csv(dest).samples) == 1


class TestCompare:
    def test_report(self, capsys, tmp_path):
        dest = tmp_path / "cmp.csv"
        args = ["compare-strategies", "--kernel", "TRTRI", "--flags", "uplo=L,diag=N", "--domain", "n=16:1024",
                "--out", dest]
        code, out, _ = run(capsys, *args)
        assert code == 0 and "expansion" in out and "refinement" in out
        first = dest.read_text()
        assert first.splitlines()[0].startswith("strategy,samples,max_rel_err")
        run(capsys, *args)
        assert dest.read_text() == first


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "perfmod.cli", "models", "--repo", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("kernel,flags,machine")
