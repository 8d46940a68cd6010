"""Smoke test for the Python extension.

Builds the extension with cargo (release, extension-module feature), loads
it from a scratch directory and exercises each binding. Runs under pytest or
directly: ``python python/smoke_test.py``.
"""

import importlib.util
import json
import math
import pathlib
import shutil
import subprocess
import sys
import sysconfig
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "shellflow-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / "libshellflow_py.so"
    scratch = pathlib.Path(tempfile.mkdtemp())
    target = scratch / ("shellflow" + sysconfig.get_config_var("EXT_SUFFIX"))
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("shellflow", target)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


sf = load()


def test_eigensystem_diagonalizes():
    m = [[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 0.5]]
    vals, vecs = sf.eigensystem(m)
    assert [round(v, 12) for v in vals] == [3.0, 1.0, 0.5]
    for u, lam in enumerate(vals):
        col = [row[u] for row in vecs]
        mv = [sum(m[i][j] * col[j] for j in range(3)) for i in range(3)]
        assert all(abs(mv[i] - lam * col[i]) < 1e-12 for i in range(3))


def test_shell_ledger_partitions_energy():
    lams = [4.0, 1.5, 0.3, 0.05]
    g = [1.0, -2.0, 0.5, 3.0]
    alphas, energies, diss = sf.shell_ledger(lams, g, 1.0, 2.0)
    assert alphas == list(range(min(alphas), max(alphas) + 1))
    assert math.isclose(sum(energies), 0.5 * sum(x * x for x in g), rel_tol=1e-14)
    assert math.isclose(sum(diss), sum(l * x * x for l, x in zip(lams, g)), rel_tol=1e-14)
    assert sf.shell_index(1.0, 1.0, 2.0) == 0
    assert sf.shell_index(0.999, 1.0, 2.0) == -1


def test_transport_closed_forms():
    assert sf.effective_time(10.0, 50.0, 2.0) == 50.0 * 100.0 / 2.0
    assert math.isclose(sf.characteristic(1.0, 1.0, 2.0), math.exp(-2.0), rel_tol=1e-15)
    assert sf.characteristic(1.0, 0.5, 2.5) is None


def test_run_returns_report():
    [text] = sf.run("regimes", "regime_bs = [1.0]\ncritical_tau_end = 0.5\n")
    report = json.loads(text)
    assert report["experiment"] == "regimes"
    assert report["passed"]
    assert all(c["passed"] for c in report["checks"] if c["gating"])


def test_config_errors_raise_value_error():
    for bad in ["bogus = 1", "dt = -1.0"]:
        try:
            sf.resolve_config("ode-verify", bad)
        except ValueError:
            pass
        else:
            raise AssertionError(f"accepted {bad!r}")
    cfg = json.loads(sf.resolve_config("pde-scaling"))
    assert cfg["drift_b"] == 3.0


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"ok {t.__name__}")
    print(f"{len(tests)} passed", file=sys.stderr)
