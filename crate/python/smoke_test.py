"""Smoke test for the syncgrid_py extension.

Build first:  cargo build --release -p syncgrid-py --features extension-module
Then run:     python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load_extension():
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libsyncgrid_py.so"
        if lib.is_file():
            loader = importlib.machinery.ExtensionFileLoader("syncgrid_py", str(lib))
            spec = importlib.util.spec_from_file_location("syncgrid_py", str(lib), loader=loader)
            mod = importlib.util.module_from_spec(spec)
            loader.exec_module(mod)
            return mod
    sys.exit("libsyncgrid_py.so not found; build with --features extension-module first")


def main():
    sg = load_extension()
    names = [n for n, _ in sg.list_scenarios()]
    assert "powergrid-case1" in names, names

    doc = sg.scenario("tcl-single-unit")
    assert doc["name"] == "tcl-single-unit"

    r, _ = sg.order_parameter([0.0, math.pi])
    assert r < 1e-12
    r, psi = sg.order_parameter([0.3, 0.3, 0.3])
    assert abs(r - 1.0) < 1e-12 and abs(psi - 0.3) < 1e-12

    case1 = sg.run("powergrid-case1")["results"]
    assert abs(case1["interarea_gap_rad"] + 3.12) < 0.1, case1
    assert case1["regime"] == "phase_locked"

    n4 = sg.run("tcl-ensemble-n4-duty50", seed=3)["results"]
    assert abs(n4["steady_p_agg_kw"] - 24.0) < 0.5, n4

    plain = sg.run("microgrid-nominal", seed=5)
    again = sg.run("microgrid-nominal", seed=5)
    assert plain == again
    off = sg.run("microgrid-nominal", seed=5, overrides={"control.delta": 0.0})
    assert plain != off

    with tempfile.TemporaryDirectory() as tmp:
        out = pathlib.Path(sg.run_to_dir("tcl-single-unit", tmp))
        assert (out / "manifest.json").is_file() and (out / "summary.json").is_file()

    try:
        sg.run("no-such-scenario")
    except KeyError:
        pass
    else:
        raise AssertionError("unknown scenario accepted")

    print(f"syncgrid_py {sg.__version__}: smoke test ok ({len(names)} scenarios)")


if __name__ == "__main__":
    main()
