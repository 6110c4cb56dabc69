"""Smoke test for the `coevo` Python extension.

Run from the repository root:

    python3 python/smoke_test.py

If `coevo` is not importable, the extension is built with cargo and loaded
from target/release. `maturin develop -m crates/py/Cargo.toml` also works.
"""

import importlib.util
import math
import os
import subprocess
import sys

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    try:
        import coevo  # noqa: F401

        return coevo
    except ImportError:
        pass
    env = dict(os.environ, PYO3_BUILD_EXTENSION_MODULE="1")
    subprocess.run(
        ["cargo", "build", "--release", "-p", "coevo-py", "--features", "extension-module"],
        cwd=ROOT,
        env=env,
        check=True,
    )
    lib = os.path.join(ROOT, "target", "release", "libcoevo_py.so")
    spec = importlib.util.spec_from_file_location("coevo", lib)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    sys.modules["coevo"] = mod
    return mod


def main():
    coevo = load()
    failures = []

    def check(name, ok):
        print(("PASS " if ok else "FAIL ") + name)
        if not ok:
            failures.append(name)

    land = coevo.Landscape.preset("a")
    a_lo, a_hi = land.default_range
    rep = land.check_hypotheses()
    check("preset a passes the hypothesis audit", all(c["passed"] for c in rep["checks"]))

    u = 0.3
    a = land.a_star(u)
    du, dn = land.field(u, land.h_star(u), a)
    check("equilibrium is a zero of the reduced field", abs(du) < 1e-10 and abs(dn) < 1e-10)

    comps = land.components(a_lo, a_hi)
    sets = land.omega(a_lo, a_hi)
    check("one set per component", len(comps) == len(sets) and len(sets) > 0)
    om = sets[0]
    verts = om.vertices
    cu = sum(p[0] for p in verts) / len(verts)
    cn = sum(p[1] for p in verts) / len(verts)
    check("omega contains its vertex centroid", om.contains(cu, cn))
    check("omega csv has a header", om.to_csv().splitlines()[0].startswith("u,n"))

    tr = land.simulate((0.3, 0.4), [(5.0, a_lo), (5.0, a_hi)], horizon=20.0)
    check("trajectory covers the horizon", math.isclose(tr.t[-1], 20.0) and len(tr) == len(tr.u))
    check("trajectory csv header", tr.to_csv().splitlines()[0] == "t,u,n,a")

    try:
        land.simulate((0.3, 0.4), [(5.0, 99.0)])
        check("out-of-range dose is rejected", False)
    except coevo.ConfigError:
        check("out-of-range dose is rejected", True)

    sc = coevo.Scenario.from_toml(
        'name = "smoke"\nseed = 5\n[landscape]\npreset = "a"\n[verify]\nsamples = 300\n'
    )
    r = sc.verify("angle_condition")
    check("angle condition report passes", r["passed"] and r["checked"] > 0)
    check("scenario seed is kept", sc.seed == 5 and r["seed"] == 5)

    try:
        coevo.Scenario.from_toml('bogus = 1\n[landscape]\npreset = "a"\n')
        check("unknown config key is rejected", False)
    except coevo.ConfigError:
        check("unknown config key is rejected", True)

    run = land.fbsm((0.25, 0.32), 10.0, a_lo, a_hi, intervals=600)
    s = run["summary"]
    check("optimal run meets n(T) = n(0)", s["converged"] and abs(s["residual"]) < 1e-4)
    check("optimal control stays in range", all(a_lo - 1e-12 <= x <= a_hi + 1e-12 for x in run["alpha"]))

    print(f"{len(failures)} failures")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
