"""Smoke test for the adr_py extension: simulate, fit, evaluate, learn, round-trip."""

import math
import os
import tempfile

import adr_py


def main():
    ds = adr_py.simulate("binary", 1500, seed=7)
    assert (ds.n, ds.horizon, ds.num_arms, ds.state_dim) == (1500, 10, 1, 1), ds
    assert len(ds.outcomes()) == 1500
    assert all(len(a) == 10 for a in ds.actions())

    nz = adr_py.fit(ds, folds=5, seed=1)
    est, se = adr_py.evaluate(ds, "bin-time:0,-1,3", "adr-w", nz)
    assert math.isfinite(est) and se > 0, (est, se)
    ipw, _ = adr_py.evaluate(ds, "never", "ipw", nz)
    assert math.isfinite(ipw)

    chosen, estimates = adr_py.learn(ds, "adr-w", nz)
    assert chosen in adr_py.grid("binary")
    assert len(estimates) == len(adr_py.grid("binary"))

    oracle = adr_py.oracle("binary", ["never", chosen], rollouts=200, seed=3)
    assert oracle[0] == (0.0, 0.0)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "d.csv")
        ds.save(path, seed=7)
        back = adr_py.load(path)
        assert back.outcomes() == ds.outcomes()
        assert back.states(3) == ds.states(3)

    try:
        adr_py.evaluate(ds, "bin-time:0,-1,3", "adr")
    except ValueError:
        pass
    else:
        raise AssertionError("missing nuisances must raise")

    print("adr_py smoke test passed:", chosen, round(est, 4))


if __name__ == "__main__":
    main()
