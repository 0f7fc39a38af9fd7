"""Smoke test for the mra_py extension module.

Build and install it first, for example with
``maturin develop -m crates/py/Cargo.toml``, then run this file directly.
"""

import math
import os
import tempfile

import mra_py


def main():
    obs, x, rho = mra_py.generate(12, 3000, 0.0, seed=3, signal="gaussian", distribution="random")
    assert (obs.length, obs.count, obs.sigma) == (12, 3000, 0.0)
    assert len(obs.true_shifts()) == 3000

    # Noiseless data: the spectral method is exact up to a shift.
    res = mra_py.recover(obs, "spectral", reshuffle=False)
    assert mra_py.relative_error(res.x, x) < 1e-6, res

    m1, m2 = mra_py.population_moments(x, rho)
    xh, rh = mra_py.invert_moments(m1, m2)
    assert mra_py.relative_error(xh, x) < 1e-8

    shift, err = mra_py.align(mra_py.shift(x, 4), x)
    assert err < 1e-12 and shift == 12 - 4

    noisy, x, _ = mra_py.generate(10, 2000, 0.5, seed=1)
    for method in ("em", "uniform_em", "ls"):
        r = mra_py.recover(noisy, method, seed=2, max_iters=300)
        assert math.isfinite(mra_py.relative_error(r.x, x)), method
    em = mra_py.recover(noisy, "em", seed=2, accelerate=True)
    assert mra_py.relative_error(em.x, x) < 0.2, em
    assert abs(sum(em.rho) - 1.0) < 1e-9

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "obs.csv")
        noisy.save(path)
        back = mra_py.Observations.load(path)
        assert back.rows() == noisy.rows()

    base = [math.sin(1.7 * i) + 0.3 for i in range(15)]
    partner = mra_py.periodic_counterexample(base, 5)
    assert mra_py.relative_error(partner, base) > 0.1

    assert mra_py.predicted_cosine2(1.0, 1.0, 1.0) == 0.0
    assert abs(mra_py.predicted_cosine2(2.0, 1.0, 1.0) - 0.5) < 1e-12

    rows = mra_py.run_experiment("counterexample", seed=1, overrides={"trials": "3"})
    assert any(r["method"] == "dm2" and r["statistic"] == "median" and r["value"] < 1e-10 for r in rows)

    try:
        mra_py.recover(noisy, "magic")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown method accepted")

    print("mra_py smoke test passed")


if __name__ == "__main__":
    main()
