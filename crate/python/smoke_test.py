"""Smoke test for the dicjm extension module.

Build first, e.g. `maturin develop -m crates/python/Cargo.toml`, then run
`python python/smoke_test.py`.
"""

import json
import math
import tempfile
from pathlib import Path

import dicjm


def main():
    nodes, weights = dicjm.gauss_legendre(20)
    assert abs(sum(weights) - 2.0) < 1e-12
    assert abs(sum(w * x**2 for x, w in zip(nodes, weights)) - 2.0 / 3.0) < 1e-12

    draws = dicjm.sample_truncated_normal(0.0, 1.0, 1.0, 2.0, 500, seed=3)
    assert all(1.0 < d <= 2.0 for d in draws)
    assert abs(dicjm.normal_cdf(0.0, 0.0, 4.0) - 0.5) < 1e-15

    row = dicjm.eval_basis(2, [0.0, 1.0], 2.0)
    assert row == [1.0, 2.0, 4.0, 4.0, 1.0], row

    config = json.dumps({"n_per_group": [15, 15]})
    cohort, truth = dicjm.generate_cohort(config, seed=7)
    assert len(cohort) == 30 and len(truth["h"]) == 30
    assert cohort.validate() == []

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cohort.write(tmp / "cohort")
        again = dicjm.Cohort.load(tmp / "cohort")
        assert again.ids == cohort.ids

        fit = dicjm.Fit.run(again, n_iter=300, burn_in=100, chains=2, seed=11)
        assert fit.n_chains == 2 and fit.n_draws == 400
        lam = fit.column("mu_w[0]")
        assert len(lam) == 2 and len(lam[0]) == 200

        fit.save(tmp / "fit.bin")
        loaded = dicjm.Fit.load(tmp / "fit.bin")
        name = "mu_h[0]"
        assert loaded.column(name) == fit.column(name)

        value, _ = fit.rhat(name)
        assert value >= 1.0

        report = fit.summary()
        assert report["n_draws"] == 400
        medians = [est for level, est in fit.percentiles(0, [0.5])]
        assert medians[0] is None or math.isfinite(medians[0])

        try:
            fit.column("no-such-column")
        except KeyError:
            pass
        else:
            raise AssertionError("unknown column accepted")

    print("dicjm smoke test passed")


if __name__ == "__main__":
    main()
