"""Smoke test for the plvm_py extension.

Build it first, e.g. `maturin develop -m crates/python/Cargo.toml`, or
`cargo build -p plvm-py --release` and put target/release/libplvm_py.so on
the path as plvm_py.so.
"""

import json
import math
import tempfile
from pathlib import Path

import plvm_py


def main():
    x, truth = plvm_py.simulate("lda", seed=3, d=12, v=20, k=2, n=300)
    assert x.shape == (12, 20)
    assert x.total() == 12 * 300
    assert sorted(truth.names()) == ["beta", "theta"]
    assert truth.shape("beta") == [20, 2]

    config = {"model": "lda", "k": 2, "alpha": 1, "gamma": 1, "method": "vb", "seed": 3, "draws": 40}
    fit = plvm_py.fit(x, json.dumps(config))
    assert fit.total_draws == 40
    first = fit.draws("beta")[0]
    for j in range(2):
        assert abs(sum(first[j::2]) - 1.0) < 1e-9
    assert len(fit.median("beta")) == 20

    aligned = plvm_py.align(fit, truth)
    assert aligned.shape("beta") == [20, 2]

    reps = plvm_py.posterior_predictive(x, fit, 5, seed=1)
    assert len(reps) == 5 and all(r.shape == x.shape for r in reps)
    reports = plvm_py.ppc(x, fit, 5, seed=1)
    assert any(stat == "mean" for stat, *_ in reports)

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "counts.csv"
        x.write_csv(str(path))
        back = plvm_py.CountMatrix.read_csv(str(path))
        assert back.counts == x.counts
        fit.write(str(Path(tmp) / "samples.csv"))
        again = plvm_py.PosteriorSamples.read(str(Path(tmp) / "samples.csv"))
        assert again.draws("beta") == fit.draws("beta")

    m = plvm_py.CountMatrix([[1, 0, 2], [0, 3, 1]])
    assert m.shape == (2, 3)
    try:
        plvm_py.fit(m, json.dumps({"model": "lda", "k": 0, "method": "vb"}))
    except ValueError as e:
        assert "problem" in str(e)
    else:
        raise AssertionError("invalid config accepted")

    assert abs(plvm_py.log_sum_exp([0.0, 0.0]) - math.log(2.0)) < 1e-12
    assert abs(sum(plvm_py.softmax([1.0, 2.0, 3.0])) - 1.0) < 1e-12
    print("plvm_py smoke test passed")


if __name__ == "__main__":
    main()
