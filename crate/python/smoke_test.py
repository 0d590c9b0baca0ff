"""Smoke test for the plom_py extension module.

Build and install first:
    pip install --no-build-isolation ./crates/plom-py
then run:
    python python/smoke_test.py
"""

import json
import math

import plom_py


def main():
    s, s_hat, ratio = plom_py.bandwidths(1, 1200)
    assert abs(s_hat - 0.248589) < 1e-6, s_hat
    assert abs(ratio - s_hat / s) < 1e-15

    eta = plom_py.generate_synthetic("multiconnected-manifold", 3, 60, seed=2)
    assert len(eta) == 3 and len(eta[0]) == 60
    for row in eta:
        assert abs(sum(row) / len(row)) < 1e-8

    model = plom_py.GkdeModel(eta)
    assert (model.nu, model.n_d) == (3, 60)
    assert math.isfinite(model.log_pdf([0.0, 0.0, 0.0]))
    assert len(model.grad_log_pdf([0.1, 0.2, 0.3])) == 3

    db = plom_py.dmaps_basis(eta, jump_target=0.3)
    assert db.m == 4 and db.eps_dm > 0
    g = db.g
    assert len(g) == 60 and len(g[0]) == 4
    assert plom_py.subspace_angle(g, g) < 90.0
    assert plom_py.span_angle(g, g) < 1e-6

    tbs = plom_py.transient_bases(eta, db.eps_dm, [1, 3], kappa=30.0, n_mc=40, seed=1)
    assert [b.n for b in tbs] == [1, 3]
    print("angles:", [round(plom_py.subspace_angle(b.g, g), 3) for b in tbs])

    learned = plom_py.plom(eta, g, n_mch=4, seed=3, m0=10)
    assert learned.n_mch == 4
    assert len(learned.eta_ar[0]) == 240
    assert 0.0 <= learned.d2 < 1.0
    assert abs(plom_py.concentration(learned.eta_ar, eta) - learned.d2) < 1e-12

    assert plom_py.kl_divergence(eta, eta) == 0.0
    print("MI:", plom_py.mutual_information(eta), "entropy:", plom_py.entropy(eta))

    constrained = plom_py.plom(
        eta, g, n_mch=20, seed=3, m0=10, constraints="diagonal", max_iter=5, hessian="chain-means"
    )
    assert 1 <= constrained.iterations <= 5
    assert len(constrained.err_trace) == constrained.iterations + 1

    try:
        plom_py.plom(eta, g, constraints="bogus")
    except ValueError:
        pass
    else:
        raise AssertionError("bad constraint mode accepted")

    config = """
seed = 11
n_steps = 3
n_mc = 40
jump_target = 0.3
mi_cap = 300

[input.synthetic]
kind = "multiconnected-manifold"
nu = 3
n_d = 60
seed = 2

[plom]
n_mch = 4
m0 = 10
"""
    record = json.loads(plom_py.run(config))
    assert record["schema_version"] == 1
    assert [r["name"] for r in record["regimes"]] == ["mcmc", "rodb", "rotb"]
    print("rotb instant:", record["rotb_instant"])

    err, lam = plom_py.reference(100)
    print("reference n_d=100: err_lambda =", round(err, 4))
    assert math.isfinite(err) and len(lam) >= 2

    print("plom_py", plom_py.__version__, "smoke test passed")


if __name__ == "__main__":
    main()
