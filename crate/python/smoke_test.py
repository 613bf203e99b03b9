"""Smoke test for the compiled `gxe` module: simulate, tune, predict."""

import math

import gxe


def predict(fit, z, x):
    out = []
    for zi, xi in zip(z, x):
        v = fit["intercept"] + sum(a * e for a, e in zip(fit["alpha"], zi))
        v += sum(b * g for b, g in zip(fit["beta"], xi))
        for k, row in enumerate(fit["eta"]):
            v += zi[k] * sum(c * g for c, g in zip(row, xi))
        out.append(v)
    return out


def main():
    sim = gxe.simulate("ar03-m1-linear", n=120, p=40, seed=7, test_n=60)
    tr, te = sim["train"], sim["test"]
    fit = gxe.tune(tr["y"], tr["z"], tr["x"], n_lambda1=20)
    assert fit["converged"]
    trace = fit["objective_trace"]
    assert all(b <= a + 1e-10 for a, b in zip(trace, trace[1:]))
    for js in fit["interactions"]:
        assert set(js) <= set(fit["main"]), "hierarchy violated"
    pred = predict(fit, te["z"], te["x"])
    pmse = sum((p - y) ** 2 for p, y in zip(pred, te["y"])) / len(pred)
    var = sum((y - sum(te["y"]) / len(te["y"])) ** 2 for y in te["y"]) / len(te["y"])
    assert pmse < var, (pmse, var)

    same = gxe.fit(tr["y"], tr["z"], tr["x"], fit["lambda1"], fit["lambda2"])
    assert same["main"] == fit["main"]

    ma = gxe.fit_marginal(tr["y"], tr["z"], tr["x"])
    assert len(ma["p_main"]) == 40

    surv = gxe.simulate("ar03-m1-aft", n=120, p=40, seed=7, test_n=60)
    st = surv["train"]
    sfit = gxe.tune(st["y"], st["z"], st["x"], status=st["status"], n_lambda1=15)
    c = gxe.concordance(predict(sfit, surv["test"]["z"], surv["test"]["x"]),
                        [math.log(t) for t in surv["test"]["y"]], surv["test"]["status"])
    assert 0.0 <= c <= 1.0

    assert gxe.km_weights([True, True, True, True]) == [0.25] * 4
    assert [round(v, 12) for v in gxe.bh_adjust([0.01, 0.04, 0.03])] == [0.03, 0.04, 0.04]
    j = gxe.spline_penalty(5)
    assert all(abs(sum(row)) < 1e-12 for row in j)
    try:
        gxe.fit([1.0, 2.0], [[0.0]], [[1.0], [2.0]], 0.1)
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch accepted")
    print(f"ok: {len(fit['main'])} main effects, pmse {pmse:.3f}, C {c:.3f}")


if __name__ == "__main__":
    main()
