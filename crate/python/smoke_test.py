"""Import the extension and exercise the main entry points."""

import json

import pnlss


def main():
    model = pnlss.Model.vdp_truth()
    assert (model.n, model.m, model.p) == (2, 1, 1), model

    data = pnlss.generate("vdp", realizations=1, seed=1)[0]
    sim = model.simulate(data["u"], data["x0"])
    assert not sim["unstable"]
    assert pnlss.e_rms(data["y"], sim["y"]) < 1e-10

    again = pnlss.Model.from_json(model.to_json())
    assert again.to_json() == model.to_json()

    assert not pnlss.kruskal_ok(2, 2, 4)
    assert pnlss.kruskal_ok(3, 3, 2)

    points = [row[:2] for row in sim["x"][::4]]
    dec, diag = pnlss.decouple(model, points, r=3, restarts=2)
    assert dec.r_x == 3 and json.loads(diag)["e_f"] < 1e-6

    # 9 linear + 2 monomial coefficients, less the two diagonal state scalings
    assert pnlss.count_dof(model, data["u"]) == 9

    freq, db = pnlss.spectrum_db(data["y"], data["fs"])
    assert len(freq) == len(db) == len(data["y"]) // 2 + 1

    try:
        pnlss.Model.from_json("{}")
    except pnlss.PnlssError as e:
        assert "n" in str(e)
    else:
        raise AssertionError("schema error expected")

    print("smoke test passed:", dec)


if __name__ == "__main__":
    main()
