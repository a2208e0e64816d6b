"""Smoke test for the mlvamp Python extension."""

import json
import math

import mlvamp

RECIPE = {"dims": [8, 24, 24], "measurements": 16, "calibration_draws": 10}


def main():
    net = mlvamp.Network.synthetic(3, RECIPE)
    assert net.dims == [8, 24, 24, 16], net.dims
    assert net.num_layers == 3
    again = mlvamp.Network.from_json(net.to_json())
    assert again.dims == net.dims

    z = net.generate(5)
    assert [len(v) for v in z] == net.dims
    assert z == net.generate(5)

    out = mlvamp.run_engine(net, z[-1], {"max_iters": 20, "convergence_tol": 0.0}, z)
    assert len(out["estimates"]) == 3
    assert len(out["trace"]) == 40
    final = out["trace"][-1]["layers"][0]["nmse_db"]
    assert final < -3.0, final
    assert abs(mlvamp.nmse_db(out["estimates"][0], z[0]) - final) < 1e-9

    se = mlvamp.state_evolution(net, json.dumps({"max_iters": 20}))
    predicted = se["records"][-1]["layers"][0]["nmse_db"]
    assert math.isfinite(predicted)

    fp = mlvamp.matched_fixed_point(net)
    assert fp["residual"] <= 1e-8 and fp["converged"]

    res = mlvamp.run_experiment({"recipe": RECIPE, "engine": {"max_iters": 5, "convergence_tol": 0.0}, "trials": 2})
    assert len(res["rows"]) == 2 * 10 * 3
    assert not res["failures"]

    try:
        mlvamp.run_experiment({"trials": 0})
    except ValueError:
        pass
    else:
        raise AssertionError("trials=0 accepted")

    print(f"ok: final NMSE {final:.2f} dB, SE {predicted:.2f} dB")


if __name__ == "__main__":
    main()
