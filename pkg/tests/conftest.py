import numpy as np
import pytest

from gradmap import devices, feeder, rollout


def one_agent_fleet(kind="battery", bus="load", **params):
    defaults = {
        "battery": dict(e_max=10.0, p_max=5.0, e_target=6.0),
        "heatpump": dict(r=2.0, c=4.0, cop=3.0, p_max=3.0, theta_set=20.0, delta=2.0, theta_target=19.5),
        "generator": dict(p_min=0.0, p_max=5.0, ramp_dn=-2.0, ramp_up=2.0, fuel_a=0.1, fuel_b=0.01),
    }[kind]
    defaults.update(params)
    return devices.fleet_from_dict({"agents": [{"id": "x", "type": kind, "bus": bus, "phase": "a",
                                                "params": defaults}]})


def flat_exog(B, T, N, load=0.0, pv=0.0, temp=10.0, imp=0.2, exp=0.08):
    return {
        "load": np.full((B, T, N), load), "pv": np.full((B, T, N), pv), "temp": np.full((B, T), temp),
        "price_import": np.full((B, T), imp), "price_export": np.full((B, T), exp),
        "stats": {"net_demand": (-1.0, 1.0), "price_import": (0.0, 0.5), "price_export": (0.0, 0.2),
                  "temp": (0.0, 20.0)},
    }


@pytest.fixture(scope="session")
def desk_env():
    fleet = devices.load_bundled_fleet("desk10")
    return rollout.Environment(fleet, feeder.load_bundled_feeder("small4bus"), 1.0)
