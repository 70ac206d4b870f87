import pytest

from hadmc.scenario import ChargePointSpec, DeploymentSpec, Point2D, PoISpec, SystemParams


def make_spec(pois, chargers, params=None, tag="custom"):
    """pois: (x, y, tau_min, tau_max); chargers: (x, y), the first being the depot."""
    return DeploymentSpec(
        pois=tuple(PoISpec(Point2D(x, y), tmin, tmax) for x, y, tmin, tmax in pois),
        charge_points=tuple(ChargePointSpec(Point2D(x, y), k == 0) for k, (x, y) in enumerate(chargers)),
        params=params or SystemParams(),
        scenario_tag=tag,
        rng_seed=0,
    )


@pytest.fixture
def two_poi_spec():
    # depot at the origin, p1 100 to the east, c1 100 north of p1
    return make_spec([(100, 0, 4, 6), (300, 0, 4, 6)], [(0, 0), (100, 100)])
