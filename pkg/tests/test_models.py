import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentsim import SimConfig, get_preset, simulate
from agentsim.engine import registry
from agentsim.engine.division import sphere_diameter, sphere_volume
from agentsim.engine.simulation import Driver, Population
from agentsim.engine.store import behavior_mask
from agentsim.models.cells import ProliferationModel, TumorModel, spheroid_diameter
from agentsim.models.clustering import ClusteringModel, same_type_fraction
from agentsim.models.sir import INFECTED, RECOVERED, SUSCEPTIBLE, SirModel

BACKENDS = ["numba", "numpy"]


class FixedSir(SirModel):
    """SIR preset with a hand-placed population."""

    def __init__(self, positions, states, **overrides):
        super().__init__(**overrides)
        self._pos = np.asarray(positions, float)
        self._state = np.asarray(states, np.int32)

    def initial_population(self, seed):
        n = len(self._pos)
        beh = self.behaviors()
        cols = {"position": self._pos.copy(), "diameter": np.ones(n),
                "kind": np.full(n, registry.PERSON.tag, np.int32), "state": self._state.copy(),
                "rng_key": np.arange(n, dtype=np.uint64),
                "behavior_mask": np.full(n, behavior_mask(beh), np.uint32)}
        return Population(cols, [beh] * n)


class FixedTumor(TumorModel):
    def __init__(self, positions, diameters, ages, **overrides):
        super().__init__(**overrides)
        self._pos = np.asarray(positions, float)
        self._diam = np.asarray(diameters, float)
        self._age = np.asarray(ages, np.int32)

    def initial_population(self, seed):
        n = len(self._pos)
        beh = self.behaviors()
        cols = {"position": self._pos.copy(), "diameter": self._diam.copy(), "age": self._age.copy(),
                "kind": np.full(n, registry.TUMOR_CELL.tag, np.int32), "rng_key": np.arange(n, dtype=np.uint64),
                "behavior_mask": np.full(n, behavior_mask(beh), np.uint32)}
        return Population(cols, [beh] * n)


def run_states(model, steps, backend, **cfg):
    d = Driver(model, SimConfig(backend=backend, **cfg))
    try:
        d.run(steps)
        return d.view.column("state").copy(), d.view.column("position").copy()
    finally:
        d.close()


# -- SIR ---------------------------------------------------------------------

@pytest.mark.parametrize("backend", BACKENDS)
def test_certain_infection_within_radius(backend):
    m = FixedSir([[50, 50, 50], [52, 50, 50]], [SUSCEPTIBLE, INFECTED], infection_probability=1.0,
                 recovery_probability=0.0, max_movement=0.0)
    state, _ = run_states(m, 1, backend)
    assert state.tolist() == [INFECTED, INFECTED]


@pytest.mark.parametrize("backend", BACKENDS)
def test_no_infected_neighbor_keeps_susceptible(backend):
    m = FixedSir([[50, 50, 50], [60, 50, 50], [52, 50, 50]], [SUSCEPTIBLE, INFECTED, RECOVERED],
                 infection_probability=1.0, recovery_probability=0.0, max_movement=0.0)
    state, _ = run_states(m, 5, backend)
    assert state[0] == SUSCEPTIBLE


@pytest.mark.parametrize("backend", BACKENDS)
def test_recovered_never_reinfected(backend):
    m = FixedSir([[50, 50, 50], [51, 50, 50]], [RECOVERED, INFECTED], infection_probability=1.0,
                 recovery_probability=0.0, max_movement=0.0)
    state, _ = run_states(m, 10, backend)
    assert state.tolist() == [RECOVERED, INFECTED]


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("p_rec,expected", [(0.0, INFECTED), (1.0, RECOVERED)])
def test_recovery_extremes(backend, p_rec, expected):
    m = FixedSir([[10, 10, 10]], [INFECTED], recovery_probability=p_rec, max_movement=0.0)
    state, _ = run_states(m, 1, backend)
    assert state[0] == expected


def test_mean_infection_duration_measles():
    gamma = SirModel().params.recovery_probability
    n = 10000
    pos = np.tile([50.0, 50.0, 50.0], (n, 1))
    m = FixedSir(pos, np.full(n, INFECTED), infection_probability=0.0, max_movement=0.0)
    rep = simulate(m, 3000)
    infected = rep.series["infected"]
    assert infected[-1] == 0
    # every observation an agent spends infected counts one step of its infectious period
    mean_duration = float(np.sum(infected)) / n
    assert mean_duration == pytest.approx(1.0 / gamma, rel=0.03)
    assert 185 < mean_duration < 200


def test_initial_measles_counts():
    rep = simulate(SirModel(), 0)
    assert [rep.series[c][0] for c in ("susceptible", "infected", "recovered")] == [2000, 20, 0]


@pytest.mark.parametrize("backend", BACKENDS)
def test_movement_step_length(backend):
    pos = np.array([[20.0, 30.0, 40.0], [60.0, 60.0, 60.0]])
    m = FixedSir(pos, [SUSCEPTIBLE, SUSCEPTIBLE], infection_probability=0.0)
    _, after = run_states(m, 1, backend)
    step = np.linalg.norm(after - pos, axis=1)
    np.testing.assert_allclose(step, m.params.max_movement, rtol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_movement_wraps_on_torus(backend):
    pos = np.array([[99.9, 0.05, 50.0]] * 50)
    m = FixedSir(pos, [SUSCEPTIBLE] * 50, infection_probability=0.0)
    _, after = run_states(m, 3, backend)
    assert np.all(after >= 0.0) and np.all(after < 100.0)


def test_zero_movement_keeps_positions():
    pos = np.random.default_rng(0).uniform(0, 100, (30, 3))
    m = FixedSir(pos, [SUSCEPTIBLE] * 29 + [INFECTED], max_movement=0.0)
    _, after = run_states(m, 5, "numba")
    np.testing.assert_array_equal(after, pos)


@settings(max_examples=10)
@given(seed=st.integers(0, 2**31), n_s=st.integers(1, 150), n_i=st.integers(1, 20))
def test_sir_population_conserved(seed, n_s, n_i):
    rep = simulate(SirModel(n_susceptible=n_s, n_infected=n_i, space_length=30.0), 25, SimConfig(seed=seed))
    total = rep.series["susceptible"] + rep.series["infected"] + rep.series["recovered"]
    assert np.all(total == n_s + n_i)
    # susceptible never grows, recovered never shrinks
    assert np.all(np.diff(rep.series["susceptible"]) <= 0)
    assert np.all(np.diff(rep.series["recovered"]) >= 0)


def test_epidemic_dies_out():
    rep = simulate(SirModel(n_susceptible=200, n_infected=5, recovery_probability=0.2, space_length=40.0), 200)
    assert rep.series["infected"][-1] == 0


# -- proliferation ------------------------------------------------------------

def test_proliferation_single_division_plateau():
    # the behavior leaves the mother and is not copied, so each founder divides once
    counts = simulate(ProliferationModel(mechanics=False), 60).series["agents"]
    assert counts[0] == 27 and counts[-1] == 54
    assert set(np.unique(counts).tolist()) == {27.0, 54.0}


def test_proliferation_keeps_doubling_when_behavior_is_copied():
    m = ProliferationModel(mechanics=False, copy_on_division=True, remove_on_division=False)
    counts = simulate(m, 60).series["agents"]
    # all founders share one clock, so the count is always 27 times a power of two
    gens = np.log2(counts / 27.0)
    np.testing.assert_array_equal(gens, np.round(gens))
    assert counts[-1] >= 216


def test_proliferation_division_conserves_volume():
    m = ProliferationModel(mechanics=False, cells_per_dim=1)
    d = Driver(m, SimConfig())
    try:
        while d.agent_count == 1:
            before = float(d.view.column("diameter")[0])
            d.step()
        diam = d.view.column("diameter")
        assert sphere_volume(diam[0]) + sphere_volume(diam[1]) == pytest.approx(sphere_volume(before), rel=1e-12)
    finally:
        d.close()


# -- tumor spheroid -----------------------------------------------------------

@pytest.mark.parametrize("backend", BACKENDS)
def test_old_cell_dies_with_certainty(backend):
    m = FixedTumor([[0, 0, 0], [40, 0, 0]], [14, 14], [87, 10], death_probability=1.0, division_probability=0.0)
    d = Driver(m, SimConfig(backend=backend))
    try:
        d.step()
        assert d.view.column("rng_key").tolist() == [1]
        assert d.view.column("age").tolist() == [11]
    finally:
        d.close()


@pytest.mark.parametrize("backend", BACKENDS)
def test_small_cell_grows_without_dividing(backend):
    m = FixedTumor([[0, 0, 0]], [12.0], [0], division_probability=1.0, displacement_rate=0.0)
    d = Driver(m, SimConfig(backend=backend))
    try:
        d.step()
        assert d.agent_count == 1
        assert d.view.column("diameter")[0] == pytest.approx(sphere_diameter(sphere_volume(12.0) + 42.0), rel=1e-12)
    finally:
        d.close()


@pytest.mark.parametrize("backend", BACKENDS)
def test_full_size_cell_divides_with_certainty(backend):
    m = FixedTumor([[0, 0, 0]], [14.0], [5], division_probability=1.0, displacement_rate=0.0)
    d = Driver(m, SimConfig(backend=backend))
    try:
        d.step()
        assert d.agent_count == 2
    finally:
        d.close()


def test_spheroid_diameter_single_cell():
    d = 12.0
    assert spheroid_diameter(np.zeros((1, 3)), np.array([d])) == pytest.approx(d * (6 / math.pi) ** (1 / 3))


def test_spheroid_diameter_coincident_cells():
    single = spheroid_diameter(np.zeros((1, 3)), np.array([10.0]))
    assert spheroid_diameter(np.zeros((5, 3)), np.full(5, 10.0)) == pytest.approx(single)


def test_spheroid_diameter_rejects_empty():
    with pytest.raises(ValueError):
        spheroid_diameter(np.zeros((0, 3)), np.zeros(0))


@given(pts=st.lists(st.tuples(*[st.floats(-50, 50)] * 3, st.floats(1, 20)), min_size=1, max_size=30),
       extra=st.lists(st.tuples(*[st.floats(-50, 50)] * 3, st.floats(1, 20)), min_size=1, max_size=5))
def test_spheroid_diameter_superset_not_smaller(pts, extra):
    a = np.array(pts)
    b = np.vstack([a, np.array(extra)])
    assert spheroid_diameter(b[:, :3], b[:, 3]) >= spheroid_diameter(a[:, :3], a[:, 3]) - 1e-9


@settings(max_examples=5)
@given(seed=st.integers(0, 2**31))
def test_spheroid_grows_monotonically_without_jitter_or_death(seed):
    # no cell can die before it reaches the minimum age, and without the random walk only growth moves cells
    m = TumorModel(n_cells=150, displacement_rate=0.0)
    rep = simulate(m, 60, SimConfig(seed=seed))
    assert np.all(np.diff(rep.series["diameter"]) >= 0.0)


def test_spheroid_jitter_shrinkage_is_bounded():
    m = TumorModel(n_cells=300)
    rep = simulate(m, 80)
    dec = -np.diff(rep.series["diameter"])
    # two sides of the box can each move in by one random step
    bound = 2.0 * m.params.displacement_rate * (6 / math.pi) ** (1 / 3)
    assert dec.max() <= bound + 1e-12


@pytest.mark.xfail(reason="cells past the minimum age die and the random walk can pull an edge cell inward",
                   strict=False)
def test_spheroid_diameter_nondecreasing_default_preset():
    rep = simulate(TumorModel(), 100)
    assert np.all(np.diff(rep.series["diameter"]) >= 0.0)


# -- clustering ---------------------------------------------------------------

def test_zero_gradient_weight_keeps_cells_still():
    m = ClusteringModel(n_cells=2, space_length=200.0, gradient_weight=0.0, resolution=16)
    pos = np.array([[20.0, 20, 20], [180, 20, 20], [20, 180, 20], [180, 180, 180]])

    class Fixed(ClusteringModel):
        def initial_population(self, seed):
            pop = m.initial_population(seed)
            pop.columns["position"] = pos.copy()
            return pop

    f = Fixed(m.params)
    d = Driver(f, SimConfig())
    try:
        rep = d.run(10)
        np.testing.assert_array_equal(d.view.column("position"), pos)
    finally:
        d.close()
    assert np.all(np.diff(rep.series["concentration_a"]) > 0)
    assert np.all(np.diff(rep.series["concentration_b"]) > 0)


@pytest.mark.slow
def test_clustering_order_grows_over_long_run():
    m = ClusteringModel(sample_every=6000)
    f = simulate(m, 6000).series["same_type_fraction"]
    assert len(f) == 2 and f[1] > f[0]


def _cluster_positions(pos, steps):
    m = ClusteringModel(n_cells=len(pos) // 2, space_length=200.0, resolution=32)

    class Fixed(ClusteringModel):
        def initial_population(self, seed):
            pop = m.initial_population(seed)
            pop.columns["position"] = np.array(pos, float)
            return pop

    d = Driver(Fixed(m.params), SimConfig())
    try:
        d.run(steps)
        return d.view.column("position").copy()
    finally:
        d.close()


def test_isolated_cell_drift_is_bounded():
    # even keys are type 0, odd keys type 1; each is alone with its own substance
    start = np.array([[100.0, 100, 100], [20, 20, 20]])
    end = _cluster_positions(start, 50)
    spacing = 200.0 / 32
    assert np.all(np.linalg.norm(end - start, axis=1) <= spacing)


def test_same_type_pair_approaches():
    start = [[90.0, 100, 100], [20, 20, 20], [115, 100, 100], [180, 180, 180]]
    end = _cluster_positions(start, 100)
    assert np.linalg.norm(end[0] - end[2]) < 25.0 - 3.0


def test_same_type_fraction_examples():
    pos = np.array([[0, 0, 0], [1, 0, 0], [100, 0, 0], [101, 0, 0]], float)
    assert same_type_fraction(pos, np.array([0, 0, 1, 1]), k=1) == 1.0
    assert same_type_fraction(pos, np.array([0, 1, 0, 1]), k=1) == 0.0


def test_unknown_preset():
    with pytest.raises(KeyError):
        get_preset("nope")


def test_preset_overrides():
    assert get_preset("sir", n_infected=3).params.n_infected == 3
