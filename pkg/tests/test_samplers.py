import numpy as np
import pytest
import torch

from vpfb.autodiff import Architecture, EnergyModel
from vpfb.samplers import (
    BoltzmannEnergy,
    OdeConfig,
    SamplerDivergence,
    SgldConfig,
    StepSizeUnderflow,
    flow_sample,
    integrate,
    sgld_sample,
    write_diagnostics_csv,
    write_trajectories_csv,
)
from vpfb.schedule import ScheduleParams

P = ScheduleParams()


class Quadratic(EnergyModel):
    """Phi = -|x|^2 / (2 tau): the flow is exponential decay x(T) = x0 exp(-T / tau)."""

    def __init__(self, tau=1.0):
        super().__init__(Architecture(hidden=()))
        self.tau = tau

    def forward(self, x, t, c=None):
        return -0.5 * (x**2).sum(dim=1) / self.tau + 0.0 * t


class Potential:
    """Phi_B = -|x|^2 / 2 wrapped in the energy_and_grad protocol used by sgld_sample."""

    def energy_and_grad(self, x):
        return -0.5 * np.sum(x**2, axis=1), -x


@pytest.mark.parametrize("method", ["euler", "rk4", "adaptive_rk45"])
def test_zero_field_is_identity(method, rng):
    m = EnergyModel(Architecture(hidden=(8,)), zero_init_output=True)
    x0 = rng.normal(size=(20, 2))
    res = flow_sample(m, x0, OdeConfig(method=method, steps=10), P)
    np.testing.assert_array_equal(res.samples, x0)


def test_euler_matches_exponential_decay_to_first_order(rng):
    x0 = rng.normal(size=(5, 2))
    res = flow_sample(Quadratic(), x0, OdeConfig(method="euler", horizon=1.0, steps=1000), P)
    err = np.max(np.abs(res.samples - x0 * np.exp(-1.0)))
    assert err < 1e-3 * np.max(np.abs(x0))


def _observed_order(method):
    x0 = np.array([[1.0, -0.5]])
    errs = []
    for h in (0.1, 0.05, 0.025):
        res = integrate(lambda x, t: -x, x0, OdeConfig(method=method, horizon=1.0, steps=round(1 / h)))
        errs.append(np.max(np.abs(res.samples - x0 * np.exp(-1.0))))
    return np.polyfit(np.log([0.1, 0.05, 0.025]), np.log(errs), 1)[0]


def test_solver_orders():
    assert abs(_observed_order("euler") - 1) < 0.5
    assert abs(_observed_order("rk4") - 4) < 0.5


def test_adaptive_solver_meets_tolerance():
    x0 = np.array([[2.0, 1.0]])
    # time-dependent linear field: x' = -2 t x  =>  x(T) = x0 exp(-T^2)
    res = integrate(lambda x, t: -2 * t * x, x0, OdeConfig(method="adaptive_rk45", horizon=1.5, rtol=1e-8, atol=1e-10))
    np.testing.assert_allclose(res.samples, x0 * np.exp(-2.25), rtol=1e-6)
    assert res.n_steps > 0


def test_adaptive_underflow_reported():
    x0 = np.array([[1.0]])
    with pytest.raises(StepSizeUnderflow):
        integrate(lambda x, t: x**2, x0, OdeConfig(method="adaptive_rk45", horizon=2.0, max_steps=5000))


def test_trajectory_recording(rng):
    x0 = rng.normal(size=(3, 2))
    res = integrate(lambda x, t: -x, x0, OdeConfig(method="rk4", steps=10, record_trajectory=True, record_every=2))
    assert len(res.trajectory) == 6 and len(res.times) == 6
    np.testing.assert_array_equal(res.trajectory[0], x0)
    assert res.times[-1] == pytest.approx(1.575)


def test_field_time_argument_is_clamped():
    seen = []

    class Recorder(EnergyModel):
        def __init__(self):
            super().__init__(Architecture(hidden=()))

        def forward(self, x, t, c=None):
            seen.append(float(t.max().detach()))
            return 0.0 * x.sum(dim=1)

    flow_sample(Recorder(), np.zeros((2, 2)), OdeConfig(method="euler", steps=20, horizon=1.575), P)
    assert max(seen) == P.t_max


def test_boltzmann_zero_potential():
    m = EnergyModel(Architecture(hidden=(4,)), zero_init_output=True)
    be = BoltzmannEnergy.from_model(m, P)
    assert be.energy(np.zeros((1, 2)))[0] == 0.0
    be_half = BoltzmannEnergy.from_model(m, ScheduleParams(t_max=0.5))
    assert be_half.energy(np.array([[1.0, 0.0]]))[0] == pytest.approx(-1.0)


def test_boltzmann_grad_finite_differences(rng):
    m = EnergyModel(Architecture(hidden=(16, 16)), seed=2)
    be = BoltzmannEnergy.from_model(m, ScheduleParams(t_max=0.7))
    x = rng.normal(size=(6, 2))
    h = 1e-5
    fd = np.stack([(be.energy(x + h * e) - be.energy(x - h * e)) / (2 * h) for e in np.eye(2)], 1)
    np.testing.assert_allclose(be.grad(x), fd, rtol=1e-5)
    e, g = be.energy_and_grad(x)
    np.testing.assert_allclose(e, be.energy(x))
    np.testing.assert_allclose(g, be.grad(x))


def test_boltzmann_composition_formula(rng):
    m = EnergyModel(Architecture(hidden=(8,)), seed=1)
    be = BoltzmannEnergy.from_model(m, P)
    x = rng.normal(size=(4, 2))
    with torch.no_grad():
        phi = m(torch.as_tensor(x), torch.full((4,), P.t_max, dtype=torch.float64)).numpy()
    np.testing.assert_allclose(be.energy(x), (4 * phi + be.f_inf * np.sum(x**2, 1)) / be.g_inf_sq, rtol=1e-12)


def test_conditional_composition_averages_classes(rng):
    m = EnergyModel(Architecture(hidden=(8,), num_classes=3), seed=0)
    x = rng.normal(size=(5, 2))
    single = [BoltzmannEnergy.from_model(m, P, classes=c).steady_potential(x) for c in range(3)]
    both = BoltzmannEnergy.from_model(m, P, classes=(0, 2)).steady_potential(x)
    np.testing.assert_allclose(both, 0.5 * (single[0] + single[2]))
    with pytest.raises(ValueError):
        BoltzmannEnergy.from_model(m, P).energy(x)


def test_sgld_fixed_point_without_noise_or_gradient():
    class Flat:
        def energy_and_grad(self, x):
            return np.zeros(len(x)), np.zeros_like(x)

    x0 = np.array([[0.3, -1.0]])
    res = sgld_sample(Flat(), x0, SgldConfig(step_size=0.1, steps=50, temperature=1e-300), np.random.default_rng(0))
    np.testing.assert_allclose(res.samples, x0)


def test_sgld_ou_stationary_law():
    dt, lam = 0.1, 0.5
    rng = np.random.default_rng(1)
    res = sgld_sample(Potential(), rng.normal(size=(20000, 2)), SgldConfig(step_size=dt, steps=300, temperature=lam), rng)
    var_exact = 2 * lam**2 / (2 - dt)  # discretized OU: x <- (1 - dt) x + sqrt(2 dt) lam eps
    np.testing.assert_allclose(res.samples.var(axis=0), var_exact, rtol=0.05)
    se = np.sqrt(var_exact / 20000)
    assert np.all(np.abs(res.samples.mean(axis=0)) < 4 * se)


def test_sgld_diagnostics_recorded():
    rng = np.random.default_rng(2)
    x0 = 3 + rng.normal(size=(100, 2))
    res = sgld_sample(Potential(), x0, SgldConfig(step_size=0.05, steps=200, temperature=0.1, record_every=50), rng)
    assert res.grad_norm.shape == (200,) and res.energy_norm.shape == (200,)
    assert res.grad_norm[-20:].mean() < 0.25 * res.grad_norm[:20].mean()
    assert len(res.trajectory) == 5


def test_sgld_divergence_guard():
    class Repulsive:
        def energy_and_grad(self, x):
            return np.sum(x**2, 1), 100 * x

    with pytest.raises(SamplerDivergence):
        sgld_sample(Repulsive(), np.ones((2, 2)), SgldConfig(step_size=0.1, steps=100, max_radius=50),
                    np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        OdeConfig(method="midpoint")
    with pytest.raises(ValueError):
        OdeConfig(horizon=0.0)
    with pytest.raises(ValueError):
        SgldConfig(temperature=0.0)
    with pytest.raises(ValueError):
        SgldConfig(step_size=-1.0)


def test_csv_writers(tmp_path):
    traj = [np.zeros((2, 2)), np.ones((2, 2))]
    p = write_trajectories_csv(tmp_path / "t.csv", traj, times=[0.0, 1.0])
    lines = p.read_text().splitlines()
    assert lines[0] == "step,chain,t,x1,x2" and len(lines) == 5
    d = write_diagnostics_csv(tmp_path / "d.csv", [1.0, 0.5], [2.0, 1.0])
    assert d.read_text().splitlines()[0] == "step,grad_norm_mean,energy_norm_mean"
