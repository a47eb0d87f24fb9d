import numpy as np
import pytest
import torch

from vpfb.autodiff import Architecture, EnergyModel, param_grad
from vpfb.loss import (
    ABLATIONS,
    LossConfig,
    NumericalError,
    ablation_config,
    batch_loss,
    flow_matching_loss,
    ritz_core_loss,
    weighted_covariance,
)
from vpfb.perturbation import perturb
from vpfb.schedule import ScheduleParams

P = ScheduleParams()


class Const(EnergyModel):
    def __init__(self, c):
        super().__init__(Architecture(hidden=()))
        self.c = c

    def forward(self, x, t, c=None):
        return self.c + 0.0 * x.sum(dim=1) + 0.0 * t


class Scaled(EnergyModel):
    """k * base, to probe scaling behavior."""

    def __init__(self, base, k):
        super().__init__(base.arch)
        self.base, self.k = base, k

    def forward(self, x, t, c=None):
        return self.k * self.base(x, t, c)


@pytest.fixture
def batch(rng):
    n = 64
    return perturb(rng.normal(size=(n, 2)), rng.normal(size=(n, 2)), rng.uniform(0.01, 0.99, n), P)


@pytest.fixture
def model():
    return EnergyModel(Architecture(hidden=(16, 16)), seed=4)


def test_hand_computed_covariance():
    a = torch.tensor([1.0, 3.0], dtype=torch.float64)
    b = torch.tensor([2.0, 6.0], dtype=torch.float64)
    assert float(weighted_covariance(a, b).detach()) == 4.0


def test_batch_centering_reproduces_sample_covariance(batch, model):
    out = batch_loss(model, batch, LossConfig(centering="batch"), P)
    phi = model(torch.as_tensor(batch.x), torch.as_tensor(batch.t)).detach().numpy()
    wg = batch.w * batch.gamma
    assert float(out.covariance_term.detach()) == pytest.approx(np.cov(phi, wg, ddof=1)[0, 1], rel=1e-12)


def test_innovation_centering_uses_kernel_means(batch, model):
    out = batch_loss(model, batch, LossConfig(), P)
    phi = model(torch.as_tensor(batch.x), torch.as_tensor(batch.t)).detach().numpy()
    resid = batch.w * (batch.gamma - batch.gamma_mean)
    expected = np.sum((phi - phi.mean()) * resid) / (len(phi) - 1)
    assert float(out.covariance_term.detach()) == pytest.approx(expected, rel=1e-12)


def test_zero_network_terms(batch):
    m = EnergyModel(Architecture(hidden=(8,)), zero_init_output=True)
    out = batch_loss(m, batch, LossConfig(), P)
    for name in out.TERMS:
        assert float(getattr(out, name).detach()) == 0.0, name
    assert np.isnan(out.poincare_ratio)


def test_constant_network_terms(batch):
    out = batch_loss(Const(2.5), batch, LossConfig(), P)
    assert float(out.covariance_term.detach()) == pytest.approx(0.0, abs=1e-12)
    assert float(out.grad_norm_term.detach()) == 0.0 and float(out.time_grad_term.detach()) == 0.0
    assert float(out.poincare_term.detach()) == pytest.approx(P.eta * 6.25)


def test_total_is_sum_of_terms(batch, model):
    for name in ABLATIONS:
        out = batch_loss(model, batch, ablation_config(name), P)
        s = sum(float(getattr(out, t).detach()) for t in out.TERMS)
        assert float(out.total.detach()) == pytest.approx(s, rel=1e-12)


def test_ablation_switches(batch, model):
    assert float(batch_loss(model, batch, ablation_config("B"), P).covariance_term.detach()) == 0.0
    assert float(batch_loss(model, batch, ablation_config("C"), P).alignment_term.detach()) == 0.0
    d = batch_loss(model, batch, ablation_config("D"), P)
    _, gx, _ = __import__("vpfb.autodiff", fromlist=["input_grad"]).input_grad(model, batch.x, batch.t)
    expected = -(gx.detach().numpy() * batch.v_cond).sum(axis=1).mean()
    assert float(d.alignment_term.detach()) == pytest.approx(expected, rel=1e-12)
    e = batch_loss(model, batch, ablation_config("E"), P)
    assert float(e.total.detach()) == pytest.approx(float(flow_matching_loss(model, batch).detach()), rel=1e-12)
    with pytest.raises(ValueError):
        ablation_config("Z")


def test_covariance_shift_invariance(batch, model):
    base = float(batch_loss(model, batch, LossConfig(), P).covariance_term.detach())

    class Shifted(EnergyModel):
        def __init__(self):
            super().__init__(model.arch)

        def forward(self, x, t, c=None):
            return model(x, t) + 17.0

    assert float(batch_loss(Shifted(), batch, LossConfig(), P).covariance_term.detach()) == pytest.approx(base, abs=1e-10)


def test_scaling_behavior(batch, model):
    one = batch_loss(model, batch, LossConfig(), P)
    two = batch_loss(Scaled(model, 2.0), batch, LossConfig(), P)
    assert float(two.covariance_term.detach()) == pytest.approx(2 * float(one.covariance_term.detach()), rel=1e-12)
    assert float(two.poincare_term.detach()) == pytest.approx(4 * float(one.poincare_term.detach()), rel=1e-12)
    assert float(two.alignment_term.detach()) == pytest.approx(float(one.alignment_term.detach()), rel=1e-6)


def test_cosine_terms_bounded(batch, model):
    from vpfb.autodiff import input_grad

    _, gx, _ = input_grad(model, batch.x, batch.t, create_graph=False)
    v = torch.as_tensor(batch.v_cond)
    cos = (gx * v).sum(1) / ((gx.norm(dim=1) + 1e-8) * (v.norm(dim=1) + 1e-8))
    assert torch.all(cos.abs() <= 1.0)


def test_flow_matching_values(rng):
    n = 8
    b = perturb(rng.normal(size=(n, 2)), rng.normal(size=(n, 2)), np.full(n, 0.5), P)
    zero = EnergyModel(Architecture(hidden=(4,)), zero_init_output=True)
    expected = np.mean(np.sum(b.v_cond**2, axis=1))
    assert float(flow_matching_loss(zero, b).detach()) == pytest.approx(expected)


def test_flow_matching_unit_residual():
    # x_bar = 0, eps = (-1, 0): v_cond = sigma_dot * eps = (1, 0)
    b = perturb(np.zeros((4, 2)), np.tile([-1.0, 0.0], (4, 1)), np.full(4, 0.3), P)
    np.testing.assert_allclose(b.v_cond, np.tile([1.0, 0.0], (4, 1)))
    zero = EnergyModel(Architecture(hidden=(4,)), zero_init_output=True)
    assert float(flow_matching_loss(zero, b).detach()) == pytest.approx(1.0)


def test_flow_matching_perfect_fit():
    # all samples share t and x_bar = 0, so v_cond = sigma_dot * eps = -x / sigma ... a gradient field
    class Exact(EnergyModel):
        def __init__(self):
            super().__init__(Architecture(hidden=()))

        def forward(self, x, t, c=None):
            return -0.5 * (x**2).sum(dim=1) / (1 - t)

    rng = np.random.default_rng(0)
    b = perturb(np.zeros((16, 2)), rng.normal(size=(16, 2)), np.full(16, 0.4), P)
    assert float(flow_matching_loss(Exact(), b).detach()) == pytest.approx(0.0, abs=1e-20)


def test_ritz_core_trivial_models(rng):
    b = perturb(rng.normal(size=(16, 2)), rng.normal(size=(16, 2)), np.full(16, 0.5), P)
    zero = EnergyModel(Architecture(hidden=(4,)), zero_init_output=True)
    assert float(ritz_core_loss(zero, b, P).detach()) == 0.0
    assert float(ritz_core_loss(Const(3.0), b, P).detach()) == pytest.approx(0.0, abs=1e-12)


def test_ritz_core_requires_shared_time(batch, model):
    with pytest.raises(ValueError):
        ritz_core_loss(model, batch, P)


def test_small_batch_rejected(rng, model):
    b = perturb(rng.normal(size=(1, 2)), rng.normal(size=(1, 2)), np.array([0.5]), P)
    with pytest.raises(ValueError):
        batch_loss(model, b, LossConfig(), P)


def test_non_finite_term_identified(batch):
    class Bad(EnergyModel):
        def __init__(self):
            super().__init__(Architecture(hidden=()))

        def forward(self, x, t, c=None):
            return x[:, 0] / 0.0

    with pytest.raises(NumericalError) as err:
        batch_loss(Bad(), batch, LossConfig(), P)
    assert err.value.term == "phi"


def test_total_gradient_directional_fd(batch, model):
    cfg = LossConfig()
    g = param_grad(batch_loss(model, batch, cfg, P).total, model)
    theta = model.flat_params()
    gen = torch.Generator().manual_seed(0)
    for _ in range(8):
        u = torch.randn(theta.numel(), generator=gen, dtype=theta.dtype)
        u /= u.norm()
        vals = []
        for s in (1e-5, -1e-5):
            model.set_flat_params(theta + s * u)
            vals.append(float(batch_loss(model, batch, cfg, P).total.detach()))
        model.set_flat_params(theta)
        fd = (vals[0] - vals[1]) / 2e-5
        assert abs(float(g @ u) - fd) <= 1e-4 * abs(fd)


def test_config_validation():
    for kwargs in (dict(objective="x"), dict(alignment="dot"), dict(centering="none"), dict(eps_norm=0.0)):
        with pytest.raises(ValueError):
            LossConfig(**kwargs)
