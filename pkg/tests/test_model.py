import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ebp import ndgrad as ng
from ebp.model import (CollapsedSetEnergy, EnergyModel, EnergyNet, Linear, PosteriorGaussian,
                       SetEncoder, kl_to_standard_normal, power_iteration, set_energy)
from ebp.ndgrad import Tensor
from fd import numeric_grad, rel_err


@pytest.fixture(scope="module")
def model():
    return EnergyModel(3, theta_dim=16, seed=0)


def test_single_element_set_energy_is_element_energy(model):
    x = np.random.default_rng(0).standard_normal((1, 1, 3))
    theta = np.random.default_rng(1).standard_normal((1, 16))
    assert model.set_energy(x, theta).item() == model.element_energy(x, theta).item()


def test_zero_network_gives_zero_energy():
    net = EnergyNet(3, 4, rng=np.random.default_rng(0), spectral_norm=False)
    net.zero_()
    x = np.random.default_rng(0).standard_normal((2, 5, 3))
    assert np.all(set_energy(net, x, np.ones((2, 4))).data == 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**31 - 1))
def test_permutation_invariance_exact(n, seed):
    model = _shared_model()
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, n, 3))
    perm = rng.permutation(n)
    xp = x[:, perm]
    theta = rng.standard_normal((2, 16))
    assert np.array_equal(model.set_energy(x, theta).data, model.set_energy(xp, theta).data)
    assert np.array_equal(model.encode(x).mean.data, model.encode(xp).mean.data)
    coll = _shared_collapsed()
    assert np.array_equal(coll(x).data, coll(xp).data)


_CACHE = {}


def _shared_model():
    if "m" not in _CACHE:
        _CACHE["m"] = EnergyModel(3, seed=5)
    return _CACHE["m"]


def _shared_collapsed():
    if "c" not in _CACHE:
        _CACHE["c"] = CollapsedSetEnergy(3, rng=np.random.default_rng(4))
    return _CACHE["c"]


def test_duplicated_element_leaves_encoder_mean_unchanged(model):
    x = np.random.default_rng(2).standard_normal((1, 7, 3))
    dup = np.concatenate([x, x[:, :1]], axis=1)
    assert np.array_equal(model.encode(x).mean.data, model.encode(dup).mean.data)


def test_zero_stddev_limit_gives_the_mean(model):
    x = np.random.default_rng(3).standard_normal((2, 5, 3))
    q = model.encode(x)
    q0 = PosteriorGaussian(q.mean, Tensor(np.array(1e-300)))
    assert np.array_equal(q0.sample(np.random.default_rng(0)).data, q.mean.data)
    with pytest.raises(ValueError):
        PosteriorGaussian(q.mean, Tensor(np.array(0.0)))


def test_encoder_rejects_empty_set(model):
    with pytest.raises(ValueError):
        model.encode(np.zeros((1, 0, 3)))
    with pytest.raises(ValueError):
        model.set_energy(np.zeros((1, 0, 3)), np.zeros((1, 16)))
    with pytest.raises(ng.ShapeError):
        model.set_energy(np.zeros((1, 4, 2)), np.zeros((1, 16)))


@pytest.mark.parametrize("mu,std,expected", [
    ([0.0], 1.0, 0.0),
    ([1.0], 1.0, 0.5),
    ([0.0], 2.0, 0.5 * (4 - 1 - np.log(4))),
])
def test_kl_closed_form(mu, std, expected):
    q = PosteriorGaussian(Tensor(np.array([mu])), Tensor(np.array(std)))
    assert np.isclose(kl_to_standard_normal(q).item(), expected, rtol=0, atol=1e-15)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mu, s = np.array([0.3, -1.2, 0.5]), 0.7
    th = mu + s * rng.standard_normal((400_000, 3))
    logq = -0.5 * ((th - mu) ** 2).sum(1) / s**2 - 3 * np.log(s)
    logp = -0.5 * (th ** 2).sum(1)
    mc = np.mean(logq - logp)
    kl = kl_to_standard_normal(PosteriorGaussian(Tensor(mu[None]), Tensor(np.array(s)))).item()
    assert abs(mc - kl) < 4 * np.std(logq - logp) / np.sqrt(len(th))


def test_collapsed_energy_constant_map():
    c = CollapsedSetEnergy(2, pool_dim=3, rng=np.random.default_rng(0), spectral_norm=False)
    c.phi.zero_()
    c.energy.zero_()
    c.energy.mlp.layers[-1].b.data[:] = 1.25
    x = np.random.default_rng(1).standard_normal((1, 6, 2))
    assert c(x).item() == 6 * 1.25


def test_collapsed_single_element():
    c = CollapsedSetEnergy(2, pool_dim=3, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((1, 1, 2))
    pooled = c.phi(Tensor(x)).data[:, 0]
    assert np.isclose(c(x).item(), c.energy(x, pooled).item(), rtol=0, atol=1e-14)


def test_set_energy_gradient_wrt_element(model):
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((1, 6, 3))
    theta = rng.standard_normal((1, 16))
    x = Tensor(x0, requires_grad=True)
    (g,) = ng.grad(ng.sum(model.set_energy(x, theta)), [x])
    fd = numeric_grad(lambda z: model.set_energy(z, theta).item(), x0)
    assert rel_err(g.data, fd) <= 1e-4


def test_gradients_reach_every_parameter(model):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 8, 3))
    q = model.encode(x)
    loss = ng.add(ng.sum(model.set_energy(x, q.sample(rng))), ng.sum(kl_to_standard_normal(q)))
    names, params = zip(*model.named_parameters())
    grads = ng.grad(loss, list(params))
    assert all(np.any(g.data != 0) for g in grads), names


@pytest.mark.parametrize("shape", [(5, 3), (64, 64), (256, 256), (128, 17)])
def test_spectral_norm_matches_svd(shape):
    rng = np.random.default_rng(shape[0])
    w = rng.standard_normal(shape)
    u = rng.standard_normal(shape[1])
    u /= np.linalg.norm(u)
    sigma, _ = power_iteration(w, u, 200)
    top = np.linalg.svd(w, compute_uv=False)[0]
    assert abs(sigma - top) / top <= 0.01


def test_normalized_weights_have_unit_top_singular_value():
    rng = np.random.default_rng(0)
    lin = Linear(32, 48, rng, spectral_norm=True)
    for _ in range(30):
        lin.update_spectral(1)
    top = np.linalg.svd(lin.weight().data, compute_uv=False)[0]
    assert top <= 1 + 1e-3


def test_state_dict_round_trip_and_unknown_key(model):
    sd = model.state_dict()
    other = EnergyModel(3, seed=9)
    other.load_state_dict(sd)
    assert all(np.array_equal(v, other.state_dict()[k]) for k, v in sd.items())
    with pytest.raises(KeyError, match="bogus"):
        other.load_state_dict({**sd, "bogus": np.zeros(1)})


def test_conditional_energy_requires_index():
    m = EnergyModel(1, theta_dim=4, t_dim=1, seed=0)
    with pytest.raises(ng.ShapeError):
        m.element_energy(np.zeros((1, 3, 1)), np.zeros((1, 4)))
    e = m.element_energy(np.zeros((1, 3, 1)), np.zeros((1, 4)), np.zeros((1, 3, 1)))
    assert e.shape == (1, 3)


def test_encoder_stddev_positive():
    enc = SetEncoder(3, 4, rng=np.random.default_rng(0))
    assert enc(np.zeros((1, 2, 3))).std.item() > 0
