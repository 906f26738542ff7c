"""Dual sampler ``q(x_{1:n}, v | theta)``.

A block-autoregressive Gaussian generator produces the initial set, then
``T`` unrolled Langevin or leapfrog layers move it along the energy gradient.
The log-density of the final state is tracked exactly: leapfrog layers are
volume preserving, and each Langevin layer contributes the density of its
injected noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .model import MLP, Linear, Module
from .ndgrad import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class SamplerState:
    """A batch of sets ``x`` (B, n, d), momenta ``v`` and log-densities (B,)."""

    x: Tensor
    v: Tensor
    log_q0: Tensor
    noise_log_density: Tensor
    max_abs_grad: float = 0.0

    def __post_init__(self):
        if self.x.shape != self.v.shape:
            raise ValueError(f"x {self.x.shape} and v {self.v.shape} differ in shape")

    @property
    def log_density(self):
        return ng.add(self.log_q0, self.noise_log_density)

    def replace(self, **kw):
        fields = dict(x=self.x, v=self.v, log_q0=self.log_q0,
                      noise_log_density=self.noise_log_density,
                      max_abs_grad=self.max_abs_grad)
        fields.update(kw)
        return SamplerState(**fields)


def gaussian_logpdf(x, mean, log_std, axes):
    """Sum of diagonal-Gaussian log-densities over ``axes``; all args are tensors."""
    z = ng.div(ng.sub(x, mean), ng.exp(log_std))
    per = ng.sub(ng.mul(ng.square(z), -0.5), ng.add(log_std, 0.5 * LOG_2PI))
    return ng.sum(per, axis=axes)


def _std_normal_logpdf(eps, axes):
    return -0.5 * (eps * eps).sum(axis=axes) - 0.5 * LOG_2PI * np.prod(
        [eps.shape[a] for a in axes])


def energy_gradient(energy_fn, x, create_graph=True):
    """``d/dx sum f(x_i)`` for element energies; returned tensor has x's shape."""
    if create_graph and x.requires_grad:
        with ng.enable_grad():
            e = energy_fn(x)
            return ng.grad(ng.sum(e), [x], create_graph=True)[0]
    leaf = Tensor(x.data, requires_grad=True)
    with ng.enable_grad():
        e = energy_fn(leaf)
        g = ng.grad(ng.sum(e), [leaf], create_graph=create_graph)[0]
    return g if create_graph else g.detach()


def _clipped(g, clip):
    return g if clip is None else ng.clip(g, -clip, clip)


def _checked(g, what):
    try:
        return ng.check_finite(g, what)
    except FloatingPointError as exc:
        raise FloatingPointError(f"{exc}; the energy has likely blown up") from None


def langevin_layer(state, energy_fn, eta, rng=None, noise_std=0.05, clip=0.1,
                   create_graph=True, xi=None):
    """One Langevin layer: ``v' = xi + (eta/2) grad f(x)``, ``x' = x + v'``.

    ``xi`` is drawn from ``N(0, noise_std^2)`` unless given; its log-density is
    added to ``noise_log_density``.  The energy gradient is clipped to
    ``[-clip, clip]`` elementwise before use.
    """
    eta_v = eta.data if isinstance(eta, Tensor) else eta
    if np.any(np.asarray(eta_v) <= 0):
        raise ValueError("step size must be positive")
    g = _checked(_clipped(energy_gradient(energy_fn, state.x, create_graph), clip),
                 "clipped energy gradient")
    if xi is None:
        xi = rng.normal(0.0, noise_std, state.x.shape) if noise_std > 0 else np.zeros(state.x.shape)
    xi = np.asarray(xi, dtype=np.float64)
    v = ng.add(Tensor(xi), ng.mul(g, ng.mul(eta, 0.5)))
    x = ng.add(state.x, v)
    if noise_std > 0:
        z = xi / noise_std
        logp = _std_normal_logpdf(z, (1, 2)) - np.log(noise_std) * z[0].size
    else:
        logp = np.zeros(state.x.shape[0])
    return state.replace(x=x, v=v, noise_log_density=ng.add(state.noise_log_density, Tensor(logp)),
                         max_abs_grad=float(np.max(np.abs(g.data), initial=0.0)))


def leapfrog_layer(state, energy_fn, eta, clip=None, create_graph=True):
    """One leapfrog step of Hamiltonian dynamics with potential ``-f``.

    Volume preserving, so the log-densities are carried over unchanged.
    """
    eta_v = eta.data if isinstance(eta, Tensor) else eta
    if np.any(np.asarray(eta_v) <= 0):
        raise ValueError("step size must be positive")
    half = ng.mul(eta, 0.5)
    g0 = _checked(_clipped(energy_gradient(energy_fn, state.x, create_graph), clip), "energy gradient")
    v_half = ng.add(state.v, ng.mul(g0, half))
    x = ng.add(state.x, ng.mul(v_half, eta))
    g1 = _checked(_clipped(energy_gradient(energy_fn, x, create_graph), clip), "energy gradient")
    v = ng.add(v_half, ng.mul(g1, half))
    big = float(max(np.max(np.abs(g0.data), initial=0.0), np.max(np.abs(g1.data), initial=0.0)))
    return state.replace(x=x, v=v, max_abs_grad=big)


class BlockInitSampler(Module):
    """Block-autoregressive Gaussian initial distribution ``q0(x_{1:n}, v | theta)``.

    A recurrent state emits the mean and log-stddev of the next ``k``
    elements (a ``k*d`` diagonal Gaussian) and is updated with the drawn
    block.  Momenta are standard normal.
    """

    def __init__(self, x_dim, theta_dim, block_size=64, state_dim=64, hidden=(64, 128), rng=None):
        super().__init__()
        rng = np.random.default_rng(3) if rng is None else rng
        self.x_dim, self.theta_dim, self.k = x_dim, theta_dim, block_size
        kd = block_size * x_dim
        self.h0 = Linear(theta_dim, state_dim, rng, scale=np.sqrt(1.0 / theta_dim))
        self.cell = Linear(state_dim + kd, state_dim, rng, scale=np.sqrt(1.0 / (state_dim + kd)))
        self.body = MLP(state_dim + theta_dim, tuple(hidden) + (2 * kd,), rng)
        # start the head small so the initial draws are close to N(0, I)
        self.body.layers[-1].W.data *= 0.1
        self.children.update(h0=self.h0, cell=self.cell, body=self.body)

    def __call__(self, theta, n, rng):
        if n <= 0:
            raise ValueError("number of elements must be positive")
        theta = ng._as_tensor(theta)
        if theta.ndim == 1:
            theta = ng.reshape(theta, (1, -1))
        B, d, k = theta.shape[0], self.x_dim, self.k
        n_blocks = -(-n // k)
        h = ng.tanh(self.h0(theta))
        blocks, log_q = [], None
        for b in range(n_blocks):
            out = self.body(ng.concat([h, theta], axis=1))
            mean, log_std = out[:, :k * d], out[:, k * d:]
            eps = rng.standard_normal((B, k * d))
            xb = ng.add(mean, ng.mul(ng.exp(log_std), Tensor(eps)))
            keep = min(k, n - b * k) * d
            lp = ng.sub(Tensor(-0.5 * (eps[:, :keep] ** 2) - 0.5 * LOG_2PI), log_std[:, :keep])
            lp = ng.sum(lp, axis=1)
            log_q = lp if log_q is None else ng.add(log_q, lp)
            blocks.append(xb)
            if b + 1 < n_blocks:
                h = ng.tanh(self.cell(ng.concat([h, xb], axis=1)))
        x = blocks[0] if len(blocks) == 1 else ng.concat(blocks, axis=1)
        if n_blocks * k != n:
            x = x[:, :n * d]
        x = ng.reshape(x, (B, n, d))
        v0 = rng.standard_normal((B, n, d))
        log_q = ng.add(log_q, Tensor(_std_normal_logpdf(v0, (1, 2))))
        return SamplerState(x=x, v=Tensor(v0), log_q0=log_q,
                            noise_log_density=Tensor(np.zeros(B)))


class DynamicsSampler(Module):
    """Initial sampler followed by ``T`` Langevin or leapfrog layers.

    The step size is learnable through ``log_eta``.  With ``first_order``
    the energy gradient inside the layers is treated as a constant, which is
    cheaper but stops gradients through the dynamics' dependence on ``x``.
    """

    def __init__(self, x_dim, theta_dim, steps=20, eta=0.1, mode="langevin", noise_std=0.05,
                 clip=0.1, block_size=64, state_dim=64, hidden=(64, 128), first_order=False,
                 seed=0):
        super().__init__()
        if mode not in ("langevin", "hamiltonian"):
            raise ValueError(f"unknown dynamics mode {mode!r}")
        rng = np.random.default_rng(seed)
        self.init = BlockInitSampler(x_dim, theta_dim, block_size, state_dim, hidden, rng)
        self.children["init"] = self.init
        self.params["log_eta"] = Tensor(np.array(np.log(eta)), requires_grad=True)
        self.steps, self.mode, self.noise_std, self.clip = steps, mode, noise_std, clip
        self.first_order = first_order

    @property
    def eta(self):
        return ng.exp(self.params["log_eta"])

    def __call__(self, energy_fn, theta, n, rng, steps=None):
        return run_dynamics(self, energy_fn, theta, n, rng, steps)


def run_dynamics(sampler, energy_fn, theta, n, rng, steps=None, mode=None):
    """Draw from ``q0`` and apply ``steps`` dynamics layers.

    ``energy_fn(x)`` must return element energies ``(B, n)`` for ``x`` of
    shape ``(B, n, d)`` with theta already bound.
    """
    steps = sampler.steps if steps is None else steps
    mode = sampler.mode if mode is None else mode
    state = sampler.init(theta, n, rng)
    eta = sampler.eta
    create = not sampler.first_order
    for _ in range(steps):
        if mode == "langevin":
            state = langevin_layer(state, energy_fn, eta, rng, sampler.noise_std, sampler.clip,
                                   create_graph=create)
        else:
            state = leapfrog_layer(state, energy_fn, eta, sampler.clip, create_graph=create)
    return state


def entropy_term(states):
    """Monte Carlo entropy estimate ``-mean(log q0 + sum log q(xi))`` over a batch."""
    if isinstance(states, SamplerState):
        states = [states]
    logs = [s.log_density for s in states]
    total = logs[0] if len(logs) == 1 else ng.concat(logs, axis=0)
    return ng.neg(ng.mean(total))


class IndexFlowSampler(Module):
    """Amortized per-index sampler ``q'(x | t, theta)`` for conditional models.

    A hyper-network maps ``(t, theta)`` to a Gaussian base and the parameters
    of a stack of planar flow layers, so ``q'`` can be multimodal while its
    density stays exact.
    """

    def __init__(self, x_dim, t_dim, theta_dim, n_layers=10, hidden=(64, 64), seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.x_dim, self.t_dim, self.n_layers = x_dim, t_dim, n_layers
        n_out = 2 * x_dim + n_layers * (2 * x_dim + 1)
        self.hyper = MLP(t_dim + theta_dim, tuple(hidden) + (n_out,), rng)
        self.hyper.layers[-1].W.data *= 0.1
        self.children["hyper"] = self.hyper

    def __call__(self, t, theta_rows, n_samples, rng, eps=None):
        """Draw ``n_samples`` values per row.

        Returns ``(x, log_q)`` with shapes ``(M, S, d)`` and ``(M, S)``.
        """
        t = ng._as_tensor(t)
        M, d, S = t.shape[0], self.x_dim, n_samples
        out = self.hyper(ng.concat([t, ng._as_tensor(theta_rows)], axis=1))
        mean = ng.reshape(out[:, :d], (M, 1, d))
        log_std = ng.reshape(out[:, d:2 * d], (M, 1, d))
        if eps is None:
            eps = rng.standard_normal((M, S, d))
        z = ng.add(mean, ng.mul(ng.exp(log_std), Tensor(eps)))
        log_q = ng.sub(Tensor(_std_normal_logpdf(eps, (2,))), ng.sum(log_std, axis=2))
        off = 2 * d
        for _ in range(self.n_layers):
            u = ng.reshape(out[:, off:off + d], (M, 1, d))
            w = ng.reshape(out[:, off + d:off + 2 * d], (M, 1, d))
            b = ng.reshape(out[:, off + 2 * d:off + 2 * d + 1], (M, 1))
            off += 2 * d + 1
            wu = ng.sum(ng.mul(w, u), axis=2, keepdims=True)
            # u_hat.w = softplus(w.u) - 1 > -1 keeps each layer invertible
            u_hat = ng.add(u, ng.mul(ng.sub(ng.sub(ng.softplus(wu), 1.0), wu),
                                     ng.div(w, ng.add(ng.sum(ng.square(w), axis=2, keepdims=True),
                                                      1e-12))))
            a = ng.tanh(ng.add(ng.sum(ng.mul(w, z), axis=2), b))
            z = ng.add(z, ng.mul(u_hat, ng.reshape(a, (M, S, 1))))
            uw = ng.reshape(ng.sum(ng.mul(u_hat, w), axis=2), (M, 1))
            det = ng.add(1.0, ng.mul(ng.sub(1.0, ng.square(a)), uw))
            log_q = ng.sub(log_q, ng.log(det))
        return z, log_q
