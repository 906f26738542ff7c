"""Energy networks, the DeepSets posterior encoder and the collapsed set energy.

Shapes follow one convention throughout: a batch of ``B`` sets with ``n``
elements of dimension ``d`` is a ``(B, n, d)`` array.  Element energies are
``(B, n)`` and set-level quantities are ``(B,)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .ndgrad import Tensor


class Module:
    """Minimal container of named parameters and non-trainable buffers."""

    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.children = {}

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        state = {k: p.data.copy() for k, p in self.named_parameters()}
        state.update({k: b.copy() for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        for key in state:
            if key not in own and key not in bufs:
                raise KeyError(f"unknown tensor name {key!r}")
        for key, p in own.items():
            if key not in state:
                raise KeyError(f"missing tensor {key!r}")
            _assign(p.data, state[key], key)
        for key, b in bufs.items():
            if key not in state:
                raise KeyError(f"missing tensor {key!r}")
            _assign(b, state[key], key)

    def zero_(self):
        for p in self.parameters():
            p.data[...] = 0.0


def _assign(dst, src, key):
    src = np.asarray(src, dtype=np.float64)
    if src.shape != dst.shape:
        raise ValueError(f"shape mismatch for {key!r}: {src.shape} vs {dst.shape}")
    dst[...] = src


def power_iteration(w, u, n_iter=1):
    """Refine the right singular vector estimate ``u`` of ``w`` in place.

    Returns ``(sigma, v)`` where ``v`` is the matching left vector and
    ``sigma = v^T w u`` estimates the top singular value.
    """
    for _ in range(n_iter):
        v = w @ u
        v /= np.linalg.norm(v) + 1e-12
        u[...] = w.T @ v
        u /= np.linalg.norm(u) + 1e-12
    v = w @ u
    v /= np.linalg.norm(v) + 1e-12
    return float(v @ w @ u), v


class Linear(Module):
    """Affine map ``x @ W + b`` with optional spectral normalization of ``W``.

    ``W`` is stored as ``(n_in, n_out)``.  With spectral normalization the
    forward pass uses ``W / sigma`` where ``sigma = v^T W u`` is computed from
    persisted power-iteration vectors; ``u`` and ``v`` are constants for
    differentiation.
    """

    def __init__(self, n_in, n_out, rng, spectral_norm=False, scale=None):
        super().__init__()
        scale = np.sqrt(2.0 / n_in) if scale is None else scale
        self.params["W"] = Tensor(rng.normal(0.0, scale, (n_in, n_out)), requires_grad=True)
        self.params["b"] = Tensor(np.zeros(n_out), requires_grad=True)
        self.spectral_norm = spectral_norm
        if spectral_norm:
            u = rng.normal(size=n_out)
            self.buffers["sn_u"] = u / np.linalg.norm(u)
            self.update_spectral(n_iter=20)

    @property
    def W(self):
        return self.params["W"]

    @property
    def b(self):
        return self.params["b"]

    def update_spectral(self, n_iter=1):
        if not self.spectral_norm:
            return None
        sigma, _ = power_iteration(self.W.data, self.buffers["sn_u"], n_iter)
        return sigma

    def weight(self):
        if not self.spectral_norm:
            return self.W
        u = self.buffers["sn_u"]
        v = self.W.data @ u
        v = v / (np.linalg.norm(v) + 1e-12)
        sigma = ng.sum(ng.mul(self.W, Tensor(np.outer(v, u))))
        return ng.div(self.W, sigma)

    def __call__(self, x):
        return ng.add(ng.matmul(x, self.weight()), self.b)


class MLP(Module):
    """ReLU network on the last axis; accepts ``(..., n_in)`` inputs."""

    def __init__(self, n_in, widths, rng, spectral_norm=False, final_activation=False):
        super().__init__()
        self.layers = []
        prev = n_in
        for i, w in enumerate(widths):
            layer = Linear(prev, w, rng, spectral_norm=spectral_norm)
            self.children[str(i)] = layer
            self.layers.append(layer)
            prev = w
        self.final_activation = final_activation

    def update_spectral(self, n_iter=1):
        return [layer.update_spectral(n_iter) for layer in self.layers]

    def __call__(self, x):
        lead = x.shape[:-1]
        h = ng.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1 or self.final_activation:
                h = ng.relu(h)
        if x.ndim != 2:
            h = ng.reshape(h, lead + (h.shape[-1],))
        return h


def canonical_order(data):
    """Per-set lexicographic order of the elements of a ``(B, n, k)`` array."""
    keys = np.moveaxis(np.asarray(data), -1, 0)[::-1]
    return np.lexsort(keys, axis=-1)


def _canonical(x):
    """Sort each set's elements canonically.

    Returns the sorted tensor and the index that restores input order.
    Row-wise network passes then see identical matrices for any
    permutation of the input, so their outputs agree bit for bit.
    """
    order = canonical_order(x.data)
    rows = np.arange(x.shape[0])[:, None]
    return ng.take(x, (rows, order)), (rows, np.argsort(order, axis=1))


def _rows_with_context(x, ctx):
    """Concatenate per-set context vectors ``ctx`` (B, c) onto every element of ``x`` (B, n, d)."""
    B, n, _ = x.shape
    idx = np.repeat(np.arange(B), n)
    rows = ng.take(ctx, idx)
    return ng.concat([ng.reshape(x, (B * n, x.shape[2])), rows], axis=1)


class EnergyNet(Module):
    """Element energy ``f(x, [t]; theta)``: an MLP on the concatenation ``(x, t, theta)``."""

    def __init__(self, x_dim, theta_dim, t_dim=0, hidden=(128, 64), rng=None,
                 spectral_norm=True):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.x_dim, self.theta_dim, self.t_dim = x_dim, theta_dim, t_dim
        self.mlp = MLP(x_dim + t_dim + theta_dim, tuple(hidden) + (1,), rng,
                       spectral_norm=spectral_norm)
        self.children["mlp"] = self.mlp

    def update_spectral(self, n_iter=1):
        return self.mlp.update_spectral(n_iter)

    def __call__(self, x, theta, t=None):
        """Element energies of shape ``(B, n)`` for ``x`` of shape ``(B, n, d)``."""
        x = ng._as_tensor(x)
        theta = ng._as_tensor(theta)
        if x.ndim != 3:
            raise ng.ShapeError(f"expected (B, n, d) elements, got {x.shape}")
        if x.shape[2] != self.x_dim:
            raise ng.ShapeError(f"element dimension {x.shape[2]} != {self.x_dim}")
        if theta.ndim == 1:
            theta = ng.reshape(theta, (1, -1))
        if theta.shape != (x.shape[0], self.theta_dim):
            raise ng.ShapeError(f"theta shape {theta.shape} does not match "
                                f"({x.shape[0]}, {self.theta_dim})")
        if self.t_dim:
            if t is None:
                raise ng.ShapeError("conditional energy needs index values t")
            x = ng.concat([x, ng._as_tensor(t)], axis=2)
        B, n = x.shape[:2]
        xs, restore = _canonical(x)
        h = ng.reshape(self.mlp(_rows_with_context(xs, theta)), (B, n))
        return ng.take(h, restore)


@dataclass
class PosteriorGaussian:
    """Diagonal Gaussian ``N(mean, std^2 I)`` over theta; ``std`` is shared across dims."""

    mean: Tensor
    std: Tensor

    def __post_init__(self):
        std = self.std.data
        if not np.all(np.isfinite(std)) or np.any(std <= 0):
            raise ValueError("posterior stddev must be finite and positive")

    def sample(self, rng):
        xi = rng.standard_normal(self.mean.shape)
        return ng.add(self.mean, ng.mul(self.std, Tensor(xi)))


def kl_to_standard_normal(q):
    """``KL(N(mu, sigma^2 I) || N(0, I))`` per batch row, shape ``(B,)``."""
    mu = q.mean if q.mean.ndim == 2 else ng.reshape(q.mean, (1, -1))
    d = mu.shape[1]
    std = q.std
    if np.any(std.data <= 0):
        raise ValueError("posterior stddev must be positive")
    var = ng.square(std)
    per_dim = ng.sub(ng.sub(var, 1.0), ng.mul(ng.log(std), 2.0))
    if std.size == 1:
        spread = ng.mul(ng.reshape(per_dim, ()), float(d))
    else:
        spread = ng.sum(ng.broadcast_to(per_dim, mu.shape), axis=1)
    return ng.mul(ng.add(ng.sum(ng.square(mu), axis=1), spread), 0.5)


class SetEncoder(Module):
    """DeepSets posterior ``q(theta | x_{1:n})``.

    Each element passes through a per-element ReLU map (width-1 convolutions
    in the original formulation), features are max-pooled across the set,
    and a linear head gives the mean.  The stddev is one learnable scalar.
    """

    def __init__(self, in_dim, theta_dim=16, hidden=(128, 256), rng=None, init_std=0.1):
        super().__init__()
        rng = np.random.default_rng(1) if rng is None else rng
        self.in_dim, self.theta_dim = in_dim, theta_dim
        self.phi = MLP(in_dim, hidden, rng, final_activation=True)
        self.head = Linear(hidden[-1], theta_dim, rng, scale=np.sqrt(1.0 / hidden[-1]))
        self.children["phi"] = self.phi
        self.children["head"] = self.head
        self.params["log_std"] = Tensor(np.array(np.log(init_std)), requires_grad=True)

    def __call__(self, x):
        x = ng._as_tensor(x)
        if x.ndim != 3:
            raise ng.ShapeError(f"expected (B, n, d) elements, got {x.shape}")
        if x.shape[1] == 0:
            raise ValueError("cannot encode an empty set")
        if x.shape[2] != self.in_dim:
            raise ng.ShapeError(f"element dimension {x.shape[2]} != {self.in_dim}")
        feats = self.phi(_canonical(x)[0])
        pooled = ng.max(feats, axis=1)
        mean = self.head(pooled)
        return PosteriorGaussian(mean, ng.exp(self.params["log_std"]))


def set_energy(energy, x, theta, t=None):
    """Mean element energy per set, ``(1/n) sum_i f(x_i; theta)``, shape ``(B,)``.

    The sum is accumulated in sorted order so that it is bitwise invariant to
    permutations of the elements.
    """
    x = ng._as_tensor(x)
    if x.ndim == 2:
        x = ng.reshape(x, (1,) + x.shape)
        if t is not None:
            t = ng.reshape(ng._as_tensor(t), (1,) + ng._as_tensor(t).shape)
    if x.shape[1] == 0:
        raise ValueError("set energy of an empty set")
    e = energy(x, theta, t)
    return ng.mul(ng.sorted_sum(e, axis=1), 1.0 / x.shape[1])


class CollapsedSetEnergy(Module):
    """Theta-free set energy ``sum_i f(x_i; sum_j phi(x_j))``."""

    def __init__(self, x_dim, pool_dim=16, phi_hidden=(128,), hidden=(128, 64), rng=None,
                 spectral_norm=True):
        super().__init__()
        rng = np.random.default_rng(2) if rng is None else rng
        self.phi = MLP(x_dim, tuple(phi_hidden) + (pool_dim,), rng)
        self.energy = EnergyNet(x_dim, pool_dim, hidden=hidden, rng=rng,
                                spectral_norm=spectral_norm)
        self.children["phi"] = self.phi
        self.children["energy"] = self.energy

    def update_spectral(self, n_iter=1):
        return self.energy.update_spectral(n_iter)

    def __call__(self, x):
        x = ng._as_tensor(x)
        if x.ndim == 2:
            x = ng.reshape(x, (1,) + x.shape)
        if x.shape[1] == 0:
            raise ValueError("set energy of an empty set")
        x = _canonical(x)[0]
        pooled = ng.sorted_sum(self.phi(x), axis=1)
        return ng.sorted_sum(self.energy(x, pooled), axis=1)


class EnergyModel(Module):
    """Parameter bundle: element energy net plus the DeepSets posterior encoder.

    ``t_dim > 0`` gives a conditional model whose encoder reads ``(t, x)``
    pairs and whose energy is ``f(x, t; theta)``.
    """

    def __init__(self, x_dim, theta_dim=16, t_dim=0, energy_hidden=(128, 64),
                 encoder_hidden=(128, 256), spectral_norm=True, init_std=0.1, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.x_dim, self.theta_dim, self.t_dim = x_dim, theta_dim, t_dim
        self.energy = EnergyNet(x_dim, theta_dim, t_dim, energy_hidden, rng, spectral_norm)
        self.encoder = SetEncoder(x_dim + t_dim, theta_dim, encoder_hidden, rng, init_std)
        self.children["energy"] = self.energy
        self.children["encoder"] = self.encoder

    def update_spectral(self, n_iter=1):
        return self.energy.update_spectral(n_iter)

    def element_energy(self, x, theta, t=None):
        return self.energy(x, theta, t)

    def set_energy(self, x, theta, t=None):
        return set_energy(self.energy, x, theta, t)

    def encode(self, x, t=None):
        x = ng._as_tensor(x)
        if t is not None:
            x = ng.concat([ng._as_tensor(t), x], axis=-1)
        return self.encoder(x)
