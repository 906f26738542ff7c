"""Neural collapsed inference training.

The unconditional objective for a batch of sets is

    L = mean_j f(x_j; theta_j) - mean_j f(x~_j; theta_j)
        + (lam/2) mean_j |v_j|^2 - c H(q) - mean_j KL(q(theta | x_j) || N(0, I))

with ``theta_j`` drawn from the DeepSets posterior and ``(x~_j, v_j)`` from
the dynamics sampler conditioned on ``theta_j``.  The sampler takes descent
steps on ``L``; the energy and encoder take ascent steps.  For the ascent
step the sampler output is treated as a constant.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import ndgrad as ng
from .model import EnergyModel, kl_to_standard_normal
from .ndgrad import Tensor
from .sampler import DynamicsSampler, IndexFlowSampler, entropy_term, langevin_layer, SamplerState

log = logging.getLogger(__name__)

DENOISE_NOISE = 0.0
DENOISE_CLIP = 0.1


@dataclass
class TrainConfig:
    """Hyperparameters for training; defaults are the desk-scale settings."""

    iters: int = 1000
    batch_size: int = 64
    lr: float = 1e-4
    sampler_lr: float = 0.0          # 0 means: same as lr
    beta1: float = 0.0
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 1.0
    entropy_coeff: float = 1e-5
    steps: int = 20                  # dynamics layers T
    eta: float = 0.1
    noise_std: float = 0.05
    clip: float = 0.1
    block_size: int = 64
    mode: str = "langevin"
    first_order: bool = False
    sampler_steps: int = 1           # sampler updates per model update
    theta_dim: int = 16
    energy_hidden: tuple = (128, 64)
    encoder_hidden: tuple = (128, 256)
    sampler_hidden: tuple = (64, 128)
    sampler_state: int = 64
    init_std: float = 0.1
    spectral_norm: bool = True
    # conditional models
    n_dual: int = 4                  # sampler draws per target index
    flow_layers: int = 10
    hyper_hidden: tuple = (64, 64)
    context_min: int = 3
    context_max: int = 20
    # bookkeeping
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        for name in ("batch_size", "lr", "beta2", "adam_eps", "eta", "block_size", "n_dual",
                     "sampler_steps", "theta_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.entropy_coeff < 0 or self.lam < 0 or self.iters < 0 or self.steps < 0:
            raise ValueError("entropy_coeff, lam, iters and steps must be nonnegative")
        if not 0 <= self.beta1 < 1:
            raise ValueError("beta1 must lie in [0, 1)")
        if self.mode not in ("langevin", "hamiltonian"):
            raise ValueError(f"unknown dynamics mode {self.mode!r}")
        for name in ("energy_hidden", "encoder_hidden", "sampler_hidden", "hyper_hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return {f.name: (list(v) if isinstance(v, tuple) else v)
                for f in dataclasses.fields(self) for v in [getattr(self, f.name)]}

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossReport:
    """Signed terms of the objective; ``total`` is their sum.

    ``data_term`` is the mean data energy and ``-sampler_term`` the mean
    sampler energy, so ``data_term + sampler_term`` is the energy gap.
    """

    total: float
    data_term: float
    sampler_term: float
    momentum_term: float
    entropy_term: float
    kl_term: float
    objective: Tensor = field(default=None, repr=False, compare=False)
    model_objective: Tensor = field(default=None, repr=False, compare=False)

    COLUMNS = ("total", "data_term", "sampler_term", "momentum_term", "entropy_term", "kl_term")

    @property
    def energy_gap(self):
        return self.data_term + self.sampler_term

    def row(self):
        return [getattr(self, c) for c in self.COLUMNS]


class TrainingDiverged(FloatingPointError):
    def __init__(self, report, step):
        super().__init__(f"non-finite loss at step {step}: {report}")
        self.report = report
        self.step = step


class Adam:
    """Adam over a named parameter table; ``maximize`` flips the step direction."""

    def __init__(self, params, lr=1e-4, beta1=0.0, beta2=0.999, eps=1e-8, maximize=False):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.maximize = maximize
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            if self.maximize:
                g = -g
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self, prefix):
        out = {f"{prefix}.m.{k}": v for k, v in self.m.items()}
        out.update({f"{prefix}.v.{k}": v for k, v in self.v.items()})
        out[f"{prefix}.t"] = np.array(float(self.t))
        return out

    def load_state(self, tensors, prefix):
        for k in self.params:
            self.m[k] = np.array(tensors[f"{prefix}.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(tensors[f"{prefix}.v.{k}"], dtype=np.float64)
        self.t = int(tensors[f"{prefix}.t"])


def _named_grads(objective, params):
    names = list(params)
    gs = ng.grad(objective, [params[k] for k in names], allow_unused=True)
    return {k: g.data for k, g in zip(names, gs)}


def _group_by_size(batch):
    """Split a list of (n_i, d) arrays into equal-cardinality stacks."""
    groups = {}
    for i, x in enumerate(batch):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError(f"set {i} must be a nonempty (n, d) array")
        groups.setdefault(x.shape[0], []).append(i)
    return [(idx, np.stack([np.asarray(batch[i], dtype=np.float64) for i in idx]))
            for _, idx in sorted(groups.items())]


def _as_batch(batch):
    if isinstance(batch, np.ndarray) and batch.ndim == 3:
        return [(list(range(batch.shape[0])), batch.astype(np.float64))]
    return _group_by_size(list(batch))


def nci_loss(batch, model, sampler, config, rng, samples=None, thetas=None):
    """Unconditional objective for a batch of sets.

    ``samples`` optionally replaces the sampler output: a ``SamplerState`` or
    an array shaped like the batch (momenta then zero, log-densities zero).
    ``thetas`` optionally fixes the latent draws.
    """
    groups = _as_batch(batch)
    total_sets = sum(len(idx) for idx, _ in groups)
    data_t = samp_t = mom_t = kl_t = model_samp = None
    states = []
    for idx, x in groups:
        B, n, _ = x.shape
        w = B / total_sets
        q = model.encode(x)
        theta = q.sample(rng) if thetas is None else ng._as_tensor(np.asarray(thetas)[idx])
        if samples is None:
            energy_fn = _bind_energy(model, theta)
            state = sampler(energy_fn, theta, n, rng)
        elif isinstance(samples, SamplerState):
            state = samples
        else:
            xs = np.asarray(samples, dtype=np.float64)
            xs = xs[idx] if xs.ndim == 3 else np.stack([xs[i] for i in idx])
            state = SamplerState(Tensor(xs), Tensor(np.zeros_like(xs)), Tensor(np.zeros(B)),
                                 Tensor(np.zeros(B)))
        states.append(state)
        d_e = ng.mul(ng.sum(model.set_energy(x, theta)), w / B)
        s_e = ng.mul(ng.sum(model.set_energy(state.x, theta)), w / B)
        s_e_detached = ng.mul(ng.sum(model.set_energy(state.x.detach(), theta)), w / B)
        v2 = ng.mul(ng.sum(ng.square(state.v)), 0.5 * config.lam * w / B)
        kl = ng.mul(ng.sum(kl_to_standard_normal(q)), w / B)
        data_t = d_e if data_t is None else ng.add(data_t, d_e)
        samp_t = s_e if samp_t is None else ng.add(samp_t, s_e)
        model_samp = s_e_detached if model_samp is None else ng.add(model_samp, s_e_detached)
        mom_t = v2 if mom_t is None else ng.add(mom_t, v2)
        kl_t = kl if kl_t is None else ng.add(kl_t, kl)
    ent = ng.mul(entropy_term(states), config.entropy_coeff)
    objective = ng.sub(ng.add(ng.sub(data_t, samp_t), mom_t), ng.add(ent, kl_t))
    model_objective = ng.sub(ng.sub(data_t, model_samp), kl_t)
    terms = [data_t.item(), -samp_t.item(), mom_t.item(), -ent.item(), -kl_t.item()]
    return LossReport(objective.item(), *terms, objective=objective,
                      model_objective=model_objective)


def _bind_energy(model, theta, t=None):
    def energy_fn(x):
        return model.element_energy(x, theta, t)
    return energy_fn


# -- conditional models -----------------------------------------------------
def _pad_context(ct, cx):
    """Stack ragged contexts by repeating each one's first element.

    Max pooling is idempotent, so the padding does not change the encoding.
    """
    size = max(len(c) for c in ct)
    pt, px = [], []
    for t, x in zip(ct, cx):
        reps = size - len(t)
        pt.append(np.concatenate([t, np.repeat(t[:1], reps, axis=0)]))
        px.append(np.concatenate([x, np.repeat(x[:1], reps, axis=0)]))
    return np.stack(pt), np.stack(px)


def conditional_loss(context, targets, model, index_sampler, config, rng, samples=None,
                     log_q=None):
    """Objective for a batch of conditional tasks.

    ``context`` and ``targets`` are lists of ``(t, x)`` array pairs, one per
    task, with ``t`` of shape ``(n, t_dim)`` and ``x`` of shape ``(n, x_dim)``.
    All target sets in a call share one size.  Per target index the
    partition term is handled by ``n_dual`` draws from the amortized sampler
    ``q'(x | t, theta)``; ``samples`` (shape ``(B, n, S, x_dim)``) and
    ``log_q`` (``(B, n, S)``) may replace them.
    """
    if not targets or any(len(t) == 0 for t, _ in targets):
        raise ValueError("conditional loss needs at least one target pair per task")
    tt = np.stack([np.asarray(t, dtype=np.float64) for t, _ in targets])
    tx = np.stack([np.asarray(x, dtype=np.float64) for _, x in targets])
    B, n, dx = tx.shape
    dt = tt.shape[2]
    ct, cx = _pad_context([np.asarray(t, dtype=np.float64) for t, _ in context],
                          [np.asarray(x, dtype=np.float64) for _, x in context])
    q = model.encode(cx, ct)
    theta = q.sample(rng)
    if samples is None:
        S = config.n_dual
        rows = ng.take(theta, np.repeat(np.arange(B), n))
        xs, lq = index_sampler(tt.reshape(B * n, dt), rows, S, rng)
        xs = ng.reshape(xs, (B, n * S, dx))
        lq = ng.reshape(lq, (B, n, S))
    else:
        xs = ng._as_tensor(samples)
        S = xs.shape[2]
        xs = ng.reshape(xs, (B, n * S, dx))
        lq = ng._as_tensor(np.zeros((B, n, S)) if log_q is None else log_q)
    t_rep = np.repeat(tt, S, axis=1)
    data_e = ng.mul(ng.sum(model.element_energy(tx, theta, tt)), 1.0 / B)
    samp_e = ng.mul(ng.sum(model.element_energy(xs, theta, t_rep)), 1.0 / (B * S))
    samp_e_det = ng.mul(ng.sum(model.element_energy(xs.detach(), theta, t_rep)), 1.0 / (B * S))
    # sum over indices of the per-index entropy estimate -E log q'
    ent = ng.mul(ng.sum(lq), -config.entropy_coeff / (B * S))
    kl = ng.mul(ng.sum(kl_to_standard_normal(q)), 1.0 / B)
    objective = ng.sub(ng.sub(data_e, samp_e), ng.add(ent, kl))
    model_objective = ng.sub(ng.sub(data_e, samp_e_det), kl)
    return LossReport(objective.item(), data_e.item(), -samp_e.item(), 0.0, -ent.item(),
                      -kl.item(), objective=objective, model_objective=model_objective)


# -- training loops ---------------------------------------------------------
class TrainState:
    """Everything needed to continue a run bitwise: modules, optimizers, RNG."""

    def __init__(self, config, model, sampler, kind="unconditional", rng=None):
        self.config, self.model, self.sampler, self.kind = config, model, sampler, kind
        self.rng = rng if rng is not None else np.random.Generator(
            np.random.Philox(np.random.SeedSequence(config.seed).spawn(3)[2]))
        lr_s = config.sampler_lr or config.lr
        self.model_opt = Adam(model.named_parameters(), config.lr, config.beta1, config.beta2,
                              config.adam_eps, maximize=True)
        self.sampler_opt = Adam(sampler.named_parameters(), lr_s, config.beta1, config.beta2,
                                config.adam_eps)
        self.step = 0
        self.history = []

    def tensors(self):
        out = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        out.update({f"sampler.{k}": v for k, v in self.sampler.state_dict().items()})
        out.update(self.model_opt.state("adam.model"))
        out.update(self.sampler_opt.state("adam.sampler"))
        return out

    def load_tensors(self, tensors):
        known = set(self.tensors())
        unknown = sorted(set(tensors) - known)
        if unknown:
            raise KeyError(f"unknown tensor name {unknown[0]!r}")
        self.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        self.sampler.load_state_dict({k[8:]: v for k, v in tensors.items()
                                      if k.startswith("sampler.")})
        self.model_opt.load_state(tensors, "adam.model")
        self.sampler_opt.load_state(tensors, "adam.sampler")


def save_state(path, state):
    """Write modules, optimizer moments, RNG state and step to ``path``."""
    header = {"config": state.config.to_dict(), "kind": state.kind,
              "x_dim": state.model.x_dim, "t_dim": state.model.t_dim,
              "seed": state.config.seed, "rng_state": ckpt.rng_state(state.rng),
              "step": state.step}
    ckpt.save(path, state.tensors(), header)


def load_state(path):
    """Rebuild a ``TrainState`` that continues exactly where ``save_state`` left off."""
    tensors, header = ckpt.load(path)
    try:
        config = TrainConfig.from_dict(header["config"])
        state = build_state(config, header["x_dim"], header["kind"], header["t_dim"] or 1)
        state.load_tensors(tensors)
        state.rng = ckpt.restore_rng(header["rng_state"])
        state.step = int(header["step"])
    except KeyError as exc:
        raise ckpt.CheckpointError(f"{path}: {exc.args[0]}") from exc
    return state


def build_state(config, x_dim, kind="unconditional", t_dim=1):
    """Fresh modules and optimizers for ``config``."""
    seeds = np.random.SeedSequence(config.seed).generate_state(2)
    if kind == "unconditional":
        model = EnergyModel(x_dim, config.theta_dim, 0, config.energy_hidden,
                            config.encoder_hidden, config.spectral_norm, config.init_std,
                            seed=int(seeds[0]))
        sampler = DynamicsSampler(x_dim, config.theta_dim, config.steps, config.eta, config.mode,
                                  config.noise_std, config.clip, config.block_size,
                                  config.sampler_state, config.sampler_hidden,
                                  config.first_order, seed=int(seeds[1]))
    elif kind == "conditional":
        model = EnergyModel(x_dim, config.theta_dim, t_dim, config.energy_hidden,
                            config.encoder_hidden, config.spectral_norm, config.init_std,
                            seed=int(seeds[0]))
        sampler = IndexFlowSampler(x_dim, t_dim, config.theta_dim, config.flow_layers,
                                   config.hyper_hidden, seed=int(seeds[1]))
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return TrainState(config, model, sampler, kind)


def _check(report, step):
    if not np.isfinite(report.total):
        raise TrainingDiverged(report, step)


def sampler_step(state, batch):
    """One descent step on the sampler parameters; returns the report."""
    report = nci_loss(batch, state.model, state.sampler, state.config, state.rng)
    _check(report, state.step)
    state.sampler_opt.step(_named_grads(report.objective, state.sampler_opt.params))
    return report


def train_step(state, batch):
    """One iteration of the alternating scheme for unconditional models."""
    cfg = state.config
    for _ in range(cfg.sampler_steps - 1):
        sampler_step(state, batch)
    report = nci_loss(batch, state.model, state.sampler, cfg, state.rng)
    _check(report, state.step)
    # both gradients are taken at the same point before either update
    g_s = _named_grads(report.objective, state.sampler_opt.params)
    g_m = _named_grads(report.model_objective, state.model_opt.params)
    state.sampler_opt.step(g_s)
    state.model_opt.step(g_m)
    state.model.update_spectral(1)
    return report


def _split_tasks(state, tasks):
    """Random context subsets; the targets are whole tasks."""
    cfg, rng = state.config, state.rng
    context, targets = [], []
    for t, x in tasks:
        n = len(t)
        size = int(rng.integers(min(cfg.context_min, n), min(cfg.context_max, n) + 1))
        pick = rng.permutation(n)[:size]
        context.append((t[pick], x[pick]))
        targets.append((t, x))
    return context, targets


def conditional_train_step(state, tasks):
    cfg = state.config
    for _ in range(cfg.sampler_steps - 1):
        report = conditional_loss(*_split_tasks(state, tasks), state.model, state.sampler, cfg,
                                  state.rng)
        _check(report, state.step)
        state.sampler_opt.step(_named_grads(report.objective, state.sampler_opt.params))
    report = conditional_loss(*_split_tasks(state, tasks), state.model, state.sampler, cfg,
                              state.rng)
    _check(report, state.step)
    g_s = _named_grads(report.objective, state.sampler_opt.params)
    g_m = _named_grads(report.model_objective, state.model_opt.params)
    state.sampler_opt.step(g_s)
    state.model_opt.step(g_m)
    state.model.update_spectral(1)
    return report


def train(dataset, config=None, state=None, iters=None, on_step=None, on_checkpoint=None):
    """Run the alternating minimax loop.

    ``dataset`` is an ``(N, n, d)`` array or list of ``(n_i, d)`` sets for
    unconditional models, or a list of ``(t, x)`` tasks for conditional ones
    (pass a conditional ``state``).  Returns the ``TrainState``; its
    ``history`` holds one ``LossReport`` per step.
    """
    if state is None:
        if config is None:
            raise ValueError("need a config or a state")
        first = dataset[0]
        state = build_state(config, np.asarray(first).shape[-1])
    cfg = state.config
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    iters = cfg.iters if iters is None else iters
    conditional = state.kind == "conditional"
    for _ in range(iters):
        pick = state.rng.choice(len(dataset), size=min(cfg.batch_size, len(dataset)),
                                replace=False)
        if conditional:
            report = conditional_train_step(state, [dataset[i] for i in pick])
        elif isinstance(dataset, np.ndarray):
            report = train_step(state, dataset[np.sort(pick)])
        else:
            report = train_step(state, [dataset[i] for i in np.sort(pick)])
        report.objective = report.model_objective = None
        state.history.append(report)
        state.step += 1
        if on_step is not None:
            on_step(state, report)
        if cfg.log_every and state.step % cfg.log_every == 0:
            log.info("step %d total %.5f gap %.5f", state.step, report.total, report.energy_gap)
        if cfg.checkpoint_every and on_checkpoint and state.step % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    return state


def write_history(path, history, start=0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step",) + LossReport.COLUMNS)
        for i, r in enumerate(history):
            w.writerow([start + i + 1] + [repr(v) for v in r.row()])


# -- prediction and denoising ----------------------------------------------
def predictive_energy(t, x_grid, context_t, context_x, model, n_theta=64, rng=None):
    """Monte Carlo ``E_{q(theta | context)} f(x, t; theta)`` on a grid of ``x`` values.

    Returns ``(energy, density)`` where ``density`` is the grid-normalized
    ``exp(energy)`` (a per-column softmax divided by the grid spacing).
    An empty context falls back to the prior ``theta ~ N(0, I)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x_grid = np.asarray(x_grid, dtype=np.float64)
    G = len(x_grid)
    xg = x_grid.reshape(G, -1)
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(1, -1), (G, model.t_dim))
    with ng.no_grad():
        if context_t is None or len(context_t) == 0:
            thetas = rng.standard_normal((n_theta, model.theta_dim))
        else:
            q = model.encode(np.asarray(context_x, dtype=np.float64).reshape(1, len(context_x), -1),
                             np.asarray(context_t, dtype=np.float64).reshape(1, len(context_t), -1))
            xi = rng.standard_normal((n_theta, model.theta_dim))
            thetas = q.mean.data + q.std.data * xi
        x_rep = np.broadcast_to(xg, (n_theta, G, xg.shape[1]))
        t_rep = np.broadcast_to(t_arr, (n_theta, G, model.t_dim))
        e = model.element_energy(x_rep, thetas, t_rep).data
    energy = e.mean(axis=0)
    return energy, normalize_column(energy, x_grid)


def normalize_column(energy, x_grid):
    """``exp(energy)`` normalized to integrate to one on a uniform grid."""
    dx = float(x_grid[1] - x_grid[0]) if len(x_grid) > 1 else 1.0
    z = energy - energy.max()
    p = np.exp(z)
    return p / (p.sum() * dx)


def predictive_heatmap(t_grid, x_grid, context_t, context_x, model, n_theta=64, seed=0):
    """Matrix of normalized predictive densities, one row per ``t``."""
    rng = np.random.default_rng(seed)
    rows = [predictive_energy(t, x_grid, context_t, context_x, model, n_theta, rng)[1]
            for t in t_grid]
    return np.array(rows)


def denoise(x, mask, model, steps=20, eta=0.1, noise_std=DENOISE_NOISE, clip=DENOISE_CLIP,
            rng=None):
    """Langevin refinement of the masked points of a set; other points stay fixed.

    The latent is re-encoded from the current set before every step and the
    posterior mean is used.  With the default ``noise_std=0`` each step is the
    clipped drift of a Langevin layer.
    """
    x = np.array(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x.shape[0],):
        raise ValueError("mask must have one entry per point")
    if not mask.any():
        warnings.warn("denoise called with an empty mask; nothing to do", stacklevel=2)
        return x
    rng = np.random.default_rng(0) if rng is None else rng
    for _ in range(steps):
        with ng.no_grad():
            theta = model.encode(x[None]).mean.detach()
        state = SamplerState(Tensor(x[None]), Tensor(np.zeros((1,) + x.shape)),
                             Tensor(np.zeros(1)), Tensor(np.zeros(1)))
        new = langevin_layer(state, _bind_energy(model, theta), eta, rng, noise_std, clip,
                             create_graph=False)
        x = np.where(mask[:, None], new.x.data[0], x)
    return x
