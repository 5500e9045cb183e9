"""Learning ``(A, alpha, lam)`` by differentiating through the unrolled network."""

import dataclasses
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import tensor_core as tc
from .errors import ConfigError, DomainError, ShapeError, UsageError
from .model import ALPHA_MIN, ModelParams, data_consistency_grad, unrolled_forward, reconstruct

PARAM_NAMES = ("A", "alpha", "lambda")


@dataclass(frozen=True)
class SparseSample:
    x_gt: np.ndarray
    support: tuple


@dataclass(frozen=True)
class TrainConfig:
    J: int = 32
    K: int = 64
    s: int = 4
    N: int = 10
    n_train: int = 512
    n_test: int = 128
    batch_size: int = 16
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha0: float = 0.05
    lambda0: float = 0.1
    noise_sigma: float = 0.0
    seed: int = 0
    learn_A: bool = True
    learn_alpha: bool = True
    learn_lambda: bool = True

    def validate(self):
        """Raise :class:`ConfigError` naming the first offending field."""
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.type in ("int", int) and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{f.name} must be an integer, got {value!r}", f.name)
            if f.type in ("float", float):
                if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                    raise ConfigError(f"{f.name} must be a finite number, got {value!r}", f.name)
            if f.type in ("bool", bool) and not isinstance(value, bool):
                raise ConfigError(f"{f.name} must be true or false, got {value!r}", f.name)
        for name in ("J", "K", "s", "n_train", "n_test", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}", name)
        checks = [
            ("N", self.N >= 0, "N must be >= 0"),
            ("s", self.s <= self.K, f"s must be <= K ({self.K})"),
            ("J", self.J <= self.K, f"J must be <= K ({self.K})"),
            ("batch_size", self.batch_size <= self.n_train, f"batch_size must be <= n_train ({self.n_train})"),
            ("lr", self.lr > 0, "lr must be > 0"),
            ("beta1", 0 <= self.beta1 < 1, "beta1 must be in [0, 1)"),
            ("beta2", 0 <= self.beta2 < 1, "beta2 must be in [0, 1)"),
            ("eps", self.eps > 0, "eps must be > 0"),
            ("alpha0", self.alpha0 >= ALPHA_MIN, f"alpha0 must be >= {ALPHA_MIN}"),
            ("lambda0", self.lambda0 >= 0, "lambda0 must be >= 0"),
            ("noise_sigma", self.noise_sigma >= 0, "noise_sigma must be >= 0"),
            ("seed", 0 <= self.seed < 2**64, "seed must be an unsigned 64-bit integer"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(f"{message}, got {getattr(self, name)!r}", name)
        return self

    @property
    def learnable(self):
        flags = (self.learn_A, self.learn_alpha, self.learn_lambda)
        return tuple(n for n, on in zip(PARAM_NAMES, flags) if on)

    @property
    def batches_per_epoch(self):
        return -(-self.n_train // self.batch_size)

    def seeds(self):
        """Split the master seed into (A init, dataset, noise) seeds."""
        return tuple(tc.split_seed(self.seed, 3))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        arrays = params_as_arrays(params)
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, 0)

    def copy(self):
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def params_as_arrays(params):
    return {"A": params.A, "alpha": np.array([params.alpha]), "lambda": np.array([params.lam])}


def generate_dataset(rng, count, K, s):
    """Draw ``count`` vectors of length ``K`` with ``s`` standard-normal nonzeros."""
    if not 1 <= s <= K:
        raise DomainError(f"sparsity must satisfy 1 <= s <= K, got s={s}, K={K}")
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count}")
    samples = []
    for _ in range(count):
        support = tuple(sorted(rng.sample(K, s)))
        x = tc.zeros(K)
        for i in support:
            x[i] = rng.normal()
        samples.append(SparseSample(x, support))
    return samples


def make_datasets(config):
    _, data_seed, _ = config.seeds()
    rng = tc.Rng(data_seed)
    train = generate_dataset(rng, config.n_train, config.K, config.s)
    test = generate_dataset(rng, config.n_test, config.K, config.s)
    return train, test


def init_params(config):
    """A with i.i.d. N(0, 1/J) entries, alpha and lambda from the config."""
    a_seed, _, _ = config.seeds()
    A = tc.scale(1.0 / math.sqrt(config.J), tc.randn_matrix(tc.Rng(a_seed), config.J, config.K))
    return ModelParams(A, config.alpha0, config.lambda0, config.N)


def loss_mse(x_N, x_gt):
    """Mean squared error ``||x_N - x_gt||^2 / K`` as a scalar node."""
    if x_N.shape != x_gt.shape:
        raise ShapeError(f"loss: shape mismatch {x_N.shape} vs {x_gt.shape}")
    target = x_gt if isinstance(x_gt, ad.Node) else ad.constant(x_N.tape, x_gt)
    return ad.record_scale(ad.record_sum_squares(ad.record_sub(x_N, target)), 1.0 / x_N.shape[0])


class ParamNodes(NamedTuple):
    A: ad.Node
    alpha: ad.Node
    lam: ad.Node


def params_to_tape(tape, params, learnable=PARAM_NAMES):
    return ParamNodes(
        ad.leaf(tape, params.A, "A" in learnable),
        ad.leaf(tape, [params.alpha], "alpha" in learnable),
        ad.leaf(tape, [params.lam], "lambda" in learnable),
    )


def batch_loss(tape, nodes, batch, N, noise=None, x0=None, dc_grad=data_consistency_grad):
    """Mean per-sample MSE of the unrolled network over ``batch``.

    Measurements are synthesized on the tape from the learnable ``A``.
    ``noise`` is an optional list of per-sample noise vectors, ``x0`` an
    optional list of initializations (zero by default).
    """
    total = None
    K = nodes.A.shape[1]
    x0_nodes = []
    for i, sample in enumerate(batch):
        y = ad.record_matvec(nodes.A, ad.constant(tape, sample.x_gt))
        if noise is not None:
            y = ad.record_add(y, ad.constant(tape, noise[i]))
        start = ad.constant(tape, tc.zeros(K) if x0 is None else x0[i])
        x0_node = ad.detach(start, tape, requires_grad=True)
        x0_nodes.append(x0_node)
        x_N = unrolled_forward(nodes.A, nodes.alpha, nodes.lam, x0_node, y, N, dc_grad)
        loss = loss_mse(x_N, sample.x_gt)
        total = loss if total is None else ad.record_add(total, loss)
    return ad.record_scale(total, 1.0 / len(batch)), x0_nodes


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, learnable=PARAM_NAMES):
    """One Adam update of the learnable parameters, then projection.

    ``grads`` maps "A", "alpha", "lambda" to arrays; missing entries count as
    zero. Returns new ``(params, state)``; the inputs are not modified.
    Afterwards ``alpha >= 1e-8`` and ``lambda >= 0``.
    """
    if lr <= 0:
        raise DomainError(f"lr must be > 0, got {lr}")
    current = params_as_arrays(params)
    t = state.t + 1
    m, v = dict(state.m), dict(state.v)
    new = dict(current)
    for name in learnable:
        p = current[name]
        if m[name].shape != p.shape or v[name].shape != p.shape:
            raise ShapeError(f"Adam state for {name} has shape {m[name].shape}, parameter {p.shape}")
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * (g * g)
        m_hat = m[name] / (1.0 - beta1 ** t)
        v_hat = v[name] / (1.0 - beta2 ** t)
        new[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    alpha = max(float(new["alpha"][0]), ALPHA_MIN)
    lam = max(float(new["lambda"][0]), 0.0)
    updated = ModelParams(new["A"], alpha, lam, params.N)
    return updated, AdamState(m, v, t)


@dataclass
class TrainState:
    """Everything needed to continue training: parameters, optimizer, progress."""

    params: ModelParams
    adam: AdamState
    epochs_done: int = 0


def initial_state(config):
    params = init_params(config)
    return TrainState(params, AdamState.zeros_like(params), 0)


def _noise_table(config, count):
    if config.noise_sigma == 0.0:
        return None
    _, _, noise_seed = config.seeds()
    rng = tc.Rng(noise_seed)
    return [tc.scale(config.noise_sigma, tc.randn_vector(rng, config.J)) for _ in range(count)]


def train(config, state=None, callback=None):
    """Train per ``config`` and return ``(params, metrics)``.

    ``metrics`` holds one dict per minibatch with keys epoch, batch,
    train_loss, alpha, lambda. Passing a :class:`TrainState` resumes from it;
    ``config.epochs`` is then the total epoch count. ``state`` is updated in
    place when given.
    """
    config.validate()
    if state is None:
        state = initial_state(config)
    train_set, _ = make_datasets(config)
    noise = _noise_table(config, len(train_set))
    learnable = config.learnable
    metrics = []
    for epoch in range(state.epochs_done, config.epochs):
        for b in range(config.batches_per_epoch):
            lo = b * config.batch_size
            batch = train_set[lo:lo + config.batch_size]
            batch_noise = None if noise is None else noise[lo:lo + config.batch_size]
            tape = ad.Tape()
            nodes = params_to_tape(tape, state.params, learnable)
            loss, _ = batch_loss(tape, nodes, batch, config.N, batch_noise)
            grads = ad.backward(tape, loss)
            named = {name: grads.get(node.id) for name, node in zip(PARAM_NAMES, nodes)}
            if learnable:
                state.params, state.adam = adam_step(
                    state.params, named, state.adam, config.lr,
                    config.beta1, config.beta2, config.eps, learnable)
            row = {
                "epoch": epoch,
                "batch": b,
                "train_loss": float(loss.value[0]),
                "alpha": state.params.alpha,
                "lambda": state.params.lam,
            }
            metrics.append(row)
            if callback is not None:
                callback(row)
        state.epochs_done = epoch + 1
    return state.params, metrics


def evaluate(params, testset, N=None):
    """Reconstruction quality of the unrolled network on ``testset``.

    Returns mean MSE, mean NMSE (zero-energy samples skipped) and the fraction
    of samples whose ``s`` largest-magnitude entries sit exactly on the true
    support with the true signs.
    """
    if len(testset) == 0:
        raise UsageError("evaluate needs a nonempty test set")
    N = params.N if N is None else N
    mse, nmse, hits = [], [], []
    for sample in testset:
        x_gt = sample.x_gt
        y = tc.matvec(params.A, x_gt)
        x_hat = reconstruct(params, y, N)
        err = tc.sum_squares(tc.sub(x_hat, x_gt))
        mse.append(err / x_gt.shape[0])
        energy = tc.sum_squares(x_gt)
        if energy > 0:
            nmse.append(err / energy)
        hits.append(_support_recovered(x_hat, x_gt, sample.support))
    return {
        "mse": math.fsum(mse) / len(mse),
        "nmse": math.fsum(nmse) / len(nmse) if nmse else float("nan"),
        "support_rate": sum(hits) / len(hits),
    }


def _support_recovered(x_hat, x_gt, support):
    s = len(support)
    top = np.argsort(-np.abs(x_hat), kind="stable")[:s]
    if set(top.tolist()) != set(support):
        return False
    idx = list(support)
    return bool(np.all(np.sign(x_hat[idx]) == np.sign(x_gt[idx])))
