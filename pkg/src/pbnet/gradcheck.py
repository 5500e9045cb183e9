"""Finite-difference and two-path checks of the training gradients.

Two independent checks run on small random instances:

* end to end: autodiff gradients of the batch loss w.r.t. A, alpha, lambda and
  the initializations x0 against central differences of the forward pipeline;
* path equivalence: the closed-form data-consistency gradient against the one
  produced by differentiating a recorded ``||A x - y||^2`` with a
  graph-creating backward pass, compared on the layer values and on the
  resulting training gradients.

Instances whose soft-threshold inputs come within ``KINK_MARGIN`` of the
threshold are screened out, since the loss is not differentiable there.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensor_core as tc
from .model import ModelParams, data_consistency_grad, data_consistency_grad_autodiff
from .training import SparseSample, batch_loss, params_to_tape

FD_STEP = 1e-6
KINK_MARGIN = 1e-3
# Entries whose magnitude is below this are compared absolutely, not relatively.
REL_FLOOR = 1e-6
END_TO_END_TOL = 1e-5
PATH_TOL = 1e-10
GROUPS = ("A", "alpha", "lambda", "x0")
MAX_SIZES = {"J": 8, "K": 12, "N": 5}


def rel_err(a, b, floor=REL_FLOOR):
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_diff(f, x, h=FD_STEP):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
    return grad


@dataclass
class Instance:
    params: ModelParams
    batch: list
    x0: list


def random_instance(seed, J=4, K=6, N=3, batch_size=2, s=2):
    """Random A ~ N(0, 1/J), alpha, lambda and a batch of sparse samples."""
    rng = tc.Rng(seed)
    A = tc.scale(1.0 / math.sqrt(J), tc.randn_matrix(rng, J, K))
    alpha = 0.05 + 0.1 * rng.uniform()
    lam = 0.05 + 0.3 * rng.uniform()
    batch = []
    for _ in range(batch_size):
        support = tuple(sorted(rng.sample(K, s)))
        x = tc.zeros(K)
        for i in support:
            x[i] = rng.normal()
        batch.append(SparseSample(x, support))
    x0 = [tc.zeros(K) for _ in range(batch_size)]
    return Instance(ModelParams(A, alpha, lam, N), batch, x0)


def _loss_and_grads(inst, dc_grad=data_consistency_grad):
    tape = ad.Tape()
    nodes = params_to_tape(tape, inst.params)
    loss, x0_nodes = batch_loss(tape, nodes, inst.batch, inst.params.N, x0=inst.x0, dc_grad=dc_grad)
    grads = ad.backward(tape, loss)
    zero = lambda n: grads.get(n.id, np.zeros_like(n.value))
    out = {
        "A": zero(nodes.A),
        "alpha": zero(nodes.alpha),
        "lambda": zero(nodes.lam),
        "x0": np.stack([zero(n) for n in x0_nodes]),
    }
    return tape, loss, out


def forward_loss(inst):
    tape = ad.Tape()
    nodes = params_to_tape(tape, inst.params, learnable=())
    loss, _ = batch_loss(tape, nodes, inst.batch, inst.params.N, x0=inst.x0)
    return float(loss.value[0])


def kink_distance(tape):
    """Smallest ``| |z_i| - tau |`` over all soft-threshold nodes on ``tape``."""
    best = math.inf
    for node in tape.nodes:
        if node.op == "soft_threshold":
            z = tape.nodes[node.parents[0]].value
            tau = tape.nodes[node.parents[1]].value[0]
            best = min(best, float(np.min(np.abs(np.abs(z) - tau))))
    return best


def finite_difference_grads(inst, h=FD_STEP):
    p = inst.params

    def with_params(A=p.A, alpha=p.alpha, lam=p.lam, x0=None):
        return Instance(ModelParams(A, alpha, lam, p.N), inst.batch, inst.x0 if x0 is None else list(x0))

    return {
        "A": central_diff(lambda A: forward_loss(with_params(A=A)), p.A, h),
        "alpha": central_diff(lambda a: forward_loss(with_params(alpha=a[0])), [p.alpha], h),
        "lambda": central_diff(lambda l: forward_loss(with_params(lam=l[0])), [p.lam], h),
        "x0": central_diff(lambda X: forward_loss(with_params(x0=X)), np.stack(inst.x0), h),
    }


def screened_instances(seed, count, J=4, K=6, N=3, batch_size=2, margin=KINK_MARGIN, max_tries=1000):
    """Yield ``(instance seed, Instance)`` pairs that stay clear of threshold kinks."""
    found = 0
    for candidate in tc.split_seed(seed, max_tries):
        inst = random_instance(candidate, J, K, N, batch_size)
        tape, _, _ = _loss_and_grads(inst)
        if kink_distance(tape) < margin:
            continue
        yield candidate, inst
        found += 1
        if found == count:
            return
    raise RuntimeError(f"only {found} of {count} kink-free instances in {max_tries} tries")


def end_to_end_errors(inst):
    """Max relative error per parameter group, autodiff vs central differences."""
    _, _, auto = _loss_and_grads(inst)
    fd = finite_difference_grads(inst)
    return {g: float(np.max(rel_err(auto[g], fd[g]))) for g in GROUPS}


def path_errors(inst):
    """Compare closed-form and autodiff data-consistency gradients.

    Returns ``{"z": max abs difference of first-layer gradients, group: max
    relative error of training gradients}``.
    """
    p = inst.params
    tape = ad.Tape()
    A = ad.leaf(tape, p.A, True)
    x = ad.leaf(tape, inst.x0[0] + 0.1 * np.sign(inst.batch[0].x_gt), True)
    y = ad.record_matvec(A, ad.constant(tape, inst.batch[0].x_gt))
    g1 = data_consistency_grad(A, x, y)
    g2 = data_consistency_grad_autodiff(A, x, y)
    errors = {"z": float(np.max(np.abs(g1.value - g2.value)))}
    _, _, closed = _loss_and_grads(inst, data_consistency_grad)
    _, _, traced = _loss_and_grads(inst, data_consistency_grad_autodiff)
    for g in GROUPS:
        errors[g] = float(np.max(rel_err(closed[g], traced[g], floor=1e-300)))
    return errors


@dataclass
class Report:
    instances: list = field(default_factory=list)
    end_to_end: dict = field(default_factory=lambda: {g: 0.0 for g in GROUPS})
    path: dict = field(default_factory=lambda: {g: 0.0 for g in ("z",) + GROUPS})
    worst: dict = field(default_factory=dict)

    @property
    def passed(self):
        return (all(v < END_TO_END_TOL for v in self.end_to_end.values())
                and all(v < PATH_TOL for v in self.path.values()))

    def offenders(self):
        out = [("end_to_end", g, v) for g, v in self.end_to_end.items() if not v < END_TO_END_TOL]
        out += [("path", g, v) for g, v in self.path.items() if not v < PATH_TOL]
        return out


def run_suite(seed=0, count=20, J=4, K=6, N=3, batch_size=2):
    """Run both checks on ``count`` screened instances and collect maxima."""
    report = Report()
    for inst_seed, inst in screened_instances(seed, count, J, K, N, batch_size):
        report.instances.append(inst_seed)
        for kind, errs in (("end_to_end", end_to_end_errors(inst)), ("path", path_errors(inst))):
            table = getattr(report, kind)
            for g, v in errs.items():
                if not v <= table[g]:
                    table[g] = v
                    report.worst[(kind, g)] = inst_seed
    return report
