"""Self-verification: gradient oracles for every op and loss, plus loss identities."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import DomainBatch
from .engine import Tensor, grad_check, no_grad, ops
from .losses import (
    LossWeights,
    adversarial_d,
    adversarial_g,
    cycle_loss,
    kl_loss,
    latent_reconstruction_loss,
    milo,
    total_generator_loss,
)
from .networks import Discriminator, GaussianLatent, MisoNetworks

OP_TOL = 1e-6
LOSS_TOL = 1e-4
# Network gradients can sit near 1e-9 where central differences carry ~1e-11
# of roundoff, so below this magnitude errors are measured in absolute terms.
LOSS_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3e} (tol {self.tol:g}) {self.detail}".rstrip()


def _leaf(rng, shape, lo=-2.0, hi=2.0, name=None) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True, name=name)


def _nonzero(rng, shape) -> Tensor:
    x = rng.uniform(0.2, 2.0, shape) * rng.choice([-1.0, 1.0], shape)
    return Tensor(x, requires_grad=True)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """One scalar objective per differentiable op; inputs drawn in [-2, 2] away from kinks."""
    w = rng.uniform(-1, 1, (3, 4))
    x = _nonzero(rng, (3, 4))
    y = _nonzero(rng, (3, 4))
    yb = _nonzero(rng, (4,))
    pos = _leaf(rng, (3, 4), 0.2, 2.0)
    unit = _leaf(rng, (3, 4), -0.9, 0.9)
    m1 = _leaf(rng, (3, 4))
    m2 = _leaf(rng, (4, 2))
    w2 = rng.uniform(-1, 1, (3, 2))

    def weighted(t):
        return ops.sum(t * w)

    return {
        "add": (lambda: weighted(ops.add(x, yb)), [x, yb]),
        "sub": (lambda: weighted(ops.sub(x, y)), [x, y]),
        "mul": (lambda: weighted(ops.mul(x, y)), [x, y]),
        "div": (lambda: weighted(ops.div(x, y)), [x, y]),
        "neg": (lambda: weighted(ops.neg(x)), [x]),
        "exp": (lambda: weighted(ops.exp(x)), [x]),
        "log": (lambda: weighted(ops.log(pos)), [pos]),
        "square": (lambda: weighted(ops.square(x)), [x]),
        "sqrt": (lambda: weighted(ops.sqrt(pos)), [pos]),
        "tanh": (lambda: weighted(ops.tanh(x)), [x]),
        "atanh": (lambda: weighted(ops.atanh(unit)), [unit]),
        "sigmoid": (lambda: weighted(ops.sigmoid(x)), [x]),
        "leaky_relu": (lambda: weighted(ops.leaky_relu(x, 0.2)), [x]),
        "abs": (lambda: weighted(ops.abs(x)), [x]),
        "clamp": (lambda: weighted(ops.clamp(x, -1.0, 1.0)), [x]),
        "matmul": (lambda: ops.sum((m1 @ m2) * w2), [m1, m2]),
        "sum": (lambda: ops.sum(ops.sum(x, axes=0) * w[0]), [x]),
        "mean": (lambda: ops.sum(ops.mean(x, axes=1) * w[:, 0]), [x]),
        "concat": (lambda: ops.sum(ops.concat([x, y], axis=1) * np.concatenate([w, w], 1)), [x, y]),
        "take": (lambda: ops.sum(x[:, 1:3] * w[:, :2]), [x]),
        "reshape": (lambda: ops.sum(ops.reshape(x, (4, 3)) * w.reshape(4, 3)), [x]),
        "transpose": (lambda: ops.sum(ops.transpose(x) * w.T), [x]),
    }


def check_ops(seed: int = 0, tol: float = OP_TOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (f, params) in op_cases(rng).items():
        rep = grad_check(f, params, h=1e-5, tol=tol)
        out.append(CheckResult(f"grad op:{name}", rep.worst, tol, rep.passed))
    return out


# ---------------------------------------------------------------------------
# loss-level oracles on a 4-dim toy model

def toy_model(seed: int = 0, dim: int = 4, n_z: int = 2, hidden: int = 8, batch: int = 3):
    """Small networks, a fixed batch and frozen reparameterization noise.

    The skip gate starts open: with a closed gate the untrained generator
    emits values within ~1e-3 of zero, which parks discriminator
    pre-activations next to the leaky-ReLU kink where central differences
    are meaningless.
    """
    rng = np.random.default_rng(seed)
    nets = MisoNetworks(dim, dim, n_z=n_z, hidden=hidden, layers=2, d_code=4, rng=rng, gate_init=1.0)
    b = DomainBatch(rng.uniform(-1, 1, (batch, dim)), rng.uniform(-1, 1, (batch, dim)),
                    rng.standard_normal((batch, n_z)))
    eps = rng.standard_normal((2, batch, n_z))
    return nets, b, eps


def loss_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    from .training import fif_losses, ifi_losses

    nets, batch, eps = toy_model(seed)
    a, b, z = Tensor(batch.batch_a), Tensor(batch.batch_b), Tensor(batch.noise_z)

    def encoded():
        qa = nets.E_A(a)
        return qa, qa.sample(eps=eps[0])

    with no_grad():
        z_target = encoded()[1]

    def info():
        # the target is a constant inside milo, so it is frozen here as well
        q_out = nets.E_A(nets.b_to_a(b, z_target))
        return milo(z_target, q_out.mu, q_out.logvar)

    def adv_enc():
        _, z_a = encoded()
        return adversarial_g(nets.D_A, nets.b_to_a(b, z_a))

    def adv_rand():
        return adversarial_g(nets.D_A, nets.b_to_a(b, z))

    def adv_d():
        with no_grad():
            fake = nets.b_to_a(b, z)
        return adversarial_d(nets.D_A, a, fake)

    def cyc():
        _, z_a = encoded()
        z_b = nets.E_B(b).sample(eps=eps[1])
        return cycle_loss(b, nets.a_to_b(nets.b_to_a(b, z_a), z_b))

    def kl():
        return kl_loss(nets.E_A(a)) + kl_loss(nets.E_B(b))

    def lat():
        return latent_reconstruction_loss(z, nets.E_A(nets.b_to_a(b, z)).mu)

    # The info target is resampled when FD perturbs the style encoder, which the
    # analytic gradient ignores by design; the info term is checked on its own above.
    w = LossWeights(lambda_info=0.0)

    def full():
        r = ifi_losses(nets, batch, np.random.default_rng(seed + 1)).merge(fif_losses(nets, batch))
        return total_generator_loss(r, w)

    gen = nets.generator_parameters()
    return {
        "info (MILO)": (info, gen),
        "adv_enc (generator side)": (adv_enc, gen),
        "adv_rand (generator side)": (adv_rand, gen),
        "adv (discriminator side)": (adv_d, nets.D_A.parameters()),
        "cycle": (cyc, gen),
        "kl": (kl, nets.E_A.parameters() + nets.E_B.parameters()),
        "latent reconstruction": (lat, gen),
        "generator objective (info term excluded)": (full, gen),
    }


def check_losses(seed: int = 0, tol: float = LOSS_TOL) -> list[CheckResult]:
    out = []
    for name, (f, params) in loss_cases(seed).items():
        rep = grad_check(f, params, h=1e-5, tol=tol, floor=LOSS_FLOOR)
        detail = "" if rep.passed else f"worst params: {rep.failures()[:3]}"
        out.append(CheckResult(f"grad loss:{name}", rep.worst, tol, rep.passed, detail))
    return out


# ---------------------------------------------------------------------------
# loss identities

def reference_neg_log_pdf(z: float, mu: float, var: float) -> float:
    """Gaussian negative log density written out with the math module only."""
    return 0.5 * math.log(2.0 * math.pi * var) + (z - mu) ** 2 / (2.0 * var)


def check_milo_identity(n: int = 1000, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        z, mu = rng.normal(0, 2, shape), rng.normal(0, 2, shape)
        logvar = rng.uniform(-10, 10, shape)
        with no_grad():
            got = milo(z, mu, logvar).item()
        ref = float(np.mean([reference_neg_log_pdf(zi, mi, math.exp(lv))
                             for zi, mi, lv in zip(z.ravel(), mu.ravel(), logvar.ravel())]))
        worst = max(worst, abs(got - ref) / max(1.0, abs(ref)))
    return CheckResult("identity: milo == Gaussian NLL", worst, tol, worst < tol)


def check_kl_monte_carlo(n_samples: int = 1_000_000, seed: int = 0, rel_tol: float = 0.01) -> CheckResult:
    rng = np.random.default_rng(seed)
    mu = rng.normal(0, 1, (1, 4))
    logvar = rng.uniform(-1.5, 1.0, (1, 4))
    with no_grad():
        kl = kl_loss(GaussianLatent(Tensor(mu), Tensor(logvar))).item()
    sd = np.exp(0.5 * logvar)
    z = mu + sd * rng.standard_normal((n_samples, 4))
    log_q = -0.5 * (np.log(2 * np.pi) + logvar + ((z - mu) / sd) ** 2)
    log_p = -0.5 * (np.log(2 * np.pi) + z**2)
    mc = float(np.mean(np.sum(log_q - log_p, axis=1)))
    rel = abs(kl - mc) / abs(mc)
    return CheckResult("identity: kl_loss vs Monte-Carlo", rel, rel_tol, rel < rel_tol,
                       f"closed form {kl:.5f}, MC {mc:.5f}")


def check_adversarial_half(tol: float = 1e-12) -> list[CheckResult]:
    rng = np.random.default_rng(0)
    disc = Discriminator(4, [8], rng, zero_last=True)
    real, fake = rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, (5, 4))
    with no_grad():
        d_val = adversarial_d(disc, real, fake).item()
        g_val = adversarial_g(disc, fake).item()
    ln2 = math.log(2.0)
    return [
        CheckResult("identity: adversarial_d at D=0.5 == 2 ln 2", abs(d_val - 2 * ln2), tol,
                    abs(d_val - 2 * ln2) < tol),
        CheckResult("identity: adversarial_g at D=0.5 == ln 2", abs(g_val - ln2), tol, abs(g_val - ln2) < tol),
    ]


def loss_identity_suite() -> list[CheckResult]:
    return [check_milo_identity(), check_kl_monte_carlo(), *check_adversarial_half()]


def gradient_suite(seed: int = 0) -> list[CheckResult]:
    return check_ops(seed) + check_losses(seed)


def run_all(seed: int = 0) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results = gradient_suite(seed) + loss_identity_suite()
    return results, time.perf_counter() - t0
