"""Loss terms of the MISO objective and a numerical check of the MI lower bound.

All terms are reduced by the mean so their weights do not scale with batch
size or latent width.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .engine import NonFiniteError, ShapeError, Tensor, no_grad, ops
from .networks import GaussianLatent

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

ABLATIONS = ("full", "srso", "no_adv_rand", "no_adv_enc")


@dataclass
class LossWeights:
    lambda_adv: float = 1.0
    lambda_info: float = 1.0
    lambda_cyc: float = 50.0
    lambda_kl: float = 0.1
    lambda_lat: float = 10.0
    # relative weights of the two adversarial variants inside L_adv (equal by default)
    lambda_adv_enc: float = 1.0
    lambda_adv_rand: float = 1.0
    # replace the info term by L1 self-reconstruction (SRSO ablation)
    self_recon: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "self_recon" and not v >= 0:
                raise ValueError(f"{f.name} must be non-negative, got {v}")

    @classmethod
    def for_ablation(cls, mode: str = "full", **weights) -> "LossWeights":
        if mode not in ABLATIONS:
            raise ValueError(f"unknown ablation {mode!r}; expected one of {ABLATIONS}")
        w = cls(**weights)
        if mode == "srso":
            w.self_recon = True
        elif mode == "no_adv_rand":
            w.lambda_adv_rand = 0.0
        elif mode == "no_adv_enc":
            w.lambda_adv_enc = 0.0
        return w

    def scaled(self, factor: float) -> "LossWeights":
        d = asdict(self)
        for k in ("lambda_adv", "lambda_info", "lambda_cyc", "lambda_kl", "lambda_lat"):
            d[k] *= factor
        return LossWeights(**d)


REPORT_TERMS = ("info", "sr", "adv_enc", "adv_rand", "cyc", "kl_A", "kl_B", "lat", "d_A", "d_B")


@dataclass
class LossReport:
    """Per-term values summed over both translation directions.

    Fields hold Tensors while a step is being built and floats once
    :meth:`as_floats` has been called.  ``directions`` keeps the per-direction
    split ("a2b" / "b2a") of the direction-specific terms.
    """

    info: Tensor | float = 0.0
    sr: Tensor | float = 0.0
    adv_enc: Tensor | float = 0.0
    adv_rand: Tensor | float = 0.0
    cyc: Tensor | float = 0.0
    kl_A: Tensor | float = 0.0
    kl_B: Tensor | float = 0.0
    lat: Tensor | float = 0.0
    d_A: Tensor | float = 0.0
    d_B: Tensor | float = 0.0
    directions: dict = field(default_factory=dict)

    def add(self, direction: str, term: str, value: Tensor) -> None:
        cur = getattr(self, term)
        setattr(self, term, value if _is_zero(cur) else cur + value)
        self.directions.setdefault(direction, {})[term] = value

    def merge(self, other: "LossReport") -> "LossReport":
        out = LossReport()
        for name in REPORT_TERMS:
            a, b = getattr(self, name), getattr(other, name)
            setattr(out, name, b if _is_zero(a) else a if _is_zero(b) else a + b)
        for src in (self, other):
            for d, terms in src.directions.items():
                out.directions.setdefault(d, {}).update(terms)
        return out

    def as_floats(self) -> "LossReport":
        out = LossReport(**{n: _to_float(getattr(self, n)) for n in REPORT_TERMS})
        out.directions = {d: {k: _to_float(v) for k, v in t.items()} for d, t in self.directions.items()}
        for n in REPORT_TERMS:
            if not math.isfinite(getattr(out, n)):
                raise NonFiniteError(f"loss term {n} is not finite")
        return out

    def flat(self) -> dict[str, float]:
        """Flat float dict: totals plus ``<term>_<direction>`` entries."""
        r = self.as_floats()
        d = {n: getattr(r, n) for n in REPORT_TERMS}
        for direction, terms in sorted(r.directions.items()):
            for k, v in sorted(terms.items()):
                d[f"{k}_{direction}"] = v
        return d


def _is_zero(v) -> bool:
    return isinstance(v, float) and v == 0.0


def _to_float(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def _check_same_shape(name: str, x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{name}: shapes {x.shape} and {y.shape} differ")


def gaussian_nll(z, mu, logvar) -> Tensor:
    """Elementwise -log N(z; mu, exp(logvar)), with z treated as a constant."""
    z = ops.as_tensor(z).detach()
    mu, logvar = ops.as_tensor(mu), ops.as_tensor(logvar)
    _check_same_shape("gaussian_nll", z, mu)
    _check_same_shape("gaussian_nll", mu, logvar)
    diff = z - mu
    return HALF_LOG_2PI + 0.5 * logvar + 0.5 * ops.square(diff) * ops.exp(-logvar)


def milo(z_target, mu_out, logvar_out) -> Tensor:
    """Mutual-information loss: mean negative log-likelihood of the drawn style
    code under the Gaussian obtained by re-encoding the generated image."""
    return ops.mean(gaussian_nll(z_target, mu_out, logvar_out))


def adversarial_d(disc, real, fake) -> Tensor:
    """-(E log D(real) + E log(1 - D(fake))); ``fake`` is cut from its graph."""
    fake = ops.as_tensor(fake).detach()
    return -(ops.mean(ops.log(disc(real))) + ops.mean(ops.log(1.0 - disc(fake))))


def adversarial_g(disc, fake) -> Tensor:
    """Non-saturating generator loss -E log D(fake)."""
    return -ops.mean(ops.log(disc(fake)))


def cycle_loss(x, x_reconstructed) -> Tensor:
    x, xr = ops.as_tensor(x), ops.as_tensor(x_reconstructed)
    _check_same_shape("cycle_loss", x, xr)
    return ops.mean(ops.abs(xr - x))


def self_reconstruction_loss(x, x_reconstructed) -> Tensor:
    return cycle_loss(x, x_reconstructed)


def kl_loss(g: GaussianLatent) -> Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)), summed over dims, averaged over the batch."""
    per_dim = ops.square(g.mu) + ops.exp(g.logvar) - g.logvar - 1.0
    return 0.5 * ops.mean(ops.sum(per_dim, axes=1))


def latent_reconstruction_loss(z, mu_out) -> Tensor:
    z, mu_out = ops.as_tensor(z).detach(), ops.as_tensor(mu_out)
    _check_same_shape("latent_reconstruction_loss", z, mu_out)
    return ops.mean(ops.abs(z - mu_out))


def total_generator_loss(report: LossReport, w: LossWeights) -> Tensor | float:
    """Weighted full objective for the encoders and generators.

    Terms whose weight is zero are left out of the sum entirely.
    """
    parts = [
        (w.lambda_adv * w.lambda_adv_enc, report.adv_enc),
        (w.lambda_adv * w.lambda_adv_rand, report.adv_rand),
        (w.lambda_info, report.sr if w.self_recon else report.info),
        (w.lambda_cyc, report.cyc),
        (w.lambda_kl, report.kl_A),
        (w.lambda_kl, report.kl_B),
        (w.lambda_lat, report.lat),
    ]
    total: Tensor | float = 0.0
    for weight, term in parts:
        if weight == 0.0 or _is_zero(term):
            continue
        contrib = term * weight
        total = contrib if _is_zero(total) else total + contrib
    if isinstance(total, Tensor) and not np.isfinite(total.data).all():
        raise NonFiniteError("total generator loss is not finite")
    return total


# ---------------------------------------------------------------------------
# lower-bound check on a linear-Gaussian channel

@dataclass
class LinearGaussianChannel:
    """z ~ N(0, I_d), a' = W z + noise_std * N(0, I_m).

    ``q_mean_gain`` / ``q_logvar`` define the variational posterior
    q(z|a') = N(q_mean_gain @ a', diag(exp(q_logvar))).  Left as None they
    default to the exact posterior's (diagonal of the) parameters.
    """

    W: np.ndarray
    noise_std: float = 1.0
    q_mean_gain: np.ndarray | None = None
    q_logvar: np.ndarray | None = None

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")

    @property
    def z_dim(self) -> int:
        return self.W.shape[1]

    def posterior(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact posterior: (mean gain K with E[z|a'] = K a', covariance)."""
        s2 = self.noise_std**2
        prec = np.eye(self.z_dim) + self.W.T @ self.W / s2
        cov = np.linalg.inv(prec)
        return cov @ self.W.T / s2, cov

    def true_mi(self) -> float:
        s2 = self.noise_std**2
        m = self.W @ self.W.T / s2
        _, logdet = np.linalg.slogdet(np.eye(m.shape[0]) + m)
        return 0.5 * logdet


class BoundEstimate(NamedTuple):
    bound: float
    true_mi: float
    std_error: float


def validate_mi_lower_bound(channel: LinearGaussianChannel, n_samples: int, rng: np.random.Generator,
                            max_std_error: float | None = None) -> BoundEstimate:
    """Monte-Carlo estimate of E[log q(z|a')] + H(z) next to the analytic MI.

    log q is evaluated through :func:`gaussian_nll`, the same density that
    backs :func:`milo`.
    """
    gain, cov = channel.posterior()
    if channel.q_mean_gain is not None:
        gain = np.atleast_2d(np.asarray(channel.q_mean_gain, dtype=np.float64))
    logvar = np.log(np.diag(cov)) if channel.q_logvar is None else np.asarray(channel.q_logvar, dtype=np.float64)

    d = channel.z_dim
    z = rng.standard_normal((n_samples, d))
    a = z @ channel.W.T + channel.noise_std * rng.standard_normal((n_samples, channel.W.shape[0]))
    mu = a @ gain.T
    with no_grad():
        nll = gaussian_nll(z, mu, np.broadcast_to(logvar, mu.shape).copy()).data.sum(axis=1)
    entropy = d * 0.5 * math.log(2.0 * math.pi * math.e)
    per_sample = entropy - nll
    se = float(per_sample.std(ddof=1) / math.sqrt(n_samples))
    if max_std_error is not None and se > max_std_error:
        raise ValueError(f"Monte-Carlo standard error {se:.3g} exceeds requested {max_std_error:.3g}; "
                         "increase n_samples")
    return BoundEstimate(float(per_sample.mean()), channel.true_mi(), se)
