"""The eight MLP networks and reparameterized sampling of style codes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ShapeError, Tensor, ops

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
D_EPS = 1e-7


class MLP:
    """Stack of affine layers with leaky-ReLU between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, slope: float = 0.2,
                 name: str = "mlp", zero_last: bool = False):
        self.sizes = list(sizes)
        self.slope = slope
        self.name = name
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if zero_last and i == len(sizes) - 2:
                w[:] = 0.0
            self.weights.append(Tensor(w, requires_grad=True, name=f"{name}.{i}.weight"))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.{i}.bias"))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def __call__(self, x) -> Tensor:
        h = ops.as_tensor(x)
        if h.data.ndim != 2 or h.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected (batch, {self.in_dim}), got {h.shape}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = ops.leaky_relu(h, self.slope)
        return h


@dataclass
class GaussianLatent:
    mu: Tensor
    logvar: Tensor

    def std(self) -> Tensor:
        return ops.exp(self.logvar * 0.5)

    def sample(self, rng: np.random.Generator | None = None, eps: np.ndarray | None = None) -> Tensor:
        return sample_latent(self, rng, eps)


def sample_latent(g: GaussianLatent, rng: np.random.Generator | None = None,
                  eps: np.ndarray | None = None) -> Tensor:
    """mu + exp(logvar / 2) * eps; eps is a constant so gradients reach only mu and logvar."""
    if eps is None:
        eps = rng.standard_normal(g.mu.shape)
    return g.mu + g.std() * Tensor._wrap(np.asarray(eps, dtype=np.float64))


class StyleEncoder:
    """x -> q(z|x) as a diagonal Gaussian with clamped log-variance."""

    def __init__(self, d_in: int, n_z: int, hidden: list[int], rng, slope=0.2, name="E", zero_last=False):
        self.n_z = n_z
        self.net = MLP([d_in, *hidden, 2 * n_z], rng, slope, name, zero_last)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def __call__(self, x) -> GaussianLatent:
        out = self.net(x)
        mu = out[:, : self.n_z]
        logvar = ops.clamp(out[:, self.n_z:], LOGVAR_MIN, LOGVAR_MAX)
        return GaussianLatent(mu, logvar)


class ConditionalEncoder:
    """(source image, style code) -> content code, by concatenating the two inputs."""

    def __init__(self, d_in: int, n_z: int, d_code: int, hidden: list[int], rng, slope=0.2, name="E_cond"):
        self.d_in = d_in
        self.n_z = n_z
        self.net = MLP([d_in + n_z, *hidden, d_code], rng, slope, name)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def __call__(self, x, z) -> Tensor:
        x, z = ops.as_tensor(x), ops.as_tensor(z)
        if x.shape[-1] != self.d_in or z.shape[-1] != self.n_z or x.shape[0] != z.shape[0]:
            raise ShapeError(f"{self.net.name}: got source {x.shape}, style {z.shape}")
        return self.net(ops.concat([x, z], axis=1))


SKIP_CLIP = 0.999
SKIP_MODES = ("none", "atanh", "add", "gated")


class Generator:
    """Content code -> target image through tanh.

    ``skip`` adds the source image to the pre-activation: ``"atanh"`` adds it
    in inverse-tanh space, so a zero MLP output reproduces the source exactly,
    ``"add"`` adds it as is and ``"gated"`` scales the inverse-tanh source by
    a learned per-coordinate gate starting at ``gate_init``. All of them are
    differentiable in the source and need source and target to share a
    shape; ``"none"`` is the plain decoder.
    """

    def __init__(self, d_code: int, d_out: int, hidden: list[int], rng, slope=0.2, name="G",
                 skip: str = "none", gate_init: float = 0.0):
        if skip not in SKIP_MODES:
            raise ValueError(f"{name}: unknown skip mode {skip!r}")
        self.net = MLP([d_code, *hidden, d_out], rng, slope, name)
        self.skip = skip
        self.gate = None
        if skip == "gated":
            self.gate = Tensor(np.full(d_out, float(gate_init)), requires_grad=True, name=f"{name}.skip_gate")

    @property
    def residual(self) -> bool:
        return self.skip != "none"

    def parameters(self) -> list[Tensor]:
        return self.net.parameters() + ([self.gate] if self.gate is not None else [])

    def __call__(self, code, source=None) -> Tensor:
        h = self.net(code)
        if self.residual:
            if source is None:
                raise ValueError(f"{self.net.name}: a skip connection needs the source image")
            src = ops.as_tensor(source)
            if src.shape != h.shape:
                raise ShapeError(f"{self.net.name}: source {src.shape} vs output {h.shape}")
            if self.skip in ("atanh", "gated"):
                src = ops.atanh(ops.clamp(src, -SKIP_CLIP, SKIP_CLIP))
            if self.gate is not None:
                src = src * self.gate
            h = h + src
        return ops.tanh(h)


class Discriminator:
    def __init__(self, d_in: int, hidden: list[int], rng, slope=0.2, name="D", zero_last=False):
        self.net = MLP([d_in, *hidden, 1], rng, slope, name, zero_last)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def __call__(self, x) -> Tensor:
        """Per-row probability of being real, shape (batch,), clamped so logs stay finite."""
        return ops.clamp(ops.sigmoid(self.net(x))[:, 0], D_EPS, 1.0 - D_EPS)


def encode_style(encoder: StyleEncoder, x) -> GaussianLatent:
    return encoder(x)


def translate(cond: ConditionalEncoder, gen: Generator, x_src, z_style) -> Tensor:
    return gen(cond(x_src, z_style), x_src if gen.residual else None)


def discriminate(disc: Discriminator, x) -> Tensor:
    return disc(x)


NETWORK_NAMES = ("E_A", "E_B", "E_AB", "E_BA", "G_AB", "G_BA", "D_A", "D_B")


class MisoNetworks:
    """E_A, E_B (style), E_AB, E_BA (conditional), G_AB, G_BA, D_A, D_B.

    ``E_AB`` takes an A image and a B-style code and ``G_AB`` decodes its
    output into domain B; the BA pair is the mirror image.
    """

    def __init__(self, d_a: int, d_b: int, n_z: int = 8, hidden: int = 64, layers: int = 3,
                 d_code: int = 16, slope: float = 0.2, rng: np.random.Generator | None = None,
                 skip: str = "gated", gate_init: float = 0.25):
        rng = rng if rng is not None else np.random.default_rng(0)
        hid = [hidden] * layers
        self.d_a, self.d_b, self.n_z = d_a, d_b, n_z
        self.E_A = StyleEncoder(d_a, n_z, hid, rng, slope, "E_A")
        self.E_B = StyleEncoder(d_b, n_z, hid, rng, slope, "E_B")
        self.E_AB = ConditionalEncoder(d_a, n_z, d_code, hid, rng, slope, "E_AB")
        self.E_BA = ConditionalEncoder(d_b, n_z, d_code, hid, rng, slope, "E_BA")
        skip = skip if d_a == d_b else "none"
        self.G_AB = Generator(d_code, d_b, hid, rng, slope, "G_AB", skip, gate_init)
        self.G_BA = Generator(d_code, d_a, hid, rng, slope, "G_BA", skip, gate_init)
        self.D_A = Discriminator(d_a, hid, rng, slope, "D_A")
        self.D_B = Discriminator(d_b, hid, rng, slope, "D_B")

    def __getitem__(self, name: str):
        if name not in NETWORK_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def generator_parameters(self) -> list[Tensor]:
        out = []
        for n in ("E_A", "E_B", "E_AB", "E_BA", "G_AB", "G_BA"):
            out += self[n].parameters()
        return out

    def discriminator_parameters(self) -> list[Tensor]:
        return self.D_A.parameters() + self.D_B.parameters()

    def parameters(self) -> list[Tensor]:
        return self.generator_parameters() + self.discriminator_parameters()

    def a_to_b(self, a, z_b) -> Tensor:
        return translate(self.E_AB, self.G_AB, a, z_b)

    def b_to_a(self, b, z_a) -> Tensor:
        return translate(self.E_BA, self.G_BA, b, z_a)
