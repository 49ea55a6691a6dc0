"""Two-phase training: discriminator update, then IFI + FIF generator/encoder update.

IFI (image -> feature -> image) uses style codes encoded from real images;
FIF (feature -> image -> feature) starts from N(0, I) noise.  Both are run
for the two translation directions in every step.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset, DomainBatch, generate_synthetic, load_pgm_dataset, next_batch
from .engine import Adam, EngineError, NonFiniteError, Tape, Tensor, backward, no_grad
from .losses import (
    LossReport,
    LossWeights,
    adversarial_d,
    adversarial_g,
    cycle_loss,
    kl_loss,
    latent_reconstruction_loss,
    milo,
    self_reconstruction_loss,
    total_generator_loss,
)
from .networks import MisoNetworks

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "miso-checkpoint/1"


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, step: int, last_checkpoint: str | None = None):
        super().__init__(message)
        self.step = step
        self.last_checkpoint = last_checkpoint


class CheckpointError(ValueError):
    pass


@dataclass
class ModelState:
    config: RunConfig
    nets: MisoNetworks
    opt_d: Adam
    opt_g: Adam
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def initial(cls, config: RunConfig, d_a: int, d_b: int) -> "ModelState":
        rng = np.random.default_rng(config.seed)
        m = config.model
        nets = MisoNetworks(d_a, d_b, m.n_z, m.hidden, m.layers, m.code_dim, m.slope, rng, m.skip, m.gate_init)
        o = config.optim
        opt_d = Adam(nets.discriminator_parameters(), o.lr_d, o.beta1, o.beta2, o.eps)
        opt_g = Adam(nets.generator_parameters(), o.lr_g, o.beta1, o.beta2, o.eps)
        return cls(config, nets, opt_d, opt_g, rng)

    @property
    def weights(self) -> LossWeights:
        return self.config.loss_weights()

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Every persistent array: parameters, then Adam first/second moments."""
        out = [(p.name, p.data) for p in self.nets.parameters()]
        for tag, opt in (("adam_d", self.opt_d), ("adam_g", self.opt_g)):
            for p, m in zip(opt.params, opt.moments.m):
                out.append((f"{tag}.m.{p.name}", m))
            for p, v in zip(opt.params, opt.moments.v):
                out.append((f"{tag}.v.{p.name}", v))
        return out

    def translator(self, direction: str) -> "Translator":
        return Translator(self.nets, direction)


class Translator:
    """Numpy-in, numpy-out view of one translation direction ("a2b" or "b2a")."""

    def __init__(self, nets: MisoNetworks, direction: str):
        if direction not in ("a2b", "b2a"):
            raise ValueError(f"direction must be 'a2b' or 'b2a', got {direction!r}")
        self.nets = nets
        self.direction = direction
        self.n_z = nets.n_z

    def __call__(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        with no_grad():
            if self.direction == "a2b":
                return self.nets.a_to_b(Tensor(x), Tensor(z)).data
            return self.nets.b_to_a(Tensor(x), Tensor(z)).data


def load_datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    if config.data.kind == "synthetic":
        return generate_synthetic(config.synthetic_spec())
    return load_pgm_dataset(config.data.path_a, "A"), load_pgm_dataset(config.data.path_b, "B")


# ---------------------------------------------------------------------------
# phases

def ifi_losses(nets: MisoNetworks, batch: DomainBatch, rng: np.random.Generator,
               trace: dict | None = None) -> LossReport:
    """Encoded-style pass for both directions (adv_enc, info, cyc, KL, and the SR term)."""
    a, b = Tensor(batch.batch_a), Tensor(batch.batch_b)
    qa, qb = nets.E_A(a), nets.E_B(b)
    z_a, z_b = qa.sample(rng), qb.sample(rng)
    r = LossReport()

    a_fake = nets.b_to_a(b, z_a)
    r.add("b2a", "adv_enc", adversarial_g(nets.D_A, a_fake))
    q_out = nets.E_A(a_fake)
    r.add("b2a", "info", milo(z_a, q_out.mu, q_out.logvar))
    b_rec = nets.a_to_b(a_fake, z_b)
    r.add("b2a", "cyc", cycle_loss(b, b_rec))

    b_fake = nets.a_to_b(a, z_b)
    r.add("a2b", "adv_enc", adversarial_g(nets.D_B, b_fake))
    q_out_b = nets.E_B(b_fake)
    r.add("a2b", "info", milo(z_b, q_out_b.mu, q_out_b.logvar))
    a_rec = nets.b_to_a(b_fake, z_a)
    r.add("a2b", "cyc", cycle_loss(a, a_rec))

    # SR: bring a fake back to its source domain with the source's own style
    r.add("b2a", "sr", self_reconstruction_loss(a, a_rec))
    r.add("a2b", "sr", self_reconstruction_loss(b, b_rec))

    r.kl_A = kl_loss(qa)
    r.kl_B = kl_loss(qb)
    if trace is not None:
        trace.update(z_a=z_a, z_b=z_b, a_fake_enc=a_fake, b_fake_enc=b_fake)
    return r


def fif_losses(nets: MisoNetworks, batch: DomainBatch, trace: dict | None = None) -> LossReport:
    """Noise-style pass for both directions (adv_rand and latent reconstruction)."""
    a, b = Tensor(batch.batch_a), Tensor(batch.batch_b)
    z = Tensor(batch.noise_z)
    r = LossReport()

    a_fake = nets.b_to_a(b, z)
    r.add("b2a", "adv_rand", adversarial_g(nets.D_A, a_fake))
    r.add("b2a", "lat", latent_reconstruction_loss(z, nets.E_A(a_fake).mu))

    b_fake = nets.a_to_b(a, z)
    r.add("a2b", "adv_rand", adversarial_g(nets.D_B, b_fake))
    r.add("a2b", "lat", latent_reconstruction_loss(z, nets.E_B(b_fake).mu))
    if trace is not None:
        trace.update(z=z, a_fake_rand=a_fake, b_fake_rand=b_fake)
    return r


def _backprop(report: LossReport, w: LossWeights) -> float:
    total = total_generator_loss(report, w)
    if isinstance(total, Tensor):
        backward(total)
        return total.item()
    return float(total)


def ifi_step(state: ModelState, batch: DomainBatch, trace: dict | None = None) -> tuple[LossReport, float]:
    """Build the IFI objective and accumulate its gradients; returns (report, backpropagated value)."""
    with Tape():
        report = ifi_losses(state.nets, batch, state.rng, trace)
        value = _backprop(report, state.weights)
        return report.as_floats(), value


def fif_step(state: ModelState, batch: DomainBatch, trace: dict | None = None) -> tuple[LossReport, float]:
    with Tape():
        report = fif_losses(state.nets, batch, trace)
        value = _backprop(report, state.weights)
        return report.as_floats(), value


def generator_step(state: ModelState, batch_ifi: DomainBatch, batch_fif: DomainBatch) -> LossReport:
    state.opt_g.zero_grad()
    r_ifi, _ = ifi_step(state, batch_ifi)
    if state.config.optim.separate_phase_updates:
        state.opt_g.step()
        state.opt_g.zero_grad()
    r_fif, _ = fif_step(state, batch_fif)
    state.opt_g.step()
    state.opt_g.zero_grad()
    state.opt_d.zero_grad()
    return r_ifi.merge(r_fif)


def make_fakes(nets: MisoNetworks, batch: DomainBatch, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Detached encoded-style and noise-style fakes for both domains."""
    with no_grad():
        a, b, z = Tensor(batch.batch_a), Tensor(batch.batch_b), Tensor(batch.noise_z)
        z_a = nets.E_A(a).sample(rng)
        z_b = nets.E_B(b).sample(rng)
        return {
            "a_enc": nets.b_to_a(b, z_a).data,
            "a_rand": nets.b_to_a(b, z).data,
            "b_enc": nets.a_to_b(a, z_b).data,
            "b_rand": nets.a_to_b(a, z).data,
        }


def discriminator_step(state: ModelState, batch: DomainBatch, fakes: dict | None = None) -> LossReport:
    """One Adam update of D_A and D_B on real vs. freshly generated (detached) fakes."""
    nets, w = state.nets, state.weights
    if fakes is None:
        fakes = make_fakes(nets, batch, state.rng)
    state.opt_d.zero_grad()
    r = LossReport()
    with Tape():
        total = None
        for dom, disc, real in (("A", nets.D_A, batch.batch_a), ("B", nets.D_B, batch.batch_b)):
            enc = adversarial_d(disc, real, fakes[f"{dom.lower()}_enc"])
            rand = adversarial_d(disc, real, fakes[f"{dom.lower()}_rand"])
            r.directions[f"D_{dom}"] = {"enc": enc, "rand": rand}
            setattr(r, f"d_{dom}", enc + rand)
            for weight, term in ((w.lambda_adv * w.lambda_adv_enc, enc), (w.lambda_adv * w.lambda_adv_rand, rand)):
                if weight:
                    total = term * weight if total is None else total + term * weight
        if total is not None:
            backward(total)
        r = r.as_floats()
    state.opt_d.step()
    state.opt_d.zero_grad()
    return r


def train_step(state: ModelState, datasets: tuple[Dataset, Dataset]) -> LossReport:
    k, n_z = state.config.optim.batch, state.config.model.n_z
    r_d = discriminator_step(state, next_batch(datasets, k, state.rng, n_z))
    batch_ifi = next_batch(datasets, k, state.rng, n_z)
    batch_fif = next_batch(datasets, k, state.rng, n_z)
    r_g = generator_step(state, batch_ifi, batch_fif)
    state.step += 1
    return r_g.merge(r_d)


# ---------------------------------------------------------------------------
# loop

@dataclass
class TrainResult:
    state: ModelState
    metrics: list[dict] = field(default_factory=list)
    last_checkpoint: str | None = None


def train(config: RunConfig, out_dir: str | Path | None = None, resume_from: str | Path | None = None,
          datasets: tuple[Dataset, Dataset] | None = None) -> TrainResult:
    """Run until ``config.optim.steps`` global steps have been taken.

    With ``out_dir`` set, metrics are appended to ``metrics.jsonl`` and
    checkpoints written under ``checkpoints/``.  A non-finite loss raises
    :class:`TrainingAborted`; checkpoints already written are kept.
    """
    datasets = datasets or load_datasets(config)
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        state.config = config
    else:
        state = ModelState.initial(config, datasets[0].dim, datasets[1].dim)

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    ckpt_dir = None
    if out is not None:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a" if resume_from is not None else "w")

    result = TrainResult(state)
    io = config.io
    t0 = time.perf_counter()
    try:
        while state.step < config.optim.steps:
            try:
                report = train_step(state, datasets)
            except (NonFiniteError, EngineError) as exc:
                msg = f"training aborted at step {state.step + 1}: {exc}"
                log.error(msg)
                raise TrainingAborted(msg, state.step + 1, result.last_checkpoint) from exc
            if state.step % io.log_interval == 0 or state.step == config.optim.steps:
                # wall time stays out of the row so equal runs give byte-identical logs
                row = {"step": state.step, **report.flat()}
                result.metrics.append(row)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(row) + "\n")
                    metrics_fh.flush()
                log.info("step %d  (%.1fs)  %s", state.step, time.perf_counter() - t0,
                         " ".join(f"{k}={row[k]:.4f}" for k in ("info", "adv_enc", "adv_rand", "cyc", "lat", "d_A")))
            if ckpt_dir is not None and (state.step % io.checkpoint_interval == 0
                                         or state.step == config.optim.steps):
                path = ckpt_dir / f"step_{state.step:07d}.json"
                save_checkpoint(state, path)
                result.last_checkpoint = str(path)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return result


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float64 blob

def _blob_path(manifest: Path) -> Path:
    return manifest.with_suffix(".bin")


def save_checkpoint(state: ModelState, path: str | Path) -> Path:
    path = Path(path)
    tensors, chunks, offset = [], [], 0
    for name, arr in state.named_tensors():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    blob = _blob_path(path)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "dims": {"d_a": state.nets.d_a, "d_b": state.nets.d_b},
        "config": state.config.to_dict(),
        "rng_state": state.rng.bit_generator.state,
        "adam_t": {"adam_d": state.opt_d.moments.t, "adam_g": state.opt_g.moments.t},
        "blob": blob.name,
        "blob_bytes": offset,
        "tensors": tensors,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    blob.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> ModelState:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: cannot read manifest ({exc})") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    blob = (path.parent / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"{path}: blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")

    config = RunConfig.from_dict(manifest["config"])
    state = ModelState.initial(config, manifest["dims"]["d_a"], manifest["dims"]["d_b"])
    expected = state.named_tensors()
    entries = manifest["tensors"]
    if [e["name"] for e in entries] != [n for n, _ in expected]:
        raise CheckpointError(f"{path}: tensor list does not match the model architecture")
    loaded = []
    for e, (name, target) in zip(entries, expected):
        shape = tuple(e["shape"])
        if shape != target.shape:
            raise CheckpointError(f"{path}: {name} has shape {shape}, model expects {target.shape}")
        n = int(np.prod(shape)) * 8
        if e["offset"] < 0 or e["offset"] + n > len(blob):
            raise CheckpointError(f"{path}: {name} runs past the end of the blob")
        loaded.append(np.frombuffer(blob, dtype="<f8", count=n // 8, offset=e["offset"]).reshape(shape))
    # only mutate the fresh state once everything validated
    for (_, target), arr in zip(expected, loaded):
        target[...] = arr
    state.rng.bit_generator.state = manifest["rng_state"]
    state.opt_d.moments.t = manifest["adam_t"]["adam_d"]
    state.opt_g.moments.t = manifest["adam_t"]["adam_g"]
    state.step = manifest["step"]
    return state
