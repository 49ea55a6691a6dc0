"""Content preservation, diversity, realism, same-z consistency and interpolation.

Distances are a pixel/coordinate proxy for a perceptual metric: the RMS
difference ``||x - y||_2 / sqrt(d)`` over the compared coordinates.

A "model" here is any callable ``model(x, z) -> y`` on numpy arrays with an
``n_z`` attribute (see :class:`miso.training.Translator`).
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, SyntheticFactorizedSpec
from .engine import Adam, Tape, Tensor, backward, no_grad, ops
from .networks import MLP

DISTANCE_PROXY = "rms-l2 (pixel/coordinate proxy for LPIPS)"
CONSISTENCY_CAP = 1e6


def rms_distance(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise ||x - y||_2 / sqrt(d)."""
    diff = np.asarray(x) - np.asarray(y)
    return np.sqrt(np.mean(diff * diff, axis=-1))


def _draw_z(n: int, n_z: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n, n_z))


def _translate_many(model, inputs: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """(n, m, d_out) outputs, one independent z per (input, style) pair."""
    outs = [model(inputs, _draw_z(len(inputs), model.n_z, rng)) for _ in range(m)]
    return np.stack(outs, axis=1)


def io_distance(model, inputs: np.ndarray, m_styles: int, rng: np.random.Generator,
                index: np.ndarray | None = None) -> float:
    """Mean distance between each input and its translations on ``index`` coords (all if None)."""
    if m_styles < 1:
        raise ValueError("m_styles must be >= 1")
    outs = _translate_many(model, inputs, m_styles, rng)
    if not np.isfinite(outs).all():
        raise FloatingPointError("model produced non-finite outputs")
    sel = slice(None) if index is None else index
    return float(rms_distance(outs[..., sel], inputs[:, None, :][..., sel]).mean())


def mean_pairwise_distance(groups: np.ndarray) -> float:
    """Average over groups of the mean distance between all pairs inside a group."""
    n, m, _ = groups.shape
    if m < 2:
        raise ValueError("need at least two members per group")
    pairs = list(itertools.combinations(range(m), 2))
    i, j = np.array(pairs).T
    return float(rms_distance(groups[:, i], groups[:, j]).mean())


def oo_diversity(model, inputs: np.ndarray, m_styles: int, rng: np.random.Generator,
                 real_groups: np.ndarray) -> tuple[float, float]:
    """(diversity of the model's outputs per input, same statistic on real target groups)."""
    if m_styles < 2:
        raise ValueError("m_styles must be >= 2")
    outs = _translate_many(model, inputs, m_styles, rng)
    if not np.isfinite(outs).all():
        raise FloatingPointError("model produced non-finite outputs")
    return mean_pairwise_distance(outs), mean_pairwise_distance(real_groups)


def synthetic_real_groups(spec: SyntheticFactorizedSpec, target: str, content: np.ndarray, m: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Real target-domain samples sharing each input's content, with independent styles."""
    n = content.shape[0]
    rows = [spec.compose(target, content, spec.sample_style(target, n, rng)) for _ in range(m)]
    return np.stack(rows, axis=1)


def random_real_groups(dataset: Dataset, n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    idx = np.stack([rng.choice(len(dataset), size=m, replace=False) for _ in range(n)])
    return dataset.samples[idx]


# ---------------------------------------------------------------------------
# domain classifier

class ClassifierError(RuntimeError):
    pass


class DomainClassifier:
    """MLP estimating p(domain B | x); trained on real samples only, then frozen."""

    def __init__(self, dim: int, hidden: tuple[int, ...] = (32, 32), seed: int = 0):
        self.net = MLP([dim, *hidden, 1], np.random.default_rng(seed), 0.2, "clf")
        self.trained = False
        self.heldout_accuracy: float | None = None

    def _logits(self, x) -> Tensor:
        return self.net(x)[:, 0]

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return ops.sigmoid(self._logits(Tensor(x))).data

    def fit(self, real_a: np.ndarray, real_b: np.ndarray, rng: np.random.Generator,
            max_steps: int = 4000, batch: int = 128, lr: float = 3e-3,
            target_error: float = 0.01, holdout: float = 0.2) -> float:
        if self.trained:
            raise ClassifierError("classifier is frozen")
        x = np.concatenate([real_a, real_b])
        y = np.concatenate([np.zeros(len(real_a)), np.ones(len(real_b))])
        perm = rng.permutation(len(x))
        n_hold = int(len(x) * holdout)
        hold, tr = perm[:n_hold], perm[n_hold:]
        opt = Adam(self.net.parameters(), lr, 0.9, 0.999)
        acc = 0.0
        for step in range(1, max_steps + 1):
            idx = rng.choice(tr, size=min(batch, len(tr)), replace=False)
            opt.zero_grad()
            with Tape():
                p = ops.clamp(ops.sigmoid(self._logits(Tensor(x[idx]))), 1e-7, 1 - 1e-7)
                yt = Tensor(y[idx])
                loss = -ops.mean(yt * ops.log(p) + (1.0 - yt) * ops.log(1.0 - p))
                backward(loss)
            opt.step()
            if step % 250 == 0 or step == max_steps:
                acc = float(np.mean((self.predict_proba(x[hold]) > 0.5) == (y[hold] > 0.5)))
                if 1.0 - acc < target_error and step >= 1000:
                    break
        self.heldout_accuracy = acc
        if 1.0 - acc >= target_error:
            raise ClassifierError(f"held-out error {1 - acc:.4f} did not reach {target_error}")
        self.trained = True
        return acc


def classifier_metrics(classifier: DomainClassifier, model, inputs_src: np.ndarray, m_styles: int,
                       rng: np.random.Generator, target: str) -> tuple[float, float]:
    """(fraction of outputs classified as ``target``, mean p(target | output))."""
    if not classifier.trained:
        raise ClassifierError("classifier is not trained")
    outs = _translate_many(model, inputs_src, m_styles, rng)
    outs = outs.reshape(len(inputs_src) * m_styles, -1)
    p_b = classifier.predict_proba(outs)
    p = p_b if target == "B" else 1.0 - p_b
    return float(np.mean(p > 0.5)), float(np.mean(p))


# ---------------------------------------------------------------------------
# style consistency and interpolation

@dataclass
class Consistency:
    ratio: float
    flag: str | None = None  # "degenerate" (all outputs equal) or "capped" (style ignores z)


def same_z_consistency(model, inputs: np.ndarray, z_set: np.ndarray,
                       style_fn: Callable[[np.ndarray], np.ndarray]) -> Consistency:
    """Variance of style across sources at fixed z over variance across z at fixed source."""
    if len(inputs) < 2 or len(z_set) < 2:
        raise ValueError("need at least two inputs and two z vectors")
    styles = []
    for z in z_set:
        out = model(inputs, np.repeat(z[None, :], len(inputs), axis=0))
        styles.append(style_fn(out))
    s = np.stack(styles, axis=1)  # (sources, z, style dims)
    across_sources = s.var(axis=0).mean()
    across_z = s.var(axis=1).mean()
    if across_z == 0.0:
        if across_sources == 0.0:
            return Consistency(0.0, "degenerate")
        return Consistency(CONSISTENCY_CAP, "capped")
    ratio = across_sources / across_z
    if ratio >= CONSISTENCY_CAP:
        return Consistency(CONSISTENCY_CAP, "capped")
    return Consistency(float(ratio))


def index_style(index: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    return lambda y: y[:, index]


def image_style_stats(y: np.ndarray) -> np.ndarray:
    """Per-image mean and standard deviation, a crude style descriptor for pixel vectors."""
    return np.stack([y.mean(axis=1), y.std(axis=1)], axis=1)


def interpolate(model, x: np.ndarray, z1: np.ndarray, z2: np.ndarray, steps: int) -> list[np.ndarray]:
    if steps < 2:
        raise ValueError("steps must be >= 2")
    x = np.atleast_2d(x)
    outs = []
    for t in np.linspace(0.0, 1.0, steps):
        z = (1.0 - t) * z1 + t * z2
        outs.append(model(x, np.repeat(np.atleast_2d(z), len(x), axis=0)))
    return outs


# ---------------------------------------------------------------------------
# full report

@dataclass
class DirectionReport:
    io_distance: float
    oo_diversity: float
    real_oo_upper_bound: float
    classifier_accuracy: float
    mean_likelihood: float
    same_z_consistency_ratio: float
    same_z_flag: str | None = None


@dataclass
class EvalReport:
    io_distance: float
    oo_diversity: float
    real_oo_upper_bound: float
    classifier_accuracy: float
    mean_likelihood_per_domain: dict
    same_z_consistency_ratio: float
    directions: dict = field(default_factory=dict)
    classifier_heldout_accuracy: float | None = None
    distance_proxy: str = DISTANCE_PROXY

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalData:
    """Held-out real data for one evaluation: inputs per domain and how to read factors."""

    inputs_a: np.ndarray
    inputs_b: np.ndarray
    content_a: np.ndarray | None = None
    content_b: np.ndarray | None = None
    spec: SyntheticFactorizedSpec | None = None
    datasets: tuple[Dataset, Dataset] | None = None


def synthetic_eval_data(spec: SyntheticFactorizedSpec, n_inputs: int) -> EvalData:
    from .data import generate_synthetic

    a, b = generate_synthetic(spec)
    return EvalData(a.samples[:n_inputs], b.samples[:n_inputs], a.metadata["content"][:n_inputs],
                    b.metadata["content"][:n_inputs], spec, (a, b))


def evaluate_direction(model, data: EvalData, source: str, classifier: DomainClassifier,
                       m_styles: int, rng: np.random.Generator, n_z_set: int = 10) -> DirectionReport:
    target = "B" if source == "A" else "A"
    inputs = data.inputs_a if source == "A" else data.inputs_b
    if data.spec is not None:
        spec = data.spec
        content_idx = spec.content_index()
        content = data.content_a if source == "A" else data.content_b
        groups = synthetic_real_groups(spec, target, content, m_styles, rng)
        style_fn = index_style(spec.style_index(target))
    else:
        content_idx = None
        tgt = data.datasets[1] if target == "B" else data.datasets[0]
        groups = random_real_groups(tgt, len(inputs), m_styles, rng)
        style_fn = image_style_stats
    io = io_distance(model, inputs, m_styles, rng, content_idx)
    oo, real = oo_diversity(model, inputs, m_styles, rng, groups)
    acc, lik = classifier_metrics(classifier, model, inputs, m_styles, rng, target)
    cons = same_z_consistency(model, inputs, rng.standard_normal((n_z_set, model.n_z)), style_fn)
    return DirectionReport(io, oo, real, acc, lik, cons.ratio, cons.flag)


def evaluate(translators: dict, data: EvalData, classifier: DomainClassifier, m_styles: int = 10,
             seed: int = 0) -> EvalReport:
    """Both directions; ``translators`` maps "a2b"/"b2a" to models."""
    rng = np.random.default_rng(seed)
    a2b = evaluate_direction(translators["a2b"], data, "A", classifier, m_styles, rng)
    b2a = evaluate_direction(translators["b2a"], data, "B", classifier, m_styles, rng)
    pair = (a2b, b2a)
    avg = lambda attr: float(np.mean([getattr(r, attr) for r in pair]))  # noqa: E731
    return EvalReport(
        io_distance=avg("io_distance"),
        oo_diversity=avg("oo_diversity"),
        real_oo_upper_bound=avg("real_oo_upper_bound"),
        classifier_accuracy=avg("classifier_accuracy"),
        mean_likelihood_per_domain={"B": a2b.mean_likelihood, "A": b2a.mean_likelihood},
        same_z_consistency_ratio=avg("same_z_consistency_ratio"),
        directions={"a2b": asdict(a2b), "b2a": asdict(b2a)},
        classifier_heldout_accuracy=classifier.heldout_accuracy,
    )


# ---------------------------------------------------------------------------
# evaluating a trained state

# seed offsets keep classifier data and evaluation inputs disjoint from training data
CLASSIFIER_SEED_OFFSET = 1000
EVAL_SEED_OFFSET = 2000


def evaluate_state(state, datasets=None, n_inputs: int = 150, m_styles: int = 10,
                   seed: int | None = None) -> EvalReport:
    """Fit a fresh domain classifier and evaluate both directions of ``state``.

    Synthetic runs draw classifier and evaluation data from fresh seeds of the
    configured generator.  Image runs need ``datasets``; the classifier is fit
    on them and the first ``n_inputs`` images of each domain are translated.
    """
    from .data import generate_synthetic

    cfg = state.config
    if cfg.data.kind == "synthetic":
        real_a, real_b = generate_synthetic(cfg.synthetic_spec(CLASSIFIER_SEED_OFFSET))
        data = synthetic_eval_data(cfg.synthetic_spec(EVAL_SEED_OFFSET), n_inputs)
    else:
        if datasets is None:
            raise ValueError("image evaluation needs the datasets")
        real_a, real_b = datasets
        data = EvalData(real_a.samples[:n_inputs], real_b.samples[:n_inputs], datasets=datasets)
    clf = DomainClassifier(real_a.dim, seed=cfg.seed)
    clf.fit(real_a.samples, real_b.samples, np.random.default_rng(cfg.seed + 1))
    translators = {"a2b": state.translator("a2b"), "b2a": state.translator("b2a")}
    return evaluate(translators, data, clf, m_styles, cfg.seed if seed is None else seed)
