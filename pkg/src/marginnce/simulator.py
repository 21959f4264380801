"""Desk-scale self-supervised training on the unit hypersphere.

A linear encoder z = normalize(W x) is trained on two noisy views of
samples from a Gaussian class mixture.  The per-pair angle gradient comes
from the margin loss (optionally rescaled by a scheme) and is pushed back
to W through the tangent-space chain rule:

    theta_ij -> z_i  (geometry.pairwise_angle_grads)
    z_i      -> y_i = W x_i  (projection (I - z z^T) / |y|)
    y_i      -> W

Modes:
    moco_like    EMA teacher encodes the second view, beta = 1
    simclr_like  the current student encodes the second view, beta = 1
    byol_like    EMA teacher, beta = 0 (positives only)
The second view is always a constant target (no gradient through it).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import geometry
from .errors import ConfigError
from .loss import BatchAngles, MarginParams, logits, loss, loss_from_logits
from .schemes import ATTENUATION, SchemeConfig, modified_grad, scheme_weights
from .verification import CheckReport, compare

MODES = ("moco_like", "simclr_like", "byol_like")
COLLAPSE_COS = 0.99


@dataclass(frozen=True)
class SyntheticDataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_centroids: np.ndarray


def _sample_mixture(centroids, labels, sigma, rng):
    x = centroids[labels] + sigma * rng.normal(size=(labels.size, centroids.shape[1]))
    return geometry.normalize_rows(x)


def generate_dataset(k: int, n: int, dim: int, sigma_class: float, seed: int) -> SyntheticDataset:
    """Balanced Gaussian mixture around k random unit centroids."""
    if k < 1 or n < k or dim < 2 or sigma_class < 0:
        raise ConfigError(f"invalid dataset parameters k={k} n={n} dim={dim} sigma={sigma_class}")
    rng = np.random.default_rng(seed)
    centroids = geometry.normalize_rows(rng.normal(size=(k, dim)))
    labels = np.arange(n) % k
    return SyntheticDataset(_sample_mixture(centroids, labels, sigma_class, rng), labels, centroids)


def make_views(x, sigma_view: float, rng):
    """Two independent Gaussian perturbations of x (works row-wise too)."""
    if sigma_view < 0:
        raise ConfigError("sigma_view must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if sigma_view == 0:
        return x.copy(), x.copy()
    return (x + sigma_view * rng.normal(size=x.shape),
            x + sigma_view * rng.normal(size=x.shape))


def encode(weights, x) -> np.ndarray:
    y = np.asarray(x) @ np.asarray(weights).T
    return geometry.normalize_rows(y) if y.ndim > 1 else geometry.normalize(y)


def nearest_centroid_accuracy(embeddings, labels, leave_one_out: bool = False) -> float:
    """Cosine nearest-class-centroid accuracy.

    Centroids are class means of the same embeddings being scored; the query
    point is included in its own centroid unless ``leave_one_out``.
    """
    z = geometry.normalize_rows(embeddings)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    sums = np.stack([z[labels == c].sum(axis=0) for c in classes])
    counts = np.array([(labels == c).sum() for c in classes], dtype=np.float64)
    if leave_one_out:
        own = np.searchsorted(classes, labels)
        scores = np.empty((z.shape[0], classes.size))
        for i in range(z.shape[0]):
            s = sums.copy()
            s[own[i]] -= z[i]
            n = counts.copy()
            n[own[i]] -= 1
            cent = s / np.maximum(n, 1)[:, None]
            norms = np.linalg.norm(cent, axis=1)
            scores[i] = np.where(norms > 0, cent @ z[i] / np.where(norms > 0, norms, 1), -np.inf)
    else:
        cent = geometry.normalize_rows(sums / counts[:, None])
        scores = z @ cent.T
    return float(np.mean(classes[np.argmax(scores, axis=1)] == labels))


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "moco_like"
    margin_params: MarginParams = field(default_factory=MarginParams)
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    lr: float = 0.05
    ema_momentum: float = 0.99
    batch: int = 64
    steps: int = 2000
    sigma_view: float = 0.05
    seed: int = 0
    k: int = 4
    n: int = 512
    dim_in: int = 32
    dim_out: int = 16
    sigma_class: float = 0.25
    n_eval: int = 1024

    def validated(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "byol_like":
            if self.scheme.scheme in ATTENUATION:
                raise ConfigError("byol_like has no negatives; attenuation schemes are undefined")
            if self.margin_params.beta != 0:
                return replace(self, margin_params=self.margin_params.replace(beta=0.0))
        if self.batch < 2 or self.steps < 0 or self.lr < 0:
            raise ConfigError("batch must be >= 2, steps and lr >= 0")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("ema_momentum must lie in [0, 1]")
        if self.dim_out < 2:
            raise ConfigError("dim_out must be >= 2")
        return self

    def flat(self) -> dict:
        d = asdict(self)
        d.update(d.pop("margin_params"))
        d.update(d.pop("scheme"))
        return d


@dataclass(frozen=True)
class EncoderState:
    weights: np.ndarray
    teacher_weights: np.ndarray
    step: int
    rng_seed: int


@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss: float
    align: float
    spread: float
    acc: float
    collapsed: bool


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def final(self) -> StepMetrics:
        return self.rows[-1]


def init_state(config: TrainConfig) -> EncoderState:
    rng = np.random.default_rng([config.seed, 1])
    w = rng.normal(size=(config.dim_out, config.dim_in)) / math.sqrt(config.dim_in)
    return EncoderState(w, w.copy(), 0, config.seed)


def _sample_batch(state, dataset, config):
    rng = np.random.default_rng([config.seed, 2, state.step])
    n_train = dataset.inputs.shape[0]
    idx = rng.choice(n_train, size=min(config.batch, n_train), replace=False)
    return make_views(dataset.inputs[idx], config.sigma_view, rng)


def _target_weights(state, config):
    return state.weights if config.mode == "simclr_like" else state.teacher_weights


def batch_loss_and_grad(weights, target_weights, xa, xb, params, scheme):
    """Mean batch loss and its (scheme-modified) gradient with respect to W.

    Anchors xa go through ``weights``; targets xb through ``target_weights``
    and are treated as constants.  Returns (loss, dW, batch_angles).
    """
    ya = xa @ weights.T
    norms = np.linalg.norm(ya, axis=1, keepdims=True)
    za = ya / norms
    zb = geometry.normalize_rows(xb @ target_weights.T)
    batch = BatchAngles(geometry.pairwise_angles(za, zb), np.eye(za.shape[0]))
    n = za.shape[0]
    g = modified_grad(batch, params, scheme).grad / n
    coef, cos, _ = geometry.pairwise_angle_grads(za, zb)
    a = g * coef
    # dL/dza_i = sum_j a_ij (zb_j - cos_ij za_i)
    dz = a @ zb - np.sum(a * cos, axis=1, keepdims=True) * za
    dy = (dz - np.sum(dz * za, axis=1, keepdims=True) * za) / norms
    return float(np.mean(loss(batch, params))), dy.T @ xa, batch


def train_step(state: EncoderState, dataset: SyntheticDataset, config: TrainConfig, eval_set=None):
    xa, xb = _sample_batch(state, dataset, config)
    params = config.margin_params
    value, dw, batch = batch_loss_and_grad(state.weights, _target_weights(state, config), xa, xb,
                                           params, config.scheme)
    weights = state.weights - config.lr * dw
    if config.mode == "simclr_like":
        teacher = weights
    else:
        m = config.ema_momentum
        teacher = state.teacher_weights + (1.0 - m) * (weights - state.teacher_weights)
    new_state = EncoderState(weights, teacher, state.step + 1, state.rng_seed)

    diag = np.diag(batch.angles)
    off = ~np.eye(batch.shape[0], dtype=bool)
    spread = float(np.mean(np.abs(np.cos(batch.angles[off]))))
    acc, collapsed = (math.nan, False) if eval_set is None else _evaluate(weights, eval_set)
    return new_state, StepMetrics(new_state.step, value, float(np.mean(diag)), spread, acc, collapsed)


def _evaluate(weights, eval_set):
    x, labels = eval_set
    z = encode(weights, x)
    n = z.shape[0]
    total = z.sum(axis=0)
    # sum over i != j of z_i . z_j, using |z_i| = 1
    mean_cos = (total @ total - n) / (n * (n - 1))
    return nearest_centroid_accuracy(z, labels), bool(mean_cos > COLLAPSE_COS)


def make_eval_set(dataset: SyntheticDataset, config: TrainConfig):
    """Held-out samples from the same centroids, one fixed view each."""
    rng = np.random.default_rng([config.seed, 3])
    labels = np.arange(config.n_eval) % dataset.class_centroids.shape[0]
    x = _sample_mixture(dataset.class_centroids, labels, config.sigma_class, rng)
    view, _ = make_views(x, config.sigma_view, rng)
    return view, labels


def run(config: TrainConfig, log_every: int = 1, dataset: SyntheticDataset | None = None) -> RunMetrics:
    """Train from scratch; metrics are recorded every ``log_every`` steps and at the end.

    ``dataset`` overrides the generated one (its centroids also seed the
    held-out set).
    """
    config = config.validated()
    if dataset is None:
        dataset = generate_dataset(config.k, config.n, config.dim_in, config.sigma_class, config.seed)
    eval_set = make_eval_set(dataset, config)
    state = init_state(config)
    metrics = RunMetrics()
    for t in range(config.steps):
        last = t == config.steps - 1
        evaluate = last or (state.step + 1) % log_every == 0
        state, row = train_step(state, dataset, config, eval_set if evaluate else None)
        if evaluate:
            metrics.rows.append(row)
    return metrics


def frozen_scheme_batch_loss(weights, target_weights, xa, xb, params, scheme, center_weights):
    """Batch loss whose W-gradient is the scheme-modified gradient at ``center_weights``.

    Scheme weights and sg(logits) are frozen at the center; used as a
    finite-difference oracle.
    """
    def angles_for(w):
        za = geometry.normalize_rows(xa @ w.T)
        zb = geometry.normalize_rows(xb @ target_weights.T)
        return BatchAngles(geometry.pairwise_angles(za, zb), np.eye(xa.shape[0]))

    center = angles_for(center_weights)
    w_scheme = scheme_weights(center, params, scheme)
    frozen = logits(center, params)
    b = angles_for(weights)
    delta = frozen + w_scheme * (logits(b, params) - frozen)
    return float(np.mean(loss_from_logits(delta, b.targets, params.beta, b.mask)))


def gradient_path_check(seed: int = 0, trials: int = 4) -> CheckReport:
    """Analytic dW against central differences of the batch loss.

    Covers all modes, with and without each scheme.
    """
    rng = np.random.default_rng([seed, 99])
    schemes = [SchemeConfig("none"), SchemeConfig("pos_emphasis", s=20.0),
               SchemeConfig("curvature", s=10.0, c=1.5),
               SchemeConfig("attenuation_I", alpha=0.5), SchemeConfig("attenuation_II", alpha=0.8)]
    worst_abs = worst_rel = 0.0
    cases = 0
    h = 1e-6
    for mode in MODES:
        for scheme in schemes:
            if mode == "byol_like" and scheme.scheme in ATTENUATION:
                continue
            beta = 0.0 if mode == "byol_like" else 1.0
            params = MarginParams(m1=0.1, m2=0.4, tau=0.25, beta=beta)
            for _ in range(trials):
                w = rng.normal(size=(3, 4))
                wt = w if mode == "simclr_like" else w + 0.1 * rng.normal(size=w.shape)
                xa = rng.normal(size=(5, 4))
                xb = xa + 0.3 * rng.normal(size=xa.shape)
                _, dw, _ = batch_loss_and_grad(w, wt, xa, xb, params, scheme)
                r, c = int(rng.integers(3)), int(rng.integers(4))
                wp, wm = w.copy(), w.copy()
                wp[r, c] += h
                wm[r, c] -= h
                fd = (frozen_scheme_batch_loss(wp, wt, xa, xb, params, scheme, w)
                      - frozen_scheme_batch_loss(wm, wt, xa, xb, params, scheme, w)) / (2 * h)
                a, e = compare(dw[r, c], fd, 1e-5, 1e-9)
                worst_abs, worst_rel = max(worst_abs, a), max(worst_rel, e)
                cases += 1
    return CheckReport("simulator_gradient_path", worst_abs, worst_rel, cases, 1e-5)
