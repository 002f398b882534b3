"""Anomaly scorers: softmax confidence (MSP, ODIN) and two pixel-level baselines.

Every scorer maps a batch of N x C x H x W images to N scores where higher
means more anomalous.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .metrics import ScoredExample
from .model import MultiHeadModel
from .rng import Rng
from .splits import HoldOutSplit
from .tensor import Tensor

Scorer = Callable[[np.ndarray], np.ndarray]

VARIANCE_FLOOR = 1e-6
GMM_COMPONENTS = 3


@dataclass(frozen=True)
class OdinConfig:
    temperature: float = 1000.0
    epsilon: float = 5e-5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def confidence_from_logits(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Largest softmax probability of ``logits / temperature`` per row."""
    z = np.atleast_2d(logits) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).max(axis=1)


def _logits(model: MultiHeadModel, x: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return model.class_logits(x).data


def msp_scores(model: MultiHeadModel, images, batch_size: int = 256) -> np.ndarray:
    x = _as_batch(images)
    out = [1.0 - confidence_from_logits(_logits(model, x[i:i + batch_size]))
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.empty(0)


def msp_score(model: MultiHeadModel, image) -> float:
    """1 - max class probability."""
    return float(msp_scores(model, image)[0])


def odin_perturb(model: MultiHeadModel, images: np.ndarray, cfg: OdinConfig) -> np.ndarray:
    """Step each input against the gradient of -log max_c softmax(logits/T), clamp to [0, 1].

    Rows are independent (normalization is per example), so the gradient of
    the batch sum is the per-example gradient. sign(0) is 0.
    """
    x = Tensor(images, requires_grad=True)
    logits = model.class_logits(x)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(images)), logits.data.argmax(axis=1)] = 1.0
    ls = T.log_softmax(T.scale(logits, 1.0 / cfg.temperature), axis=1)
    T.backward(T.neg(T.sum_(T.mul(ls, Tensor(onehot)))))
    return np.clip(images - cfg.epsilon * np.sign(x.grad), 0.0, 1.0)


def odin_scores(model: MultiHeadModel, images, cfg: OdinConfig = OdinConfig(),
                batch_size: int = 256) -> np.ndarray:
    x = _as_batch(images)
    out = []
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        if cfg.epsilon > 0:
            xb = odin_perturb(model, xb, cfg)
        out.append(1.0 - confidence_from_logits(_logits(model, xb), cfg.temperature))
    return np.concatenate(out) if out else np.empty(0)


def odin_score(model: MultiHeadModel, image, cfg: OdinConfig = OdinConfig()) -> float:
    return float(odin_scores(model, image, cfg)[0])


# ---------------------------------------------------------------------------
# channel-wise pixel mixture of Gaussians


@dataclass
class PixelGmm:
    weights: np.ndarray    # C x 3
    means: np.ndarray      # C x 3
    variances: np.ndarray  # C x 3
    log_likelihood_trace: list[list[float]] = field(default_factory=list)

    @property
    def n_channels(self) -> int:
        return self.weights.shape[0]

    def log_density(self, values: np.ndarray, channel: int) -> np.ndarray:
        lp = _component_logpdf(np.asarray(values, dtype=np.float64).ravel(), self.weights[channel],
                               self.means[channel], self.variances[channel])
        return _logsumexp(lp)


def _component_logpdf(x, w, mu, var):
    x = x.reshape(-1, 1)
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    return logw - 0.5 * np.log(2 * np.pi * var) - (x - mu) ** 2 / (2 * var)


def _logsumexp(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def fit_gmm_1d(x: np.ndarray, n_components: int = GMM_COMPONENTS, max_iters: int = 500,
               tol: float = 1e-7, floor: float = VARIANCE_FLOOR):
    """EM for a scalar Gaussian mixture.

    Means start at the 10/50/90% quantiles, variances at the data variance,
    weights uniform. Stops after ``max_iters`` or when the mean
    log-likelihood gains less than ``tol``. Returns (weights, means,
    variances, per-iteration mean log-likelihood).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    qs = np.linspace(0.1, 0.9, n_components) if n_components > 1 else np.array([0.5])
    mu = np.quantile(x, qs)
    var = np.full(n_components, max(float(x.var()), floor))
    w = np.full(n_components, 1.0 / n_components)
    lp = _component_logpdf(x, w, mu, var)
    ll = float(_logsumexp(lp).mean())
    trace = [ll]
    for _ in range(max_iters):
        resp = np.exp(lp - _logsumexp(lp)[:, None])
        nk = resp.sum(axis=0)
        live = nk > 0
        w = nk / len(x)
        mu = np.where(live, (resp * x[:, None]).sum(axis=0) / np.where(live, nk, 1.0), mu)
        dev = (x[:, None] - mu) ** 2
        var = np.where(live, (resp * dev).sum(axis=0) / np.where(live, nk, 1.0), var)
        var = np.maximum(var, floor)
        lp = _component_logpdf(x, w, mu, var)
        new = float(_logsumexp(lp).mean())
        trace.append(new)
        gain = new - ll
        ll = new
        if gain < tol:
            break
    return w, mu, var, trace


def fit_pixel_gmm(train_images, max_iters: int = 500, tol: float = 1e-7, rng: Rng | None = None,
                  max_pixels: int | None = None) -> PixelGmm:
    """One 3-component mixture per channel over all pixel values of that channel.

    ``max_pixels`` caps the pixels used per channel (sampled with ``rng``).
    """
    x = _as_batch(train_images)
    ws, mus, vs, traces = [], [], [], []
    for c in range(x.shape[1]):
        vals = x[:, c].ravel()
        if max_pixels is not None and vals.size > max_pixels:
            stream = (rng or Rng(0)).child(f"gmm/channel{c}")
            vals = vals[stream.choice(vals.size, size=max_pixels, replace=False)]
        w, mu, var, trace = fit_gmm_1d(vals, GMM_COMPONENTS, max_iters, tol)
        ws.append(w)
        mus.append(mu)
        vs.append(var)
        traces.append(trace)
    return PixelGmm(np.array(ws), np.array(mus), np.array(vs), traces)


def gmm_scores(gmm: PixelGmm, images) -> np.ndarray:
    """Negative mean per-pixel log-likelihood, summed over channels."""
    x = _as_batch(images)
    if x.shape[1] != gmm.n_channels:
        raise ValueError(f"image has {x.shape[1]} channels, mixture has {gmm.n_channels}")
    total = np.zeros(len(x))
    for c in range(gmm.n_channels):
        vals = x[:, c].reshape(len(x), -1)
        lp = _logsumexp(_component_logpdf(vals.ravel(), gmm.weights[c], gmm.means[c], gmm.variances[c]))
        total -= lp.reshape(vals.shape).mean(axis=1)
    return total


def gmm_score(gmm: PixelGmm, image) -> float:
    return float(gmm_scores(gmm, image)[0])


# ---------------------------------------------------------------------------
# edge energy

def edge_energy(images) -> np.ndarray:
    """Mean Sobel gradient magnitude of the channel-mean image (symmetric borders)."""
    x = _as_batch(images)
    h, w = x.shape[-2:]
    if h < 3 or w < 3:
        raise ValueError(f"edge energy needs images of at least 3x3, got {h}x{w}")
    g = np.pad(x.mean(axis=1), [(0, 0), (1, 1), (1, 1)], mode="symmetric")
    # Sobel as a [1, 2, 1] smoothing followed by a central difference, so
    # flat regions give exactly zero
    rows = g[:, :-2] + 2 * g[:, 1:-1] + g[:, 2:]
    cols = g[:, :, :-2] + 2 * g[:, :, 1:-1] + g[:, :, 2:]
    gx = rows[:, :, 2:] - rows[:, :, :-2]
    gy = cols[:, 2:] - cols[:, :-2]
    return np.sqrt(gx ** 2 + gy ** 2).mean(axis=(1, 2))


def edge_energy_score(image, polarity: str = "high_is_anomalous") -> float:
    return float(edge_scores(image, polarity)[0])


def edge_scores(images, polarity: str = "high_is_anomalous") -> np.ndarray:
    if polarity not in ("low_is_anomalous", "high_is_anomalous"):
        raise ValueError(f"unknown polarity {polarity!r}")
    e = edge_energy(images)
    return -e if polarity == "low_is_anomalous" else e


# ---------------------------------------------------------------------------


def msp_scorer(model: MultiHeadModel) -> Scorer:
    return lambda images: msp_scores(model, images)


def odin_scorer(model: MultiHeadModel, cfg: OdinConfig = OdinConfig()) -> Scorer:
    return lambda images: odin_scores(model, images, cfg)


def gmm_scorer(gmm: PixelGmm) -> Scorer:
    return lambda images: gmm_scores(gmm, images)


def edge_scorer(polarity: str = "high_is_anomalous") -> Scorer:
    return lambda images: edge_scores(images, polarity)


def score_test_set(scorer: Scorer, split: HoldOutSplit) -> list[ScoredExample]:
    scores = np.asarray(scorer(split.test_images), dtype=np.float64)
    if scores.shape != (len(split),):
        raise ValueError(f"scorer returned {scores.shape} scores for {len(split)} test examples")
    return [ScoredExample(float(s), bool(f)) for s, f in zip(scores, split.is_anomaly)]
