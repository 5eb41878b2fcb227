"""Uncertainty estimators (MC dropout, deep ensembles, DUQ) and uncertainty measures."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import RngStream, Tensor
from .models import NetworkSpec

LOG_FLOOR = 1e-12


class UQError(ValueError):
    pass


@dataclass
class McPredictionSet:
    """``S×L`` (classification) or ``S×H×W×L`` (segmentation) softmax outputs."""

    probs: np.ndarray
    provenance: str = "mc-dropout"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim < 2 or self.probs.shape[0] < 1:
            raise UQError("need at least one MC sample")
        if np.any(np.abs(self.probs.sum(axis=-1) - 1.0) > 1e-9) or np.any(self.probs < 0):
            raise UQError("every MC slice must be a probability vector")

    @property
    def S(self) -> int:
        return self.probs.shape[0]

    @property
    def L(self) -> int:
        return self.probs.shape[-1]

    def mean(self) -> np.ndarray:
        return self.probs.mean(axis=0)


# ---------------------------------------------------------------------------
# measures on plain arrays; the MC axis is second to last: (..., S, L)


def variance_from_probs(p: np.ndarray) -> np.ndarray:
    """Class-summed predictive variance ``E[f.f] - E[f].E[f]``, clamped at 0."""
    second = np.einsum("...sl,...sl->...s", p, p).mean(axis=-1)
    fbar = p.mean(axis=-2)
    first = np.einsum("...l,...l->...", fbar, fbar)
    return np.maximum(second - first, 0.0)


def entropy_of(p: np.ndarray) -> np.ndarray:
    """Natural-log entropy over the last axis; probabilities below 1e-12 are clamped inside the log."""
    return -np.sum(p * np.log(np.maximum(p, LOG_FLOOR)), axis=-1)


def entropy_from_probs(p: np.ndarray) -> np.ndarray:
    return entropy_of(p.mean(axis=-2))


def predictive_variance(mc: McPredictionSet) -> float:
    if mc.probs.ndim != 2:
        raise UQError("use pixelwise_uncertainty for segmentation sets")
    return float(variance_from_probs(mc.probs))


def predictive_entropy(mc: McPredictionSet) -> float:
    if mc.probs.ndim != 2:
        raise UQError("use pixelwise_uncertainty for segmentation sets")
    return float(entropy_from_probs(mc.probs))


@dataclass
class UncertaintyReport:
    epistemic_variance: float
    aleatoric_entropy: float
    mean_prediction: np.ndarray
    variance_map: Optional[np.ndarray] = None
    entropy_map: Optional[np.ndarray] = None


def uncertainty_report(mc: McPredictionSet) -> UncertaintyReport:
    if mc.probs.ndim == 2:
        return UncertaintyReport(predictive_variance(mc), predictive_entropy(mc), mc.mean())
    var_map, ent_map, _ = pixelwise_uncertainty(mc)
    return UncertaintyReport(float(var_map.mean()), float(ent_map.mean()), mc.mean(), var_map, ent_map)


def pixelwise_uncertainty(mc: McPredictionSet) -> tuple:
    """Per-pixel (variance map, entropy map, argmax of the mean map)."""
    p = np.moveaxis(mc.probs, 0, -2)  # (..., S, L)
    fbar = mc.probs.mean(axis=0)
    return variance_from_probs(p), entropy_of(fbar), fbar.argmax(axis=-1)


# ---------------------------------------------------------------------------
# differentiable measures on Tensors of shape (N, S, L)


def mean_prediction_t(probs: Tensor) -> Tensor:
    return ad.reduce("mean", probs, axis=1)


def variance_t(probs: Tensor) -> Tensor:
    """Per-sample predictive variance, ``(N, S, L) -> (N,)``."""
    second = ad.reduce("mean", ad.reduce("sum", ad.mul(probs, probs), axis=-1), axis=1)
    fbar = mean_prediction_t(probs)
    first = ad.reduce("sum", ad.mul(fbar, fbar), axis=-1)
    return ad.sub(second, first)


# ---------------------------------------------------------------------------
# estimators


def _expand_samples(x: Tensor, S: int) -> Tensor:
    n = x.shape[0]
    rep = ad.expand(x, S, axis=1)
    return ad.reshape(rep, (n * S,) + x.shape[1:])


@dataclass(frozen=True)
class McDropoutModel:
    """MC-dropout predictor: ``S`` stochastic passes with fresh masks."""

    spec: NetworkSpec
    params: dict
    provenance: str = "mc-dropout"

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def is_segmenter(self) -> bool:
        return self.spec.is_segmenter

    @property
    def stochastic(self) -> bool:
        return self.spec.stochastic

    def sample(self, x: Tensor, S: int, rngs: Sequence[RngStream]) -> Tensor:
        """Batched ``(N, ...)`` input -> ``(N, S, ..., L)`` probabilities.

        Sample ``i`` draws all its masks from ``rngs[i]``, so its result does
        not depend on which other samples share the batch.
        """
        if S < 1:
            raise UQError("S must be >= 1")
        n = x.shape[0]
        if len(rngs) != n:
            raise UQError("need one RngStream per sample")
        p = models.forward(self.spec, self.params, _expand_samples(x, S), "mc-sample", list(rngs))
        return ad.reshape(p, (n, S) + p.shape[1:])

    def deterministic(self, x: Tensor) -> Tensor:
        return models.forward(self.spec, self.params, x, "deterministic")


@dataclass(frozen=True)
class EnsembleModel:
    members: tuple
    provenance: str = "ensemble"

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if len(self.members) < 2:
            raise UQError("an ensemble needs at least two members")
        first = self.members[0][0]
        for spec, _ in self.members:
            if spec.layers != first.layers or spec.num_classes != first.num_classes:
                raise UQError("ensemble members must share architecture and classes")

    @property
    def M(self) -> int:
        return len(self.members)

    @property
    def num_classes(self) -> int:
        return self.members[0][0].num_classes

    @property
    def is_segmenter(self) -> bool:
        return self.members[0][0].is_segmenter

    @property
    def stochastic(self) -> bool:
        return True

    def sample(self, x: Tensor, S: int = 0, rngs=None) -> Tensor:
        """One deterministic pass per member, stacked on axis 1 in member order. ``S`` is ignored."""
        outs = [models.forward(spec, params, x, "deterministic") for spec, params in self.members]
        return ad.stack(outs, axis=1)

    def deterministic(self, x: Tensor) -> Tensor:
        return mean_prediction_t(self.sample(x))


def _single(x) -> Tensor:
    xt = x if isinstance(x, Tensor) else ad.constant(x)
    return ad.reshape(xt, (1,) + xt.shape)


def mc_predict(spec: NetworkSpec, params, x, S: int, rng: RngStream) -> McPredictionSet:
    model = McDropoutModel(spec, params)
    return McPredictionSet(model.sample(_single(x), S, [rng]).data[0], "mc-dropout")


def ensemble_predict(ensemble: EnsembleModel, x) -> McPredictionSet:
    return McPredictionSet(ensemble.sample(_single(x)).data[0], "ensemble")


def sample_probs(model, x: np.ndarray, S: int, rngs: Sequence[RngStream], chunk: int = 64) -> np.ndarray:
    """Plain-array MC probabilities ``(N, S, ..., L)`` for a batch, evaluated in chunks."""
    out = []
    for i in range(0, len(x), chunk):
        out.append(model.sample(ad.constant(x[i:i + chunk]), S, list(rngs[i:i + chunk])).data)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# DUQ


def rbf_kernel(a: np.ndarray, centroids: np.ndarray, sigma: float) -> np.ndarray:
    """``K(a, e_c) = exp(-|a - e_c|^2 / (2 sigma^2))`` for every centroid; ``a`` is ``(..., D)``."""
    diff = a[..., None, :] - centroids
    return np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * sigma * sigma))


@dataclass(frozen=True)
class DuqHead:
    """Class-mean centroids in the penultimate feature space of a trained classifier."""

    spec: NetworkSpec
    params: dict
    centroids: np.ndarray
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise UQError("sigma must be positive")
        if self.centroids.shape[0] != self.spec.num_classes:
            raise UQError("need exactly one centroid per class")

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def is_segmenter(self) -> bool:
        return False

    @property
    def stochastic(self) -> bool:
        return False

    def features_t(self, x: Tensor) -> Tensor:
        return models.features(self.spec, self.params, x, "deterministic")

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.features_t(ad.constant(x)).data

    def kernels(self, x: np.ndarray) -> np.ndarray:
        return rbf_kernel(self.features(x), self.centroids, self.sigma)

    def kernel_to_t(self, x: Tensor, targets: np.ndarray) -> Tensor:
        """Differentiable ``K(f(x_i), e_{c_i})`` for a batch, ``(N,)``."""
        f = self.features_t(x)
        diff = ad.sub(f, ad.constant(self.centroids[np.asarray(targets)]))
        d2 = ad.reduce("sum", ad.mul(diff, diff), axis=-1)
        return ad.exp(ad.mul(d2, -1.0 / (2.0 * self.sigma ** 2)))


def sigma_from_centroids(centroids: np.ndarray) -> float:
    """Median pairwise centroid distance divided by sqrt(2 ln 2)."""
    L = len(centroids)
    d = [np.linalg.norm(centroids[i] - centroids[j]) for i in range(L) for j in range(i + 1, L)]
    med = float(np.median(d))
    if med <= 0:
        raise UQError("centroids coincide; cannot choose a bandwidth")
    return med / math.sqrt(2.0 * math.log(2.0))


def duq_fit(spec: NetworkSpec, params, inputs: np.ndarray, labels: np.ndarray,
            sigma: Optional[float] = None) -> DuqHead:
    labels = np.asarray(labels)
    feats = models.features(spec, params, ad.constant(np.asarray(inputs, dtype=np.float64))).data
    cents = []
    for c in range(spec.num_classes):
        sel = feats[labels == c]
        if len(sel) == 0:
            raise UQError(f"class {c} has no samples")
        cents.append(sel.mean(axis=0))
    centroids = np.stack(cents)
    if sigma is None:
        sigma = sigma_from_centroids(centroids)
    return DuqHead(spec, params, centroids, float(sigma))


def duq_predict_features(head: DuqHead, feature: np.ndarray) -> tuple:
    k = rbf_kernel(np.asarray(feature, dtype=np.float64), head.centroids, head.sigma)
    cls = int(np.argmax(k))  # first maximum: ties go to the lower class index
    return cls, k, float(1.0 - k[cls])


def duq_predict(head: DuqHead, x) -> tuple:
    """``(class, kernel vector, uncertainty)`` with uncertainty ``1 - max_c K_c``."""
    return duq_predict_features(head, head.features(np.asarray(x, dtype=np.float64)[None])[0])


def duq_uncertainty(head: DuqHead, x: np.ndarray) -> tuple:
    """Batch version: ``(classes, uncertainties)``."""
    k = head.kernels(x)
    return k.argmax(axis=-1), 1.0 - k.max(axis=-1)


# ---------------------------------------------------------------------------
# dumps


def save_mc(mc: McPredictionSet, path) -> None:
    """Header ``# S=<s> L=<l>``, then one comma-delimited row per MC sample."""
    if mc.probs.ndim != 2:
        raise UQError("only S×L sets can be dumped")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# S={mc.S} L={mc.L}\n")
        for row in mc.probs:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_mc(path, provenance: str = "mc-dropout") -> McPredictionSet:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "#":
            raise UQError(f"{path}: bad header")
        S = int(header[1].split("=")[1])
        L = int(header[2].split("=")[1])
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    probs = np.array(rows)
    if probs.shape != (S, L):
        raise UQError(f"{path}: header says {S}x{L}, body is {probs.shape}")
    return McPredictionSet(probs, provenance)
