"""FGSM and L-inf PGD driven by uncertainty-attack objectives.

Every objective ``J`` is minimized after multiplying by ``gamma``: ``gamma=+1``
is the overconfidence (O-) attack, ``gamma=-1`` the underconfidence (U-)
attack. Batches of samples are attacked together; each sample owns its
RngStream, and since no op mixes samples, a sample's result does not depend on
its batch mates.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import uq
from .autodiff import Graph, RngStream, Tensor

logger = logging.getLogger(__name__)

OBJECTIVES = ("mva", "ata", "stab", "duq", "ust", "ce")
CRITERIA = ("min-uncertainty", "misclassify")
LOG_FLOOR = 1e-12

# defaults reported for the original experiments
PROB_STEPS, PROB_MC, PROB_STEP_SIZE = 150, 30, 2e-3
DUQ_STEPS, DUQ_STEP_SIZE = 10, 1e-3
SEG_STEPS, SEG_STEP_SIZE, SEG_EPS, SEG_MC = 100, 1e-3, 2 / 255, 20
EPS_GRID = tuple(k / 255 for k in range(0, 9))

CHUNK = 32


class AttackError(RuntimeError):
    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class Objective:
    kind: str
    gamma: int = 1
    target: Optional[int] = None
    s_attack: int = PROB_MC
    retarget: bool = False
    ust_variant: str = "bg"

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.kind!r}; choose from {OBJECTIVES}")
        if self.gamma not in (-1, 1):
            raise ValueError("gamma must be -1 or +1")
        if self.s_attack < 1:
            raise ValueError("s_attack must be >= 1")
        if self.kind == "mva" and self.s_attack < 2:
            raise ValueError("MVA needs s_attack >= 2")
        if self.ust_variant not in ("bg", "fb"):
            raise ValueError("ust_variant is 'bg' or 'fb'")

    @property
    def label(self) -> str:
        name = self.kind.upper() if self.kind != "ust" else f"UST({self.ust_variant.capitalize()})"
        return name if self.gamma == 1 else f"{name}-U"


@dataclass(frozen=True)
class AttackConfig:
    eps: float
    steps: int = PROB_STEPS
    step_size: float = PROB_STEP_SIZE
    criterion: str = "min-uncertainty"
    seed: int = 0
    box: bool = True
    frozen_masks: bool = False

    def __post_init__(self):
        if self.eps < 0 or self.steps < 1 or self.step_size <= 0:
            raise ValueError("need eps >= 0, steps >= 1, step_size > 0")
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}")


@dataclass
class Trace:
    """Per-iterate records; index 0 is the clean input."""

    objective: np.ndarray
    variance: np.ndarray
    entropy: np.ndarray
    predicted: np.ndarray

    def __len__(self) -> int:
        return len(self.variance)

    @staticmethod
    def from_variance(values: Sequence[float], predicted: Optional[Sequence[int]] = None) -> "Trace":
        v = np.asarray(values, dtype=np.float64)
        p = np.zeros(len(v), dtype=np.int64) if predicted is None else np.asarray(predicted)
        return Trace(np.zeros(len(v)), v, np.zeros(len(v)), p)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    x_clean: np.ndarray
    best_index: int
    trace: Trace
    objective: Objective
    eps: float
    criterion: str
    target: Optional[int] = None
    label: Optional[int] = None

    @property
    def clean_variance(self) -> float:
        return float(self.trace.variance[0])

    @property
    def best_variance(self) -> float:
        return float(self.trace.variance[self.best_index])

    @property
    def clean_entropy(self) -> float:
        return float(self.trace.entropy[0])

    @property
    def best_entropy(self) -> float:
        return float(self.trace.entropy[self.best_index])

    @property
    def clean_pred(self) -> int:
        return int(self.trace.predicted[0])

    @property
    def adv_pred(self) -> int:
        return int(self.trace.predicted[self.best_index])

    @property
    def flags(self) -> dict:
        key = _uncertainty_key(self.objective.kind)
        clean, best = getattr(self.trace, key)[0], getattr(self.trace, key)[self.best_index]
        return {
            "flipped": self.adv_pred != self.clean_pred,
            "misclassified": self.label is not None and self.adv_pred != self.label,
            "uncertainty_moved": bool(self.objective.gamma * (best - clean) < 0),
        }


# ---------------------------------------------------------------------------
# primitives


def project_linf(x_t: np.ndarray, x_0: np.ndarray, eps: float, box: bool = True) -> np.ndarray:
    """Clamp into the L-inf ball around ``x_0``, then into [0, 1] if ``box``."""
    x_t, x_0 = np.asarray(x_t, dtype=np.float64), np.asarray(x_0, dtype=np.float64)
    if x_t.shape != x_0.shape:
        raise ValueError("shapes differ")
    out = np.minimum(np.maximum(x_t, x_0 - eps), x_0 + eps)
    if box:
        out = np.clip(out, 0.0, 1.0)
    return out


def fgsm(loss_fn: Callable[[Tensor], Tensor], x, eps: float, box: bool = True) -> np.ndarray:
    """One ascent step ``x + eps * sign(grad loss)``."""
    x = np.asarray(x, dtype=np.float64)
    g = Graph()
    xv = g.variable(x)
    gr = ad.grad(loss_fn(xv), xv)
    if not np.all(np.isfinite(gr)):
        raise AttackError("non-finite gradient")
    out = x + eps * np.sign(gr)
    return np.clip(out, 0.0, 1.0) if box else out


def _uncertainty_key(kind: str) -> str:
    return "entropy" if kind == "ust" else "variance"


def select_best(trace: Trace, criterion: str, label: Optional[int] = None, gamma: int = 1,
                kind: str = "mva") -> int:
    """Pick the returned iterate.

    ``min-uncertainty``: smallest ``gamma * uncertainty``; variance for
    MVA/DUQ (DUQ stores its uncertainty in the variance slot) and
    (variance, entropy) lexicographically for ATA/STAB/CE. UST is a targeted
    segmentation attack, so its iterates are ranked by the objective itself;
    ranking by entropy would undo the full-break variant.
    ``misclassify``: first iterate predicted != label, else the last one.
    Ties go to the earliest iterate.
    """
    n = len(trace)
    if n == 0:
        raise ValueError("empty trace")
    if criterion == "misclassify":
        if label is None:
            raise ValueError("misclassify criterion needs the true label")
        wrong = np.nonzero(np.asarray(trace.predicted) != label)[0]
        return int(wrong[0]) if len(wrong) else n - 1
    if criterion != "min-uncertainty":
        raise ValueError(f"unknown criterion {criterion!r}")
    key = "objective" if kind == "ust" else _uncertainty_key(kind)
    primary = gamma * np.asarray(getattr(trace, key), dtype=np.float64)
    best = np.flatnonzero(primary == primary.min())
    if kind in ("ata", "stab", "ce") and len(best) > 1:
        secondary = gamma * np.asarray(trace.entropy, dtype=np.float64)[best]
        best = best[secondary == secondary.min()]
    return int(best[0])


def running_best(trace: Trace, gamma: int = 1, kind: str = "mva") -> np.ndarray:
    """Uncertainty of the best iterate among the first ``t+1``, for every ``t``."""
    vals = np.asarray(getattr(trace, "objective" if kind == "ust" else _uncertainty_key(kind)), dtype=np.float64)
    out = np.empty_like(vals)
    for t in range(len(vals)):
        sub = Trace(trace.objective[: t + 1], trace.variance[: t + 1], trace.entropy[: t + 1], trace.predicted[: t + 1])
        out[t] = vals[select_best(sub, "min-uncertainty", gamma=gamma, kind=kind)]
    return out


# ---------------------------------------------------------------------------
# objectives (batched; each returns a per-sample (N,) tensor)


def obj_mva(probs: Tensor) -> Tensor:
    """``ln(variance + 1e-12)``; pixel-averaged variance for segmentation."""
    v = uq.variance_t(probs)
    if len(v.shape) > 1:
        v = ad.reduce("mean", ad.reshape(v, (v.shape[0], -1)), axis=1)
    return ad.log(ad.add(v, LOG_FLOOR))


def _neg_log_mean_prob(probs: Tensor, c: np.ndarray) -> Tensor:
    fbar = uq.mean_prediction_t(probs)
    return ad.neg(ad.log(ad.add(ad.take(fbar, c), LOG_FLOOR)))


def obj_ata(probs: Tensor, targets: np.ndarray) -> Tensor:
    """``-ln E_S[f]_c`` toward the most likely wrong class (resolved by the caller)."""
    return _neg_log_mean_prob(probs, targets)


def obj_stab(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Same loss as ATA, with ``c`` the most likely class overall."""
    return _neg_log_mean_prob(probs, targets)


def obj_ce_evasion(probs: Tensor, labels: np.ndarray) -> Tensor:
    """``+ln E_S[f]_y``: descending it lowers the true-class probability."""
    return ad.neg(_neg_log_mean_prob(probs, labels))


def obj_duq(head: uq.DuqHead, x: Tensor, targets: np.ndarray) -> Tensor:
    """``-K(f(x), e_c)``."""
    return ad.neg(head.kernel_to_t(x, targets))


def obj_ust(probs: Tensor, targets: np.ndarray) -> Tensor:
    """``-sum_pixels ln f(x)_{pixel, c}`` on a deterministic ``(N, H, W, L)`` map."""
    n = probs.shape[0]
    idx = np.broadcast_to(np.asarray(targets).reshape((n,) + (1,) * (len(probs.shape) - 2)), probs.shape[:-1])
    lp = ad.log(ad.add(ad.take(probs, idx), LOG_FLOOR))
    return ad.neg(ad.reduce("sum", ad.reshape(lp, (n, -1)), axis=1))


def ata_target(mean_pred: np.ndarray, label: int) -> int:
    p = np.array(mean_pred, dtype=np.float64)
    if len(p) < 2:
        raise ValueError("ATA needs at least two classes")
    p[label] = -np.inf
    return int(np.argmax(p))


def stab_target(mean_pred: np.ndarray) -> int:
    return int(np.argmax(mean_pred))


def ust_target(pred_map: np.ndarray, num_classes: int, variant: str = "bg") -> int:
    """Modal class of the predicted map (``bg``) or its least frequent class (``fb``)."""
    counts = np.bincount(np.asarray(pred_map).reshape(-1), minlength=num_classes)
    return int(np.argmax(counts)) if variant == "bg" else int(np.argmin(counts))


# ---------------------------------------------------------------------------
# PGD


def _check_context(model, objective: Objective) -> None:
    kind = objective.kind
    if kind == "duq":
        if not isinstance(model, uq.DuqHead):
            raise ValueError("DUQ objective needs a DuqHead")
        return
    if isinstance(model, uq.DuqHead):
        raise ValueError(f"{kind.upper()} needs an MC-capable model, not DUQ")
    if kind == "ust" and not model.is_segmenter:
        raise ValueError("UST needs a segmenter")
    if kind in ("ata", "stab", "ce") and model.is_segmenter:
        raise ValueError(f"{kind.upper()} is defined for classifiers")
    if kind == "mva" and not model.stochastic:
        raise ValueError("MVA needs a stochastic model (dropout or ensemble)")


class _Evaluator:
    """Computes objective, gradient and trace statistics at one iterate."""

    def __init__(self, model, objective: Objective, rngs, labels, frozen: bool):
        self.model = model
        self.obj = objective
        self.labels = labels
        self.frozen = frozen
        self.base_rngs = rngs
        self.rngs = [r.clone() for r in rngs] if frozen else rngs
        self.targets = None

    def _streams(self):
        return [r.clone() for r in self.base_rngs] if self.frozen else self.rngs

    def _resolve_targets(self, stats) -> np.ndarray:
        obj, n = self.obj, len(self.base_rngs)
        if obj.target is not None:
            return np.full(n, obj.target, dtype=np.int64)
        if obj.kind == "ce":
            return np.asarray(self.labels, dtype=np.int64)
        if obj.kind == "ata":
            return np.array([ata_target(m, y) for m, y in zip(stats, self.labels)], dtype=np.int64)
        if obj.kind == "stab":
            return np.array([stab_target(m) for m in stats], dtype=np.int64)
        if obj.kind == "duq":
            return stats.argmax(axis=-1)
        if obj.kind == "ust":
            L = self.model.num_classes
            return np.array([ust_target(m, L, obj.ust_variant) for m in stats], dtype=np.int64)
        return None

    def __call__(self, x: np.ndarray, first: bool, need_grad: bool):
        g = Graph()
        xv = g.variable(x)
        kind, model = self.obj.kind, self.model
        if kind == "duq":
            kern = model.kernels(x)
            if first or self.obj.retarget:
                self.targets = self._resolve_targets(kern)
            J = obj_duq(model, xv, self.targets)
            var = 1.0 - kern.max(axis=-1)
            ent = np.full(len(x), np.nan)
            pred = kern.argmax(axis=-1)
        elif kind == "ust":
            probs = model.deterministic(xv)
            pmap = probs.data.argmax(axis=-1)
            if first or self.obj.retarget:
                self.targets = self._resolve_targets(pmap)
            J = obj_ust(probs, self.targets)
            ent = uq.entropy_of(probs.data).reshape(len(x), -1).mean(axis=1)
            var = np.full(len(x), np.nan)
            pred = np.array([ust_target(m, model.num_classes, "bg") for m in pmap])
        else:
            probs = model.sample(xv, self.obj.s_attack, self._streams())
            p = probs.data
            mean = p.mean(axis=1)
            if kind == "mva":
                J = obj_mva(probs)
            else:
                if first or self.obj.retarget:
                    self.targets = self._resolve_targets(mean)
                J = {"ata": obj_ata, "stab": obj_stab, "ce": obj_ce_evasion}[kind](probs, self.targets)
            pv = np.moveaxis(p, 1, -2)
            var = uq.variance_from_probs(pv)
            ent = uq.entropy_of(mean)
            if var.ndim > 1:
                var = var.reshape(len(x), -1).mean(axis=1)
                ent = ent.reshape(len(x), -1).mean(axis=1)
                pred = np.array([ust_target(m, model.num_classes, "bg") for m in mean.argmax(axis=-1)])
            else:
                pred = mean.argmax(axis=-1)
        grad = None
        if need_grad:
            grad = ad.grad(ad.reduce("sum", J), xv)
            if not np.all(np.isfinite(grad)):
                raise ad.NonFiniteError("non-finite input gradient")
        return J.data.copy(), grad, var, ent, pred


def pgd_batch(model, x: np.ndarray, objective: Objective, cfg: AttackConfig,
              rngs: Sequence[RngStream], labels: Optional[Sequence[int]] = None) -> list:
    """Run PGD on a batch ``x`` of shape ``(N, ...)``; one AttackResult per sample."""
    _check_context(model, objective)
    x0 = np.asarray(x, dtype=np.float64)
    n = len(x0)
    if len(rngs) != n:
        raise ValueError("need one RngStream per sample")
    if labels is None and (objective.kind in ("ata", "ce") or cfg.criterion == "misclassify"):
        raise ValueError(f"{objective.kind.upper()} with criterion {cfg.criterion} needs labels")
    labels_arr = None if labels is None else np.asarray(labels, dtype=np.int64)
    evaluate = _Evaluator(model, objective, list(rngs), labels_arr, cfg.frozen_masks)
    T = cfg.steps
    iterates = np.empty((T + 1,) + x0.shape)
    rec = {k: np.full((T + 1, n), np.nan) for k in ("objective", "variance", "entropy")}
    rec_pred = np.zeros((T + 1, n), dtype=np.int64)
    xt = x0.copy()
    done = 0
    try:
        for t in range(T + 1):
            J, g, var, ent, pred = evaluate(xt, t == 0, t < T)
            iterates[t] = xt
            rec["objective"][t], rec["variance"][t], rec["entropy"][t] = J, var, ent
            rec_pred[t] = pred
            done = t + 1
            if t < T:
                step = cfg.step_size * objective.gamma * np.sign(g)
                xt = project_linf(xt - step, x0, cfg.eps, cfg.box)
    except (ad.NonFiniteError, FloatingPointError, ValueError) as exc:
        partial = [Trace(rec["objective"][:done, i], rec["variance"][:done, i], rec["entropy"][:done, i],
                         rec_pred[:done, i]) for i in range(n)]
        raise AttackError(f"attack aborted at iteration {done}: {exc}", partial) from exc
    results = []
    for i in range(n):
        trace = Trace(rec["objective"][:, i], rec["variance"][:, i], rec["entropy"][:, i], rec_pred[:, i])
        y = None if labels_arr is None else int(labels_arr[i])
        best = select_best(trace, cfg.criterion, y, objective.gamma, objective.kind)
        target = None if evaluate.targets is None else int(evaluate.targets[i])
        results.append(AttackResult(iterates[best, i].copy(), x0[i].copy(), best, trace, objective,
                                    cfg.eps, cfg.criterion, target, y))
    return results


def pgd_loss(loss_fn: Callable[[Tensor], Tensor], x, eps: float, steps: int, step_size: float,
             gamma: int = 1, box: bool = True) -> tuple:
    """PGD on an arbitrary scalar loss; returns ``(iterates, objective trace)``.

    Same update and projection as :func:`pgd_batch`, without any UQ context.
    """
    x0 = np.asarray(x, dtype=np.float64)
    xt = x0.copy()
    iterates, values = [], []
    for t in range(steps + 1):
        g = Graph()
        xv = g.variable(xt)
        J = loss_fn(xv)
        iterates.append(xt)
        values.append(J.item())
        if t == steps:
            break
        gr = ad.grad(J, xv)
        if not np.all(np.isfinite(gr)):
            raise AttackError(f"non-finite gradient at iteration {t}")
        xt = project_linf(xt - step_size * gamma * np.sign(gr), x0, eps, box)
    return iterates, np.array(values)


def pgd(model, x, objective: Objective, cfg: AttackConfig, rng: RngStream, label: Optional[int] = None) -> AttackResult:
    """Single-sample PGD; see :func:`pgd_batch`."""
    labels = None if label is None else [label]
    return pgd_batch(model, np.asarray(x, dtype=np.float64)[None], objective, cfg, [rng], labels)[0]


def sample_stream(seed: int, index: int, purpose: str = "attack") -> RngStream:
    return RngStream.derive(seed, purpose, index)


def _attack_chunk(args):
    model, x, labels, objective, cfg, indices, purpose = args
    rngs = [sample_stream(cfg.seed, int(i), purpose) for i in indices]
    return pgd_batch(model, x, objective, cfg, rngs, labels)


def attack_dataset(model, x: np.ndarray, objective: Objective, cfg: AttackConfig,
                   labels: Optional[np.ndarray] = None, workers: int = 1, chunk: int = CHUNK,
                   indices: Optional[np.ndarray] = None, purpose: str = "attack") -> list:
    """Attack every sample; chunks are fixed by sample index, so output is independent of ``workers``."""
    x = np.asarray(x, dtype=np.float64)
    idx = np.arange(len(x)) if indices is None else np.asarray(indices)
    jobs = []
    for s in range(0, len(x), chunk):
        lab = None if labels is None else np.asarray(labels)[s:s + chunk]
        jobs.append((model, x[s:s + chunk], lab, objective, cfg, idx[s:s + chunk], purpose))
    if workers <= 1 or len(jobs) == 1:
        parts = [_attack_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_attack_chunk, jobs))
    return [r for part in parts for r in part]


# ---------------------------------------------------------------------------
# dumps

RECORD_COLUMNS = ("sample_id", "epsilon", "objective", "gamma", "criterion", "best_iterate",
                  "clean_variance", "adv_variance", "clean_entropy", "adv_entropy",
                  "clean_pred", "adv_pred", "label", "flipped", "misclassified", "uncertainty_moved")


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return format(float(v), ".12g")


def write_records(results: Sequence[AttackResult], path, sample_ids: Optional[Sequence[int]] = None,
                  trace_dir=None) -> None:
    ids = range(len(results)) if sample_ids is None else sample_ids
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(RECORD_COLUMNS) + "\n")
        for sid, r in zip(ids, results):
            fl = r.flags
            row = [sid, r.eps, r.objective.kind, r.objective.gamma, r.criterion, r.best_index,
                   r.clean_variance, r.best_variance, r.clean_entropy, r.best_entropy,
                   r.clean_pred, r.adv_pred, r.label, fl["flipped"], fl["misclassified"], fl["uncertainty_moved"]]
            fh.write(",".join(fmt(v) for v in row) + "\n")
    if trace_dir is not None:
        os.makedirs(trace_dir, exist_ok=True)
        for sid, r in zip(ids, results):
            write_trace(r.trace, os.path.join(trace_dir, f"trace_{sid}.csv"))


def write_trace(trace: Trace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration,objective,variance,entropy,predicted\n")
        for t in range(len(trace)):
            fh.write(",".join([str(t), fmt(trace.objective[t]), fmt(trace.variance[t]),
                               fmt(trace.entropy[t]), str(int(trace.predicted[t]))]) + "\n")


def read_records(path) -> list:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        return [dict(zip(header, line.rstrip("\n").split(","))) for line in fh if line.strip()]
