"""Security curves, accuracy-rejection curves, segmentation map comparisons; CSV and SVG output."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from . import attacks, uq
from .autodiff import RngStream
from .data import OodMixture

logger = logging.getLogger(__name__)

EVAL_MC = 100
SEG_MC = attacks.SEG_MC
R_GRID = tuple(round(0.05 * k, 2) for k in range(19))
SVG_LOG_FLOOR = 1e-12

SECURITY_COLUMNS = ("epsilon", "accuracy", "entropy_mean", "variance_mean", "objective", "criterion")
REJECTION_COLUMNS = ("rejection_rate", "accuracy", "epsilon", "measure")
SEG_COLUMNS = ("attack", "region", "variance_mean", "entropy_mean", "flip_fraction")


def q12(v: float) -> float:
    """Round to the 12 significant digits used on disk, so CSV round trips are exact."""
    return float(attacks.fmt(v)) if math.isfinite(v) else float(v)


# ---------------------------------------------------------------------------
# uncertainty under a fixed evaluation protocol


@dataclass
class Evaluation:
    variance: np.ndarray
    entropy: np.ndarray
    predicted: np.ndarray


def eval_streams(seed: int, indices: Sequence[int]) -> list:
    return [RngStream.derive(seed, "eval", int(i)) for i in indices]


def evaluate(model, x: np.ndarray, S: int = EVAL_MC, seed: int = 0,
             indices: Optional[Sequence[int]] = None) -> Evaluation:
    """Per-sample uncertainty with common per-sample streams.

    Sample ``i`` always uses the stream ``derive(seed, "eval", indices[i])``,
    so clean and adversarial inputs see the same dropout masks. DUQ heads
    report ``1 - max K`` as the variance column and NaN entropy.
    """
    x = np.asarray(x, dtype=np.float64)
    idx = np.arange(len(x)) if indices is None else np.asarray(indices)
    if isinstance(model, uq.DuqHead):
        pred, u = uq.duq_uncertainty(model, x)
        return Evaluation(u, np.full(len(x), np.nan), pred)
    p = uq.sample_probs(model, x, S, eval_streams(seed, idx))
    var = uq.variance_from_probs(np.moveaxis(p, 1, -2))
    mean = p.mean(axis=1)
    return Evaluation(var, uq.entropy_of(mean), mean.argmax(axis=-1))


# ---------------------------------------------------------------------------
# security curves


@dataclass
class SecurityRow:
    epsilon: float
    accuracy: float
    entropy_mean: float
    variance_mean: float
    objective: str
    criterion: str

    def values(self) -> tuple:
        return (self.epsilon, self.accuracy, self.entropy_mean, self.variance_mean, self.objective, self.criterion)


@dataclass
class SecurityCurve:
    rows: list
    detail: dict = field(default_factory=dict)  # epsilon -> Evaluation
    missing: dict = field(default_factory=dict)  # epsilon -> diagnostic message

    def __post_init__(self):
        eps = [r.epsilon for r in self.rows]
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon must be strictly increasing")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def row(self, eps: float) -> SecurityRow:
        for r in self.rows:
            if abs(r.epsilon - eps) < 1e-12:
                return r
        raise KeyError(eps)


def _mean(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float("nan") if np.all(np.isnan(a)) else float(np.mean(a))


def run_security_eval(model, objective: attacks.Objective, x: np.ndarray, labels: np.ndarray,
                      eps_grid: Sequence[float] = attacks.EPS_GRID, eval_S: int = EVAL_MC,
                      cfg: Optional[attacks.AttackConfig] = None, seed: int = 0, workers: int = 1) -> SecurityCurve:
    """Attack every sample at each epsilon and re-evaluate with ``eval_S`` MC samples.

    The epsilon-0 row is the clean evaluation. A cell whose attack fails is
    recorded in ``missing`` and its row is filled with NaN.
    """
    eps_grid = [float(e) for e in eps_grid]
    if not eps_grid or eps_grid[0] != 0.0 or any(b <= a for a, b in zip(eps_grid, eps_grid[1:])):
        raise ValueError("eps grid must be ascending and start at 0")
    cfg = cfg if cfg is not None else attacks.AttackConfig(eps=0.0, seed=seed)
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    rows, detail, missing = [], {}, {}
    for eps in eps_grid:
        if eps == 0.0:
            xa = x
        else:
            try:
                res = attacks.attack_dataset(model, x, objective, replace(cfg, eps=eps), labels, workers)
            except attacks.AttackError as exc:
                logger.warning("attack failed at eps=%g: %s", eps, exc)
                missing[eps] = str(exc)
                rows.append(SecurityRow(eps, math.nan, math.nan, math.nan, objective.label, cfg.criterion))
                continue
            xa = np.stack([r.x_adv for r in res])
        ev = evaluate(model, xa, eval_S, seed)
        detail[eps] = ev
        rows.append(SecurityRow(q12(eps), q12(float(np.mean(ev.predicted == labels))), q12(_mean(ev.entropy)),
                                q12(_mean(ev.variance)), objective.label, cfg.criterion))
    return SecurityCurve(rows, detail, missing)


# ---------------------------------------------------------------------------
# accuracy-rejection curves


@dataclass
class RejectionCurve:
    rates: np.ndarray
    accuracy: np.ndarray
    epsilon: float
    measure: str

    @property
    def area(self) -> float:
        return curve_area(self.rates, self.accuracy)


def retained(uncertainty: np.ndarray, rate: float) -> np.ndarray:
    """Indices of the ``round((1 - rate) N)`` least uncertain samples; ties keep the lower index."""
    u = np.asarray(uncertainty, dtype=np.float64)
    n_keep = int(round((1.0 - rate) * len(u)))
    order = np.lexsort((np.arange(len(u)), u))
    return np.sort(order[:n_keep])


def rejection_curve(uncertainty: np.ndarray, correct: np.ndarray, rates: Sequence[float] = R_GRID,
                    epsilon: float = 0.0, measure: str = "variance") -> RejectionCurve:
    correct = np.asarray(correct, dtype=bool)
    rs, accs = [], []
    for r in rates:
        keep = retained(uncertainty, r)
        if len(keep) == 0:
            continue
        rs.append(q12(float(r)))
        accs.append(q12(float(np.mean(correct[keep]))))
    return RejectionCurve(np.array(rs), np.array(accs), q12(epsilon), measure)


def curve_area(rates: np.ndarray, acc: np.ndarray) -> float:
    """Trapezoidal area normalized by the rate span, so a flat curve has area equal to its level."""
    rates, acc = np.asarray(rates, dtype=np.float64), np.asarray(acc, dtype=np.float64)
    if len(rates) == 1:
        return float(acc[0])
    span = rates[-1] - rates[0]
    return float(np.sum((acc[1:] + acc[:-1]) * np.diff(rates)) / 2.0 / span)


def run_rejection_eval(model, mixture: OodMixture, objective: Optional[attacks.Objective] = None,
                       eps: float = 0.0, rates: Sequence[float] = R_GRID, eval_S: int = EVAL_MC,
                       cfg: Optional[attacks.AttackConfig] = None, seed: int = 0, measure: str = "variance",
                       attack_iid: bool = False, workers: int = 1) -> RejectionCurve:
    """Rejection curve on an IID/OOD mixture with the OOD part (optionally also IID) attacked at ``eps``.

    Retained OOD samples always count as errors.
    """
    if measure not in ("variance", "entropy"):
        raise ValueError("measure is 'variance' or 'entropy'")
    x = np.array(mixture.inputs, dtype=np.float64)
    if eps > 0:
        if objective is None:
            raise ValueError("an attack objective is needed for eps > 0")
        if objective.kind in ("ata", "ce") and not attack_iid:
            raise ValueError(f"{objective.kind.upper()} needs labels, which OOD samples lack")
        cfg = replace(cfg if cfg is not None else attacks.AttackConfig(eps=eps, seed=seed), eps=eps)
        sel = np.arange(len(x)) if attack_iid else np.flatnonzero(mixture.is_ood)
        lab = mixture.labels[sel] if objective.kind in ("ata", "ce") else None
        res = attacks.attack_dataset(model, x[sel], objective, cfg, lab, workers, indices=sel)
        x[sel] = np.stack([r.x_adv for r in res])
    ev = evaluate(model, x, eval_S, seed)
    correct = (ev.predicted == mixture.labels) & ~mixture.is_ood
    u = ev.variance if measure == "variance" else ev.entropy
    return rejection_curve(u, correct, rates, eps, measure)


# ---------------------------------------------------------------------------
# segmentation


SEG_ATTACKS = ("mva", "ust-bg", "ust-fb")


@dataclass
class SegMaps:
    attack: str
    variance: np.ndarray  # (N, H, W)
    entropy: np.ndarray
    predicted: np.ndarray
    targets: np.ndarray  # per-image class used for flip_fraction
    summary: dict  # region -> (variance_mean, entropy_mean, flip_fraction)


@dataclass
class SegComparison:
    maps: dict  # attack name -> SegMaps, "clean" first
    edge: np.ndarray

    def __post_init__(self):
        shapes = {m.variance.shape for m in self.maps.values()} | {self.edge.shape}
        if len(shapes) != 1:
            raise ValueError("all maps must share one spatial shape")

    def stat(self, attack: str, region: str, name: str) -> float:
        i = {"variance_mean": 0, "entropy_mean": 1, "flip_fraction": 2}[name]
        return self.maps[attack].summary[region][i]


def edge_mask(pred: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of a different class; ``pred`` is ``(..., H, W)``."""
    e = np.zeros(pred.shape, dtype=bool)
    dv = pred[..., 1:, :] != pred[..., :-1, :]
    dh = pred[..., :, 1:] != pred[..., :, :-1]
    e[..., 1:, :] |= dv
    e[..., :-1, :] |= dv
    e[..., :, 1:] |= dh
    e[..., :, :-1] |= dh
    return e


def _seg_maps(name, ev: Evaluation, targets, edge) -> SegMaps:
    hit = ev.predicted == targets[:, None, None]
    summary = {}
    for region, mask in (("all", np.ones_like(edge)), ("edge", edge), ("interior", ~edge)):
        if not mask.any():
            summary[region] = (math.nan, math.nan, math.nan)
            continue
        summary[region] = (q12(float(ev.variance[mask].mean())), q12(float(ev.entropy[mask].mean())),
                           q12(float(hit[mask].mean())))
    return SegMaps(name, ev.variance, ev.entropy, ev.predicted, targets, summary)


def run_seg_comparison(model, images: np.ndarray, cfg: Optional[attacks.AttackConfig] = None,
                       S: int = SEG_MC, seed: int = 0, attack_names: Sequence[str] = SEG_ATTACKS,
                       workers: int = 1) -> SegComparison:
    """Clean and attacked uncertainty maps with edge/interior statistics.

    ``flip_fraction`` is the share of pixels predicted as the attack's target;
    rows without a target (clean, MVA) use the clean modal class.
    """
    if not model.is_segmenter:
        raise ValueError("segmentation comparison needs a segmenter")
    cfg = cfg if cfg is not None else attacks.AttackConfig(eps=attacks.SEG_EPS, steps=attacks.SEG_STEPS,
                                                           step_size=attacks.SEG_STEP_SIZE, seed=seed)
    x = np.asarray(images, dtype=np.float64)
    clean = evaluate(model, x, S, seed)
    L = model.num_classes
    modal = np.array([attacks.ust_target(p, L, "bg") for p in clean.predicted])
    edge = edge_mask(clean.predicted)
    maps = {"clean": _seg_maps("clean", clean, modal, edge)}
    for name in attack_names:
        if name == "mva":
            obj = attacks.Objective("mva", s_attack=S)
        elif name in ("ust-bg", "ust-fb"):
            obj = attacks.Objective("ust", s_attack=S, ust_variant=name[4:])
        else:
            raise ValueError(f"unknown segmentation attack {name!r}")
        res = attacks.attack_dataset(model, x, obj, cfg, None, workers)
        ev = evaluate(model, np.stack([r.x_adv for r in res]), S, seed)
        targets = np.array([modal[i] if r.target is None else r.target for i, r in enumerate(res)])
        maps[name] = _seg_maps(name, ev, targets, edge)
    return SegComparison(maps, edge)


# ---------------------------------------------------------------------------
# CSV


def _write_rows(path, columns, rows) -> None:
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else attacks.fmt(v) for v in row) + "\n")


def emit_csv(obj, path) -> None:
    if isinstance(obj, SecurityCurve):
        _write_rows(path, SECURITY_COLUMNS, [r.values() for r in obj.rows])
    elif isinstance(obj, RejectionCurve):
        _write_rows(path, REJECTION_COLUMNS, [(r, a, obj.epsilon, obj.measure) for r, a in zip(obj.rates, obj.accuracy)])
    elif isinstance(obj, (list, tuple)) and obj and all(isinstance(c, RejectionCurve) for c in obj):
        _write_rows(path, REJECTION_COLUMNS,
                    [(r, a, c.epsilon, c.measure) for c in obj for r, a in zip(c.rates, c.accuracy)])
    elif isinstance(obj, SegComparison):
        rows = [(name, region, *m.summary[region]) for name, m in obj.maps.items()
                for region in ("all", "edge", "interior")]
        _write_rows(path, SEG_COLUMNS, rows)
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as CSV")


def _read(path, columns) -> list:
    with open(path, encoding="utf-8") as fh:
        header = tuple(fh.readline().rstrip("\n").split(","))
        if header != columns:
            raise ValueError(f"{path}: unexpected header {header}")
        return [line.rstrip("\n").split(",") for line in fh if line.strip()]


def read_security_csv(path) -> SecurityCurve:
    rows = [SecurityRow(float(e), float(a), float(h), float(v), o, c) for e, a, h, v, o, c in _read(path, SECURITY_COLUMNS)]
    return SecurityCurve(rows)


def read_rejection_csv(path) -> list:
    curves, cur = [], None
    for r, a, e, m in _read(path, REJECTION_COLUMNS):
        key = (float(e), m)
        if cur is None or cur[0] != key:
            cur = (key, [], [])
            curves.append(cur)
        cur[1].append(float(r))
        cur[2].append(float(a))
    return [RejectionCurve(np.array(rs), np.array(accs), k[0], k[1]) for k, rs, accs in curves]


def read_seg_csv(path) -> dict:
    return {(a, reg): (float(v), float(h), float(f)) for a, reg, v, h, f in _read(path, SEG_COLUMNS)}


# ---------------------------------------------------------------------------
# SVG

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2")
_W, _H, _ML, _MR, _MT, _MB = 560, 380, 70, 170, 30, 50


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _num(v: float) -> str:
    return format(v, ".6g")


def series_from(obj, metric: str = "variance_mean") -> dict:
    """Plot series for a curve object: name -> (xs, ys)."""
    if isinstance(obj, SecurityCurve):
        name = f"{obj.rows[0].objective} {metric}" if obj.rows else metric
        return {name: (obj.column("epsilon") * 255.0, obj.column(metric))}
    if isinstance(obj, RejectionCurve):
        return {f"{obj.measure} eps={obj.epsilon * 255:.3g}/255": (obj.rates, obj.accuracy)}
    if isinstance(obj, (list, tuple)):
        out = {}
        for c in obj:
            out.update(series_from(c, metric))
        return out
    if isinstance(obj, Mapping):
        return {k: (np.asarray(v[0], float), np.asarray(v[1], float)) for k, v in obj.items()}
    raise TypeError(f"cannot plot {type(obj).__name__}")


def emit_svg_plot(obj, path, title: str = "", xlabel: str = "", ylabel: str = "", log_y: bool = False,
                  metric: str = "variance_mean") -> None:
    """Static SVG 1.1 line chart, one polyline and one marker per point for each series.

    On a log axis non-positive values are drawn at 1e-12 and the series is
    flagged in the legend.
    """
    series = series_from(obj, metric)
    prepared = []
    for name, (xs, ys) in series.items():
        xs, ys = np.asarray(xs, float), np.asarray(ys, float)
        ok = np.isfinite(xs) & np.isfinite(ys)
        xs, ys = xs[ok], ys[ok]
        floored = False
        if log_y and np.any(ys <= SVG_LOG_FLOOR):
            floored = True
            ys = np.maximum(ys, SVG_LOG_FLOOR)
        label = name + (" (floored at 1e-12)" if floored else "")
        prepared.append((label, xs, np.log10(ys) if log_y else ys))
    allx = np.concatenate([p[1] for p in prepared]) if prepared else np.zeros(0)
    ally = np.concatenate([p[2] for p in prepared]) if prepared else np.zeros(0)
    x0, x1 = (float(allx.min()), float(allx.max())) if len(allx) else (0.0, 1.0)
    y0, y1 = (float(ally.min()), float(ally.max())) if len(ally) else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def px(v):
        return _ML + (v - x0) / (x1 - x0) * pw

    def py(v):
        return _MT + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}">',
           f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="14">{_esc(title)}</text>',
           f'<line x1="{_ML}" y1="{_MT + ph}" x2="{_ML + pw}" y2="{_MT + ph}" stroke="black"/>',
           f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_MT + ph}" stroke="black"/>']
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        ylab = _num(10 ** yv) if log_y else _num(yv)
        out.append(f'<text x="{px(xv):.2f}" y="{_MT + ph + 16}" text-anchor="middle" font-size="10">{_num(xv)}</text>')
        out.append(f'<text x="{_ML - 6}" y="{py(yv) + 3:.2f}" text-anchor="end" font-size="10">{ylab}</text>')
    out.append(f'<text x="{_ML + pw / 2}" y="{_H - 10}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>')
    out.append(f'<text x="14" y="{_MT + ph / 2}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 14 {_MT + ph / 2})">{_esc(ylabel + (" (log10)" if log_y else ""))}</text>')
    for i, (label, xs, ys) in enumerate(prepared):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        for a, b in zip(xs, ys):
            out.append(f'<circle class="marker" cx="{px(a):.2f}" cy="{py(b):.2f}" r="3" fill="{color}"/>')
        ly = _MT + 14 * i + 6
        out.append(f'<line x1="{_W - _MR + 10}" y1="{ly}" x2="{_W - _MR + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_W - _MR + 32}" y="{ly + 4}" font-size="10">{_esc(label)}</text>')
    out.append("</svg>")
    _write_text(path, "\n".join(out) + "\n")


def emit_svg_map(values: np.ndarray, path, title: str = "", vmax: Optional[float] = None) -> None:
    """Grayscale heat map of a 2-D array, one rect per pixel (white = 0)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("map must be 2-D")
    H, W = v.shape
    cell = 12
    top = 20
    hi = float(vmax if vmax is not None else (v.max() if v.size and v.max() > 0 else 1.0))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W * cell}" height="{H * cell + top}">',
           f'<text x="2" y="14" font-size="11">{_esc(title)}</text>']
    for i in range(H):
        for j in range(W):
            g = int(round(255 * (1.0 - min(max(v[i, j] / hi, 0.0), 1.0))))
            out.append(f'<rect x="{j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb({g},{g},{g})"/>')
    out.append("</svg>")
    _write_text(path, "\n".join(out) + "\n")


def _write_text(path, text: str) -> None:
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# manifests


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, inputs: Mapping[str, str], outputs: Sequence[str] = (), settings: Optional[Mapping] = None) -> None:
    doc = {
        "inputs": {k: {"path": os.fspath(p), "sha256": file_hash(p)} for k, p in sorted(inputs.items())},
        "outputs": sorted(os.path.basename(os.fspath(p)) for p in outputs),
        "settings": dict(settings or {}),
    }
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def stale_inputs(path) -> list:
    """Names of manifest inputs whose file changed or disappeared since the manifest was written."""
    if not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    stale = []
    for name, entry in doc.get("inputs", {}).items():
        p = entry["path"]
        if not os.path.exists(p) or file_hash(p) != entry["sha256"]:
            stale.append(name)
    return stale
