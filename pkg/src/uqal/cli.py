"""Command line driver: ``uqal train|attack|eval|duq-fit``.

Settings come from an INI-style config file (sections experiment, data,
model, uq, attack, eval) and are overridden by flags. Exit status is 0 on
success, 1 for invalid configuration, 2 for failures while running.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from fractions import Fraction
from typing import Optional

import numpy as np

from . import attacks, data, models, presets, uq
from . import eval as ev

logger = logging.getLogger("uqal")

OUT_ENV = "UQAL_OUT"
UQ_METHODS = ("mc-dropout-adhoc", "mc-dropout-posthoc", "ensemble", "duq")
DATA_KINDS = ("blobs", "seg-shapes", "idx")
SUBDIRS = ("checkpoints", "attacks", "curves", "figures", "manifest")

DEFAULTS = {
    "experiment": {"name": "default", "seed": "1"},
    "data": {"kind": "blobs", "num_classes": str(presets.BLOBS["num_classes"]),
             "n_per_class": str(presets.BLOBS["n_per_class"]), "dim": str(presets.BLOBS["dim"]),
             "separation": str(presets.BLOBS["separation"]), "noise": str(presets.BLOBS["noise"]),
             "data_seed": str(presets.BLOBS["seed"]), "test_fraction": str(presets.BLOBS_TEST_FRACTION),
             "n_iid": str(data.DEFAULT_N_IID), "n_ood": str(data.DEFAULT_N_OOD), "n_eval": "auto",
             "idx_images": "", "idx_labels": ""},
    "model": {"hidden": ",".join(str(h) for h in presets.MLP_HIDDEN), "rate": "auto",
              "epochs": str(presets.MLP_TRAIN.epochs), "learning_rate": str(presets.MLP_TRAIN.learning_rate),
              "batch_size": str(presets.MLP_TRAIN.batch_size)},
    "uq": {"method": "mc-dropout-adhoc", "members": str(presets.ENSEMBLE_M)},
    "attack": {"objective": "auto", "gamma": "1", "eps": "auto", "steps": "auto", "step_size": "auto",
               "mc": "auto", "criterion": "min-uncertainty", "ust_variant": "bg"},
    "eval": {"mc": "auto", "eps_grid": "0:8:255ths", "measure": "variance", "attack_iid": "false"},
}

# flag name -> (section, key)
FLAG_KEYS = {
    "name": ("experiment", "name"), "seed": ("experiment", "seed"),
    "uq": ("uq", "method"), "members": ("uq", "members"), "data": ("data", "kind"),
    "n_iid": ("data", "n_iid"), "n_ood": ("data", "n_ood"), "n_eval": ("data", "n_eval"),
    "epochs": ("model", "epochs"),
    "objective": ("attack", "objective"), "gamma": ("attack", "gamma"), "eps": ("attack", "eps"),
    "steps": ("attack", "steps"), "step_size": ("attack", "step_size"), "mc": ("attack", "mc"),
    "criterion": ("attack", "criterion"), "ust_variant": ("attack", "ust_variant"),
    "eval_mc": ("eval", "mc"), "eps_grid": ("eval", "eps_grid"), "measure": ("eval", "measure"),
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# value parsing


def parse_eps(text: str) -> float:
    """``"8/255"`` or a decimal."""
    text = text.strip()
    try:
        value = float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"cannot parse epsilon {text!r}") from exc
    if not value >= 0:
        raise ValueError(f"epsilon must be non-negative, got {text!r}")
    return value


def parse_eps_grid(text: str) -> list:
    """``"lo:hi:255ths"`` for k/255 with k = lo..hi, or a comma list of epsilons."""
    text = text.strip()
    if text.endswith("ths") and text.count(":") == 2:
        lo, hi, den = text[:-3].split(":")
        return [k / float(den) for k in range(int(lo), int(hi) + 1)]
    return [parse_eps(t) for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------------------
# configuration


class Settings:
    """Resolved experiment configuration; ``problems`` lists every validation failure."""

    def __init__(self, cp: configparser.ConfigParser):
        self.problems = []
        g = self._get
        self.name = cp["experiment"]["name"]
        self.seed = g(cp, "experiment", "seed", int)
        d = cp["data"]
        self.data_kind = d["kind"]
        if self.data_kind not in DATA_KINDS:
            self.problems.append(f"data.kind must be one of {DATA_KINDS}")
        self.blobs = {"num_classes": g(cp, "data", "num_classes", int), "n_per_class": g(cp, "data", "n_per_class", int),
                      "dim": g(cp, "data", "dim", int), "separation": g(cp, "data", "separation", float),
                      "noise": g(cp, "data", "noise", float), "seed": g(cp, "data", "data_seed", int)}
        self.test_fraction = g(cp, "data", "test_fraction", float)
        self.n_iid = g(cp, "data", "n_iid", int)
        self.n_ood = g(cp, "data", "n_ood", int)
        self.idx = (d["idx_images"], d["idx_labels"])
        seg = self.data_kind == "seg-shapes"
        self.n_eval = g(cp, "data", "n_eval", int, 8 if seg else 64)
        m = cp["model"]
        try:
            self.hidden = [int(h) for h in m["hidden"].split(",") if h.strip()]
        except ValueError:
            self.problems.append("model.hidden must be a comma list of integers")
            self.hidden = []
        self.rate = g(cp, "model", "rate", float, presets.SEG_DROPOUT if seg else presets.MLP_DROPOUT)
        self.epochs = g(cp, "model", "epochs", int)
        self.learning_rate = g(cp, "model", "learning_rate", float)
        self.batch_size = g(cp, "model", "batch_size", int)
        self.uq = cp["uq"]["method"]
        if self.uq not in UQ_METHODS:
            self.problems.append(f"uq.method must be one of {UQ_METHODS}")
        self.members = g(cp, "uq", "members", int)
        a = cp["attack"]
        self.objective = a["objective"]
        if self.objective == "auto":
            self.objective = "ust" if seg else "duq" if self.uq == "duq" else "stab"
        if self.objective not in attacks.OBJECTIVES:
            self.problems.append(f"attack.objective must be one of {attacks.OBJECTIVES}")
        self.gamma = g(cp, "attack", "gamma", int)
        self.eps = g(cp, "attack", "eps", parse_eps, attacks.SEG_EPS if seg else 8 / 255)
        duq = self.uq == "duq"
        self.steps = g(cp, "attack", "steps", int,
                       attacks.SEG_STEPS if seg else attacks.DUQ_STEPS if duq else attacks.PROB_STEPS)
        self.step_size = g(cp, "attack", "step_size", float,
                           attacks.SEG_STEP_SIZE if seg else attacks.DUQ_STEP_SIZE if duq else attacks.PROB_STEP_SIZE)
        self.mc = g(cp, "attack", "mc", int, attacks.SEG_MC if seg else attacks.PROB_MC)
        self.criterion = a["criterion"]
        if self.criterion not in attacks.CRITERIA:
            self.problems.append(f"attack.criterion must be one of {attacks.CRITERIA}")
        self.ust_variant = a["ust_variant"]
        self.eval_mc = g(cp, "eval", "mc", int, ev.SEG_MC if seg else ev.EVAL_MC)
        self.eps_grid = g(cp, "eval", "eps_grid", parse_eps_grid)
        self.measure = cp["eval"]["measure"]
        self.attack_iid = g(cp, "eval", "attack_iid", lambda s: configparser.ConfigParser.BOOLEAN_STATES[s.lower()])
        self._check()

    def _get(self, cp, section, key, conv, auto=None):
        raw = cp[section][key].strip()
        if raw == "auto" and auto is not None:
            return auto
        try:
            return conv(raw)
        except (ValueError, KeyError, ZeroDivisionError):
            self.problems.append(f"{section}.{key}: cannot parse {raw!r}")
            return auto

    def _check(self):
        p = self.problems
        seg = self.data_kind == "seg-shapes"
        if self.gamma not in (-1, 1):
            p.append("attack.gamma must be 1 or -1")
        if self.ust_variant not in ("bg", "fb"):
            p.append("attack.ust_variant must be bg or fb")
        if self.measure not in ("variance", "entropy"):
            p.append("eval.measure must be variance or entropy")
        if isinstance(self.members, int) and self.members < 2:
            p.append("uq.members must be at least 2")
        if self.eps_grid and (self.eps_grid[0] != 0 or any(b <= a for a, b in zip(self.eps_grid, self.eps_grid[1:]))):
            p.append("eval.eps_grid must be ascending and start at 0")
        for k in ("steps", "mc", "eval_mc", "n_eval", "epochs", "batch_size"):
            v = getattr(self, k)
            if isinstance(v, int) and v < 1:
                p.append(f"{k} must be positive")
        if seg and self.uq not in ("mc-dropout-adhoc",):
            p.append("segmentation experiments use uq.method = mc-dropout-adhoc")
        if self.data_kind == "idx" and not all(self.idx):
            p.append("data.kind = idx needs data.idx_images and data.idx_labels")
        obj, uqm = self.objective, self.uq
        if obj == "mva" and uqm == "duq":
            p.append("objective mva needs MC sampling; uq method duq is deterministic")
        if obj == "duq" and uqm != "duq":
            p.append("objective duq needs uq.method = duq")
        if obj in ("ata", "stab", "ce") and uqm == "duq":
            p.append(f"objective {obj} needs an MC-capable model, not duq")
        if obj == "ust" and not seg:
            p.append("objective ust needs a segmentation dataset (data.kind = seg-shapes)")
        if obj in ("ata", "stab", "ce") and seg:
            p.append(f"objective {obj} is defined for classifiers only")
        if obj == "mva" and isinstance(self.mc, int) and self.mc < 2 and uqm != "ensemble":
            p.append("objective mva needs attack.mc >= 2")


def load_settings(args) -> Settings:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ConfigError([f"config file {args.config} not found"])
        try:
            cp.read(args.config, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError([f"config file {args.config}: {exc}"]) from exc
        unknown = [f"{s}.{k}" for s in cp.sections() if s in DEFAULTS for k in cp[s] if k not in DEFAULTS[s]]
        unknown += [f"[{s}]" for s in cp.sections() if s not in DEFAULTS]
        if unknown:
            raise ConfigError([f"unknown config keys: {', '.join(unknown)}"])
    for flag, (section, key) in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            cp[section][key] = str(v)
    s = Settings(cp)
    if s.problems:
        raise ConfigError(s.problems)
    return s


# ---------------------------------------------------------------------------
# experiment plumbing


class Layout:
    def __init__(self, root: str, name: str):
        self.base = os.path.join(root, name)

    def __getattr__(self, sub):
        if sub in SUBDIRS:
            path = os.path.join(self.base, sub)
            os.makedirs(path, exist_ok=True)
            return path
        raise AttributeError(sub)


def out_root(args) -> str:
    return args.out or os.environ.get(OUT_ENV) or "out"


def classification_data(s: Settings) -> tuple:
    if s.data_kind == "blobs":
        ds = data.gen_blobs(**s.blobs)
    else:
        ds = data.load_idx(*s.idx)
        ds = data.Dataset(ds.inputs.reshape(len(ds), -1), ds.labels, ds.num_classes, ds.split, ds.meta)
    return data.train_test_split(ds, s.test_fraction, s.blobs["seed"])


def checkpoint_paths(s: Settings, layout: Layout) -> list:
    if s.uq == "ensemble":
        return [os.path.join(layout.checkpoints, f"member_{k}.ckpt") for k in range(s.members)]
    return [os.path.join(layout.checkpoints, "model.ckpt")]


def _write_log(path, log) -> None:
    keys = [k for k in log[0]] if log else ["epoch", "loss", "accuracy"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(keys) + "\n")
        for e in log:
            fh.write(",".join(attacks.fmt(e[k]) for k in keys) + "\n")


def cmd_train(args, s: Settings, layout: Layout) -> None:
    written = []
    if s.data_kind == "seg-shapes":
        seg = presets.train_segmenter(seed=s.seed)
        path = checkpoint_paths(s, layout)[0]
        models.save_checkpoint(seg.spec, seg.params, path, s.seed, seg.log,
                               {"pixel_accuracy": presets.pixel_accuracy(seg)})
        _write_log(os.path.join(layout.checkpoints, "train_log.csv"), seg.log)
        written.append(path)
    else:
        train, test = classification_data(s)
        dim = train.inputs.shape[1]
        mode = {"mc-dropout-adhoc": "ad-hoc"}.get(s.uq, "none")
        base = models.mlp_spec(dim, s.hidden, train.num_classes, mode, s.rate if mode == "ad-hoc" else 0.0)
        seeds = [s.seed + k for k in range(s.members)] if s.uq == "ensemble" else [s.seed]
        for k, (seed, path) in enumerate(zip(seeds, checkpoint_paths(s, layout))):
            cfg = models.TrainConfig(epochs=s.epochs, batch_size=s.batch_size, learning_rate=s.learning_rate, seed=seed)
            res = models.train(base, train.inputs, train.labels, cfg)
            spec = base.with_posthoc(s.rate) if s.uq == "mc-dropout-posthoc" else base
            test_acc = models.accuracy(spec, res.params, test.inputs, test.labels)
            models.save_checkpoint(spec, res.params, path, seed, res.log,
                                   {"train_accuracy": res.final_train_accuracy, "test_accuracy": test_acc})
            log_name = "train_log.csv" if len(seeds) == 1 else f"train_log_{k}.csv"
            _write_log(os.path.join(layout.checkpoints, log_name), res.log)
            written.append(path)
            print(f"trained {os.path.basename(path)}: test accuracy {test_acc:.4f}")
        if s.uq == "duq":
            written.append(_fit_duq(s, layout, train))
    ev.write_manifest(os.path.join(layout.manifest, "train.json"), {}, written, _settings_doc(s))


def _fit_duq(s: Settings, layout: Layout, train: data.Dataset) -> str:
    spec, params = models.load_checkpoint(checkpoint_paths(s, layout)[0])
    head = uq.duq_fit(spec, params, train.inputs, train.labels)
    path = os.path.join(layout.checkpoints, "duq.json")
    doc = {"sigma": head.sigma, "centroids": head.centroids.tolist()}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    print(f"DUQ head: {len(head.centroids)} centroids, sigma {head.sigma:.6g}")
    return path


def cmd_duq_fit(args, s: Settings, layout: Layout) -> None:
    if s.uq != "duq":
        raise ConfigError(["duq-fit needs uq.method = duq"])
    _require(checkpoint_paths(s, layout))
    train, _ = classification_data(s)
    path = _fit_duq(s, layout, train)
    ev.write_manifest(os.path.join(layout.manifest, "duq.json"), {"model": checkpoint_paths(s, layout)[0]},
                      [path], _settings_doc(s))


def _require(paths) -> None:
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise ConfigError([f"missing checkpoint {p} (run `uqal train` first)" for p in missing])


def load_model(s: Settings, layout: Layout):
    paths = checkpoint_paths(s, layout)
    if s.uq == "duq":
        paths = paths + [os.path.join(layout.checkpoints, "duq.json")]
    _require(paths)
    if s.uq == "ensemble":
        return uq.EnsembleModel(tuple(models.load_checkpoint(p) for p in paths)), paths
    spec, params = models.load_checkpoint(paths[0])
    if s.uq == "duq":
        with open(paths[1], encoding="utf-8") as fh:
            doc = json.load(fh)
        return uq.DuqHead(spec, params, np.array(doc["centroids"], dtype=np.float64), float(doc["sigma"])), paths
    return uq.McDropoutModel(spec, params), paths


def eval_set(s: Settings) -> tuple:
    if s.data_kind == "seg-shapes":
        test = presets.seg_data(presets.SEG_N_TEST, s.seed + 1, presets.SEG_CURRICULUM[-1][0])
        return test.images[:s.n_eval], None
    _, test = classification_data(s)
    return test.inputs[:s.n_eval], test.labels[:s.n_eval]


def objective_of(s: Settings) -> attacks.Objective:
    return attacks.Objective(s.objective, s.gamma, s_attack=s.mc, ust_variant=s.ust_variant)


def attack_config(s: Settings, eps: float) -> attacks.AttackConfig:
    return attacks.AttackConfig(eps=eps, steps=s.steps, step_size=s.step_size, criterion=s.criterion, seed=s.seed)


def cmd_attack(args, s: Settings, layout: Layout) -> None:
    model, inputs = load_model(s, layout)
    x, y = eval_set(s)
    obj = objective_of(s)
    if y is None and (obj.kind in ("ata", "ce") or s.criterion == "misclassify"):
        raise ConfigError([f"{obj.kind} with criterion {s.criterion} needs labelled data"])
    res = attacks.attack_dataset(model, x, obj, attack_config(s, s.eps), y, args.workers)
    tag = f"{s.objective}{'' if s.gamma == 1 else '-u'}_eps{attacks.fmt(s.eps * 255)}"
    path = os.path.join(layout.attacks, f"records_{tag}.csv")
    trace_dir = os.path.join(layout.attacks, f"traces_{tag}") if args.traces else None
    attacks.write_records(res, path, trace_dir=trace_dir)
    ev.write_manifest(os.path.join(layout.manifest, f"attack_{tag}.json"), _named(inputs), [path], _settings_doc(s))
    moved = np.mean([r.flags["uncertainty_moved"] for r in res])
    print(f"{len(res)} samples attacked ({obj.label}, eps={s.eps:.6g}); uncertainty moved for {moved:.1%}; wrote {path}")


def cmd_eval(args, s: Settings, layout: Layout) -> None:
    model, inputs = load_model(s, layout)
    manifest = os.path.join(layout.manifest, f"eval_{args.what}.json")
    for name in ev.stale_inputs(manifest):
        logger.warning("input %s changed since the last eval run; outputs will be regenerated", name)
    if args.what == "security":
        outs = _eval_security(args, s, layout, model)
    elif args.what == "rejection":
        outs = _eval_rejection(args, s, layout, model)
    else:
        outs = _eval_seg(args, s, layout, model)
    ev.write_manifest(manifest, _named(inputs), outs, _settings_doc(s))
    for p in outs:
        print(f"wrote {p}")


def _eval_security(args, s, layout, model) -> list:
    if s.data_kind == "seg-shapes":
        raise ConfigError(["security curves are defined for classifiers"])
    x, y = eval_set(s)
    curve = ev.run_security_eval(model, objective_of(s), x, y, s.eps_grid, s.eval_mc,
                                 attack_config(s, 0.0), s.seed, args.workers)
    csv = os.path.join(layout.curves, "security.csv")
    svg = os.path.join(layout.figures, "security.svg")
    ev.emit_csv(curve, csv)
    ev.emit_svg_plot(curve, svg, title=f"{objective_of(s).label} security curve", xlabel="epsilon (x/255)",
                     ylabel="uncertainty" if s.uq == "duq" else "predictive variance", log_y=True)
    if curve.missing:
        raise RuntimeError(f"attack failed for eps {sorted(curve.missing)}; partial curve written to {csv}")
    return [csv, svg]


def _eval_rejection(args, s, layout, model) -> list:
    if s.data_kind != "blobs":
        raise ConfigError(["rejection curves need data.kind = blobs (OOD samples are generated from it)"])
    _, test = classification_data(s)
    mix = data.build_ood_mixture(test, s.n_iid, s.n_ood, seed=s.seed)
    curves = [ev.run_rejection_eval(model, mix, None, 0.0, eval_S=s.eval_mc, seed=s.seed, measure=s.measure)]
    if s.eps > 0:
        curves.append(ev.run_rejection_eval(model, mix, objective_of(s), s.eps, eval_S=s.eval_mc,
                                            cfg=attack_config(s, s.eps), seed=s.seed, measure=s.measure,
                                            attack_iid=s.attack_iid, workers=args.workers))
    csv = os.path.join(layout.curves, "rejection.csv")
    svg = os.path.join(layout.figures, "rejection.svg")
    ev.emit_csv(curves, csv)
    ev.emit_svg_plot(curves, svg, title="accuracy-rejection", xlabel="rejection rate", ylabel="accuracy")
    for c in curves:
        print(f"eps={c.epsilon:.6g}: area {c.area:.4f}")
    return [csv, svg]


def _eval_seg(args, s, layout, model) -> list:
    if s.data_kind != "seg-shapes":
        raise ConfigError(["seg-demo needs data.kind = seg-shapes"])
    x, _ = eval_set(s)
    cfg = attacks.AttackConfig(eps=s.eps, steps=s.steps, step_size=s.step_size, seed=s.seed)
    cmp = ev.run_seg_comparison(model, x, cfg, s.eval_mc, s.seed, workers=args.workers)
    csv = os.path.join(layout.curves, "seg_summary.csv")
    ev.emit_csv(cmp, csv)
    outs = [csv]
    vmax_v = max(float(m.variance[0].max()) for m in cmp.maps.values()) or 1.0
    vmax_e = max(float(m.entropy[0].max()) for m in cmp.maps.values()) or 1.0
    for name, m in cmp.maps.items():
        for kind, arr, vmax in (("variance", m.variance[0], vmax_v), ("entropy", m.entropy[0], vmax_e)):
            p = os.path.join(layout.figures, f"seg_{name}_{kind}.svg")
            ev.emit_svg_map(arr, p, f"{name} {kind}", vmax)
            outs.append(p)
        p = os.path.join(layout.figures, f"seg_{name}_prediction.svg")
        ev.emit_svg_map(m.predicted[0].astype(float), p, f"{name} prediction", float(model.num_classes - 1))
        outs.append(p)
    return outs


def _named(paths) -> dict:
    return {os.path.basename(p): p for p in paths}


def _settings_doc(s: Settings) -> dict:
    return {k: v for k, v in sorted(vars(s).items()) if k != "problems" and not k.startswith("_")}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("experiment")
    g.add_argument("--config", help="INI config file; flags override it")
    g.add_argument("--name", help="experiment name (default: default)")
    g.add_argument("--out", help=f"output root (default: ${OUT_ENV} or ./out)")
    g.add_argument("--seed", type=int, help="global seed (default: 1)")
    g.add_argument("--workers", type=int, default=1, help="worker processes for per-sample attacks (default: 1)")
    g.add_argument("--uq", choices=UQ_METHODS, help="uncertainty method (default: mc-dropout-adhoc)")
    g.add_argument("--members", type=int, help=f"ensemble size (default: {presets.ENSEMBLE_M})")
    g.add_argument("--data", choices=DATA_KINDS, help="dataset kind (default: blobs)")
    g.add_argument("--epochs", type=int, help=f"training epochs (default: {presets.MLP_TRAIN.epochs})")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    a = argparse.ArgumentParser(add_help=False)
    h = a.add_argument_group("attack")
    h.add_argument("--objective", choices=attacks.OBJECTIVES, help="attack objective (default: stab; duq for DUQ heads, ust for segmentation)")
    h.add_argument("--gamma", type=int, choices=(1, -1), help="+1 overconfidence, -1 underconfidence (default: 1)")
    h.add_argument("--eps", help="L-inf budget, e.g. 8/255 (default: 8/255; segmentation 2/255)")
    h.add_argument("--steps", type=int, help="PGD iterations (default: 150; duq 10; segmentation 100)")
    h.add_argument("--step-size", type=float, help="PGD step (default: 2e-3; duq and segmentation 1e-3)")
    h.add_argument("--mc", type=int, help="MC samples inside the objective (default: 30; segmentation 20)")
    h.add_argument("--criterion", choices=attacks.CRITERIA, help="best-iterate rule (default: min-uncertainty)")
    h.add_argument("--ust-variant", choices=("bg", "fb"), help="UST target rule (default: bg)")
    h.add_argument("--n-eval", type=int, help="test samples to attack (default: 64; segmentation 8)")

    p = _Parser(prog="uqal", description="Adversarial attacks against uncertainty quantification on toy tasks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train the model(s) of an experiment")
    sp = sub.add_parser("attack", parents=[common, a], help="attack the evaluation set at one epsilon")
    sp.add_argument("--traces", action="store_true", help="also write per-sample iterate traces")
    sub.add_parser("duq-fit", parents=[common], help="fit DUQ centroids on a trained deterministic model")
    se = sub.add_parser("eval", parents=[common, a], help="security curves, rejection curves, segmentation demo")
    se.add_argument("what", choices=("security", "rejection", "seg-demo"))
    se.add_argument("--eps-grid", help="security epsilons, e.g. 0:8:255ths or 0,1/255,2/255 (default: 0:8:255ths)")
    se.add_argument("--eval-mc", type=int, help="MC samples for evaluation (default: 100; segmentation 20)")
    se.add_argument("--measure", choices=("variance", "entropy"), help="rejection ordering (default: variance)")
    se.add_argument("--n-iid", type=int, help=f"IID samples in the mixture (default: {data.DEFAULT_N_IID})")
    se.add_argument("--n-ood", type=int, help=f"OOD samples in the mixture (default: {data.DEFAULT_N_OOD})")
    return p


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "duq-fit": cmd_duq_fit}


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError(["--workers must be >= 1"])
        s = load_settings(args)
        layout = Layout(out_root(args), s.name)
        COMMANDS[args.command](args, s, layout)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 1
    except (models.TrainingError, models.CheckpointError, attacks.AttackError, data.DataError,
            uq.UQError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
