"""Toy task presets shared by the CLI and the test suite.

The sizes are chosen so that attack effects show up at the standard
epsilon budgets (a few /255) while a full run stays in the minutes range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data, models, uq

BLOBS = {"num_classes": 5, "n_per_class": 400, "dim": 256, "separation": 5.0, "noise": 1.0, "seed": 7}
BLOBS_TEST_FRACTION = 0.3
MLP_HIDDEN = (128, 128)
MLP_DROPOUT = 0.3
MLP_TRAIN = models.TrainConfig(epochs=60, batch_size=32, learning_rate=0.005, seed=1)
ENSEMBLE_M = 5

SEG_SHAPE = {"height": 16, "width": 16, "num_classes": 3, "channels": 3}
SEG_WIDTH = 8
SEG_DROPOUT = 0.1
SEG_NOISE = 0.003
SEG_N_TRAIN = 200
SEG_N_TEST = 24
# Shapes start clearly visible and fade towards the final contrast. Training
# directly on faint shapes stalls at the all-background solution.
SEG_CURRICULUM = ((0.5, 0.05), (0.3, 0.05), (0.18, 0.05), (0.1, 0.05),
                  (0.06, 0.03), (0.035, 0.02), (0.025, 0.01), (0.018, 0.005))
SEG_EPOCHS_PER_STAGE = 10
SEG_CLIP = 1.0


@dataclass
class ToyClassifier:
    spec: models.NetworkSpec
    params: models.Parameters
    train: data.Dataset
    test: data.Dataset
    log: list = field(default_factory=list)


@dataclass
class ToySegmenter:
    spec: models.NetworkSpec
    params: models.Parameters
    test: data.SegDataset
    log: list = field(default_factory=list)


def blobs(seed_offset: int = 0) -> tuple:
    cfg = dict(BLOBS, seed=BLOBS["seed"] + seed_offset)
    ds = data.gen_blobs(**cfg)
    return data.train_test_split(ds, BLOBS_TEST_FRACTION, cfg["seed"])


def mlp(dropout_mode: str = "ad-hoc", rate: float = MLP_DROPOUT) -> models.NetworkSpec:
    return models.mlp_spec(BLOBS["dim"], list(MLP_HIDDEN), BLOBS["num_classes"], dropout_mode,
                           rate if dropout_mode != "none" else 0.0)


def train_classifier(dropout_mode: str = "ad-hoc", seed: int = MLP_TRAIN.seed, epochs: int = MLP_TRAIN.epochs,
                     splits: tuple = None) -> ToyClassifier:
    """Train the toy MLP. ``dropout_mode="post-hoc"`` trains without dropout and injects it afterwards."""
    train, test = splits if splits is not None else blobs()
    base = mlp("none" if dropout_mode == "post-hoc" else dropout_mode)
    cfg = models.TrainConfig(epochs=epochs, batch_size=MLP_TRAIN.batch_size,
                             learning_rate=MLP_TRAIN.learning_rate, seed=seed)
    res = models.train(base, train.inputs, train.labels, cfg)
    spec = base.with_posthoc(MLP_DROPOUT) if dropout_mode == "post-hoc" else base
    return ToyClassifier(spec, res.params, train, test, res.log)


def train_ensemble(M: int = ENSEMBLE_M, seed: int = MLP_TRAIN.seed, epochs: int = MLP_TRAIN.epochs,
                   splits: tuple = None) -> tuple:
    """Members use seeds ``seed + k``; returns the model and the member list."""
    splits = splits if splits is not None else blobs()
    members = [train_classifier("none", seed + k, epochs, splits) for k in range(M)]
    return uq.EnsembleModel(tuple((m.spec, m.params) for m in members)), members


def fit_duq(clf: ToyClassifier) -> uq.DuqHead:
    return uq.duq_fit(clf.spec, clf.params, clf.train.inputs, clf.train.labels)


def seg_data(n: int, seed: int, contrast: float) -> data.SegDataset:
    return data.gen_seg_shapes(n, seed=seed, contrast=contrast, noise=SEG_NOISE, **SEG_SHAPE)


def train_segmenter(seed: int = 1, n_train: int = SEG_N_TRAIN, n_test: int = SEG_N_TEST,
                    curriculum=SEG_CURRICULUM, epochs: int = SEG_EPOCHS_PER_STAGE) -> ToySegmenter:
    spec = models.segmenter_spec(SEG_SHAPE["channels"], SEG_SHAPE["height"], SEG_SHAPE["width"],
                                 SEG_SHAPE["num_classes"], SEG_WIDTH, "ad-hoc", SEG_DROPOUT)
    params, log = None, []
    for stage, (contrast, lr) in enumerate(curriculum):
        ds = seg_data(n_train, seed, contrast)
        cfg = models.TrainConfig(epochs=epochs, batch_size=16, learning_rate=lr, seed=seed, clip_norm=SEG_CLIP)
        res = models.train(spec, ds.images, ds.masks, cfg, init=params)
        params = res.params
        log += [dict(e, stage=stage, contrast=contrast) for e in res.log]
    test = seg_data(n_test, seed + 1, curriculum[-1][0])
    return ToySegmenter(spec, params, test, log)


def pixel_accuracy(seg: ToySegmenter) -> float:
    pred = models.predict(seg.spec, seg.params, seg.test.images).argmax(axis=-1)
    return float(np.mean(pred == seg.test.masks))
