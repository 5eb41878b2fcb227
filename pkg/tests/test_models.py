import json
import math

import numpy as np
import pytest

from uqal import data, models, uq
from uqal.autodiff import RngStream
from uqal.models import LayerSpec, NetworkSpec


@pytest.fixture(scope="module")
def blobs3():
    ds = data.gen_blobs(3, 100, 2, 5.0, 1.0, seed=3)
    return data.train_test_split(ds, 0.25, 3)


@pytest.fixture(scope="module")
def blob_model(blobs3):
    train, _ = blobs3
    spec = models.mlp_spec(2, [64, 64], 3)
    res = models.train(spec, train.inputs, train.labels, models.TrainConfig(epochs=30, seed=1))
    return spec, res


# ---------------------------------------------------------------------------
# specs


def test_spec_shapes_compose():
    spec = models.mlp_spec(4, [8], 3, "ad-hoc", 0.3)
    assert spec.shapes[-1] == (3,)
    with pytest.raises(models.SpecError):
        NetworkSpec((LayerSpec.dense(4, 8), LayerSpec.dense(9, 3)), (4,), 3)


def test_post_hoc_spec_rejects_dropout_layers():
    with pytest.raises(models.SpecError):
        NetworkSpec((LayerSpec.dense(4, 8), LayerSpec.dropout(0.1), LayerSpec.dense(8, 3)), (4,), 3,
                    "post-hoc", (1,), 0.1)


def test_default_posthoc_sites_after_relu():
    spec = models.mlp_spec(4, [8, 8], 3, "post-hoc", 0.1)
    assert all(spec.layers[i].kind == "relu" for i in spec.posthoc_sites)
    assert len(spec.posthoc_sites) == 2


def test_segmenter_output_resolution():
    spec = models.segmenter_spec(3, 16, 16, 3, width_mult=2)
    p = models.forward(spec, models.init_params(spec, 0), np.random.default_rng(0).random((2, 3, 16, 16)))
    assert p.shape == (2, 16, 16, 3)


def test_spec_dict_round_trip():
    spec = models.segmenter_spec(3, 16, 16, 3, width_mult=2, dropout_mode="post-hoc", rate=0.1)
    assert NetworkSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


# ---------------------------------------------------------------------------
# init


def test_init_same_seed_identical():
    spec = models.mlp_spec(5, [7], 3)
    assert models.init_params(spec, 4).equal(models.init_params(spec, 4))


def test_init_different_seeds_differ():
    spec = models.mlp_spec(5, [7], 3)
    a, b = models.init_params(spec, 1), models.init_params(spec, 2)
    assert not np.array_equal(a[0]["weight"], b[0]["weight"])


def test_he_uniform_bound():
    spec = NetworkSpec((LayerSpec.dense(100, 50), LayerSpec.relu(), LayerSpec.dense(50, 2)), (100,), 2)
    p = models.init_params(spec, 0)
    bound = math.sqrt(6 / 100)
    assert np.all(np.abs(p[0]["weight"]) <= bound)
    assert np.abs(p[0]["weight"]).max() > 0.9 * bound
    assert np.all(p[0]["bias"] == 0)


# ---------------------------------------------------------------------------
# forward


def test_no_dropout_modes_agree(rng):
    spec = models.mlp_spec(6, [10], 3)
    params = models.init_params(spec, 0)
    x = rng.random((4, 6))
    det = models.forward(spec, params, x, "deterministic").data
    mc = models.forward(spec, params, x, "mc-sample", RngStream(1)).data
    assert np.array_equal(det, mc)


def test_zero_rate_samples_identical(rng):
    spec = models.mlp_spec(6, [10, 10], 3, "ad-hoc", 0.0)
    params = models.init_params(spec, 0)
    x = rng.random(6)
    s = RngStream(2)
    assert np.array_equal(models.forward(spec, params, x, "mc-sample", s).data,
                          models.forward(spec, params, x, "mc-sample", s).data)


def test_output_sums_to_one(rng):
    spec = models.mlp_spec(6, [10], 3)
    p = models.forward(spec, models.init_params(spec, 9), rng.random(6)).data
    assert abs(p.sum() - 1.0) < 1e-9


def test_forward_shape_mismatch(rng):
    spec = models.mlp_spec(6, [10], 3)
    with pytest.raises(ValueError):
        models.forward(spec, models.init_params(spec, 0), rng.random(5))


def test_posthoc_dropout_only_when_sampling(rng):
    spec = models.mlp_spec(6, [32], 3, "post-hoc", 0.5)
    params = models.init_params(spec, 0)
    x = rng.random(6)
    det = models.forward(spec, params, x).data
    assert np.array_equal(det, models.forward(spec.without_dropout(), params, x).data)
    assert not np.array_equal(det, models.forward(spec, params, x, "mc-sample", RngStream(0)).data)


def test_posthoc_expectation_close_to_deterministic(blobs3, blob_model):
    _, test = blobs3
    base, res = blob_model
    spec = base.with_posthoc(0.1)
    model = uq.McDropoutModel(spec, res.params)
    x = test.inputs[:5]
    p = uq.sample_probs(model, x, 10_000, [RngStream.derive(0, "expect", i) for i in range(5)], chunk=1)
    det = models.predict(spec, res.params, x)
    assert np.max(np.abs(p.mean(axis=1) - det)) < 0.02


# ---------------------------------------------------------------------------
# training


def test_blobs_train_accuracy(blob_model):
    assert blob_model[1].final_train_accuracy >= 0.98


def test_moons_test_accuracy():
    ds = data.gen_moons(600, 0.1, seed=2)
    train, test = data.train_test_split(ds, 0.3, 2)
    spec = models.mlp_spec(2, [64, 64], 2)
    res = models.train(spec, train.inputs, train.labels, models.TrainConfig(epochs=60, seed=1))
    assert models.accuracy(spec, res.params, test.inputs, test.labels) >= 0.95


def test_zero_learning_rate_keeps_params(blobs3):
    train, _ = blobs3
    spec = models.mlp_spec(2, [8], 3)
    res = models.train(spec, train.inputs[:40], train.labels[:40],
                       models.TrainConfig(epochs=2, learning_rate=0.0, seed=5))
    assert res.params.equal(models.init_params(spec, 5))


def test_training_is_reproducible(blobs3):
    train, _ = blobs3
    spec = models.mlp_spec(2, [16], 3, "ad-hoc", 0.3)
    cfg = models.TrainConfig(epochs=3, seed=2)
    a = models.train(spec, train.inputs, train.labels, cfg)
    b = models.train(spec, train.inputs, train.labels, cfg)
    assert a.params.equal(b.params)
    assert a.log == b.log


def test_trained_params_frozen(blob_model):
    params = blob_model[1].params
    assert params.frozen
    with pytest.raises(ValueError):
        params[0]["weight"][0, 0] = 1.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts(blobs3):
    train, _ = blobs3
    spec = models.mlp_spec(2, [16], 3)
    with pytest.raises(models.TrainingError, match="non-finite"):
        models.train(spec, train.inputs, train.labels, models.TrainConfig(epochs=5, learning_rate=1e200, seed=0))


def test_labels_out_of_range(blobs3):
    train, _ = blobs3
    spec = models.mlp_spec(2, [4], 3)
    with pytest.raises(ValueError):
        models.train(spec, train.inputs, train.labels + 3, models.TrainConfig(epochs=1))


def test_gradient_clipping_caps_update(blobs3):
    train, _ = blobs3
    spec = models.mlp_spec(2, [8], 3)
    cfg = models.TrainConfig(epochs=1, batch_size=len(train), learning_rate=1.0, momentum=0.0, seed=0,
                             clip_norm=1e-3)
    res = models.train(spec, train.inputs, train.labels, cfg)
    init = models.init_params(spec, 0)
    step = math.sqrt(sum(float(np.sum((res.params[i][k] - init[i][k]) ** 2)) for i in init for k in init[i]))
    assert step == pytest.approx(1e-3, rel=1e-9)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(blob_model, tmp_path):
    spec, res = blob_model
    path = tmp_path / "m.ckpt"
    models.save_checkpoint(spec, res.params, path, seed=1, train_log=res.log)
    spec2, params2 = models.load_checkpoint(path)
    assert spec2 == spec
    assert params2.equal(res.params)


def test_checkpoint_reproduces_recorded_accuracy(blobs3, blob_model, tmp_path):
    train, _ = blobs3
    spec, res = blob_model
    path = tmp_path / "m.ckpt"
    models.save_checkpoint(spec, res.params, path, seed=1, train_log=res.log,
                           summary={"train_accuracy": res.final_train_accuracy})
    spec2, params2, manifest = models.load_checkpoint(path, with_manifest=True)
    assert manifest["seed"] == 1
    assert models.accuracy(spec2, params2, train.inputs, train.labels) == manifest["summary"]["train_accuracy"]


def test_truncated_checkpoint_rejected(blob_model, tmp_path):
    spec, res = blob_model
    path = tmp_path / "m.ckpt"
    models.save_checkpoint(spec, res.params, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(models.CheckpointError):
        models.load_checkpoint(path)


def test_checkpoint_version_and_shape_mismatch(blob_model, tmp_path):
    spec, res = blob_model
    path = tmp_path / "m.ckpt"
    models.save_checkpoint(spec, res.params, path)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(models.CheckpointError, match="version"):
        models.load_checkpoint(path)
    doc["version"] = models.CHECKPOINT_VERSION
    doc["params"]["0"]["weight"]["shape"] = [3, 3]
    path.write_text(json.dumps(doc))
    with pytest.raises(models.CheckpointError):
        models.load_checkpoint(path)
