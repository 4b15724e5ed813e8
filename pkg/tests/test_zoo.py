import numpy as np
import pytest

from maxmin_attack.data import synth_dataset
from maxmin_attack.errors import (DivergenceError, ShapeError, SpecError, WeightFormatError,
                                  WeightShapeTableError, WeightTruncatedError)
from maxmin_attack.nn import Dense, Model
from maxmin_attack.zoo import (TrainConfig, Zoo, build, default_config, dumps, load, loads, predict,
                               save, train)


@pytest.fixture(scope="module")
def small_data():
    return synth_dataset(5, 200)


def test_build_is_seeded():
    a, b, c = build("NetC", seed=3), build("NetC", seed=3), build("NetC", seed=4)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert not all(np.array_equal(p, q) for p, q in zip(a.params, c.params))


def test_zero_image_logits():
    out = build("NetA").logits(np.zeros((1, 28, 28)))
    assert out.shape == (10,) and np.all(np.isfinite(out))


def test_architectures_differ(rng):
    x = rng.uniform(0, 255, (1, 28, 28))
    assert not np.allclose(build("NetA").logits(x), build("NetB").logits(x))
    assert len(build("NetC").layers) == 7


def test_unknown_architecture():
    with pytest.raises(SpecError):
        build("NetZ")
    with pytest.raises(ShapeError):
        build("NetB", input_shape=(1, 4, 4))


def test_adversarial_names_and_configs():
    m = build("NetB_adv", seed=1)
    assert m.name == "NetB_adv" and m.architecture == "NetB"
    assert default_config("NetB_adv").adversarial and not default_config("NetB").adversarial


def test_zero_epochs_leaves_parameters(small_data):
    model = build("NetA")
    before = [p.copy() for p in model.params]
    train(model, small_data, TrainConfig(epochs=0))
    assert all(np.array_equal(p, q) for p, q in zip(before, model.params))


@pytest.mark.parametrize("adversarial", [False, True])
def test_training_is_bit_reproducible(small_data, adversarial):
    cfg = dict(epochs=1, adversarial=adversarial, adv_warmup_epochs=0, seed=2)
    a = train(build("NetA", seed=1), small_data, TrainConfig(**cfg))
    b = train(build("NetA", seed=1), small_data, TrainConfig(**cfg))
    assert dumps(a) == dumps(b)


def test_training_lowers_loss(small_data):
    model = build("NetA")
    before = model.losses(small_data.images, small_data.labels).mean()
    train(model, small_data, TrainConfig(epochs=2))
    assert model.losses(small_data.images, small_data.labels).mean() < before
    assert 0 <= model.training_meta["clean_accuracy"] <= 1


def test_divergence_reports_epoch(small_data):
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        train(build("NetA"), small_data, TrainConfig(epochs=3, lr=1e300))
    assert info.value.epoch == 0


def test_predict_rules():
    model = Model("m", [Dense(np.zeros((4, 1)), np.array([1.0, 3.0, 3.0, 0.0]))], (1, 1, 1), 4)
    cls, probs = predict(model, np.zeros((1, 1, 1)))
    assert cls == 1 and probs.sum() == pytest.approx(1.0)
    model.layers[0].params[1][:] = [0.0, 0.0, 2.0, 1.0]
    assert predict(model, np.zeros((1, 1, 1)))[0] == 2


def test_predict_batch_matches_single(rng):
    model = build("NetB", seed=2)
    x = rng.uniform(0, 255, (7, 1, 28, 28))
    classes, probs = predict(model, x, batch_size=3)
    for i in range(7):
        c, p = predict(model, x[i])
        assert c == classes[i]
        np.testing.assert_allclose(p, probs[i], atol=1e-15)
    with pytest.raises(ShapeError):
        predict(model, np.zeros((2, 1, 27, 28)))


def test_save_load_round_trip(tmp_path, rng):
    model = build("NetC", seed=9, name="NetC_adv")
    model.training_meta["clean_accuracy"] = 0.5
    path = tmp_path / "m.wgrd"
    save(model, path)
    back = load(path)
    assert back.name == "NetC_adv" and back.training_meta == model.training_meta
    assert all(np.array_equal(p, q) for p, q in zip(model.params, back.params))
    assert dumps(back) == path.read_bytes()
    x = rng.uniform(0, 255, (4, 1, 28, 28))
    assert np.array_equal(predict(model, x)[1], predict(back, x)[1])
    assert not [f for f in tmp_path.iterdir() if f.suffix == ".tmp"]


def test_weight_file_header():
    raw = dumps(build("NetA"))
    assert raw[:4] == b"WGRD" and int.from_bytes(raw[4:8], "little") == 1


def test_truncated_weights():
    raw = dumps(build("NetA"))
    for cut in (2, 10, len(raw) // 2, len(raw) - 1):
        with pytest.raises(WeightTruncatedError):
            loads(raw[:cut])


def test_bad_magic_and_trailing_bytes():
    raw = dumps(build("NetA"))
    with pytest.raises(WeightFormatError):
        loads(b"XGRD" + raw[4:])
    with pytest.raises(WeightFormatError):
        loads(raw + b"\0")
    with pytest.raises(WeightFormatError):
        loads(raw[:4] + (2).to_bytes(4, "little") + raw[8:])


def test_shape_table_mismatch():
    raw = dumps(build("NetA"))
    swapped = raw.replace(b'"architecture": "NetA"', b'"architecture": "NetB"')
    assert swapped != raw
    with pytest.raises(WeightShapeTableError):
        loads(swapped)


def test_zoo_from_dir(tmp_path):
    for name in ("NetA", "NetB_adv"):
        save(build(name, name=name), tmp_path / f"{name}.wgrd")
    zoo = Zoo.from_dir(tmp_path)
    assert zoo.names() == ["NetA", "NetB_adv"] and len(zoo) == 2
    assert Zoo.from_dir(tmp_path, ["NetB_adv"]).names() == ["NetB_adv"]
    with pytest.raises(SpecError):
        Zoo.from_dir(tmp_path, ["NetC"])
    with pytest.raises(SpecError):
        zoo.add(build("NetA"))
