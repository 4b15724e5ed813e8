import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from maxmin_attack.nn import Conv2D, Dense, Model, ReLU  # noqa: E402


def random_model(seed, input_shape=(1, 8, 8), num_classes=4, arch=((3, 3, 1), (4, 3, 2))):
    """Small random conv net with nonzero biases so ReLUs sit on both sides of zero."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers = []
    for out_ch, k, stride in arch:
        layers += [Conv2D(rng.normal(0, 2 / np.sqrt(c * k * k), (out_ch, c, k, k)),
                          rng.normal(0, 0.3, out_ch), stride),
                   ReLU()]
        c, h, w = out_ch, (h - k) // stride + 1, (w - k) // stride + 1
    layers.append(Dense(rng.normal(0, 2 / np.sqrt(c * h * w), (num_classes, c * h * w)),
                        rng.normal(0, 0.3, num_classes)))
    return Model(f"rand{seed}", layers, input_shape, num_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- desk zoo (slow tests)

DESK_MODELS = ("NetA", "NetB", "NetC", "NetA_adv", "NetB_adv", "NetC_adv")
CLEAN_MODELS = DESK_MODELS[:3]
ACCEPTANCE = {}


def _source_digest():
    """Cached models are reused only while the code that produced them is unchanged."""
    import hashlib

    import maxmin_attack

    h = hashlib.sha256()
    root = os.path.dirname(maxmin_attack.__file__)
    for name in ("nn.py", "zoo.py", "data.py", "attacks.py", "affine.py"):
        with open(os.path.join(root, name), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def desk(request):
    """Synthetic splits plus the six trained desk models, cached in the pytest cache dir."""
    from maxmin_attack.data import desk_splits
    from maxmin_attack.zoo import Zoo, build, default_config, load, save, train

    train_set, test_set = desk_splits(0)
    cache = request.config.cache.mkdir(f"desk-zoo-{_source_digest()}")
    zoo = Zoo()
    for name in DESK_MODELS:
        path = os.path.join(cache, f"{name}.wgrd")
        if os.path.exists(path):
            model = load(path)
        else:
            model = build(name, seed=0, name=name)
            train(model, train_set, default_config(name, seed=0), eval_data=test_set)
            save(model, path)
        zoo.add(model)
    return zoo, train_set, test_set


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")
