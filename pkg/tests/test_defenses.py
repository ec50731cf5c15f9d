import math

import numpy as np
import pytest

from oracles import MAD_EXAMPLE_INDEX_OF_2, MAD_EXAMPLE_NORMS
from warpbench.defenses import (
    CleanseConfig,
    auc_score,
    dormancy_order,
    fine_pruning,
    mad_anomaly_index,
    neural_cleanse,
    prediction_entropy,
    reverse_engineer_trigger,
    signature_scores,
    spectral_signature,
    spectral_signature_from_features,
    strip_entropies,
    strip_entropy,
)
from warpbench.errors import ConfigError
from warpbench.nn import MnistNet


# ------------------------------------------------------------------------- MAD

def test_mad_worked_example():
    idx = mad_anomaly_index(MAD_EXAMPLE_NORMS)
    assert idx[-1] == pytest.approx(3.102, abs=1e-3)
    assert idx[-1] == pytest.approx(MAD_EXAMPLE_INDEX_OF_2, rel=1e-12)


def test_mad_equal_values_all_zero():
    assert mad_anomaly_index([4.0] * 7) == [0.0] * 7


def test_mad_symmetric_pair():
    idx = mad_anomaly_index([1.0, 5.0, 9.0, 5.0, 5.0, 3.0, 7.0])
    assert idx[0] == pytest.approx(idx[2]) and idx[5] == pytest.approx(idx[6])


def test_mad_scale_invariant():
    base = np.random.default_rng(0).uniform(1, 50, 10)
    for c in (1e-3, 0.5, 7.0, 1e4):
        np.testing.assert_allclose(mad_anomaly_index(base * c), mad_anomaly_index(base), atol=1e-9)


def test_mad_needs_three_values():
    with pytest.raises(ConfigError):
        mad_anomaly_index([1.0, 2.0])


# ------------------------------------------------------------- Neural Cleanse

class ConstantNet(MnistNet):
    """Real network whose last layer is rewired to always favour one class."""

    def __init__(self, favoured, **kw):
        super().__init__(dtype=np.float64, **kw)
        self.params["fc2.weight"][...] = 0
        self.params["fc2.bias"][...] = 0
        self.params["fc2.bias"][favoured] = 5.0


@pytest.fixture(scope="module")
def digits():
    return np.random.default_rng(0).random((64, 1, 28, 28)) * 0.5


def test_trigger_for_already_predicted_class_is_tiny(digits):
    net = ConstantNet(favoured=3)
    cand = reverse_engineer_trigger(net, digits, 3, CleanseConfig(steps=60, batch_size=8, seed=1))
    assert cand.converged and cand.success_rate == 1.0
    assert 0 <= cand.mask.min() and cand.mask.max() <= 1
    # Cost pressure drives the mask far below its sigmoid(uniform) start (~392).
    assert cand.l1_norm < 150


def test_trigger_unreachable_class_is_unconverged(digits):
    net = ConstantNet(favoured=3)
    cand = reverse_engineer_trigger(net, digits, 5, CleanseConfig(steps=20, batch_size=8, seed=1))
    assert not cand.converged
    assert 0 <= cand.mask.min() and cand.mask.max() <= 1 and 0 <= cand.pattern.min() and cand.pattern.max() <= 1
    assert cand.l1_norm == pytest.approx(float(cand.mask.sum()))


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_neural_cleanse_report_structure(digits, optimizer):
    net = MnistNet(seed=2, dtype=np.float64)
    report, cands = neural_cleanse(net, digits, 10,
                                   CleanseConfig(steps=15, batch_size=8, eval_size=32, optimizer=optimizer))
    assert len(report.l1_norms) == 10 and len(cands) == 10
    assert all(i >= 0 for i in report.anomaly_indices)
    assert report.flagged == (report.max_index > 2)
    assert [c.target_class for c in cands] == list(range(10))


def test_neural_cleanse_empty_set():
    with pytest.raises(ConfigError):
        neural_cleanse(MnistNet(), np.zeros((0, 1, 28, 28)), 10)


def test_trigger_optimization_reduces_loss(digits):
    # With the cost term disabled the optimizer is pure attack-loss descent;
    # the final candidate must be more successful than the random start.
    net = MnistNet(seed=5, dtype=np.float64)
    cfg = CleanseConfig(steps=80, batch_size=16, init_cost=0.0, cost_multiplier=1.0, seed=2, eval_size=64)
    target = int(np.argmin(np.bincount(net.predict(digits), minlength=10)))
    cand = reverse_engineer_trigger(net, digits, target, cfg)
    assert cand.success_rate > 0.5


# ---------------------------------------------------------------- Fine-Pruning

def test_fine_pruning_curve():
    net = MnistNet(seed=4, dtype=np.float64)
    rng = np.random.default_rng(1)
    images = rng.random((40, 1, 28, 28))
    labels = np.arange(40) % 10
    calls = []

    def evaluate(pruned):
        calls.append(None if pruned.channel_mask is None else pruned.channel_mask.copy())
        pred = pruned.predict(images)
        return 100 * np.mean(pred == labels), 100 * np.mean(pred == 0)

    base = evaluate(net)
    calls.clear()
    curve = fine_pruning(net, images, evaluate)
    assert curve.num_pruned == list(range(65))
    assert (curve.clean_acc[0], curve.attack_acc[0]) == base
    assert curve.clean_acc[-1] <= 20.0
    assert net.channel_mask is None  # original untouched
    # Pruned sets are nested and follow the dormancy order.
    order = dormancy_order(net, images)
    for step, mask in enumerate(calls):
        assert set(np.flatnonzero(mask == 0)) == set(order[:step])


def test_dormancy_order_ascending():
    net = MnistNet(seed=6, dtype=np.float64)
    images = np.random.default_rng(2).random((16, 1, 28, 28))
    order = dormancy_order(net, images)
    means = net.conv3_activations(images).mean(axis=(0, 2, 3))
    assert np.all(np.diff(means[order]) >= 0)


# ----------------------------------------------------------------------- STRIP

def uniform_proba(x):
    return np.full((len(x), 10), 0.1)


def onehot_proba(x):
    p = np.zeros((len(x), 10))
    p[:, 4] = 1.0
    return p


def test_strip_uniform_entropy_is_ln10():
    inputs = np.random.default_rng(0).random((5, 1, 28, 28))
    overlays = np.random.default_rng(1).random((20, 1, 28, 28))
    h = strip_entropies(uniform_proba, inputs, overlays, n_overlays=7)
    np.testing.assert_allclose(h, math.log(10), atol=1e-9)


def test_strip_onehot_entropy_is_zero():
    inputs = np.zeros((3, 1, 28, 28))
    assert np.all(strip_entropies(onehot_proba, inputs, inputs + 0.5, n_overlays=4) == 0)


def test_strip_blend_is_equal_weight():
    seen = []

    def spy(x):
        seen.append(x.copy())
        return uniform_proba(x)

    x = np.full((1, 1, 2, 2), 1.0)
    overlay = np.zeros((1, 1, 2, 2))
    strip_entropies(spy, x, overlay, n_overlays=1)
    np.testing.assert_array_equal(seen[0], np.full((1, 1, 2, 2), 0.5))


def test_strip_overlay_order_invariance():
    net = MnistNet(seed=3, dtype=np.float64)
    rng = np.random.default_rng(5)
    x = rng.random((1, 28, 28))
    overlays = rng.random((12, 1, 28, 28))
    a = strip_entropy(net, x, overlays, n_overlays=12, seed=0)
    b = strip_entropy(net, x, overlays[::-1].copy(), n_overlays=12, seed=9)
    assert a == pytest.approx(b, abs=1e-12)


def test_strip_entropy_bounds():
    net = MnistNet(seed=3, dtype=np.float64)
    rng = np.random.default_rng(6)
    h = strip_entropies(net.predict_proba, rng.random((6, 1, 28, 28)), rng.random((10, 1, 28, 28)), 5)
    assert np.all((h >= 0) & (h <= math.log(10) + 1e-12))


def test_strip_errors():
    with pytest.raises(ConfigError):
        strip_entropies(uniform_proba, np.zeros((1, 1, 2, 2)), np.zeros((0, 1, 2, 2)))
    with pytest.raises(ConfigError):
        strip_entropies(uniform_proba, np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), n_overlays=0)


def test_prediction_entropy_handles_zeros():
    assert prediction_entropy(np.array([[1.0, 0.0]]))[0] == 0.0
    assert prediction_entropy(np.array([[0.5, 0.5]]))[0] == pytest.approx(math.log(2))


# ---------------------------------------------------------- spectral signature

def test_spectral_identical_representations():
    hist = spectral_signature_from_features(np.ones((5, 3)), np.ones((4, 3)))
    assert not hist.clean.any() and not hist.backdoor.any()
    assert hist.auc == 0.5


def test_spectral_two_sample_toy():
    scores = signature_scores(np.array([[1.0, 0.0], [0.0, 1.0]]))
    # centred rows are +-(0.5, -0.5); v = (1, -1)/sqrt(2) up to sign
    np.testing.assert_allclose(scores, [math.sqrt(0.5), math.sqrt(0.5)], rtol=1e-12)
    hist = spectral_signature_from_features(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert hist.auc == 0.5


def test_spectral_rotation_invariance():
    rng = np.random.default_rng(3)
    clean = rng.normal(size=(60, 6))
    backdoor = rng.normal(size=(20, 6)) + np.array([8, 0, 0, 0, 0, 0])
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    a = spectral_signature_from_features(clean, backdoor)
    b = spectral_signature_from_features(clean @ q, backdoor @ q)
    assert a.auc == pytest.approx(b.auc, abs=1e-12)
    assert a.auc > 0.9  # a planted mean shift is detected


def test_auc_examples():
    assert auc_score([0, 1, 2], [3, 4]) == 1.0
    assert auc_score([3, 4], [0, 1, 2]) == 0.0
    assert auc_score([1, 1], [1, 1]) == 0.5
    with pytest.raises(ConfigError):
        auc_score([], [1.0])


def test_spectral_signature_on_network_features():
    net = MnistNet(seed=1)
    rng = np.random.default_rng(0)
    hist = spectral_signature(net, rng.random((30, 1, 28, 28), dtype=np.float32),
                              rng.random((10, 1, 28, 28), dtype=np.float32))
    assert hist.clean.shape == (30,) and hist.backdoor.shape == (10,)
    assert 0 <= hist.auc <= 1 and hist.separability >= 0.5
