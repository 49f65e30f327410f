import numpy as np
import pytest

from hdcam import tensor as T
from hdcam.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from hdcam.dataset import segment_windows, split_by_repetition, synth_generate
from hdcam.errors import CheckpointError, ConfigError, NumericalError
from hdcam.model import HdcamModel, named_variant
from hdcam.train import (
    AdamState,
    ProtocolSpec,
    SubjectRun,
    TrainConfig,
    adam_step,
    aggregate,
    evaluate,
    prepare_subject,
    run_protocol,
    subject_seed,
    train_model,
)


def test_adam_matches_hand_computation():
    cfg = TrainConfig(learning_rate=0.1)
    theta = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.3])
    adam_step(theta, {"w": g1}, state, 1, cfg)
    # first step: m_hat = g, v_hat = g^2, update = lr * sign(g) (up to eps)
    np.testing.assert_allclose(theta["w"], [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 1.0 / (1.0 + 1e-8)])
    before = theta["w"].copy()
    adam_step(theta, {"w": g2}, state, 2, cfg)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    step = 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(theta["w"], before - step, rtol=1e-12)


def test_adam_rejects_step_zero_and_bad_config():
    with pytest.raises(ValueError):
        adam_step({}, {}, AdamState(), 0, TrainConfig())
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


@pytest.fixture(scope="module")
def tiny_split():
    rec = synth_generate(num_classes=3, reps=6, move_s=0.6, rest_s=0.2, seed=1)
    train, test, _ = prepare_subject(rec, ProtocolSpec(window_ms=150, stride_ms=50, eval_stride_ms=100), 3)
    return train, test


def _tiny_model(seed=0):
    return HdcamModel(named_variant("XXSmall", window_ms=150, num_classes=3), seed=seed)


def test_training_reduces_loss_and_is_deterministic(tiny_split):
    train, _ = tiny_split
    cfg = TrainConfig(learning_rate=1e-3, epochs=3, seed=4)
    a, b = _tiny_model(), _tiny_model()
    ra, rb = train_model(a, train, cfg), train_model(b, train, cfg)
    assert ra.loss_curve == rb.loss_curve
    assert ra.loss_curve[-1] < ra.loss_curve[0]
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert ra.steps == 3 * -(-len(train) // 32)


def test_early_stop_hook(tiny_split):
    train, _ = tiny_split
    seen = []
    res = train_model(_tiny_model(), train, TrainConfig(epochs=10), on_epoch=lambda e, loss: seen.append(e) or e == 2)
    assert seen == [1, 2] and len(res.loss_curve) == 2


def test_non_finite_loss_reports_location(tiny_split):
    train, _ = tiny_split
    m = _tiny_model()
    m.params["head.fc.weight"].data[:] = np.nan
    with pytest.raises(NumericalError, match="epoch 1, batch 0"):
        train_model(m, train, TrainConfig(epochs=1))


def test_window_mismatch_rejected(tiny_split):
    train, _ = tiny_split
    m = HdcamModel(named_variant("XXSmall", window_ms=300, num_classes=3))
    with pytest.raises(ConfigError, match="L=600"):
        train_model(m, train, TrainConfig(epochs=1))


def test_evaluate_confusion_and_recall(tiny_split):
    _, test = tiny_split
    ev = evaluate(_tiny_model(), test)
    assert ev.confusion.sum() == len(test) == ev.n
    assert ev.accuracy == pytest.approx(np.trace(ev.confusion) / ev.n)
    recall = ev.per_class_recall
    assert recall.shape == (3,) and np.all((recall >= 0) & (recall <= 1))


def test_subject_seed_distinct_and_stable():
    assert subject_seed(0, 1) == subject_seed(0, 1)
    assert len({subject_seed(0, s) for s in range(1, 41)}) == 40
    assert subject_seed(0, 1) != subject_seed(1, 1)


def test_aggregate_population_std():
    runs = [SubjectRun(i, acc, np.eye(2, dtype=np.int64), [1.0], 1, 1, 0.0, np.ones(1), {}, 0)
            for i, acc in ((1, 0.8), (2, 0.9), (3, 1.0))]
    m = aggregate(runs, 2)
    assert m.mean_accuracy == pytest.approx(0.9)
    assert m.std_accuracy == pytest.approx(np.sqrt(((0.1 ** 2) * 2) / 3))
    assert m.confusion.sum() == 6


def test_protocol_parallel_equals_serial():
    recs = [synth_generate(num_classes=3, reps=6, move_s=0.4, rest_s=0.1, subject_id=s) for s in (1, 2)]
    cfg = named_variant("XXSmall", window_ms=150, num_classes=3)
    spec = ProtocolSpec(window_ms=150)
    tc = TrainConfig(epochs=1, learning_rate=1e-3)
    m1, r1 = run_protocol(cfg, recs, spec, tc, jobs=1)
    m2, r2 = run_protocol(cfg, recs, spec, tc, jobs=2)
    assert m1.per_subject_accuracy == m2.per_subject_accuracy
    for a, b in zip(r1, r2):
        assert all(np.array_equal(a.state[k], b.state[k]) for k in a.state)


def test_protocol_window_mismatch():
    with pytest.raises(ConfigError):
        run_protocol(named_variant("Small", window_ms=300), [], ProtocolSpec(window_ms=200), TrainConfig())


# checkpoints -----------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    m = HdcamModel(named_variant("XSmall", window_ms=250), seed=3)
    p = save_checkpoint(tmp_path / "c.hdck", m, {"scales": [1.0, 2.0], "seed": 3})
    back, header = load_checkpoint(p)
    assert header["scales"] == [1.0, 2.0] and back.config == m.config
    for k in m.params:
        assert back.params[k].data.tobytes() == m.params[k].data.tobytes()
    x = np.random.default_rng(0).standard_normal((2, 500, 12)).astype(np.float32)
    with T.no_grad():
        np.testing.assert_array_equal(m(x).data, back(x).data)


def test_checkpoint_corruption(tmp_path):
    p = save_checkpoint(tmp_path / "c.hdck", HdcamModel(named_variant("XXSmall")))
    raw = p.read_bytes()
    (tmp_path / "t.hdck").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "t.hdck")
    (tmp_path / "m.hdck").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="not an HDCAM checkpoint"):
        read_checkpoint(tmp_path / "m.hdck")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "absent.hdck")
