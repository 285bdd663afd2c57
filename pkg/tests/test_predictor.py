import time
from collections.abc import Sequence

import numpy as np
import pytest

from anc_lab import nn
from anc_lab.acoustics import RoomSetup
from anc_lab.dataset import MotionSpec, render_sample
from anc_lab.errors import EmptyDataset, NumericFault, ShapeError
from anc_lab.predictor import (
    CRNN,
    TrainConfig,
    build_input_tensor,
    crnn_forward,
    evaluate,
    predict_next_doa,
    train,
)
from anc_lab.signal import lowpass_noise

SMALL = dict(channels=(4, 8, 8), hidden=16)


def random_frames(seed=0):
    return np.random.default_rng(seed).standard_normal((4, 4, 8000))


class TestInputTensor:
    def test_shape(self):
        x = build_input_tensor(random_frames())
        assert x.shape == (8, 513, 256)
        assert build_input_tensor(random_frames().transpose(1, 0, 2).reshape(4, 32000)).shape == x.shape

    def test_concatenated_equals_framed(self):
        frames = random_frames(1)
        flat = frames.transpose(1, 0, 2).reshape(4, 32000)
        np.testing.assert_array_equal(build_input_tensor(flat), build_input_tensor(frames))

    def test_zero_audio(self):
        x = build_input_tensor(np.zeros((4, 4, 8000)))
        assert np.all(x[:4] == 0)
        x = build_input_tensor(np.zeros((4, 4, 8000)), normalize=False)
        assert np.all(x[:4] == 0)

    def test_channel_swap(self):
        frames = random_frames(2)
        swapped = frames[:, [0, 2, 1, 3]]
        perm = [0, 2, 1, 3, 4, 6, 5, 7]
        a, b = build_input_tensor(frames, normalize=False), build_input_tensor(swapped, normalize=False)
        np.testing.assert_array_equal(b[perm], a)
        # joint normalization only reorders a floating-point sum
        np.testing.assert_allclose(build_input_tensor(swapped)[perm], build_input_tensor(frames), atol=1e-12)

    def test_ranges(self):
        x = build_input_tensor(random_frames(3), normalize=False)
        assert np.all(x[:4] >= 0)
        assert np.all(x[4:] > -np.pi) and np.all(x[4:] <= np.pi)

    def test_time_order(self):
        frames = random_frames(4)
        x = build_input_tensor(frames, normalize=False)
        from anc_lab.signal import stft

        np.testing.assert_allclose(x[1, :, 128:192], np.abs(stft(frames[2, 1]).bins), atol=1e-12)

    def test_errors(self):
        with pytest.raises(ShapeError):
            build_input_tensor(np.zeros((3, 4, 8000)))
        with pytest.raises(ShapeError):
            build_input_tensor(np.zeros((4, 4, 7999)))
        with pytest.raises(ShapeError):
            build_input_tensor(np.zeros((4, 31999)))


class TestModel:
    def test_parameter_budget(self):
        m = CRNN()
        assert m.n_params == sum(int(np.prod(s)) for _, s in m.manifest())
        assert 2.5e4 <= m.n_params <= 1e5

    def test_sequence_length_and_probs(self):
        m = CRNN(seed=1)
        pred = crnn_forward(build_input_tensor(random_frames()), m)
        assert m._t_len == 32
        assert pred.probs.shape == (36,) and abs(pred.probs.sum() - 1) < 1e-9
        assert pred.predicted_class == int(np.argmax(pred.probs))
        assert pred.predicted_doa_deg == 10 * pred.predicted_class

    def test_zero_head_uniform(self):
        m = CRNN(seed=2)
        m.params["head.weight"].fill(0)
        for seed in range(2):
            probs = m.forward(np.random.default_rng(seed).standard_normal((8, 64, 32))).probs
            np.testing.assert_allclose(probs, 1 / 36, atol=1e-15)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            CRNN().forward(np.zeros((6, 64, 32)))

    def test_deterministic_inference(self):
        x = np.random.default_rng(3).standard_normal((8, 64, 32))
        a, b = CRNN(seed=4), CRNN(seed=4)
        assert a.forward(x).probs.tobytes() == b.forward(x).probs.tobytes()
        assert a.forward(x).probs.tobytes() == a.forward(x).probs.tobytes()

    def test_checkpoint_round_trip(self, tmp_path):
        m = CRNN(seed=5)
        m.save(tmp_path / "m.ancn")
        back = CRNN.load(tmp_path / "m.ancn")
        x = np.random.default_rng(6).standard_normal((8, 64, 32))
        assert back.forward(x).probs.tobytes() == m.forward(x).probs.tobytes()
        with pytest.raises(ShapeError):
            CRNN.load(tmp_path / "m.ancn", hidden=32)

    def test_full_gradient_check(self):
        start = time.monotonic()
        m = CRNN(seed=7)
        for k, v in m.params.items():
            if k.endswith("bias") or k.endswith("beta") or k == "gru.b":
                v[...] = np.random.default_rng(8).normal(0, 0.1, v.shape)
        x = np.random.default_rng(9).standard_normal((8, 64, 48))
        m.zero_grad()
        m.loss_and_grad(x, 11)
        analytic = {k: g.copy() for k, g in m.grads.items()}
        loss = lambda: nn.cross_entropy(nn.softmax(m.logits(x)), nn.one_hot(11, 36)).loss
        res = nn.grad_check(loss, m.params, analytic, n_coords=200, kink_fn=m.kinks)
        assert res.checked + res.skipped_kinks >= 200
        assert res.max_rel_error < 1e-4
        assert time.monotonic() - start < 60


@pytest.mark.parametrize("probs,cls", [
    ([0.1, 0.7, 0.2] + [0.0] * 33, 1),
    ([1 / 36] * 36, 0),
    (list(np.eye(36)[35]), 35),
])
def test_predict_next_doa(probs, cls):
    assert predict_next_doa(probs) == cls


class ListSet(Sequence):
    """(tensor, label) pairs with features built on access."""

    def __init__(self, audio, labels):
        self.audio = list(audio)
        self.labels = np.asarray(labels)

    def __len__(self):
        return len(self.audio)

    def __getitem__(self, i):
        if not 0 <= i < len(self):
            raise IndexError(i)
        return build_input_tensor(self.audio[i]).astype(np.float32), int(self.labels[i])


def toy_audio(n, seed):
    """Anechoic static sources at 0 or 180 degrees."""
    room = RoomSetup((6.0, 4.0, 3.0), 0.2, max_reflection_order=0)
    rng = np.random.default_rng(seed)
    audio, labels = [], []
    for i in range(n):
        doa = 180.0 * (i % 2)
        noise = lowpass_noise(32000 + 1024, float(rng.uniform(500, 2000)), rng)
        s = render_sample(MotionSpec("static", doa), room, (3.0, 2.0, 1.5), noise, 30.0, seed=i)
        audio.append(s.audio.astype(np.float32))
        labels.append(s.label)
    return audio, labels


@pytest.fixture(scope="module")
def toy():
    audio, labels = toy_audio(500, 0)
    assert set(labels) == {0, 18}
    return ListSet(audio[:400], labels[:400]), ListSet(audio[400:], labels[400:])


@pytest.mark.slow
def test_two_class_toy(toy):
    tr, va = toy
    res = train(tr, va, TrainConfig(epochs=20, batch_size=16, lr=3e-3, seed=0, stop_at=0.96),
                CRNN(seed=0, dtype=np.float32, **SMALL))
    assert max(res.val_acc) > 0.95
    assert len(res.val_acc) <= 20
    p, l = evaluate(res.model, va)
    assert np.mean(p == l) == res.best_val_acc


def test_zero_learning_rate(toy):
    tr, va = toy
    untrained = CRNN(seed=1, dtype=np.float32, **SMALL)
    p, l = evaluate(untrained, va)
    res = train(ListSet(tr.audio[:32], tr.labels[:32]), va,
                TrainConfig(epochs=1, batch_size=16, lr=0.0, seed=0, cosine=False),
                CRNN(seed=1, dtype=np.float32, **SMALL))
    assert res.val_acc[0] == np.mean(p == l)
    for k in untrained.params:
        np.testing.assert_array_equal(res.model.params[k], untrained.params[k])


def test_single_batch_overfit():
    rng = np.random.default_rng(10)
    data = [(rng.standard_normal((8, 64, 32)), int(y)) for y in rng.integers(0, 36, 8)]
    res = train(data, [], TrainConfig(epochs=200, batch_size=8, lr=1e-2, seed=0, cosine=False,
                                      dtype="float64"), CRNN(seed=2, **SMALL))
    assert res.train_loss[-1] < 0.05


def test_training_determinism():
    rng = np.random.default_rng(11)
    data = [(rng.standard_normal((8, 32, 32)), int(y)) for y in rng.integers(0, 36, 12)]
    cfg = TrainConfig(epochs=3, batch_size=4, lr=1e-3, seed=3)
    a = train(data, data[:4], cfg, CRNN(seed=3, **SMALL))
    b = train(data, data[:4], cfg, CRNN(seed=3, **SMALL))
    for k in a.model.params:
        assert a.model.params[k].tobytes() == b.model.params[k].tobytes()
    assert a.train_loss == b.train_loss


def test_time_budget_stops_early():
    rng = np.random.default_rng(13)
    data = [(rng.standard_normal((8, 32, 32)), int(y)) for y in rng.integers(0, 36, 4)]
    res = train(data, [], TrainConfig(epochs=50, batch_size=4, seed=0, time_budget_s=1e-6), CRNN(seed=0, **SMALL))
    assert len(res.train_loss) == 1 and res.cpu_seconds > 0


def test_curves_csv(tmp_path):
    rng = np.random.default_rng(12)
    data = [(rng.standard_normal((8, 32, 32)), int(y)) for y in rng.integers(0, 36, 4)]
    res = train(data, data, TrainConfig(epochs=2, batch_size=4, seed=0), CRNN(seed=0, **SMALL))
    res.write_curves(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_acc" and len(lines) == 3


def test_training_errors():
    with pytest.raises(EmptyDataset):
        train([], [], TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train([(np.zeros((8, 32, 32)), 36)], [], TrainConfig(epochs=1), CRNN(**SMALL))


def test_nan_loss_aborts_with_last_good():
    data = [(np.zeros((8, 32, 32)), 0), (np.full((8, 32, 32), np.nan), 1)]
    m = CRNN(seed=0, **SMALL)
    before = {k: v.copy() for k, v in m.params.items()}
    with pytest.raises(NumericFault) as info:
        train(data, [], TrainConfig(epochs=1, batch_size=2), m)
    assert info.value.result.aborted
    for k in before:
        np.testing.assert_array_equal(info.value.result.model.params[k], before[k])
