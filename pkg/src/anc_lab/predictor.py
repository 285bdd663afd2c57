"""Next-frame DoA prediction: feature tensor, CRNN model, training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .errors import EmptyDataset, NumericFault, ShapeError
from .signal import stft_multi

log = logging.getLogger(__name__)

N_CLASSES = 36
N_CONTEXT = 4
FRAME_SAMPLES = 8000
NFFT = 1024
HOP = 125
CHANNELS = (16, 32, 64)
HIDDEN = 64


def build_input_tensor(frames, normalize: bool = True, nfft: int = NFFT, hop: int = HOP) -> np.ndarray:
    """Stack K frames of J-channel audio into a (2J, F, T*K) real tensor.

    ``frames`` is (K, J, N) or the concatenated (J, K*N) audio.  Each frame
    is transformed separately; magnitudes come first, then wrapped phases,
    and the K frames are joined along time.  ``normalize`` applies log1p to
    the magnitudes and standardizes all magnitude planes jointly.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 2:
        j, total = x.shape
        if total % N_CONTEXT:
            raise ShapeError(f"audio length {total} is not {N_CONTEXT} whole frames")
        x = x.reshape(j, N_CONTEXT, total // N_CONTEXT).transpose(1, 0, 2)
    if x.ndim != 3 or x.shape[0] != N_CONTEXT or x.shape[2] != FRAME_SAMPLES:
        raise ShapeError(f"expected ({N_CONTEXT}, J, {FRAME_SAMPLES}) frames, got {x.shape}")
    spec = stft_multi(x, nfft, hop)  # (K, J, F, T)
    k, j, f, t = spec.shape
    mag = np.abs(spec).transpose(1, 2, 0, 3).reshape(j, f, k * t)
    phase = np.angle(spec).transpose(1, 2, 0, 3).reshape(j, f, k * t)
    # np.angle returns [-pi, pi]; fold -pi onto pi so phases lie in (-pi, pi]
    phase[phase <= -np.pi] = np.pi
    if normalize:
        mag = np.log1p(mag)
        std = mag.std()
        mag = (mag - mag.mean()) / std if std > 0 else mag - mag.mean()
    return np.concatenate([mag, phase], axis=0)


@dataclass
class DoAPrediction:
    probs: np.ndarray
    predicted_class: int
    grid_resolution: float = 10.0

    @property
    def predicted_doa_deg(self) -> float:
        return self.predicted_class * self.grid_resolution


def predict_next_doa(probs) -> int:
    """Arg-max class; ``np.argmax`` keeps the lowest index on ties."""
    return int(np.argmax(np.asarray(probs)))


class CRNN:
    """Three conv blocks, frequency average pooling, GRU, softmax head."""

    def __init__(self, in_channels: int = 8, n_classes: int = N_CLASSES, channels=CHANNELS,
                 hidden: int = HIDDEN, groups: int = 4, kernel: int = 3, seed: int = 0,
                 dtype=np.float64):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.dtype = np.dtype(dtype)
        self.config = dict(in_channels=in_channels, n_classes=n_classes, channels=tuple(channels),
                           hidden=hidden, groups=groups, kernel=kernel)
        rng = np.random.default_rng(seed)
        self.blocks = []
        c_prev = in_channels
        for i, c in enumerate(channels):
            self.blocks.append(nn.ConvBlock(self.params, self.grads, f"block{i}.", c_prev, c, kernel,
                                            groups, rng, dtype, need_input_grad=i > 0))
            c_prev = c
        self.pool = nn.FreqAvgPool()
        self.gru = nn.GRU(self.params, self.grads, "gru.", c_prev, hidden, rng, dtype)
        self.head = nn.Linear(self.params, self.grads, "head.", hidden, n_classes, rng, dtype)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def manifest(self) -> list[tuple[str, tuple]]:
        return [(k, v.shape) for k, v in self.params.items()]

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[0] != self.config["in_channels"]:
            raise ShapeError(f"expected ({self.config['in_channels']}, F, T) input, got {x.shape}")
        for block in self.blocks:
            x = block.forward(x)
        z = self.pool.forward(x)
        hs = self.gru.forward(z)
        self._t_len = hs.shape[0]
        return self.head.forward(hs[-1])

    def forward(self, x) -> DoAPrediction:
        probs = nn.softmax(self.logits(x))
        return DoAPrediction(probs, predict_next_doa(probs), 360.0 / self.config["n_classes"])

    def backward(self, dlogits: np.ndarray):
        dh = self.head.backward(np.asarray(dlogits, dtype=self.dtype))
        dhs = np.zeros((self._t_len, dh.size), dtype=self.dtype)
        dhs[-1] = dh
        dz = self.gru.backward(dhs)
        dx = self.pool.backward(dz)
        for block in reversed(self.blocks):
            dx = block.backward(dx)
            if dx is None:
                break
        return dx

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def loss_and_grad(self, x, label: int, scale: float = 1.0) -> tuple[float, np.ndarray]:
        """Cross-entropy for one sample; gradients (times ``scale``) are accumulated."""
        z = self.logits(x)
        probs = nn.softmax(z)
        res = nn.cross_entropy(probs, nn.one_hot(label, z.size))
        self.backward(res.grad * scale)
        return res.loss, probs

    def kinks(self):
        out = ()
        for b in self.blocks:
            out += b.kinks()
        return out

    def load_params(self, params: dict):
        missing = set(self.params) ^ set(params)
        if missing:
            raise ShapeError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
        for k, v in params.items():
            if self.params[k].shape != v.shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} != model {self.params[k].shape}")
            self.params[k][...] = v

    def save(self, path):
        nn.save_checkpoint(path, self.params, f"# parameters {self.n_params}")

    @classmethod
    def load(cls, path, **kwargs) -> "CRNN":
        model = cls(**kwargs)
        model.load_params(nn.load_checkpoint(path))
        return model


def crnn_forward(R, model: CRNN) -> DoAPrediction:
    return model.forward(R)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    cosine: bool = True
    patience: int | None = None
    dtype: str = "float32"
    time_budget_s: float | None = None
    stop_at: float | None = None  # end early once validation accuracy reaches this


@dataclass
class TrainResult:
    model: CRNN
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = 0.0
    aborted: bool = False
    cpu_seconds: float = 0.0
    wall_seconds: float = 0.0

    def write_curves(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_acc"])
            for i, (l, a) in enumerate(zip(self.train_loss, self.val_acc)):
                w.writerow([i, f"{l:.6f}", f"{a:.6f}"])


def evaluate(model: CRNN, samples: Iterable[tuple[np.ndarray, int]]) -> tuple[np.ndarray, np.ndarray]:
    preds, labels = [], []
    for x, y in samples:
        preds.append(model.forward(x).predicted_class)
        labels.append(y)
    return np.array(preds, dtype=int), np.array(labels, dtype=int)


def train(
    train_set: Sequence[tuple[np.ndarray, int]],
    val_set: Sequence[tuple[np.ndarray, int]],
    config: TrainConfig = TrainConfig(),
    model: CRNN | None = None,
    on_epoch=None,
) -> TrainResult:
    """Mini-batch Adam on softmax cross-entropy.

    ``train_set`` and ``val_set`` are sequences of (input tensor, label);
    items may be computed lazily by the sequence.  The returned model holds
    the parameters of the best validation epoch.  A NaN loss aborts with
    :class:`NumericFault` carrying the last good result in ``.result``.
    """
    if len(train_set) == 0:
        raise EmptyDataset("no training samples")
    for _, y in _labels_only(train_set):
        if not 0 <= y < N_CLASSES:
            raise ValueError(f"label {y} outside 0..{N_CLASSES - 1}")
    if model is None:
        x0, _ = train_set[0]
        model = CRNN(in_channels=x0.shape[0], seed=config.seed, dtype=np.dtype(config.dtype))
    state = nn.AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(model)
    best = {k: v.copy() for k, v in model.params.items()}
    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    start, cpu0 = time.monotonic(), time.process_time()
    since_best = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            model.zero_grad()
            batch_loss = 0.0
            try:
                for i in idx:
                    x, y = train_set[int(i)]
                    loss, _ = model.loss_and_grad(x, int(y), 1.0 / len(idx))
                    batch_loss += loss
                if not math.isfinite(batch_loss):
                    raise NumericFault(f"loss became non-finite in epoch {epoch}")
            except NumericFault as err:
                model.load_params(best)
                result.aborted = True
                err.result = result
                raise
            step = epoch * steps_per_epoch + b
            if config.cosine:
                state.lr = 0.5 * config.lr * (1 + math.cos(math.pi * step / total_steps))
            nn.adam_update(model.params, model.grads, state)
            epoch_loss += batch_loss
        result.train_loss.append(epoch_loss / n)
        if len(val_set):
            p, l = evaluate(model, val_set)
            acc = float(np.mean(p == l))
        else:
            acc = 0.0
        result.val_acc.append(acc)
        result.cpu_seconds = time.process_time() - cpu0
        result.wall_seconds = time.monotonic() - start
        log.info("epoch %d loss %.4f val_acc %.4f (%.0fs)", epoch, result.train_loss[-1], acc,
                 time.monotonic() - start)
        if on_epoch is not None:
            on_epoch(epoch, result)
        if acc > result.best_val_acc or result.best_epoch < 0:
            result.best_val_acc, result.best_epoch = acc, epoch
            best = {k: v.copy() for k, v in model.params.items()}
            since_best = 0
        else:
            since_best += 1
        if config.patience is not None and since_best > config.patience:
            break
        if config.stop_at is not None and acc >= config.stop_at:
            break
        # budget is CPU time; stop when another epoch of the average length would overrun it
        used = result.cpu_seconds
        if config.time_budget_s is not None and used * (epoch + 2) / (epoch + 1) > config.time_budget_s:
            log.info("time budget reached after epoch %d (%.0f s CPU)", epoch, used)
            break
    model.load_params(best)
    return result


def _labels_only(dataset):
    labels = getattr(dataset, "labels", None)
    if labels is not None:
        return ((None, int(y)) for y in labels)
    return ((None, int(y)) for _, y in dataset)
