"""Training the direction predictor on a task small enough to watch.

Run:  python demos/04_tiny_crnn.py   (several minutes)

Two classes only: a static source straight ahead or straight behind, in an
anechoic room.  The network sees two seconds of four-channel audio as an
8-channel magnitude/phase spectrogram.  A slimmed-down CRNN learns the
split in a few epochs.  The full model, on the 36-class moving-source
task, is trained by `anc-lab train-crnn`.
"""

import numpy as np

from anc_lab.acoustics import RoomSetup
from anc_lab.dataset import MotionSpec, render_sample
from anc_lab.predictor import CRNN, TrainConfig, build_input_tensor, evaluate, train
from anc_lab.signal import lowpass_noise

room = RoomSetup((6.0, 4.0, 3.0), 0.2, max_reflection_order=0)
rng = np.random.default_rng(0)
data = []
for i in range(500):
    doa = 180.0 * (i % 2)
    noise = lowpass_noise(32000 + 1024, float(rng.uniform(500, 2000)), rng)
    s = render_sample(MotionSpec("static", doa), room, (3.0, 2.0, 1.5), noise, 30.0, seed=i)
    data.append((build_input_tensor(s.audio).astype(np.float32), s.label))
train_set, val_set = data[:400], data[400:]

model = CRNN(seed=0, dtype=np.float32, channels=(4, 8, 8), hidden=16)
print(f"{model.n_params} parameters")
res = train(train_set, val_set, TrainConfig(epochs=12, batch_size=16, lr=3e-3, stop_at=0.96), model,
            on_epoch=lambda ep, r: print(f"epoch {ep}: loss {r.train_loss[-1]:.3f}, "
                                         f"validation accuracy {r.val_acc[-1]:.2f}"))
p, l = evaluate(res.model, val_set)
print(f"best epoch {res.best_epoch}: {np.mean(p == l):.0%} of held-out clips classified correctly")
