"""Pre-training one control filter with multi-reference FxLMS.

Run:  python demos/02_pretrain_filter.py   (about a minute)

The source sits at a fixed direction.  Four reference capsules pick it up,
the error microphone hears the disturbance, and FxLMS shapes a 4 x 1024-tap
filter that drives the loudspeaker.  We then freeze the filter and play
fresh noise from the same direction, and again from the opposite side.
"""

import numpy as np

from anc_lab.acoustics import AncGeometry
from anc_lab.controller import compute_nrl
from anc_lab.filters import SecondaryPath, playback, pretrain_filter, stable_step_size
from anc_lab.signal import fir_filter, lowpass_noise

geometry = AncGeometry.desk(rt60=0.2)
secondary = SecondaryPath(geometry.secondary_taps())


def record(doa, seconds, seed):
    h = geometry.primary_rirs(doa)
    x = lowpass_noise(seconds * 16000 + 1024, 2000.0, seed)
    rec = np.stack([fir_filter(x, h[j]) for j in range(5)])[:, 1024:]
    return rec[:-1], rec[-1]  # references, disturbance


r, d = record(0.0, 40, seed=0)
delay = int(np.argmax(np.abs(secondary.taps)))
mu = stable_step_size(fir_filter(r, secondary.estimate_taps), 1024, delay, safety=0.1)
f = pretrain_filter(0.0, r, d, secondary, mu)
print("noise reduction during training, dB per half-second window:")
print("  " + " ".join(f"{v:.1f}" for v in f.history))

for doa in (0.0, 180.0):
    r2, d2 = record(doa, 5, seed=99)
    e = playback(f.taps, r2, d2, secondary.taps)
    print(f"frozen filter, fresh noise from {doa:5.1f} deg: {compute_nrl(d2[8000:], e[8000:]):6.1f} dB")
# The mismatch at 180 deg is why the controller needs a library of filters
# and a way to pick the right one.
