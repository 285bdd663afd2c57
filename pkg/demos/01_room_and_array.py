"""A shoebox room heard through a tetrahedral cardioid array.

Run:  python demos/01_room_and_array.py

We build a 6 x 4 x 3 m room, place the four-capsule array in it, and look
at two things every later stage leans on: how long the room rings, and how
the array's channels differ when the source moves around it.
"""

import numpy as np

from anc_lab.acoustics import (
    CardioidMic,
    MicArray,
    RoomSetup,
    schroeder_rt60,
    simulate_rir,
    simulate_rirs,
    source_position,
)

# Reverberation first.  The Schroeder backward integral of an impulse
# response gives its decay time; it should land near the requested RT60.
for rt60 in (0.2, 0.3, 0.5):
    room = RoomSetup((6.0, 4.0, 3.0), rt60)
    h = simulate_rir(room, [1.2, 1.1, 1.4], CardioidMic([4.1, 2.7, 1.6]), int(rt60 * 16000 * 1.5))
    print(f"target RT60 {rt60:.2f} s   Schroeder estimate {schroeder_rt60(h):.3f} s")

# Now the array.  Each capsule is a cardioid facing outwards, so a source
# on one side is loud in the capsules facing it and faint in the others.
room = RoomSetup((6.0, 4.0, 3.0), 0.2)
center = np.array([3.0, 2.0, 1.5])
array = MicArray.tetrahedral(center)
print("\ncapsule energy (dB re. strongest) as the source circles at 0.4 m")
for doa in range(0, 360, 45):
    h = simulate_rirs(room, source_position(center, doa, 0.4), array.capsules, 1024)
    e = np.sum(h**2, axis=1)
    print(f"  {doa:3d} deg  " + "  ".join(f"{10 * np.log10(v / e.max()):6.1f}" for v in e))
