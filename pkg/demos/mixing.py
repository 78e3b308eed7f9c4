"""Building a noisy test condition at a chosen SNR and SIR.

Each group (interfering talkers, background noise) is scaled so its summed
power sits the requested number of decibels below the clean track.  Tracks
inside a group end up at equal power.

    python demos/mixing.py
"""

import numpy as np

from causal_avse import MixSpec, mix
from causal_avse.pipeline import mix_gains, ratio_db

rng = np.random.default_rng(1)
t = np.arange(32000) / 16000
clean = 0.1 * np.sin(2 * np.pi * 220 * t) * (1 + 0.5 * np.sin(2 * np.pi * 3 * t))
talkers = [0.3 * np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) for f in (310, 455)]
babble = rng.standard_normal(t.size)

for db in (0, -5, -10):
    spec = MixSpec(snr_db=db, sir_db=db)
    g_talk, g_noise = mix_gains(clean, talkers, [babble], spec)
    noisy = mix(clean, talkers, [babble], spec)
    interference = sum(g * x for g, x in zip(g_talk, talkers))
    noise = g_noise[0] * babble
    print(f"target {db:>3} dB: SIR {ratio_db(clean, interference):7.3f} dB, "
          f"SNR {ratio_db(clean, noise):7.3f} dB, peak {np.abs(noisy).max():.2f}")
