"""Streaming a causal model gives the same waveform as running it offline;
feeding an offline model frame by frame does not.

Uses the reduced-width desk configuration so it runs in a few seconds.

    python demos/streaming_vs_offline.py
"""

import numpy as np

from causal_avse import enhance_offline, naive_online, preset, session_new, session_step, weights_init
from causal_avse.pipeline import Model

steps = 20
rng = np.random.default_rng(0)
video = rng.uniform(0, 1, (steps, 96, 96)).astype(np.float32)
audio = rng.uniform(-0.5, 0.5, steps * 640).astype(np.float32)

causal = Model(preset("desk"), weights_init(preset("desk"), seed=0))

# One 40 ms step at a time: a video frame and 640 audio samples in, 640 out.
session = session_new(causal.config, causal)
streamed = np.concatenate([session_step(session, video[i], audio[640 * i:640 * (i + 1)])
                           for i in range(steps)])
offline = enhance_offline(video, audio, causal.config, causal)
print(f"causal model, {steps} steps: streamed == offline byte for byte: "
      f"{streamed.tobytes() == offline.tobytes()}")

# The non-causal model can only be used online by re-running everything seen so
# far and keeping the newest 40 ms.  Each emitted frame lacks the future context
# the offline run had, so the two disagree everywhere except the last frame.
noncausal = Model(preset("desk_noncausal"), weights_init(preset("desk_noncausal"), seed=0))
naive = np.concatenate(list(naive_online(video, audio, noncausal.config, noncausal)))
reference = enhance_offline(video, audio, noncausal.config, noncausal)
per_frame = np.abs(naive - reference).reshape(steps, 640).max(axis=1)
print("non-causal model, naive online vs offline, max |diff| per frame:")
print("   ", " ".join(f"{d:.1e}" for d in per_frame))
