"""Where the milliseconds go.

Every preset is a stage graph: an audio branch and a video branch meet at the
fusion layer, then the temporal model, the mel head and the vocoder run in
series.  Each stage reports how far into the future it looks; the ledger adds
serial stages, takes the worst branch at the join, and puts the 40 ms frame
acquisition time on top.

    python demos/latency_ledger.py
"""

from causal_avse import PRESETS, latency_graph, latency_ledger


def show(name):
    ledger = latency_ledger(latency_graph(PRESETS[name]))
    print(f"{name}: {ledger.render()} ms")
    for line in ledger.lines:
        if line.lookahead_ms:
            print(f"    {'  ' * line.depth}{line.name} looks {float(line.lookahead_ms):g} ms ahead")


# The final model never peeks: latency is just the frame it has to wait for.
show("causal")

# A centred STFT window reaches 15 ms past the frame edge.  Nothing else in the
# graph does, so that is the whole difference.
show("mel_linear")

# Swapping only the STFT padding brings it back to 40 ms.
show("causal_mel_linear")

# The original design: bidirectional attention sees the whole utterance, so no
# finite latency exists.
show("noncausal")
