"""Hunting for an output that knows the future.

A check perturbs every input after some step and looks for a change in
earlier outputs.  For causal modules no trial ever finds one; for the
non-causal vocoder and the bidirectional transformer the first hit is
reported as a witness.

    python demos/causality_witness.py
"""

from causal_avse import preset, weights_init
from causal_avse.pipeline import Model
from causal_avse.verify import module_checks

for name in ("desk", "desk_noncausal"):
    model = Model(preset(name), weights_init(preset(name), seed=0))
    print(f"{name}:")
    for check in module_checks(model, trials=30, seed=0):
        line = f"    {check.name:<28} {check.violations:>2}/{check.trials} trials changed the past"
        if check.witness:
            w = check.witness
            line += (f"; perturbing from step {w['perturbed_from_step']} moved step "
                     f"{w['changed_step']} by {w['deviation']:.2g}")
        print(line)
