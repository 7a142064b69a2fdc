"""Scripted stand-in for the policy used to trace the refinement loop."""

import numpy as np

from roundrefine.model import RoundOutput


class ScriptedPolicy:
    """Row ``m`` of round ``t`` returns the scripted (H_det, H_reason).

    The reasoning tokens encode (m, t) as ids 7+m and 20+t so the chosen output is identifiable.
    """

    def __init__(self, script, M):
        self.script = script  # script[m][t] -> (H_det, H_reason) or C with H_reason 0
        self.M = M
        self.calls = 0

    def predict_batch(self, frames, contexts, temperature, rngs):
        t = self.calls
        self.calls += 1
        outs = []
        for row in range(len(contexts)):
            m = row % self.M
            entry = self.script[m][t]
            h_det, h_reason = entry if isinstance(entry, tuple) else (entry, 0.0)
            outs.append(RoundOutput(0.9, (7 + m, 20 + t), np.zeros((0, 40)), h_det, h_reason))
        return outs
