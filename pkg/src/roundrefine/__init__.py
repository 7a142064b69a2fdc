"""Multi-task failure detection and reasoning with round-based self-refinement.

A desk-scale model that jointly classifies an episode as success/failure and
generates a short reasoning sentence, trained on a mix of label-only and
reasoning-annotated episodes, and refined at inference over several rounds
using entropy-based self-certainty.
"""

__version__ = "0.1.0"
