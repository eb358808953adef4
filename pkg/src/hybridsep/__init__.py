"""HybridSep: two-stage language-queried audio source separation.

Stage 1 predicts a target-audio embedding from a text query and the
mixture; stage 2 separates the target waveform conditioned on that
embedding, trained with an adversarial consistent training loop.
"""

__version__ = "0.1.0"
