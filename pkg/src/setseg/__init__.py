"""Instruction-conditioned multi-instance segmentation on synthetic grid scenes.

A small numpy transformer reads a rendered scene plus a text instruction,
splices a bank of K query slots after a trigger token, and decodes each slot
into a mask and a presence score.  Training uses bipartite matching between
slots and ground-truth instances.
"""

__version__ = "0.1.0"
