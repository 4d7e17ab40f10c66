"""Training-free referring video object segmentation engine.

Candidate mask tracks come from a concept-segmentation backend; a reasoning
backend iteratively prunes them in space and time until only the queried
object remains. Deterministic simulated backends make the whole pipeline
verifiable without model servers.
"""

__version__ = "0.1.0"
