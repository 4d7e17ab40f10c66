"""Reference model-serving adapter for the trackprune wire protocols.

Wraps a concept segmenter and a chat model (or an upstream proxy) behind the
exact `/v1/segment` and `/chat/completions` contracts, with a stub mode that
needs no model weights so contract tests run anywhere.
"""

__version__ = "0.1.0"
