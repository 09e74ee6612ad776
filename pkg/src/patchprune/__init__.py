"""Token pruning for a small dual-encoder image-text model.

The package covers the full loop: score patch tokens by how little their
removal hurts the model (sliding-window oracle), train a cheap predictor to
reproduce that ranking from early-layer features, prune tokens progressively
at inference while counting compute, and recover lost accuracy with learned
prompt tokens. A benchmark harness and CLI tie the stages together.
"""

__version__ = "0.1.0"
