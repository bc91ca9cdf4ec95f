"""HTTP sidecar exposing prefill-stage signals of a causal language model."""

__version__ = "0.1.0"
