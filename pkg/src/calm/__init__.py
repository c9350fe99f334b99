"""Desk-scale continuous-latent sequence models.

Autoregressive generation over continuous latent frames with a
noise-injected causal backbone, a short-context transformer, and
interchangeable sampler heads (one/few-step consistency, TrigFlow
flow matching, discrete residual-quantizer decoding), plus the
evaluation and benchmarking harness around them.
"""

__version__ = "0.1.0"
