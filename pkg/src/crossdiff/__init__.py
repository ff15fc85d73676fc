"""Cross-domain sequential recommendation with a preference-guided diffusion denoiser.

Pure numpy: a small reverse-mode autograd core, disentangled per-domain
transformer encoders, a cross-attention denoiser, diffusion training and
guided sampling, and a ranking-evaluation harness.
"""

__version__ = "0.1.0"
