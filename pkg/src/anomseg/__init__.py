"""anomseg: a desk-scale multimodal anomaly segmentation stack.

The package bundles a verified autodiff substrate (``numcore``), small
stand-in encoders and a word-level language model (``encoders``), a
locality-aware visual token compressor (``projector``), a patch
similarity distillation loss (``patchsim``), a prompt-conditioned mask
head (``seghead``), a synthetic texture benchmark with reference
metrics (``databench``), and a command-line interface (``cli``).
"""

__version__ = "0.1.0"
