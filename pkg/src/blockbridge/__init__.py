"""Desk-scale bridge from causal decoding to block-parallel denoising.

The package trains a small conditional sequence model autoregressively,
converts it into a block denoiser via mixed-noise teacher forcing, doubles the
decoding block size stage by stage with distillation from a frozen small-block
anchor, and measures the quality-throughput trade-off of confidence-based
parallel decoding.
"""

__version__ = "0.1.0"
