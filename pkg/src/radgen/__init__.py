"""Desk-scale radiology report generation.

Patch-level visual features are fused with an anatomical entity
dictionary through cross-attention, then a from-scratch transformer
encoder-decoder generates findings text. Includes training, beam-search
inference, NLG metrics, and a learnable synthetic corpus.
"""

from radgen.tensor import Tensor, check_gradients, no_grad, zero_grads

__all__ = ["Tensor", "check_gradients", "no_grad", "zero_grads"]
