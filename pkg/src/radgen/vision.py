"""Visual extractor: raw image views -> a sequence of patch features.

A small trainable conv stack (3x3 kernels, stride-2 downsampling, ReLU)
followed by a linear projection to the model dimension stands in for a
large pretrained backbone; the architecture downstream only needs *some*
differentiable patch producer. Two-view samples share extractor weights
and concatenate their patch sequences.
"""

from __future__ import annotations

import numpy as np

from radgen import tensor as T
from radgen.layers import LayerNorm, Linear, normal_param, sinusoid_table, zeros_param
from radgen.tensor import Tensor


class PatchExtractor:
    def __init__(self, cfg, rng: np.random.Generator):
        self.kernel = cfg["vision.kernel"]
        self.stride = cfg["vision.stride"]
        self.channels = tuple(cfg["vision.channels"])
        if not self.channels:
            raise ValueError("vision.channels must name at least one conv stage")
        self.dim = cfg["model.dim"]
        c_in = cfg["vision.in_channels"]
        self.conv_w = [
            normal_param(rng, (self.kernel, self.kernel, cin, cout))
            for cin, cout in zip((c_in,) + self.channels[:-1], self.channels)
        ]
        self.conv_b = [zeros_param(cout) for cout in self.channels]
        self._c_in = c_in
        self.proj = Linear(self.channels[-1], self.dim, rng)
        # unit-scale output, like the pretrained backbones this stands in
        # for; without it additive fusion drowns the patch branch
        self.norm = LayerNorm(self.dim)

    @property
    def downsampling(self) -> int:
        return self.stride ** len(self.channels)

    def patches_per_view(self, height: int, width: int) -> int:
        r = self.downsampling
        return (height // r) * (width // r)

    def extract(self, images) -> Tensor:
        """[B, views, H, W, C] (array or Tensor) -> [B, S, dim].

        S = views * (H/r) * (W/r); per-view sequences are concatenated
        along the sequence axis in view order.
        """
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        if arr.ndim != 5:
            raise ValueError(f"expected [B, views, H, W, C] images, got {arr.shape}")
        B, views, H, W, C = arr.shape
        if views not in (1, 2):
            raise ValueError(f"expected 1 or 2 views per sample, got {views}")
        r = self.downsampling
        if H % r or W % r:
            raise ValueError(
                f"image dims {H}x{W} not divisible by total downsampling {r}"
            )
        if C != self._c_in:
            raise ValueError(
                f"extractor was built for {self._c_in}-channel input, got {C}"
            )
        x = images if isinstance(images, Tensor) else Tensor(arr)
        per_view = []
        pad = self.kernel // 2
        for v in range(views):
            view = _take_view(x, v)
            for w, b in zip(self.conv_w, self.conv_b):
                view = T.relu(T.conv2d(view, w, b, stride=self.stride, padding=pad))
            Hp, Wp = H // r, W // r
            seq = T.reshape(view, (B, Hp * Wp, self.channels[-1]))
            per_view.append(self.norm(self.proj(seq)))
        return per_view[0] if views == 1 else T.concat(per_view, axis=1)

    def named_parameters(self):
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            yield f"conv{i}.w", w
            yield f"conv{i}.b", b
        for n, p in self.proj.named_parameters():
            yield f"proj.{n}", p
        for n, p in self.norm.named_parameters():
            yield f"norm.{n}", p


def _take_view(x: Tensor, v: int) -> Tensor:
    """Select view v of [B, views, H, W, C] with a constant one-hot
    contraction so gradients flow without an indexing primitive."""
    B, views, H, W, C = x.shape
    if views == 1:
        return T.reshape(x, (B, H, W, C))
    onehot = np.zeros((views, 1))
    onehot[v, 0] = 1.0
    flat = T.reshape(T.transpose(x, (0, 2, 3, 4, 1)), (B * H * W * C, views))
    picked = flat @ Tensor(onehot)
    return T.reshape(picked, (B, H, W, C))


def add_patch_positions(patches: Tensor, enabled: bool = True) -> Tensor:
    """Add fixed sinusoidal encodings over the flattened sequence index."""
    if not enabled:
        return patches
    B, S, d = patches.shape
    return patches + sinusoid_table(S, d)
