"""3D encoder/decoder building blocks shared by the segmenter and the denoiser.

Every encoder level is a two-convolution block whose first convolution
downsamples by stride 2 (except level 0); decoder levels upsample with a
transposed convolution and convolve the concatenation with the encoder skip.
"""
from __future__ import annotations

import math

import torch
from torch import nn

ACTIVATIONS = {
    "leaky_relu": lambda: nn.LeakyReLU(0.01),
    "relu": nn.ReLU,
    "silu": nn.SiLU,
}


def make_norm(kind, channels):
    if kind == "instance":
        return nn.InstanceNorm3d(channels, affine=True)
    if kind == "group":
        return nn.GroupNorm(min(4, channels), channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown normalization {kind!r}")


def level_widths(levels, base_width, cap=320):
    return [min(base_width * 2**i, cap) for i in range(levels)]


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, stride, norm, act):
        super().__init__()
        # a bias right before a normalization is redundant
        bias = norm == "none"
        self.conv1 = nn.Conv3d(cin, cout, 3, stride, 1, bias=bias)
        self.norm1 = make_norm(norm, cout)
        self.act1 = ACTIVATIONS[act]()
        self.conv2 = nn.Conv3d(cout, cout, 3, 1, 1, bias=bias)
        self.norm2 = make_norm(norm, cout)
        self.act2 = ACTIVATIONS[act]()

    def forward(self, x):
        x = self.act1(self.norm1(self.conv1(x)))
        return self.act2(self.norm2(self.conv2(x)))


class Encoder(nn.Module):
    def __init__(self, in_channels, widths, norm, act):
        super().__init__()
        blocks = []
        cin = in_channels
        for i, w in enumerate(widths):
            blocks.append(ConvBlock(cin, w, 1 if i == 0 else 2, norm, act))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.widths = list(widths)

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    def __init__(self, widths, out_channels, norm, act):
        super().__init__()
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i in range(len(widths) - 1, 0, -1):
            self.ups.append(nn.ConvTranspose3d(widths[i], widths[i - 1], 2, 2, bias=norm == "none"))
            self.blocks.append(ConvBlock(2 * widths[i - 1], widths[i - 1], 1, norm, act))
        self.head = nn.Conv3d(widths[0], out_channels, 1)
        nn.init.zeros_(self.head.bias)

    def forward(self, feats):
        x = feats[-1]
        for up, block, skip in zip(self.ups, self.blocks, reversed(feats[:-1])):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(x)


def sinusoidal_embedding(t, dim):
    """Transformer-style sin/cos features of integer timesteps, shape (B, dim)."""
    t = torch.as_tensor(t).reshape(-1).to(torch.get_default_dtype())
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = nn.functional.pad(emb, (0, 1))
    return emb
