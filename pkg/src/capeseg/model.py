"""Small convolutional probability estimator: conv3x3 -> relu -> conv3x3 -> sigmoid.

Maps a CxHxW input to an HxW map of event probabilities, preserving
spatial size. Parameters pack into a single flat float64 vector so the
optimizer and gradient checker can treat the model as one function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    Conv2dCache,
    Rng,
    as_f64,
    conv2d_backward,
    conv2d_forward,
    require_finite,
)

KERNEL_SIZE = 3
PROB_CLAMP = 1e-12  # float sigmoid rounds to exactly 0/1 past |logit| ~ 37


@dataclass
class ModelParams:
    conv1_w: np.ndarray  # F x C x 3 x 3
    conv1_b: np.ndarray  # F
    conv2_w: np.ndarray  # 1 x F x 3 x 3
    conv2_b: np.ndarray  # 1

    @property
    def in_channels(self) -> int:
        return self.conv1_w.shape[1]

    @property
    def hidden_channels(self) -> int:
        return self.conv1_w.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(
            conv1_w=self.conv1_w.copy(),
            conv1_b=self.conv1_b.copy(),
            conv2_w=self.conv2_w.copy(),
            conv2_b=self.conv2_b.copy(),
        )

    def pack(self) -> np.ndarray:
        return np.concatenate(
            [
                self.conv1_w.ravel(),
                self.conv1_b.ravel(),
                self.conv2_w.ravel(),
                self.conv2_b.ravel(),
            ]
        )

    def block_slices(self) -> dict[str, slice]:
        sizes = [
            ("conv1_w", self.conv1_w.size),
            ("conv1_b", self.conv1_b.size),
            ("conv2_w", self.conv2_w.size),
            ("conv2_b", self.conv2_b.size),
        ]
        slices = {}
        offset = 0
        for name, size in sizes:
            slices[name] = slice(offset, offset + size)
            offset += size
        return slices

    def unpack(self, flat: np.ndarray) -> "ModelParams":
        """New params with this layout and values taken from a flat vector."""
        flat = as_f64(flat).ravel()
        if flat.size != self.pack().size:
            raise ValueError(f"expected {self.pack().size} values, got {flat.size}")
        s = self.block_slices()
        return ModelParams(
            conv1_w=flat[s["conv1_w"]].reshape(self.conv1_w.shape).copy(),
            conv1_b=flat[s["conv1_b"]].reshape(self.conv1_b.shape).copy(),
            conv2_w=flat[s["conv2_w"]].reshape(self.conv2_w.shape).copy(),
            conv2_b=flat[s["conv2_b"]].reshape(self.conv2_b.shape).copy(),
        )


@dataclass
class ForwardCache:
    pre1: np.ndarray  # F x H x W, before relu
    act1: np.ndarray  # F x H x W, after relu
    probs: np.ndarray  # H x W
    conv1: Conv2dCache
    conv2: Conv2dCache


def init_params(in_channels: int, hidden_channels: int, rng: Rng) -> ModelParams:
    """He-style init: kernel entries ~ Normal(0, 2 / (in_channels * 9)), zero biases."""
    if in_channels < 1 or hidden_channels < 1:
        raise ValueError("channel counts must be >= 1")
    c, f, k = in_channels, hidden_channels, KERNEL_SIZE
    std1 = np.sqrt(2.0 / (c * k * k))
    std2 = np.sqrt(2.0 / (f * k * k))
    return ModelParams(
        conv1_w=std1 * rng.normal((f, c, k, k)),
        conv1_b=np.zeros(f),
        conv2_w=std2 * rng.normal((1, f, k, k)),
        conv2_b=np.zeros(1),
    )


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign to avoid overflow in exp for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(params: ModelParams, inp: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Predicted probability map (HxW, strictly inside (0,1)) plus backward cache."""
    inp = as_f64(inp)
    require_finite("model input", inp)
    if inp.ndim != 3 or inp.shape[0] != params.in_channels:
        raise ValueError(
            f"expected input with {params.in_channels} channels, got shape {inp.shape}"
        )
    pre1, c1 = conv2d_forward(inp, params.conv1_w, params.conv1_b)
    act1 = np.maximum(pre1, 0.0)
    logits, c2 = conv2d_forward(act1, params.conv2_w, params.conv2_b)
    probs = np.clip(sigmoid(logits[0]), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return probs, ForwardCache(pre1=pre1, act1=act1, probs=probs, conv1=c1, conv2=c2)


def backward(params: ModelParams, cache: ForwardCache, dloss_dprobs: np.ndarray) -> ModelParams:
    """Chain-rule gradients for all parameter blocks, shaped like ModelParams."""
    dloss_dprobs = as_f64(dloss_dprobs)
    if dloss_dprobs.shape != cache.probs.shape:
        raise ValueError(
            f"gradient shape {dloss_dprobs.shape} does not match output {cache.probs.shape}"
        )
    dlogits = dloss_dprobs * cache.probs * (1.0 - cache.probs)
    dact1, dconv2_w, dconv2_b = conv2d_backward(cache.conv2, dlogits[None, :, :])
    dpre1 = dact1 * (cache.pre1 > 0.0)  # relu subgradient, 0 at the kink
    _, dconv1_w, dconv1_b = conv2d_backward(cache.conv1, dpre1)
    return ModelParams(
        conv1_w=dconv1_w, conv1_b=dconv1_b, conv2_w=dconv2_w, conv2_b=dconv2_b
    )


def predict(params: ModelParams, inp: np.ndarray) -> np.ndarray:
    """Forward pass without keeping the cache."""
    probs, _ = forward(params, inp)
    return probs
