"""Tiny encoder-decoder networks: a timestep-conditioned noise predictor
(optionally mask-conditioned through an extra input channel) and a
per-pixel segmenter.

Three resolution levels with channel widths [16, 32, 64], stride-2
convolutions down, nearest-neighbour upsampling + convolution up, skip
connections by channel concatenation, and residual blocks scaled by
1/sqrt(2). No normalization layers.
"""

from __future__ import annotations

import math
from typing import Dict, Optional, Union

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

__all__ = ["Denoiser", "Segmenter", "timestep_embedding", "conditionalize"]

CHANNELS = (16, 32, 64)
TIME_EMBED_DIM = 64
_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def timestep_embedding(t: int, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal features of an integer timestep at geometric frequencies."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _init_conv(rng: np.random.Generator, f: int, c: int, k: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(c * k * k)
    return rng.uniform(-bound, bound, size=(f, c, k, k))


class _EncoderDecoder:
    """Shared 3-level topology; subclasses decide conditioning and head."""

    def __init__(self, in_channels: int, seed: int, with_time: bool):
        self.in_channels = in_channels
        self.with_time = with_time
        self.params: Dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c0, c1, c2 = CHANNELS

        def conv(name, f, c, k=3, zero=False):
            w = np.zeros((f, c, k, k)) if zero else _init_conv(rng, f, c, k)
            self.params[name + ".w"] = Tensor(w, requires_grad=True)
            self.params[name + ".b"] = Tensor(np.zeros(f), requires_grad=True)

        conv("stem", c0, in_channels)
        conv("enc0", c0, c0)
        conv("down1", c1, c0)
        conv("enc1", c1, c1)
        conv("down2", c2, c1)
        conv("mid", c2, c2)
        conv("up1", c1, c2)
        conv("dec1", c1, c1 + c1)
        conv("up0", c0, c1)
        conv("dec0", c0, c0 + c0)
        conv("head", 1, c0, zero=True)

        if with_time:
            conv("temb.fc1", TIME_EMBED_DIM, TIME_EMBED_DIM, k=1)
            conv("temb.fc2", TIME_EMBED_DIM, TIME_EMBED_DIM, k=1)
            for name, ch in (("enc0", c0), ("enc1", c1), ("mid", c2),
                             ("dec1", c1), ("dec0", c0)):
                conv("tproj." + name, ch, TIME_EMBED_DIM, k=1)

    def _conv(self, name: str, x: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
        return nd.conv2d(x, self.params[name + ".w"], self.params[name + ".b"],
                         stride=stride, padding=padding)

    def _temb(self, t: int, n: int) -> Optional[Tensor]:
        if not self.with_time:
            return None
        e = timestep_embedding(t).reshape(1, TIME_EMBED_DIM, 1, 1)
        e = Tensor(np.tile(e, (n, 1, 1, 1)))
        e = nd.silu(self._conv("temb.fc1", e, padding=0))
        e = nd.silu(self._conv("temb.fc2", e, padding=0))
        return e

    def _res_block(self, name: str, h: Tensor, temb: Optional[Tensor]) -> Tensor:
        z = self._conv(name, h)
        if temb is not None:
            proj = self._conv("tproj." + name, temb, padding=0)
            z = z + nd.broadcast_hw(proj, z.shape[2], z.shape[3])
        return (nd.silu(z) + h) * _INV_SQRT2

    def _backbone(self, x: Tensor, temb: Optional[Tensor]) -> Tensor:
        n, _, h, w = x.shape
        if h % 4 or w % 4:
            raise nd.DimensionError(f"spatial dims must be divisible by 4, got {h}x{w}")
        h0 = nd.silu(self._conv("stem", x))
        h0 = self._res_block("enc0", h0, temb)
        h1 = nd.silu(nd.subsample(self._conv("down1", h0), 2))
        h1 = self._res_block("enc1", h1, temb)
        h2 = nd.silu(nd.subsample(self._conv("down2", h1), 2))
        h2 = self._res_block("mid", h2, temb)
        u1 = nd.silu(self._conv("up1", nd.upsample_nearest(h2, 2)))
        u1 = nd.concat_channels(u1, h1)
        u1 = self._conv("dec1", u1)
        if temb is not None:
            proj = self._conv("tproj.dec1", temb, padding=0)
            u1 = u1 + nd.broadcast_hw(proj, u1.shape[2], u1.shape[3])
        u1 = nd.silu(u1)
        u0 = nd.silu(self._conv("up0", nd.upsample_nearest(u1, 2)))
        u0 = nd.concat_channels(u0, h0)
        u0 = self._conv("dec0", u0)
        if temb is not None:
            proj = self._conv("tproj.dec0", temb, padding=0)
            u0 = u0 + nd.broadcast_hw(proj, u0.shape[2], u0.shape[3])
        u0 = nd.silu(u0)
        return self._conv("head", u0)

    # -- parameter plumbing ---------------------------------------------------

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_arrays(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise KeyError(f"parameter name mismatch: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].data.shape:
                raise ValueError(f"shape mismatch for '{k}': {v.shape} vs "
                                 f"{self.params[k].data.shape}")
            self.params[k].data = np.ascontiguousarray(v, dtype=np.float64)


class Denoiser(_EncoderDecoder):
    """Noise predictor eps(x_t, t[, condition mask])."""

    def __init__(self, conditional: bool = False, seed: int = 0):
        super().__init__(in_channels=2 if conditional else 1, seed=seed, with_time=True)

    @property
    def conditional(self) -> bool:
        return self.in_channels == 2

    def forward(self, x_t: Union[Tensor, np.ndarray], t: int,
                condition: Optional[Union[Tensor, np.ndarray]] = None) -> Tensor:
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        if self.conditional:
            if condition is None:
                raise nd.ContractError("conditional denoiser requires a condition mask")
            cond = condition if isinstance(condition, Tensor) else Tensor(condition)
            if cond.shape != x_t.shape:
                raise nd.DimensionError(
                    f"condition shape {cond.shape} != image shape {x_t.shape}")
            x = nd.concat_channels(x_t, cond)
        else:
            if condition is not None:
                raise nd.ContractError("unconditional denoiser does not take a condition")
            x = x_t
        return self._backbone(x, self._temb(t, x.shape[0]))

    def predict(self, x_t: np.ndarray, t: int,
                condition: Optional[np.ndarray] = None) -> np.ndarray:
        """Forward pass without gradient tracking, returning a plain array."""
        grads = [p.requires_grad for p in self.params.values()]
        for p in self.params.values():
            p.requires_grad = False
        try:
            out = self.forward(x_t, t, condition).data
        finally:
            for p, g in zip(self.params.values(), grads):
                p.requires_grad = g
        return out


class Segmenter(_EncoderDecoder):
    """Per-pixel vessel logit predictor."""

    def __init__(self, seed: int = 0):
        super().__init__(in_channels=1, seed=seed, with_time=False)

    def forward(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self._backbone(x, None)

    def predict(self, x: np.ndarray) -> np.ndarray:
        grads = [p.requires_grad for p in self.params.values()]
        for p in self.params.values():
            p.requires_grad = False
        try:
            out = self.forward(x).data
        finally:
            for p, g in zip(self.params.values(), grads):
                p.requires_grad = g
        return out

    def predict_probs(self, x: np.ndarray) -> np.ndarray:
        return nd._stable_sigmoid(self.predict(x))


def conditionalize(net: Denoiser) -> Denoiser:
    """Convert an unconditional denoiser into a conditional one.

    Weights acting on the new condition channel are zero-initialized, so the
    conditional forward is bit-identical to the unconditional forward until
    training moves them.
    """
    if net.conditional:
        raise nd.ContractError("denoiser is already conditional")
    out = Denoiser(conditional=True, seed=0)
    state = net.state_arrays()
    stem_w = state.pop("stem.w")
    f, _, kh, kw = stem_w.shape
    new_stem = np.zeros((f, 2, kh, kw))
    new_stem[:, :1] = stem_w
    state["stem.w"] = new_stem
    out.load_state_arrays(state)
    return out


def parameter_count(net: _EncoderDecoder) -> int:
    return sum(p.data.size for p in net.params.values())
