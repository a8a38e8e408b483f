"""TCtrans: residual CNN encoder, transformer bottleneck, skip-connected CNN decoder."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app import autodiff as ad
from app.autodiff import Tensor
from app.errors import ShapeError
from app.models import ModelConfig
from app.phantom import Sample


logger = logging.getLogger(__name__)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{index}.")

    def parameters(self) -> List[Tensor]:
        return [param for _, param in self.named_parameters()]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ShapeError("load_state_dict", f"missing {missing[:3]} unexpected {unexpected[:3]}")
        for name, param in params.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise ShapeError("load_state_dict", f"parameter {name}", [param.shape, value.shape])
            param.data = value.astype(param.data.dtype, copy=True)


def _param(array: np.ndarray, name: str) -> Tensor:
    return Tensor(array.astype(ad.get_dtype()), requires_grad=True, name=name)


def _kaiming(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def group_count(channels: int, max_groups: int = 8) -> int:
    groups = min(max_groups, channels)
    while channels % groups:
        groups -= 1
    return groups


class Conv(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int, stride: int = 1) -> None:
        self.stride = stride
        self.padding = kernel // 2
        self.weight = _param(_kaiming(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel), "weight")
        self.bias = _param(np.zeros(c_out), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, channels: int, max_groups: int = 8) -> None:
        self.groups = group_count(channels, max_groups)
        self.gamma = _param(np.ones(channels), "gamma")
        self.beta = _param(np.zeros(channels), "beta")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.groups, self.gamma, self.beta)


class LayerNorm(Module):
    def __init__(self, dim: int) -> None:
        self.gamma = _param(np.ones(dim), "gamma")
        self.beta = _param(np.zeros(dim), "beta")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int) -> None:
        self.weight = _param(_kaiming(rng, (d_in, d_out), d_in), "weight")
        self.bias = _param(np.zeros(d_out), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class ResidualBlock(Module):
    """Two 3x3 convolutions, each preceded by GroupNorm and ReLU, around a shortcut.

    The shortcut is a 1x1 projection when the width changes. With `conv2` zeroed the
    block reduces to its shortcut path exactly.
    """

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, max_groups: int = 8) -> None:
        self.norm1 = GroupNorm(c_in, max_groups)
        self.conv1 = Conv(rng, c_in, c_out, 3)
        self.norm2 = GroupNorm(c_out, max_groups)
        self.conv2 = Conv(rng, c_out, c_out, 3)
        self.shortcut = Conv(rng, c_in, c_out, 1) if c_in != c_out else None

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(ad.relu(self.norm1(x)))
        h = self.conv2(ad.relu(self.norm2(h)))
        identity = self.shortcut(x) if self.shortcut is not None else x
        return ad.add(identity, h)


class MultiHeadSelfAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int) -> None:
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.query = Linear(rng, dim, dim)
        self.key = Linear(rng, dim, dim)
        self.value = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        batch, tokens, _ = x.shape
        return ad.transpose(ad.reshape(x, (batch, tokens, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        batch, tokens, dim = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        out = ad.attention(q, k, v, scale=self.scale)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (batch, tokens, dim))
        return self.proj(out)

    def attention_weights(self, x: Tensor) -> np.ndarray:
        q = self._split(self.query(x)).data
        k = self._split(self.key(x)).data
        return ad.attention_weights(q, k, self.scale)


class TransformerLayer(Module):
    """z_hat = MHSA(LN(z)) + z; out = MLP(LN(z_hat)) + z_hat."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, mlp_ratio: float) -> None:
        hidden = max(1, int(round(mlp_ratio * dim)))
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, z: Tensor) -> Tensor:
        z_hat = ad.add(self.attn(self.norm1(z)), z)
        return ad.add(self.fc2(ad.relu(self.fc1(self.norm2(z_hat)))), z_hat)


@dataclass
class TokenSequence:
    tokens: Tensor
    pos_embedding: Optional[Tensor]
    grid: Tuple[int, int]

    @property
    def z0(self) -> Tensor:
        if self.pos_embedding is None:
            return self.tokens
        return ad.add(self.tokens, self.pos_embedding)


@dataclass
class PredictionBundle:
    y_hat: Tensor
    features: List[Tensor]


class EncoderLayer(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, max_groups: int) -> None:
        self.block = ResidualBlock(rng, c_in, c_out, max_groups)
        self.down = Conv(rng, c_out, c_out, 3, stride=2)


class DecoderLayer(Module):
    def __init__(self, rng: np.random.Generator, c_prev: int, c_out: int, c_skip: int, max_groups: int) -> None:
        self.up = Conv(rng, c_prev, c_out, 3)
        self.block = ResidualBlock(rng, c_out + c_skip, c_out, max_groups)


class TCtrans(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.config = config
        enc_widths = config.encoder_widths
        dec_widths = config.decoder_widths
        depth = config.num_enc_layers

        self.encoder: List[EncoderLayer] = []
        c_in = config.in_channels
        for width in enc_widths:
            self.encoder.append(EncoderLayer(rng, c_in, width, config.max_groups))
            c_in = width

        dim = config.embed_dim
        self.pos_embedding: Optional[Tensor] = None
        self.transformer: List[TransformerLayer] = []
        if config.use_transformer:
            self.pos_embedding = _param(rng.normal(0.0, 0.02, size=(config.num_tokens, dim)), "pos_embedding")
            self.transformer = [
                TransformerLayer(rng, dim, config.num_heads, config.mlp_ratio)
                for _ in range(config.num_transformer_layers)
            ]

        self.decoder: List[DecoderLayer] = []
        c_prev = dim
        for r, width in enumerate(dec_widths):
            c_skip = enc_widths[depth - 1 - r] if r > 0 else 0
            self.decoder.append(DecoderLayer(rng, c_prev, width, c_skip, config.max_groups))
            c_prev = width
        self.head = Conv(rng, dec_widths[-1], 1, 1)

    def encode(self, x: Tensor) -> Tuple[Tensor, List[Tensor]]:
        expected = (self.config.in_channels, *self.config.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError("encode", f"expected [B,{expected[0]},{expected[1]},{expected[2]}]", [x.shape])
        skips: List[Tensor] = []
        h = x
        for index, layer in enumerate(self.encoder):
            h = layer.block(h)
            if index < len(self.encoder) - 1:
                skips.append(h)
            h = layer.down(h)
        return h, skips

    def tokenize(self, e: Tensor) -> TokenSequence:
        batch, channels, height, width = e.shape
        tokens = ad.reshape(ad.transpose(e, (0, 2, 3, 1)), (batch, height * width, channels))
        return TokenSequence(tokens=tokens, pos_embedding=self.pos_embedding, grid=(height, width))

    def transformer_stack(self, z: Tensor) -> Tensor:
        for layer in self.transformer:
            z = layer(z)
        return z

    def transformer_encode(self, sequence: TokenSequence) -> Tensor:
        z = self.transformer_stack(sequence.z0)
        batch, _, channels = z.shape
        height, width = sequence.grid
        return ad.transpose(ad.reshape(z, (batch, height, width, channels)), (0, 3, 1, 2))

    def decode(self, e_star: Tensor, skips: Sequence[Tensor]) -> PredictionBundle:
        if len(skips) != len(self.decoder) - 1:
            raise ShapeError("decode", f"expected {len(self.decoder) - 1} skips, got {len(skips)}")
        features: List[Tensor] = []
        h = e_star
        for r, layer in enumerate(self.decoder):
            h = layer.up(ad.upsample2x_nearest(h))
            if r > 0:
                skip = skips[len(self.decoder) - 1 - r]
                if skip.shape[0] != h.shape[0] or skip.shape[2:] != h.shape[2:]:
                    raise ShapeError("decode", f"skip for decoding layer {r + 1} misaligned", [h.shape, skip.shape])
                h = ad.concat_channels(h, skip)
            h = layer.block(h)
            features.append(h)
        return PredictionBundle(y_hat=self.head(h), features=features)

    def forward(self, x: Tensor) -> PredictionBundle:
        e, skips = self.encode(x)
        if self.config.use_transformer:
            e = self.transformer_encode(self.tokenize(e))
        return self.decode(e, skips)

    __call__ = forward

    def num_parameters(self) -> int:
        return int(sum(param.size for param in self.parameters()))


def build_model(config: ModelConfig, seed: int) -> TCtrans:
    model = TCtrans(config, np.random.default_rng(seed))
    logger.debug("built TCtrans with %d parameters", model.num_parameters())
    return model


def stack_inputs(samples: Sequence[Sample]) -> Tensor:
    """Stack samples as [B, 2 + n_oar, H, W] in channel order CT, PTV, OAR_1..OAR_k."""
    planes = [np.concatenate([s.ct[None], s.ptv[None], s.oars], axis=0) for s in samples]
    return Tensor(np.stack(planes).astype(ad.get_dtype()))


def stack_targets(samples: Sequence[Sample]) -> Tensor:
    return Tensor(np.stack([s.dose[None] for s in samples]).astype(ad.get_dtype()))
