"""Five-stage encoder-decoder skeleton network with context attention.

Encoder stage i (1..5) runs at 1/2^(i-1) resolution with base*2^(i-1)
channels; stages 1-4 are followed by 2x2 max pooling and stage 5 is the
bottleneck.  Each decoder stage upsamples with a 2x2 stride-2 transposed
convolution (halving channels), concatenates the matching encoder output,
and runs the stage blocks again.  Context attention blocks sit at the end
of the configured encoder stages (optionally decoder stages too).  A 1x1
convolution produces the main logit map; optional 1x1 heads on decoder
stages 4, 3, 2 produce auxiliary logits at 1/8, 1/4 and 1/2 resolution.

Parameters are drawn from one seeded generator in construction order, with
the auxiliary heads drawn last so toggling them off leaves every other
parameter bitwise identical.
"""

import math
from dataclasses import dataclass

import numpy as np

from canet import ops
from canet.ops import RunningStats
from canet.tensor import Tensor

STAGES = 5
RESBLOCKS_PER_STAGE = 3
BLOCK_TYPES = ("res", "dual_conv")


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 64
    attention_stages: tuple = (3, 4, 5)
    attention_reduction: int = 16
    use_batch_norm: bool = True
    aux_heads: bool = True
    input_channels: int = 1
    seed: int = 0
    block_type: str = "res"
    decoder_attention: bool = False

    def validate(self):
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.attention_reduction < 1:
            raise ValueError(
                f"attention_reduction must be >= 1, got {self.attention_reduction}"
            )
        stages = tuple(self.attention_stages)
        if len(set(stages)) != len(stages):
            raise ValueError(f"attention_stages has duplicates: {stages}")
        bad = [s for s in stages if not 1 <= s <= STAGES]
        if bad:
            raise ValueError(
                f"attention_stages must lie in 1..{STAGES}, got {bad}"
            )
        if self.input_channels < 1:
            raise ValueError(
                f"input_channels must be >= 1, got {self.input_channels}"
            )
        if self.block_type not in BLOCK_TYPES:
            raise ValueError(
                f"block_type must be one of {BLOCK_TYPES}, got {self.block_type!r}"
            )
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    def __init__(self, rng, cin, cout, k, dtype, stride=1, padding=0, bias=True):
        std = math.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(
            (rng.normal(0.0, std, (cout, cin, k, k))).astype(dtype),
            requires_grad=True,
        )
        self.bias = (
            Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        )
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def iter_params(self, prefix):
        yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias

    def iter_buffers(self, prefix):
        return iter(())


class ConvTranspose2d:
    def __init__(self, rng, cin, cout, k, dtype):
        std = math.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(
            (rng.normal(0.0, std, (cin, cout, k, k))).astype(dtype),
            requires_grad=True,
        )
        self.stride = k

    def __call__(self, x):
        return ops.conv_transpose2d(x, self.weight, self.stride)

    def iter_params(self, prefix):
        yield prefix + "weight", self.weight

    def iter_buffers(self, prefix):
        return iter(())


class BatchNorm2d:
    def __init__(self, channels, dtype):
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = RunningStats.for_channels(channels)

    def __call__(self, x, mode):
        return ops.batch_norm(x, self.scale, self.shift, self.stats, mode)

    def iter_params(self, prefix):
        yield prefix + "scale", self.scale
        yield prefix + "shift", self.shift

    def iter_buffers(self, prefix):
        yield prefix + "running_mean", self.stats.mean
        yield prefix + "running_var", self.stats.var


def _iter_children(children, prefix, kind):
    for name, child in children:
        if child is not None:
            yield from getattr(child, kind)(f"{prefix}{name}.")


# ---------------------------------------------------------------------------
# blocks


class ResBlock:
    """out = relu(F(x) + shortcut(x)), F = conv3x3-norm-relu-conv3x3-norm."""

    def __init__(self, rng, cin, cout, use_bn, dtype):
        conv_bias = not use_bn
        self.conv1 = Conv2d(rng, cin, cout, 3, dtype, padding=1, bias=conv_bias)
        self.norm1 = BatchNorm2d(cout, dtype) if use_bn else None
        self.conv2 = Conv2d(rng, cout, cout, 3, dtype, padding=1, bias=conv_bias)
        self.norm2 = BatchNorm2d(cout, dtype) if use_bn else None
        self.proj = Conv2d(rng, cin, cout, 1, dtype) if cin != cout else None

    def __call__(self, x, mode):
        h = self.conv1(x)
        if self.norm1 is not None:
            h = self.norm1(h, mode)
        h = ops.relu(h)
        h = self.conv2(h)
        if self.norm2 is not None:
            h = self.norm2(h, mode)
        shortcut = self.proj(x) if self.proj is not None else x
        return ops.relu(h + shortcut)

    def _children(self):
        return (
            ("conv1", self.conv1),
            ("norm1", self.norm1),
            ("conv2", self.conv2),
            ("norm2", self.norm2),
            ("proj", self.proj),
        )

    def iter_params(self, prefix):
        return _iter_children(self._children(), prefix, "iter_params")

    def iter_buffers(self, prefix):
        return _iter_children(self._children(), prefix, "iter_buffers")


class DualConvBlock:
    """Plain two-convolution stage block (the no-residual baseline)."""

    def __init__(self, rng, cin, cout, use_bn, dtype):
        conv_bias = not use_bn
        self.conv1 = Conv2d(rng, cin, cout, 3, dtype, padding=1, bias=conv_bias)
        self.norm1 = BatchNorm2d(cout, dtype) if use_bn else None
        self.conv2 = Conv2d(rng, cout, cout, 3, dtype, padding=1, bias=conv_bias)
        self.norm2 = BatchNorm2d(cout, dtype) if use_bn else None

    def __call__(self, x, mode):
        h = self.conv1(x)
        if self.norm1 is not None:
            h = self.norm1(h, mode)
        h = ops.relu(h)
        h = self.conv2(h)
        if self.norm2 is not None:
            h = self.norm2(h, mode)
        return ops.relu(h)

    def _children(self):
        return (
            ("conv1", self.conv1),
            ("norm1", self.norm1),
            ("conv2", self.conv2),
            ("norm2", self.norm2),
        )

    def iter_params(self, prefix):
        return _iter_children(self._children(), prefix, "iter_params")

    def iter_buffers(self, prefix):
        return _iter_children(self._children(), prefix, "iter_buffers")


class ContextAttentionBlock:
    """Position correlation plus channel gating, residual on the input.

    Spatial stage: 1x1 projections to C/r, softmax-normalized correlation
    between all position pairs, the value projection carried back through a
    1x1 convolution, added to x.  Channel stage: squeeze-excite gate from
    the global average, applied multiplicatively.
    """

    def __init__(self, rng, channels, reduction, dtype):
        reduced = max(channels // reduction, 1)
        self.query = Conv2d(rng, channels, reduced, 1, dtype)
        self.key = Conv2d(rng, channels, reduced, 1, dtype)
        self.value = Conv2d(rng, channels, reduced, 1, dtype)
        self.out_proj = Conv2d(rng, reduced, channels, 1, dtype)
        self.squeeze = Conv2d(rng, channels, reduced, 1, dtype)
        self.excite = Conv2d(rng, reduced, channels, 1, dtype)

    def __call__(self, x, mode):
        b, c, h, w = x.shape
        q = self.query(x).reshape(b, -1, h * w)
        k = self.key(x).reshape(b, -1, h * w)
        v = self.value(x).reshape(b, -1, h * w)
        corr = ops.batched_matmul(q.transpose(0, 2, 1), k)
        attn = ops.softmax_lastdim(corr)
        y = ops.batched_matmul(attn, v.transpose(0, 2, 1))
        y = y.transpose(0, 2, 1).reshape(b, -1, h, w)
        refined = x + self.out_proj(y)
        gate = ops.sigmoid(
            self.excite(ops.relu(self.squeeze(ops.global_avg_pool(refined))))
        )
        return refined * gate

    def _children(self):
        return (
            ("query", self.query),
            ("key", self.key),
            ("value", self.value),
            ("out_proj", self.out_proj),
            ("squeeze", self.squeeze),
            ("excite", self.excite),
        )

    def iter_params(self, prefix):
        return _iter_children(self._children(), prefix, "iter_params")

    def iter_buffers(self, prefix):
        return _iter_children(self._children(), prefix, "iter_buffers")


class _Stage:
    def __init__(self, blocks, attention=None, up=None):
        self.up = up
        self.blocks = blocks
        self.attention = attention

    def _children(self):
        items = []
        if self.up is not None:
            items.append(("up", self.up))
        items.extend((f"block{j}", blk) for j, blk in enumerate(self.blocks))
        if self.attention is not None:
            items.append(("attn", self.attention))
        return items

    def iter_params(self, prefix):
        return _iter_children(self._children(), prefix, "iter_params")

    def iter_buffers(self, prefix):
        return _iter_children(self._children(), prefix, "iter_buffers")


def _stage_blocks(rng, cin, cout, config, dtype):
    if config.block_type == "res":
        blocks = [ResBlock(rng, cin, cout, config.use_batch_norm, dtype)]
        blocks += [
            ResBlock(rng, cout, cout, config.use_batch_norm, dtype)
            for _ in range(RESBLOCKS_PER_STAGE - 1)
        ]
    else:
        blocks = [DualConvBlock(rng, cin, cout, config.use_batch_norm, dtype)]
    return blocks


# ---------------------------------------------------------------------------
# the network


class CANet:
    def __init__(self, config, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        widths = [config.base_channels * (1 << i) for i in range(STAGES)]
        attn_set = set(config.attention_stages)

        self.encoder = []
        cin = config.input_channels
        for i in range(1, STAGES + 1):
            cout = widths[i - 1]
            attn = (
                ContextAttentionBlock(rng, cout, config.attention_reduction, dtype)
                if i in attn_set
                else None
            )
            self.encoder.append(
                _Stage(_stage_blocks(rng, cin, cout, config, dtype), attn)
            )
            cin = cout

        self.decoder = []
        prev = widths[STAGES - 1]
        for i in range(STAGES - 1, 0, -1):
            cout = widths[i - 1]
            up = ConvTranspose2d(rng, prev, cout, 2, dtype)
            blocks = _stage_blocks(rng, 2 * cout, cout, config, dtype)
            attn = (
                ContextAttentionBlock(rng, cout, config.attention_reduction, dtype)
                if config.decoder_attention and i in attn_set
                else None
            )
            self.decoder.append(_Stage(blocks, attn, up=up))
            prev = cout

        self.head = Conv2d(rng, widths[0], 1, 1, dtype)
        # aux heads drawn last: toggling them must not move earlier draws
        if config.aux_heads:
            self.aux_heads = [
                Conv2d(rng, widths[i - 1], 1, 1, dtype) for i in (4, 3, 2)
            ]
        else:
            self.aux_heads = []

    # ---- parameter access ----

    def _components(self):
        for i, stage in enumerate(self.encoder, start=1):
            yield f"enc{i}.", stage
        for i, stage in zip(range(STAGES - 1, 0, -1), self.decoder):
            yield f"dec{i}.", stage
        yield "head.", self.head
        for i, head in zip((4, 3, 2), self.aux_heads):
            yield f"aux{i}.", head

    def named_parameters(self):
        out = {}
        for prefix, comp in self._components():
            for name, p in comp.iter_params(prefix):
                if name in out:
                    raise AssertionError(f"duplicate parameter name {name}")
                out[name] = p
        return out

    def named_buffers(self):
        out = {}
        for prefix, comp in self._components():
            for name, b in comp.iter_buffers(prefix):
                out[name] = b
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None

    # ---- forward ----

    def forward(self, x, mode="train"):
        if x.ndim != 4:
            raise ValueError(f"model input must be 4-d, got {x.ndim}-d")
        b, c, h, w = x.shape
        if c != self.config.input_channels:
            raise ValueError(
                f"model input channels (axis 1) must be "
                f"{self.config.input_channels}, got {c}"
            )
        divisor = 1 << (STAGES - 1)
        if h % divisor or h < divisor:
            raise ValueError(
                f"input height (axis 2) {h} must be a positive multiple of {divisor}"
            )
        if w % divisor or w < divisor:
            raise ValueError(
                f"input width (axis 3) {w} must be a positive multiple of {divisor}"
            )

        skips = []
        for stage in self.encoder[:-1]:
            out = stage_forward(stage, x, mode)
            skips.append(out)
            x = ops.maxpool2d(out, 2, 2)
        x = stage_forward(self.encoder[-1], x, mode)

        aux_feats = []
        for stage_idx, stage in zip(range(STAGES - 1, 0, -1), self.decoder):
            x = stage.up(x)
            x = ops.concat_channels(x, skips[stage_idx - 1])
            x = stage_forward(stage, x, mode)
            if stage_idx in (4, 3, 2):
                aux_feats.append((stage_idx, x))

        main = self.head(x)
        aux = []
        if self.aux_heads:
            by_stage = dict(aux_feats)
            aux = [
                head(by_stage[i]) for i, head in zip((4, 3, 2), self.aux_heads)
            ]
        return main, aux

    __call__ = forward


def stage_forward(stage, x, mode):
    for blk in stage.blocks:
        x = blk(x, mode)
    if stage.attention is not None:
        x = stage.attention(x, mode)
    return x


def build_model(config, dtype=np.float32):
    """Construct a seeded, freshly initialized network from its config."""
    return CANet(config, dtype=dtype)
