"""Named architecture families sized for a 15 KB budget on 28x28 input.

Each builder returns a skeleton Network: geometry and identity BN with
placeholder weight bits (all -1). The trainer supplies real weights;
the memory model only needs the geometry.

Default hyperparameters put every named preset within ~2% of its
published KB footprint under this package's M = P + 2T accounting
(see the footprint pins in the tests). The two LE variants are
low-energy sizings of the single-conv family.
"""

from __future__ import annotations

from .bitops import BitTensor
from . import model as m

MNIST_INPUT = m.InputSpec("real", 1, 28, 28)


def _bn(channels: int) -> list[m.BnParams]:
    return [m.BnParams(1.0, 0.0, 0.0, 1.0) for _ in range(channels)]


def _fc(units: int, in_length: int) -> m.FusedFC:
    return m.FusedFC(units, in_length, BitTensor.zeros(1, units, in_length),
                     _bn(units))


def _conv(filters: int, in_c: int, kernel: int, stride: int) -> m.FusedConv:
    return m.FusedConv(filters, in_c, kernel, stride,
                       BitTensor.zeros(filters, in_c, kernel * kernel),
                       _bn(filters))


def _convpool(filters: int, in_c: int, kernel: int, stride: int,
              pool: int, pool_stride: int) -> m.FusedConvPool:
    return m.FusedConvPool(filters, in_c, kernel, stride, pool, pool_stride,
                           BitTensor.zeros(filters, in_c, kernel * kernel),
                           _bn(filters))


def _finish(input_spec, blocks, classes) -> m.Network:
    shapes = [input_spec.shape]
    for blk in blocks:
        shapes.append(m.block_output_shape(blk, shapes[-1]))
    c, h, w = shapes[-1]
    blocks.append(_fc(classes, c * h * w))
    net = m.Network(input_spec, blocks)
    m.ensure_valid(net)
    return net


def mlp_1(hidden: int = 128, input_spec=MNIST_INPUT, classes: int = 10):
    return _finish(input_spec, [_fc(hidden, input_spec.length)], classes)


def mlp_2(h1: int = 104, h2: int = 48, input_spec=MNIST_INPUT,
          classes: int = 10):
    return _finish(input_spec,
                   [_fc(h1, input_spec.length), _fc(h2, h1)], classes)


def conv_1(filters: int = 74, kernel: int = 3, stride: int = 3,
           input_spec=MNIST_INPUT, classes: int = 10):
    return _finish(input_spec,
                   [_conv(filters, input_spec.channels, kernel, stride)],
                   classes)


def conv_2(f1: int = 32, f2: int = 134, kernel: int = 3, stride: int = 3,
           input_spec=MNIST_INPUT, classes: int = 10):
    return _finish(input_spec,
                   [_conv(f1, input_spec.channels, kernel, stride),
                    _conv(f2, f1, kernel, stride)], classes)


def convpool_1(filters: int = 45, kernel: int = 3, stride: int = 1,
               pool: int = 2, pool_stride: int = 2,
               input_spec=MNIST_INPUT, classes: int = 10):
    return _finish(input_spec,
                   [_convpool(filters, input_spec.channels, kernel, stride,
                              pool, pool_stride)], classes)


def convpool_2(f1: int = 32, f2: int = 150, kernel: int = 3, stride: int = 2,
               pool: int = 2, pool_stride: int = 2,
               input_spec=MNIST_INPUT, classes: int = 10):
    return _finish(input_spec,
                   [_convpool(f1, input_spec.channels, kernel, stride,
                              pool, pool_stride),
                    _convpool(f2, f1, kernel, stride, pool, pool_stride)],
                   classes)


def conv_1_le_i(filters: int = 38, **kw):
    return conv_1(filters, **kw)


def conv_1_le_ii(filters: int = 29, **kw):
    return conv_1(filters, **kw)


PRESETS = {
    "mlp-1": mlp_1,
    "mlp-2": mlp_2,
    "conv-1": conv_1,
    "conv-2": conv_2,
    "convpool-1": convpool_1,
    "convpool-2": convpool_2,
    "conv-1-le-i": conv_1_le_i,
    "conv-1-le-ii": conv_1_le_ii,
}
