"""Central finite-difference checks run in float64, plus the registry of checked ops and blocks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from angiogan import nn
from angiogan import tensor as T
from angiogan.discriminators import DiscOutput
from angiogan.losses import PerceptualExtractor, feature_matching_loss, hinge_d_loss, hinge_g_loss, \
    perceptual_loss, reconstruction_loss

THRESHOLD = 1e-4
TOLERANCE = 1e-2


@dataclass
class Case:
    name: str
    build: Callable  # rng -> (fn returning Tensor, list of leaf Tensors)


def max_relative_error(case: Case, seed: int = 0, eps: float = 1e-6, max_elems: int = 48):
    """Largest |analytic - numeric| / max(|analytic|, |numeric|) over checked entries.

    Entries with |analytic| <= THRESHOLD are skipped. Returns (error, checked count).
    """
    with T.precision(np.float64):
        rng = np.random.default_rng(seed)
        fn, leaves = case.build(rng)
        probe = fn()
        w = rng.normal(size=probe.shape)
        with T.Tape() as tape:
            loss = T.tsum(T.mul(fn(), T.Tensor(w)))
        for leaf in leaves:
            leaf.grad = None
        tape.backward(loss)
        worst, checked = 0.0, 0
        for leaf in leaves:
            grad = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
            flat = leaf.data.reshape(-1)
            idx = np.arange(flat.size)
            if flat.size > max_elems:
                idx = rng.choice(flat.size, max_elems, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float((fn().data * w).sum())
                flat[i] = orig - eps
                fm = float((fn().data * w).sum())
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                a = float(grad.reshape(-1)[i])
                if abs(a) > THRESHOLD:
                    worst = max(worst, abs(a - num) / max(abs(a), abs(num)))
                    checked += 1
    return worst, checked


def _leaf(rng, *shape, scale=1.0, offset=0.0):
    return T.Tensor(rng.normal(size=shape) * scale + offset, requires_grad=True)


def _unary(op):
    def build(rng):
        x = _leaf(rng, 2, 3, 4, 4)
        return (lambda: op(x)), [x]
    return build


def _binary(op, shape_b):
    def build(rng):
        a, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, *shape_b)
        return (lambda: op(a, b)), [a, b]
    return build


def _conv(stride=1, dilation=1, padding=0, bias=False):
    def build(rng):
        x, w = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3, 3, 3)
        b = _leaf(rng, 2) if bias else None
        leaves = [x, w] + ([b] if bias else [])
        return (lambda: T.conv2d(x, w, b, stride=stride, dilation=dilation, padding=padding)), leaves
    return build


def _depthwise(stride=1, dilation=1, padding=1):
    def build(rng):
        x, w = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 3, 1, 3, 3)
        return (lambda: T.depthwise_conv2d(x, w, stride=stride, dilation=dilation, padding=padding)), [x, w]
    return build


def _separable(rng):
    x, dw, pw, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 3, 1, 3, 3), _leaf(rng, 4, 3, 1, 1), _leaf(rng, 4)
    return (lambda: T.separable_conv2d(x, dw, pw, padding=1, bias=b)), [x, dw, pw, b]


def _transposed(rng):
    x, w, b = _leaf(rng, 2, 3, 2, 2), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 2)
    return (lambda: T.transposed_conv2d(x, w, stride=2, bias=b)), [x, w, b]


def _batch_norm(training):
    def build(rng):
        x = _leaf(rng, 3, 3, 4, 4, offset=0.5)
        g, b = _leaf(rng, 3, offset=1.0), _leaf(rng, 3)
        st = T.RunningStats(3, 0.1)
        st.mean = rng.normal(size=3)
        st.var = rng.uniform(0.5, 2.0, size=3)
        return (lambda: T.batch_norm(x, g, b, st, training=training, update_stats=False)), [x, g, b]
    return build


def _module(make, shape, training=True):
    def build(rng):
        m = make(np.random.default_rng(rng.integers(1 << 31)))
        m.train(training)
        x = _leaf(rng, *shape)
        # spread-out weights and a random BN shift keep activations away from the kinks
        for name, p in m.named_parameters():
            if name.endswith("gamma"):
                p.data = rng.uniform(0.5, 1.5, size=p.shape)
            else:
                p.data = rng.normal(0.0, 0.5, size=p.shape)
        return (lambda: m(x)), [x] + m.parameters()
    return build


def _hinge_d(rng):
    f = [_leaf(rng, 2, 1, 3, 3), _leaf(rng, 2, 1, 2, 2)]
    r = [_leaf(rng, 2, 1, 3, 3), _leaf(rng, 2, 1, 2, 2)]
    return (lambda: hinge_d_loss(r, f)), r + f


def _hinge_g(rng):
    f = [_leaf(rng, 2, 1, 3, 3), _leaf(rng, 2, 1, 2, 2)]
    return (lambda: hinge_g_loss(f)), f


def _rec(rng):
    a, b = _leaf(rng, 2, 1, 4, 4), _leaf(rng, 2, 1, 4, 4)
    return (lambda: reconstruction_loss(a, b)), [a]


def _perc(rng):
    ex = PerceptualExtractor(widths=(4, 6), seed=3)
    a, b = _leaf(rng, 2, 1, 4, 4), _leaf(rng, 2, 1, 4, 4)
    return (lambda: perceptual_loss(a, b, ex)), [a]


def _fm(rng):
    real = [DiscOutput(None, [_leaf(rng, 2, 2, 2, 2), _leaf(rng, 2, 3, 1, 1)]) for _ in range(2)]
    fake_feats = [[_leaf(rng, 2, 2, 2, 2), _leaf(rng, 2, 3, 1, 1)] for _ in range(2)]
    fake = [DiscOutput(None, f) for f in fake_feats]
    return (lambda: feature_matching_loss(real, fake)), [t for f in fake_feats for t in f]


PRIMITIVES = [
    Case("add_broadcast", _binary(T.add, (1, 3, 1, 1))),
    Case("sub", _binary(T.sub, (2, 3, 4, 4))),
    Case("mul", _binary(T.mul, (2, 3, 4, 4))),
    Case("mul_broadcast", _binary(T.mul, (3, 1, 1))),
    Case("mul_scalar", _unary(lambda x: T.mul(x, 2.5))),
    Case("square", _unary(T.square)),
    Case("abs", _unary(T.tabs)),
    Case("relu", _unary(T.relu)),
    Case("leaky_relu", _unary(lambda x: T.leaky_relu(x, 0.2))),
    Case("tanh", _unary(T.tanh)),
    Case("sum", _unary(T.tsum)),
    Case("sum_axis", _unary(lambda x: T.tsum(x, axis=(0, 2)))),
    Case("mean_axis", _unary(lambda x: T.mean(x, axis=1))),
    Case("reshape", _unary(lambda x: T.reshape(x, (6, 16)))),
    Case("concat", _binary(lambda a, b: T.concat([a, b], axis=1), (2, 2, 4, 4))),
    Case("conv2d", _conv()),
    Case("conv2d_stride2_pad1_bias", _conv(stride=2, padding=1, bias=True)),
    Case("conv2d_dilation2_pad2", _conv(dilation=2, padding=2)),
    Case("conv2d_1x1", lambda rng: (lambda x, w: ((lambda: T.conv2d(x, w)), [x, w]))(
        _leaf(rng, 2, 3, 4, 4), _leaf(rng, 5, 3, 1, 1))),
    Case("depthwise", _depthwise()),
    Case("depthwise_stride2", _depthwise(stride=2)),
    Case("depthwise_dilation2", _depthwise(dilation=2, padding=2)),
    Case("separable", _separable),
    Case("transposed_conv", _transposed),
    Case("batch_norm_train", _batch_norm(True)),
    Case("batch_norm_eval", _batch_norm(False)),
    Case("reflection_pad", _unary(lambda x: T.reflection_pad(x, 2))),
    Case("average_pool", _unary(lambda x: T.average_pool(x, 2))),
    Case("hinge_d_loss", _hinge_d),
    Case("hinge_g_loss", _hinge_g),
    Case("reconstruction_loss", _rec),
    Case("perceptual_loss", _perc),
    Case("feature_matching_loss", _fm),
]

BLOCKS = [
    Case("conv_bn_act", _module(lambda r: nn.ConvBnAct(3, 4, r), (2, 3, 4, 4))),
    Case("conv_bn_act_eval", _module(lambda r: nn.ConvBnAct(3, 4, r), (2, 3, 4, 4), training=False)),
    Case("sep_conv_unit_d1", _module(lambda r: nn.SepConvUnit(3, r, 1), (2, 3, 4, 4))),
    Case("sep_conv_unit_d2", _module(lambda r: nn.SepConvUnit(3, r, 2), (2, 3, 4, 4))),
    Case("encoder_block", _module(lambda r: nn.EncoderBlock(2, r), (2, 2, 4, 4))),
    Case("decoder_block", _module(lambda r: nn.DecoderBlock(4, r), (2, 4, 2, 2))),
    Case("gen_residual_block", _module(lambda r: nn.GenResidualBlock(2, r), (2, 2, 4, 4))),
    Case("disc_residual_block", _module(lambda r: nn.DiscResidualBlock(2, r), (2, 2, 4, 4))),
    Case("attention_block", _module(lambda r: nn.AttentionBlock(2, r), (2, 2, 4, 4))),
]

ALL_CASES = PRIMITIVES + BLOCKS
