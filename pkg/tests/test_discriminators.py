import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from angiogan.discriminators import BANK_ORDER, DiscriminatorBank, PatchDiscriminator, bank_forward
from angiogan.losses import feature_matching_loss
from angiogan.resize import lanczos_resize
from angiogan.tensor import Tensor


@pytest.fixture(scope="module")
def bank():
    return DiscriminatorBank(base=4, seed=0)


def _pair(rng, n, s):
    return Tensor(rng.uniform(-1, 1, (n, 3, s, s))), Tensor(rng.uniform(-1, 1, (n, 1, s, s)))


def test_bank_order_and_desk_shapes(bank, rng):
    x, y = _pair(rng, 2, 64)
    outs = bank_forward(bank, x, y, lanczos_resize(x, 0.5), lanczos_resize(y, 0.5))
    assert [o.score_map.shape[-2:] for o in outs] == [(8, 8), (4, 4), (4, 4), (2, 2)]
    assert [name for name, _ in bank.members()] == list(BANK_ORDER)
    assert all(len(o.features) == 6 for o in outs)


@settings(max_examples=6)
@given(st.sampled_from([16, 32, 48, 64]))
def test_score_map_is_input_over_eight(s):
    rng = np.random.default_rng(s)
    d = PatchDiscriminator(2, rng)
    x, y = _pair(rng, 1, s)
    assert d(x, y).score_map.shape == (1, 1, s // 8, s // 8)


def test_misaligned_inputs_rejected(bank, rng):
    x, _ = _pair(rng, 1, 32)
    with pytest.raises(ValueError):
        bank.d1_f(x, Tensor(np.zeros((1, 1, 16, 16))))


def test_scores_are_raw_and_deterministic(rng):
    a = DiscriminatorBank(4, seed=3)
    b = DiscriminatorBank(4, seed=3)
    x, y = _pair(rng, 2, 32)
    sa, sb = a.d1_f(x, y).score_map.data, b.d1_f(x, y).score_map.data
    assert np.array_equal(sa, sb)
    a.d1_f.head.bias.data = np.full(1, 5.0, np.float32)
    assert a.d1_f(x, y).score_map.data.min() > 1.0  # no squashing


def test_identical_real_pairs_give_zero_feature_matching(bank, rng):
    x, y = _pair(rng, 2, 64)
    xc, yc = lanczos_resize(x, 0.5), lanczos_resize(y, 0.5)
    bank.eval()
    a = bank_forward(bank, x, y, xc, yc)
    b = bank_forward(bank, x, y, xc, yc)
    bank.train()
    assert feature_matching_loss(a, b).item() == 0.0


def test_receptive_field_is_bounded(rng):
    d = PatchDiscriminator(2, rng)
    d.eval()
    x, y = _pair(rng, 1, 128)
    ref = d(x, y).score_map.data[0, 0, 0, 0]
    far = x.data.copy()
    far[..., 100:, 100:] += 3.0  # more than the 59-pixel field away from score pixel (0, 0)
    assert d(Tensor(far), y).score_map.data[0, 0, 0, 0] == ref
    near = x.data.copy()
    near[..., 2:6, 2:6] += 3.0
    assert d(Tensor(near), y).score_map.data[0, 0, 0, 0] != ref


def test_pooled_variant_halves_input(rng):
    d = PatchDiscriminator(2, rng, pool=True)
    x, y = _pair(rng, 1, 64)
    out = d(x, y)
    assert out.score_map.shape[-2:] == (4, 4) and out.features[0].shape[-2:] == (16, 16)
