import itertools
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dvtk.errors import ConfigError, DataError, InputError
from dvtk.quantizers import (
    ChannelSplitSpec,
    FSQSpec,
    LFQSpec,
    ResidualSpec,
    TokenGrid,
    channel_split_quantize,
    codebook_usage,
    dequantize,
    fsq_decode,
    fsq_quantize,
    lfq_commitment_loss,
    lfq_decode,
    lfq_entropy_loss,
    lfq_quantize,
    pack_tokens,
    quantize,
    quantizer_from_dict,
    quantizer_to_dict,
    residual_quantize,
    unpack_tokens,
)


def vol(values, channels):
    """Wrap a flat list of per-pixel channel tuples into a (1,1,P,C) latent."""
    t = torch.tensor(values, dtype=torch.float32).reshape(1, 1, -1, channels)
    return t


# ---------------------------------------------------------------------------
# sign quantizer


def test_lfq_known_pixel():
    out = lfq_quantize(vol([0.3, -1.2, 0.0, 2.5], 4), LFQSpec(4))
    assert out.quantized.flatten().tolist() == [1, -1, -1, 1]
    assert out.grid.codes.flatten().tolist() == [9]


def test_lfq_zero_maps_to_minus_one():
    out = lfq_quantize(vol([0.0, 0.0], 2), LFQSpec(2))
    assert out.quantized.flatten().tolist() == [-1, -1]
    assert out.grid.codes.flatten().tolist() == [0]


def test_lfq_all_sign_patterns_distinct():
    # brute force: every sign pattern of 3 channels gets its own code
    spec = LFQSpec(3)
    seen = {}
    for pattern in itertools.product([-1.0, 1.0], repeat=3):
        out = lfq_quantize(vol(list(pattern), 3), spec)
        code = out.grid.codes.item()
        expected = sum((1 << i) for i, v in enumerate(pattern) if v > 0)
        assert code == expected
        seen[pattern] = code
    assert sorted(seen.values()) == list(range(8))


def test_lfq_decode_known():
    assert lfq_decode(torch.tensor([9]), LFQSpec(4)).flatten().tolist() == [1, -1, -1, 1]
    assert lfq_decode(torch.tensor([0]), LFQSpec(1)).flatten().tolist() == [-1]


def test_lfq_decode_out_of_range():
    with pytest.raises(DataError):
        lfq_decode(torch.tensor([4]), LFQSpec(2))


def test_lfq_channel_mismatch_and_nonfinite():
    with pytest.raises(ConfigError):
        lfq_quantize(vol([0.1, 0.2], 2), LFQSpec(3))
    with pytest.raises(InputError):
        lfq_quantize(vol([float("nan"), 0.2], 2), LFQSpec(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_lfq_code_roundtrip(n_bits, seed):
    rng = torch.Generator().manual_seed(seed)
    codes = torch.randint(0, 1 << n_bits, (1, 2, 3, 1), generator=rng)
    latent = lfq_decode(codes, LFQSpec(n_bits))
    out = lfq_quantize(latent, LFQSpec(n_bits))
    assert torch.equal(out.grid.codes, codes)


# ---------------------------------------------------------------------------
# scalar quantizer


def test_fsq_center_and_saturation():
    out = fsq_quantize(vol([0.0], 1), FSQSpec((5,)))
    assert out.quantized.item() == 0.0
    assert out.grid.codes.item() == 2
    out = fsq_quantize(vol([10.0], 1), FSQSpec((5,)))
    assert out.quantized.item() == 2.0
    assert out.grid.codes.item() == 4


def test_fsq_mixed_radix_code():
    # channel indices (0, 4) for levels [3, 5] -> 0*5 + 4
    out = fsq_quantize(vol([-5.0, 5.0], 2), FSQSpec((3, 5)))
    assert out.grid.codes.item() == 4


def test_fsq_exhaustive_bijection_3x3():
    spec = FSQSpec((3, 3))
    # enumeration oracle: every (i, j) index pair maps to a unique code and back
    seen = set()
    for i, j in itertools.product(range(3), range(3)):
        latent = vol([float(i - 1), float(j - 1)], 2)
        out = fsq_quantize(latent, spec)
        code = out.grid.codes.item()
        assert code == i * 3 + j
        assert code not in seen
        seen.add(code)
        back = fsq_decode(torch.tensor([code]), spec)
        assert back.flatten().tolist() == [i - 1, j - 1]
    assert seen == set(range(9))


def test_fsq_decode_known():
    assert fsq_decode(torch.tensor([4]), FSQSpec((3, 5))).flatten().tolist() == [-1.0, 2.0]
    assert fsq_decode(torch.tensor([2]), FSQSpec((5,))).flatten().tolist() == [0.0]


def test_fsq_even_levels_grid():
    # 8 levels sit on the half-shifted grid with exactly 8 values
    spec = FSQSpec((8,))
    values = {fsq_quantize(vol([v], 1), spec).quantized.item() for v in torch.linspace(-9, 9, 400)}
    assert values == {-3.5, -2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 3.5}


@pytest.mark.parametrize("levels", [(3,), (5,), (8,), (3, 5), (8, 5), (3, 3, 3), (8, 8, 8, 5, 5, 5)])
def test_fsq_code_roundtrip_random(levels):
    spec = FSQSpec(levels)
    rng = torch.Generator().manual_seed(0)
    codes = torch.randint(0, spec.codebook_size, (2, 3, 4, 1), generator=rng)
    out = fsq_quantize(fsq_decode(codes, spec), spec)
    assert torch.equal(out.grid.codes, codes)


def test_fsq_codebook_size_is_level_product():
    assert FSQSpec((8, 8, 8, 5, 5, 5)).codebook_size == 64000
    assert FSQSpec((3, 5)).codebook_size == 15


def test_fsq_decode_out_of_range():
    with pytest.raises(DataError):
        fsq_decode(torch.tensor([15]), FSQSpec((3, 5)))


# ---------------------------------------------------------------------------
# channel split


def test_channel_split_degenerates_at_one_split():
    rng = torch.Generator().manual_seed(1)
    latent = torch.randn(2, 1, 4, 6, generator=rng)
    spec = FSQSpec((8, 5, 5, 3, 3, 3))
    base = fsq_quantize(latent, spec)
    wrapped = channel_split_quantize(latent, ChannelSplitSpec(spec, 1))
    assert torch.equal(base.quantized, wrapped.quantized)
    assert torch.equal(base.grid.codes, wrapped.grid.codes)


def test_channel_split_per_split_values():
    out = channel_split_quantize(vol([0.0, 10.0], 2), ChannelSplitSpec(FSQSpec((5,)), 2))
    assert out.quantized.flatten().tolist() == [0.0, 2.0]
    assert out.grid.codes.flatten().tolist() == [2, 4]


def test_channel_split_table_configuration():
    # 6-channel scalar base with 2 splits: latent channels 12, 2 codes per pixel
    spec = ChannelSplitSpec(FSQSpec((8, 8, 8, 5, 5, 5)), 2)
    assert spec.latent_channels == 12
    rng = torch.Generator().manual_seed(2)
    latent = torch.randn(1, 2, 3, 12, generator=rng)
    out = channel_split_quantize(latent, spec)
    assert out.grid.codes.shape == (1, 2, 3, 2)
    assert out.grid.codes_per_pixel == 2


def test_channel_split_roundtrip():
    spec = ChannelSplitSpec(FSQSpec((3, 5)), 3)
    rng = torch.Generator().manual_seed(3)
    codes = torch.randint(0, 15, (1, 2, 2, 3), generator=rng)
    grid = TokenGrid(codes, spec)
    out = channel_split_quantize(dequantize(grid), spec)
    assert torch.equal(out.grid.codes, codes)


def test_channel_split_sums_aux():
    latent = torch.randn(1, 1, 8, 4, generator=torch.Generator().manual_seed(4))
    spec = ChannelSplitSpec(LFQSpec(2), 2)
    out = channel_split_quantize(latent, spec)
    parts = [lfq_quantize(latent[..., :2], spec.base), lfq_quantize(latent[..., 2:], spec.base)]
    assert torch.isclose(out.aux["entropy"], parts[0].aux["entropy"] + parts[1].aux["entropy"])
    assert torch.isclose(
        out.aux["commitment"], parts[0].aux["commitment"] + parts[1].aux["commitment"]
    )


# ---------------------------------------------------------------------------
# residual


def scalar_fsq(v, levels):
    # scalar oracle for one channel: clamp into the grid, round, keep the shift
    half = (levels - 1) / 2
    shift = 0.5 if levels % 2 == 0 else 0.0
    return round(min(max(v, -half), half) + shift) - shift


def test_residual_degenerates_at_one_step():
    rng = torch.Generator().manual_seed(5)
    latent = torch.randn(1, 2, 3, 2, generator=rng)
    spec = FSQSpec((5, 5))
    base = fsq_quantize(latent, spec)
    wrapped = residual_quantize(latent, ResidualSpec(spec, 1))
    assert torch.equal(base.quantized, wrapped.quantized)
    assert torch.equal(base.grid.codes, wrapped.grid.codes)


def test_residual_two_step_scalar_recurrence():
    # hand-executed with the scalar oracle: 0.6 -> 1, residual -0.4 -> 0, sum 1
    v = 0.6
    step1 = scalar_fsq(v, 5)
    step2 = scalar_fsq(v - step1, 5)
    assert (step1, step2) == (1.0, 0.0)
    out = residual_quantize(vol([v], 1), ResidualSpec(FSQSpec((5,)), 2))
    assert out.quantized.item() == step1 + step2 == 1.0
    assert out.grid.codes.shape[-1] == 2


def test_residual_error_nonincreasing_in_steps():
    rng = torch.Generator().manual_seed(6)
    latent = torch.randn(1, 2, 8, 3, generator=rng) * 2
    spec = FSQSpec((5, 5, 3))
    errors = []
    for r in range(1, 5):
        out = residual_quantize(latent, ResidualSpec(spec, r))
        errors.append(torch.mean((latent - out.quantized) ** 2).item())
    for a, b in zip(errors, errors[1:]):
        assert b <= a + 1e-12


def test_residual_roundtrip_on_reachable_grids():
    # grids produced by quantization re-quantize to themselves (odd levels)
    spec = ResidualSpec(FSQSpec((5, 3)), 3)
    rng = torch.Generator().manual_seed(7)
    latent = torch.randn(1, 2, 16, 2, generator=rng) * 3
    grid = residual_quantize(latent, spec).grid
    again = residual_quantize(dequantize(grid), spec).grid
    assert torch.equal(grid.codes, again.codes)


# ---------------------------------------------------------------------------
# pack / unpack


def test_pack_known_values():
    assert pack_tokens((3, 1), 2) == 13
    assert pack_tokens((0, 0), 2) == 0
    assert unpack_tokens(13, 2, 2) == (3, 1)
    assert unpack_tokens(5, 3, 1) == (5,)


def test_pack_exhaustive_two_codes():
    images = {pack_tokens(pair, 2) for pair in itertools.product(range(4), repeat=2)}
    assert images == set(range(16))


@pytest.mark.parametrize("n,k", [(n, k) for n in (1, 2, 3, 4) for k in (1, 2, 3)])
def test_pack_bijection_exhaustive(n, k):
    seen = set()
    for codes in itertools.product(range(1 << n), repeat=k):
        packed = pack_tokens(codes, n)
        assert unpack_tokens(packed, n, k) == codes
        seen.add(packed)
    assert seen == set(range(1 << (n * k)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 16), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_pack_roundtrip_random(n, k, seed):
    import random

    r = random.Random(seed)
    codes = tuple(r.randrange(1 << n) for _ in range(k))
    assert unpack_tokens(pack_tokens(codes, n), n, k) == codes


def test_pack_rejects_out_of_range():
    with pytest.raises(DataError):
        pack_tokens((4,), 2)
    with pytest.raises(DataError):
        unpack_tokens(16, 2, 2)


# ---------------------------------------------------------------------------
# auxiliary losses


def test_entropy_loss_identical_batch_has_zero_batch_term():
    # every pixel identical and confident: both terms vanish
    latent = torch.full((1, 1, 64, 3), 8.0)
    latent[..., 1] = -8.0
    loss = lfq_entropy_loss(latent, LFQSpec(3))
    assert abs(loss.item()) < 1e-5
    # a confident but diverse batch is rewarded relative to the collapsed one
    diverse = lfq_decode(torch.arange(8).reshape(1, 1, 8, 1), LFQSpec(3)) * 8.0
    assert lfq_entropy_loss(diverse, LFQSpec(3)).item() < loss.item() - 0.5


def test_entropy_loss_finite_on_random():
    latent = torch.randn(2, 3, 4, 5, generator=torch.Generator().manual_seed(8))
    assert torch.isfinite(lfq_entropy_loss(latent, LFQSpec(5)))


def test_entropy_per_sample_term_decreases_with_confidence():
    # 1-bit toy: scale magnitudes up with the sign distribution fixed
    base = torch.tensor([1.0, -1.0, 1.0, 1.0, -1.0]).reshape(1, 1, 5, 1)
    losses = [lfq_entropy_loss(base * s, LFQSpec(1)).item() for s in (0.5, 1.0, 2.0, 4.0)]
    for a, b in zip(losses, losses[1:]):
        assert b < a


def test_commitment_loss_values():
    on_grid = vol([1.0, -1.0], 2)
    assert lfq_commitment_loss(on_grid, on_grid).item() == 0.0
    assert lfq_commitment_loss(vol([0.5], 1), vol([1.0], 1)).item() == pytest.approx(0.25)
    rng = torch.Generator().manual_seed(9)
    for _ in range(10):
        a, b = torch.randn(3, 4, generator=rng), torch.randn(3, 4, generator=rng)
        assert lfq_commitment_loss(a, b).item() >= 0
    with pytest.raises(ConfigError):
        lfq_commitment_loss(torch.zeros(2, 3), torch.zeros(2, 4))


# ---------------------------------------------------------------------------
# usage statistics


def test_usage_degenerate_and_uniform():
    spec = LFQSpec(2)
    all_same = TokenGrid(torch.full((1, 2, 8, 1), 3, dtype=torch.long), spec)
    report = codebook_usage(all_same)
    assert report.used_fraction == pytest.approx(1 / 4)
    assert report.perplexity == pytest.approx(1.0)

    uniform = TokenGrid(torch.arange(4).repeat(4).reshape(1, 1, 16, 1), spec)
    report = codebook_usage(uniform)
    assert report.perplexity == pytest.approx(4.0)
    assert report.used_fraction == 1.0


def test_usage_counts_sum_to_token_count():
    spec = ChannelSplitSpec(FSQSpec((3, 5)), 2)
    rng = torch.Generator().manual_seed(10)
    grid = TokenGrid(torch.randint(0, 15, (3, 4, 5, 2), generator=rng), spec)
    report = codebook_usage(grid)
    assert report.total == grid.token_count == 3 * 4 * 5 * 2


# ---------------------------------------------------------------------------
# cross-cutting invariants


QUANTIZERS = [
    LFQSpec(4),
    FSQSpec((5, 3)),
    FSQSpec((8, 5)),
    ChannelSplitSpec(LFQSpec(3), 2),
    ChannelSplitSpec(FSQSpec((3, 5)), 2),
    ResidualSpec(FSQSpec((5,)), 2),
]


@pytest.mark.parametrize("spec", QUANTIZERS, ids=lambda s: str(quantizer_to_dict(s)))
def test_grid_membership(spec):
    rng = torch.Generator().manual_seed(11)
    latent = torch.randn(2, 2, 4, spec.latent_channels, generator=rng) * 3
    out = quantize(latent, spec)
    values = dequantize(out.grid, dtype=out.quantized.dtype)
    assert torch.equal(out.quantized, values)
    for v in out.aux.values():
        assert torch.isfinite(v)


@pytest.mark.parametrize(
    "spec",
    [LFQSpec(3), FSQSpec((3, 5)), ChannelSplitSpec(FSQSpec((5,)), 2), ChannelSplitSpec(LFQSpec(2), 3)],
    ids=lambda s: str(quantizer_to_dict(s)),
)
def test_grid_roundtrip_random_grids(spec):
    rng = torch.Generator().manual_seed(12)
    codes = torch.randint(
        0, spec.codebook_size, (2, 3, 4, spec.codes_per_pixel), generator=rng
    )
    grid = TokenGrid(codes, spec)
    assert torch.equal(quantize(dequantize(grid), spec).grid.codes, codes)


@pytest.mark.parametrize(
    "spec", [LFQSpec(3), FSQSpec((3, 5)), ChannelSplitSpec(FSQSpec((5,)), 2)],
    ids=lambda s: str(quantizer_to_dict(s)),
)
def test_straight_through_identity_jacobian(spec):
    # gradient through the boundary equals the same network evaluated at the
    # quantized point with quantization removed
    rng = torch.Generator().manual_seed(13)
    latent = (torch.randn(1, 1, 6, spec.latent_channels, generator=rng) * 2).requires_grad_()
    w = torch.randn(spec.latent_channels, generator=rng)

    out = quantize(latent, spec)
    loss = torch.sin(out.quantized * w).sum()
    (grad_ste,) = torch.autograd.grad(loss, latent)

    q = out.quantized.detach().requires_grad_()
    (grad_identity,) = torch.autograd.grad(torch.sin(q * w).sum(), q)
    assert torch.allclose(grad_ste, grad_identity, atol=0, rtol=0)


def test_degenerate_wrappers_match_base_bitwise():
    rng = torch.Generator().manual_seed(14)
    for base in (LFQSpec(4), FSQSpec((8, 5, 3))):
        latent = torch.randn(2, 1, 5, base.latent_channels, generator=rng) * 2
        ref = quantize(latent, base)
        for wrapped in (ChannelSplitSpec(base, 1), ResidualSpec(base, 1)):
            out = quantize(latent, wrapped)
            assert torch.equal(out.quantized, ref.quantized)
            assert torch.equal(out.grid.codes, ref.grid.codes)


def test_spec_dict_roundtrip():
    for spec in QUANTIZERS:
        assert quantizer_from_dict(quantizer_to_dict(spec)) == spec
    with pytest.raises(ConfigError):
        quantizer_from_dict({"kind": "vq", "size": 8})
    with pytest.raises(ConfigError):
        quantizer_from_dict({"kind": "lfq", "n_bits": 2, "bogus": 1})


def test_spec_validation():
    with pytest.raises(ConfigError):
        LFQSpec(0)
    with pytest.raises(ConfigError):
        FSQSpec((1, 5))
    with pytest.raises(ConfigError):
        ChannelSplitSpec(FSQSpec((5,)), 0)
    with pytest.raises(ConfigError):
        ResidualSpec(LFQSpec(2), 0)
    with pytest.raises(ConfigError):
        ChannelSplitSpec(ChannelSplitSpec(LFQSpec(2), 2), 2)
