import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advedm.addition import (
    ReferenceImage,
    fuse_cls_target,
    loss_cls_addition,
    loss_fixation_addition,
    loss_patch_addition,
    reallocate_attention,
    window_map,
)
from advedm.encoders import EncoderOutput
from advedm.errors import CountMismatchError, ZeroVectorError
from advedm.regions import PatchMask
from advedm.removal import loss_cls_removal, loss_fixation_removal, loss_patch_removal


def T(values, dtype=torch.float64):
    return torch.tensor(values, dtype=dtype)


def out(patches, attention=None, cls=None):
    p = T(patches, dtype=torch.float64)
    a = torch.ones(p.shape[0], dtype=torch.float64) if attention is None else T(attention, dtype=torch.float64)
    c = torch.ones(p.shape[1], dtype=torch.float64) if cls is None else T(cls, dtype=torch.float64)
    return EncoderOutput(c, p, a)


def mask(*bits):
    return PatchMask(np.array(bits))


class TestRemovalCls:
    def test_orthogonal(self):
        assert float(loss_cls_removal(T([1.0, 0.0]), T([0.0, 1.0]))) == 0.0

    def test_identical(self):
        v = T([0.3, -0.2, 0.9], dtype=torch.float64)
        assert float(loss_cls_removal(v, v)) == pytest.approx(1.0, abs=1e-15)

    def test_hand_oracle(self):
        assert float(loss_cls_removal(T([1.0, 0.0]), T([0.6, 0.8]))) == pytest.approx(0.6, abs=1e-15)

    def test_zero_vector(self):
        with pytest.raises(ZeroVectorError):
            loss_cls_removal(T([0.0, 0.0]), T([1.0, 0.0]))


class TestRemovalPatch:
    def test_perfect_alignment(self):
        p = np.random.default_rng(0).normal(size=(4, 3))
        assert float(loss_patch_removal(p, p, mask(0, 1, 0, 1))) == pytest.approx(-1.0, abs=1e-15)

    def test_orthogonal_selected_rows(self):
        a = [[1.0, 0.0], [5.0, 5.0]]
        b = [[0.0, 1.0], [5.0, 5.0]]
        assert float(loss_patch_removal(a, b, mask(0, 1))) == 0.0

    def test_hand_mean(self):
        a = [[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]
        b = [[2.0, 0.0], [0.5, 0.5 * 3**0.5], [0.0, 1.0]]
        # selected rows 0 and 1: cosines 1.0 and 0.5
        assert float(loss_patch_removal(a, b, mask(0, 0, 1))) == pytest.approx(-0.75, abs=1e-15)

    def test_no_selected_rows(self):
        with pytest.raises(ValueError):
            loss_patch_removal([[1.0, 0.0]], [[1.0, 0.0]], mask(1))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_patch_removal([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], mask(0, 1))


class TestRemovalFixation:
    def test_identity(self):
        o = out(np.random.default_rng(1).normal(size=(4, 3)), [0.1, 0.2, 0.3, 0.05])
        assert float(loss_fixation_removal(o, o, mask(0, 1, 1, 1))) == pytest.approx(-1.0, abs=1e-15)

    def test_orthogonal_kept_rows(self):
        adv = out([[1.0, 0.0], [1.0, 0.0]])
        clean = out([[7.0, 7.0], [0.0, 3.0]])
        assert float(loss_fixation_removal(adv, clean, mask(0, 1))) == 0.0

    def test_hand_mean(self):
        adv = out([[1.0, 0.0], [1.0, 0.0], [0.8, 0.6]], [0.2, 0.5, 0.3])
        clean = out([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]], [0.9, 0.1, 0.4])
        assert float(loss_fixation_removal(adv, clean, mask(0, 1, 1))) == pytest.approx(-0.9, abs=1e-15)

    def test_zero_attention_row_drops_out(self):
        adv = out([[1.0, 0.0], [1.0, 0.0]], [0.0, 1.0])
        clean = out([[1.0, 0.0], [1.0, 0.0]])
        # literal product: the zero-attention row has zero similarity
        assert float(loss_fixation_removal(adv, clean, mask(1, 1))) == pytest.approx(-0.5, abs=1e-15)

    def test_weighted_mode(self):
        adv = out([[1.0, 0.0], [0.0, 1.0]])
        clean = out([[1.0, 0.0], [1.0, 0.0]], [3.0, 1.0])
        assert float(loss_fixation_removal(adv, clean, mask(1, 1), "weighted")) == pytest.approx(-0.75, abs=1e-15)

    def test_no_kept_rows(self):
        o = out([[1.0, 0.0]])
        with pytest.raises(ValueError):
            loss_fixation_removal(o, o, mask(0))


class TestFusion:
    def test_endpoints(self):
        a, b = T([0.3, 0.7]), T([-1.0, 2.0])
        assert torch.equal(fuse_cls_target(a, b, 0.0), a.double())
        assert torch.equal(fuse_cls_target(a, b, 1.0), b.double())

    def test_default_alpha_hand(self):
        assert fuse_cls_target(T([1.0, 0.0]), T([0.0, 1.0]), 0.5).tolist() == [0.5, 0.5]

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            fuse_cls_target(T([1.0]), T([1.0]), 1.5)

    def test_affine_identity_random(self, rng):
        for _ in range(1000):
            d = int(rng.integers(1, 10))
            # dyadic values keep every product and sum exact in float64
            a = rng.integers(-64, 64, d) / 8.0
            b = rng.integers(-64, 64, d) / 8.0
            alpha = int(rng.integers(0, 17)) / 16.0
            got = fuse_cls_target(a, b, alpha).numpy()
            assert np.array_equal(got, a + alpha * (b - a))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0, 1))
    def test_affine_identity_close(self, seed, alpha):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=6), rng.normal(size=6)
        np.testing.assert_allclose(fuse_cls_target(a, b, alpha).numpy(), a + alpha * (b - a), atol=1e-14)


class TestReallocation:
    def test_hand_oracle(self):
        got = reallocate_attention(T([0.9, 0.3]), T([0.5]), mask(0, 1), 0.4)
        np.testing.assert_allclose(got.numpy(), [0.2, 0.18], atol=1e-15)

    def test_beta_zero(self):
        got = reallocate_attention(T([0.9, 0.3, 0.2]), T([0.5, 0.7]), mask(0, 1, 0), 0.0)
        assert got.tolist() == [0.0, 0.3, 0.0]

    def test_count_mismatch(self):
        with pytest.raises(CountMismatchError):
            reallocate_attention(T([0.9, 0.3]), T([0.5, 0.1]), mask(0, 1), 0.4)

    def test_row_major_map(self):
        bits = np.ones(16, int)
        bits[[5, 6, 9, 10]] = 0
        m = window_map(bits)
        assert m[[5, 6, 9, 10]].tolist() == [0, 1, 2, 3]
        assert (m[bits == 1] == -1).all()

    def test_piecewise_law_random(self, rng):
        for _ in range(1000):
            n = int(rng.integers(2, 40))
            k = int(rng.integers(1, n))
            bits = np.ones(n, int)
            bits[rng.choice(n, k, replace=False)] = 0
            a_clean, a_ref = rng.uniform(size=n), rng.uniform(size=k)
            beta = float(rng.uniform())
            got = reallocate_attention(a_clean, a_ref, bits, beta).numpy()
            j = 0
            for i in range(n):
                if bits[i] == 0:
                    assert got[i] == beta * a_ref[j]
                    j += 1
                else:
                    assert got[i] == (1 - beta) * a_clean[i]
            assert (got >= 0).all()


class TestAdditionLosses:
    def test_cls_identity(self):
        clean, ref = T([1.0, 0.0]), T([0.0, 1.0])
        fused = fuse_cls_target(clean, ref, 0.5)
        assert float(loss_cls_addition(fused, clean, ref, 0.5)) == pytest.approx(-1.0, abs=1e-15)

    def test_cls_orthogonal(self):
        assert float(loss_cls_addition(T([1.0, -1.0]), T([1.0, 0.0]), T([0.0, 1.0]), 0.5)) == 0.0

    def test_cls_alpha_zero(self):
        a, c, r = T([0.3, 0.4]), T([1.0, 0.2]), T([9.0, -3.0])
        expect = -torch.nn.functional.cosine_similarity(a.double(), c.double(), dim=0)
        assert float(loss_cls_addition(a, c, r, 0.0)) == pytest.approx(float(expect), abs=1e-15)

    def test_cls_zero_fused(self):
        with pytest.raises(ZeroVectorError):
            loss_cls_addition(T([1.0, 0.0]), T([1.0, 0.0]), T([-1.0, 0.0]), 0.5)

    def _ref(self, patches, attention=None):
        return ReferenceImage(np.zeros((8, 8, 3)), 1, out(patches, attention))

    def test_patch_perfect_injection(self):
        ref = self._ref([[0.3, 0.4], [1.0, 2.0]], [0.5, 0.25])
        bits = mask(1, 0, 0)
        realloc = reallocate_attention(T([0.2, 0.3, 0.1]), ref.outputs.attention, bits, 0.4)
        adv = out([[9.0, 9.0], [0.3, 0.4], [1.0, 2.0]], [0.1, 0.2, 0.7])
        assert float(loss_patch_addition(adv, ref, realloc, bits)) == pytest.approx(-1.0, abs=1e-15)

    def test_patch_orthogonal(self):
        ref = self._ref([[1.0, 0.0]])
        bits = mask(0, 1)
        realloc = reallocate_attention(T([0.2, 0.3]), T([0.5]), bits, 0.4)
        adv = out([[0.0, 1.0], [1.0, 1.0]])
        assert float(loss_patch_addition(adv, ref, realloc, bits)) == 0.0

    def test_patch_hand_mean(self):
        ref = self._ref([[1.0, 0.0], [1.0, 0.0]])
        bits = mask(0, 0, 1)
        realloc = reallocate_attention(T([0.2, 0.3, 0.5]), T([0.5, 0.5]), bits, 0.4)
        adv = out([[0.9, (1 - 0.81) ** 0.5], [0.7, (1 - 0.49) ** 0.5], [1.0, 0.0]])
        assert float(loss_patch_addition(adv, ref, realloc, bits)) == pytest.approx(-0.8, abs=1e-15)

    def test_fixation_identity(self):
        clean = out([[1.0, 2.0], [0.5, -1.0], [3.0, 0.1]], [0.2, 0.3, 0.4])
        bits = mask(0, 1, 1)
        realloc = reallocate_attention(clean.attention, T([0.6]), bits, 0.4)
        adv = EncoderOutput(clean.cls, clean.patches, realloc)
        assert float(loss_fixation_addition(adv, clean, realloc, bits)) == pytest.approx(-1.0, abs=1e-15)

    def test_fixation_orthogonal(self):
        clean = out([[0.0, 0.0], [1.0, 0.0]])
        bits = mask(0, 1)
        realloc = reallocate_attention(clean.attention, T([0.6]), bits, 0.4)
        adv = out([[1.0, 1.0], [0.0, 1.0]])
        assert float(loss_fixation_addition(adv, clean, realloc, bits)) == 0.0

    def test_fixation_hand_mean(self):
        clean = out([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        bits = mask(0, 1, 1)
        realloc = reallocate_attention(clean.attention, T([0.6]), bits, 0.4)
        adv = out([[5.0, 5.0], [2.0, 0.0], [0.6, 0.8]])
        assert float(loss_fixation_addition(adv, clean, realloc, bits)) == pytest.approx(-0.8, abs=1e-15)

    def test_fixation_needs_kept_rows(self):
        o = out([[1.0, 0.0]])
        with pytest.raises(ValueError):
            loss_fixation_addition(o, o, T([0.1]), mask(0))

    def test_patch_needs_window(self):
        o = out([[1.0, 0.0]])
        with pytest.raises(ValueError):
            loss_patch_addition(o, o, T([0.1]), mask(1))
