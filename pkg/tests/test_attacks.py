import io

import numpy as np
import pytest
import torch
from PIL import Image

import toy_scenarios as ts
from advedm._ops import cosine
from advedm.addition import (
    AdditionObjective,
    injection_window_size,
    load_image,
    prepare_reference,
    run_addition_attack,
)
from advedm.encoders import make_toy_encoder, synthetic_scene
from advedm.errors import EmptyQueryError, GeometryError
from advedm.optim import AttackConfig
from advedm.regions import RegionSpec
from advedm.removal import RemovalObjective, run_removal_attack


def target_cos(enc, image, target):
    return float(cosine(enc.encode_image(image).cls, enc.encode_text(target)))


class TestRemoval:
    def test_zero_iterations_is_identity(self, toy):
        img, target = ts.removal_case(0)
        r = run_removal_attack(img, target, AttackConfig.removal(iterations=0), toy)
        assert np.array_equal(r.adversarial, img) and r.residual == 0.0

    def test_default_config_weights(self):
        assert AttackConfig.removal().weights == (0.5, 2.0, 0.2)

    def test_breakdown_consistency(self, toy):
        img, target = ts.removal_case(1)
        cfg = AttackConfig.removal(iterations=25)
        r = run_removal_attack(img, target, cfg, toy)
        w1, w2, w3 = cfg.weights
        for t in r.trace:
            assert abs(t.total - (w1 * t.l_cls + w2 * t.l_p + w3 * t.l_fix)) <= 1e-9

    def test_trace_total_matches_objective(self, toy):
        img, target = ts.removal_case(2)
        objective = RemovalObjective(img, target, AttackConfig.removal(), toy)
        loss, grad, terms = objective(img)
        assert loss == pytest.approx(terms.total, abs=1e-12)
        assert grad.shape == img.shape

    def test_mask_has_top_fifth(self, toy):
        img, target = ts.removal_case(3)
        r = run_removal_attack(img, target, AttackConfig.removal(iterations=1), toy)
        assert int((r.mask.bits == 0).sum()) == 4
        assert r.metadata["attack"] == "removal" and r.metadata["target"] == target
        assert len(r.metadata["similarity"]) == 16

    def test_planted_target_decreases(self, toy):
        img, target = ts.removal_case(4)
        before = target_cos(toy, img, target)
        r = run_removal_attack(img, target, AttackConfig.removal(iterations=100), toy)
        assert target_cos(toy, r.adversarial, target) < before

    def test_deterministic(self, toy):
        img, target = ts.removal_case(5)
        cfg = AttackConfig.removal(iterations=15)
        a = run_removal_attack(img, target, cfg, toy)
        b = run_removal_attack(img, target, cfg, toy)
        assert np.array_equal(a.adversarial, b.adversarial)

    def test_empty_target(self, toy):
        with pytest.raises(EmptyQueryError):
            run_removal_attack(synthetic_scene(0), " ", AttackConfig.removal(iterations=1), toy)

    def test_encoder_required(self):
        with pytest.raises(ValueError):
            run_removal_attack(synthetic_scene(0), "car")

    def test_non_finite_aborts(self, toy, monkeypatch):
        img, target = ts.removal_case(6)
        calls = {"n": 0}
        original = RemovalObjective.__call__

        def flaky(self, image):
            calls["n"] += 1
            loss, grad, terms = original(self, image)
            return (float("nan") if calls["n"] == 3 else loss), grad, terms

        monkeypatch.setattr(RemovalObjective, "__call__", flaky)
        r = run_removal_attack(img, target, AttackConfig.removal(iterations=10), toy)
        assert r.aborted and len(r.trace) == 2 and r.residual <= 8 / 255


class TestReference:
    def test_geometry(self, toy):
        ref = prepare_reference(synthetic_scene(7, size=32), 2, toy)
        assert ref.image.shape == (16, 16, 3) and ref.m == 2
        assert ref.outputs.patches.shape == (4, 32)

    def test_same_file_twice(self, toy, tmp_path):
        path = tmp_path / "ref.png"
        Image.fromarray((synthetic_scene(3) * 255).astype(np.uint8)).save(path)
        a, b = prepare_reference(path, 2, toy), prepare_reference(path, 2, toy)
        assert np.array_equal(a.image, b.image) and torch.equal(a.outputs.cls, b.outputs.cls)

    def test_golden_cls(self, toy, golden):
        ref = prepare_reference(synthetic_scene(7, size=16), 2, toy)
        np.testing.assert_allclose(ref.outputs.cls.numpy(), golden["reference_scene7_m2_cls"], rtol=0, atol=1e-12)

    def test_bytes_source(self, toy):
        buf = io.BytesIO()
        Image.fromarray((synthetic_scene(1) * 255).astype(np.uint8)).save(buf, format="PNG")
        assert prepare_reference(buf.getvalue(), 1, toy).outputs.patches.shape == (1, 32)

    def test_bad_geometry(self, toy):
        with pytest.raises(GeometryError):
            prepare_reference(synthetic_scene(0), 5, toy)

    def test_decode_failure(self, toy):
        with pytest.raises(Exception):
            prepare_reference(b"not an image", 2, toy)
        with pytest.raises(TypeError):
            load_image(42)


class TestAddition:
    def test_zero_iterations_is_identity(self, toy):
        img, target, ref = ts.addition_case(0)
        r = run_addition_attack(img, ref, target, config=ts.addition_config(iterations=0), encoder=toy)
        assert np.array_equal(r.adversarial, img) and r.residual == 0.0

    def test_defaults(self):
        c = AttackConfig.addition()
        assert (c.weights, c.alpha, c.beta, c.iterations, c.step_size, c.epsilon) == (
            (0.8, 2.0, 0.3), 0.5, 0.4, 500, 0.005, 8 / 255
        )

    def test_window_from_pixels_at_224(self):
        enc = make_toy_encoder(0, patch_size=14, resolution=224, dim=8, heads=2, layers=1)
        with pytest.warns(UserWarning):
            assert injection_window_size(AttackConfig.addition(), enc) == 7

    def test_manual_region_metadata(self, toy):
        img, target, ref = ts.addition_case(1)
        region = RegionSpec(1, 2, 2)
        r = run_addition_attack(img, ref, target, region, AttackConfig.addition(iterations=3), toy)
        assert r.region == region
        assert r.mask.selected.tolist() == [6, 7, 10, 11]
        assert r.metadata["alpha"] == 0.5 and r.metadata["beta"] == 0.4

    def test_reference_size_mismatch(self, toy):
        img, target, ref = ts.addition_case(0)
        with pytest.raises(GeometryError):
            run_addition_attack(img, ref, target, RegionSpec(0, 0, 3), AttackConfig.addition(iterations=1), toy)

    def test_reference_prepared_from_file(self, toy, tmp_path):
        img, target, ref = ts.addition_case(0)
        path = tmp_path / "ref.png"
        Image.fromarray(np.round(ref.image * 255).astype(np.uint8)).save(path)
        obj = AdditionObjective(img, path, target, ts.addition_config(), toy)
        assert obj.reference.m == 2

    def test_breakdown_and_feasibility(self, toy):
        img, target, ref = ts.addition_case(2)
        cfg = ts.addition_config(iterations=25)
        r = run_addition_attack(img, ref, target, config=cfg, encoder=toy)
        w1, w2, w3 = cfg.weights
        for t in r.trace:
            assert abs(t.total - (w1 * t.l_cls + w2 * t.l_p + w3 * t.l_fix)) <= 1e-9
            assert t.residual <= cfg.epsilon and 0.0 <= t.pixel_min and t.pixel_max <= 1.0

    def test_target_increases(self, toy):
        img, target, ref = ts.addition_case(3)
        before = target_cos(toy, img, target)
        r = run_addition_attack(img, ref, target, config=ts.addition_config(iterations=100), encoder=toy)
        assert target_cos(toy, r.adversarial, target) > before

    def test_automatic_region_avoids_foreground(self, toy):
        img, target, ref = ts.addition_case(4)
        obj = AdditionObjective(img, ref, target, ts.addition_config(), toy)
        from advedm.regions import select_injection_region

        texts = [toy.encode_text(t) for t in ts.FOREGROUND]
        region, _ = select_injection_region(obj.clean.patches, texts, 2)
        assert obj.region == region
