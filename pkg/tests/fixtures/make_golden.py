"""Regenerate golden.json: one-time toy-encoder evaluations pinned for regression tests.

Run from the repository root: python3 tests/fixtures/make_golden.py
"""

import json
from pathlib import Path

import numpy as np

from advedm.addition import prepare_reference
from advedm.encoders import make_toy_encoder, synthetic_scene
from advedm.metrics import semantic_similarity


def cos(a, b):
    return float(a @ b / (a.norm() * b.norm()))


def main():
    enc = make_toy_encoder(0)
    zeros = enc.encode_image(np.zeros((32, 32, 3)))
    ones = enc.encode_image(np.ones((32, 32, 3)))
    scene = enc.encode_image(synthetic_scene(0))
    ref = prepare_reference(synthetic_scene(7, size=16), 2, enc)
    golden = {
        "cls_zeros": zeros.cls.tolist(),
        "cls_ones": ones.cls.tolist(),
        "cls_zeros_ones_cosine": cos(zeros.cls, ones.cls),
        "scene0_cls": scene.cls.tolist(),
        "scene0_attention": scene.attention.tolist(),
        "text_cos_cat_dog": cos(enc.encode_text("cat"), enc.encode_text("dog")),
        "reference_scene7_m2_cls": ref.outputs.cls.tolist(),
        "seed1_scene0_cls_cosine": cos(scene.cls, make_toy_encoder(1).encode_image(synthetic_scene(0)).cls),
        "ss_disjoint": semantic_similarity("a red car on the road", "two cats under a bench", enc),
    }
    out = Path(__file__).with_name("golden.json")
    out.write_text(json.dumps(golden, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
