"""Adapter for Hugging Face ``CLIPModel`` checkpoints.

Patch tokens go through the same post-layernorm and visual projection as
[CLS] so that both live in the joint text-image space.  The attention
summary is the [CLS] row over patch keys, averaged over layers and heads.
"""

from __future__ import annotations

from typing import Callable

import torch

from advedm.encoders.base import EncoderDescriptor, EncoderOutput, VisionTextEncoder

_MEAN = (0.48145466, 0.4578275, 0.40821073)
_STD = (0.26862954, 0.26130258, 0.27577711)


class HFCLIPEncoder(VisionTextEncoder):
    def __init__(
        self,
        model,
        tokenizer: Callable[[str], dict],
        identifier: str = "hf-clip",
        dtype: torch.dtype = torch.float32,
        mean=_MEAN,
        std=_STD,
    ):
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        if hasattr(model, "set_attn_implementation"):
            # fused attention kernels do not return attention probabilities
            model.set_attn_implementation("eager")
        self.model = model.to(dtype)
        self.tokenizer = tokenizer
        self.dtype = dtype
        vc = model.config.vision_config
        self.descriptor = EncoderDescriptor(
            identifier=identifier,
            patch_size=vc.patch_size,
            input_resolution=vc.image_size,
            embedding_dim=model.config.projection_dim,
            joint_space=True,
        )
        self._mean = torch.tensor(mean, dtype=dtype)
        self._std = torch.tensor(std, dtype=dtype)

    @classmethod
    def from_pretrained(cls, path: str, dtype: torch.dtype = torch.float32, **kwargs) -> "HFCLIPEncoder":
        from transformers import AutoTokenizer, CLIPModel

        model = CLIPModel.from_pretrained(path, attn_implementation="eager")
        tok = AutoTokenizer.from_pretrained(path)

        def tokenize(text):
            return tok([text], return_tensors="pt", padding=True, truncation=True)

        return cls(model, tokenize, identifier=f"hf-clip:{path}", dtype=dtype, **kwargs)

    def forward(self, pixels: torch.Tensor) -> EncoderOutput:
        x = ((pixels - self._mean) / self._std).permute(2, 0, 1)[None]
        vm = self.model.vision_model
        native = tuple(pixels.shape[:2]) == (self.descriptor.input_resolution,) * 2
        out = vm(pixel_values=x, output_attentions=True, interpolate_pos_encoding=not native)
        tokens = self.model.visual_projection(vm.post_layernorm(out.last_hidden_state[0]))
        attention = torch.stack([a[0, :, 0, 1:] for a in out.attentions]).mean(dim=(0, 1))
        return EncoderOutput(cls=tokens[0], patches=tokens[1:], attention=attention)

    def embed_text(self, phrase: str) -> torch.Tensor:
        batch = self.tokenizer(phrase)
        feats = self.model.get_text_features(**batch)
        if not isinstance(feats, torch.Tensor):
            feats = feats.pooler_output
        return feats[0].to(self.dtype)
