from advedm.encoders.base import (
    EncoderDescriptor,
    EncoderOutput,
    VisionTextEncoder,
    as_image,
    text_query,
)
from advedm.encoders.registry import available_encoders, create_encoder, register_encoder
from advedm.encoders.toy import ToyEncoder, make_toy_encoder, synthetic_scene

__all__ = [
    "EncoderDescriptor",
    "EncoderOutput",
    "ToyEncoder",
    "VisionTextEncoder",
    "as_image",
    "available_encoders",
    "create_encoder",
    "make_toy_encoder",
    "register_encoder",
    "synthetic_scene",
    "text_query",
]
