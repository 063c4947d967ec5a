"""Region-targeted removal and addition attacks on vision-text encoders."""

from advedm.addition import AdditionObjective, ReferenceImage, prepare_reference, run_addition_attack
from advedm.encoders import EncoderDescriptor, EncoderOutput, VisionTextEncoder, create_encoder, make_toy_encoder
from advedm.optim import AttackConfig, AttackResult, LossBreakdown, RemovalLossBreakdown, optimize, project
from advedm.regions import PatchMask, RegionSpec, build_removal_mask, select_injection_region
from advedm.removal import RemovalObjective, run_removal_attack
from advedm.transfer import EnsembleSpec, run_transfer_attack

__version__ = "0.1.0"

__all__ = [
    "AdditionObjective",
    "AttackConfig",
    "AttackResult",
    "EncoderDescriptor",
    "EncoderOutput",
    "EnsembleSpec",
    "LossBreakdown",
    "PatchMask",
    "ReferenceImage",
    "RegionSpec",
    "RemovalLossBreakdown",
    "RemovalObjective",
    "VisionTextEncoder",
    "build_removal_mask",
    "create_encoder",
    "make_toy_encoder",
    "optimize",
    "prepare_reference",
    "project",
    "run_addition_attack",
    "run_removal_attack",
    "run_transfer_attack",
    "select_injection_region",
]
