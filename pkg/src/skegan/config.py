"""Run configuration and the desk-scale vs published-scale profiles."""

from __future__ import annotations

from dataclasses import dataclass, field

from .training import SkeganTrainConfig
from .vaskegan import VaskeganTrainConfig

PROFILES = ("toy", "paper")


def skegan_config(profile: str = "toy") -> SkeganTrainConfig:
    if profile == "toy":
        return SkeganTrainConfig()
    if profile == "paper":
        return SkeganTrainConfig(
            hidden_gen=512,
            hidden_disc=256,
            lr0_d=0.001,
            pretrain_g_iters=38500,
            pretrain_d_iters=35000,
            epoch_g_iters=700,
            epoch_d_iters=700,
            rounds=4,
        )
    raise ValueError(f"unknown profile {profile!r}")


def vaskegan_config(profile: str = "toy") -> VaskeganTrainConfig:
    if profile == "toy":
        return VaskeganTrainConfig()
    if profile == "paper":
        return VaskeganTrainConfig(
            enc_hidden=256,
            dec_hidden=512,
            n_z=128,
            disc_hidden=512,
            total_iters=200000,
        )
    raise ValueError(f"unknown profile {profile!r}")


@dataclass
class RunConfig:
    """Top-level knobs shared by the CLI entry points."""

    profile: str = "toy"
    model: str = "skegan"  # skegan | vaskegan
    category: str = ""
    seed: int = 0
    single_thread: bool = True
    skegan: SkeganTrainConfig = field(default_factory=SkeganTrainConfig)
    vaskegan: VaskeganTrainConfig = field(default_factory=VaskeganTrainConfig)

    @classmethod
    def for_profile(cls, profile: str, **kw) -> "RunConfig":
        return cls(
            profile=profile,
            skegan=skegan_config(profile),
            vaskegan=vaskegan_config(profile),
            **kw,
        )
