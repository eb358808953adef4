"""Run configuration: presets, YAML round-trip, and flag overrides.

Two presets ship with the package: ``desk`` (small models, 16 kHz, 1 s
chunks; everything trainable on a laptop CPU) and ``paper-full`` (the
full-scale hyper-parameters: 512-dim embeddings, 32-layer embedding
transformer, full channel counts, 44.1 kHz, 10 s chunks).
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


@dataclass
class DspConfig:
    sample_rate: int = 16000
    pqmf_bands: int = 4
    pqmf_taps: int = 256
    pqmf_target_atten_db: float = 40.0
    # STFT applied per 4x-decimated band inside the separator. Hop 256
    # (2x overlap) keeps desk-scale training within a CPU time budget;
    # COLA and exact inversion hold at any hop <= window / 2.
    stft_window: int = 512
    stft_hop: int = 256


@dataclass
class EncoderConfig:
    embed_dim: int = 64
    seed: int = 7
    mel_bands: int = 64
    frame_feat_dim: int = 16
    frame_rate_hz: float = 50.0


@dataclass
class FEConfig:
    layers: int = 3
    dim: int = 64
    heads: int = 4


@dataclass
class AETConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4


@dataclass
class SeparatorConfig:
    # Encoder blocks 1-4 then decoder blocks 5-8; block 8 emits the
    # 8 = 4 bands x (real, imag) output channels at every scale.
    channels: tuple[int, ...] = (12, 24, 48, 96, 48, 24, 12, 8)
    # One entry per block 1-7; the final block carries no BiLSTM.
    bilstm_dims: tuple[int, ...] = (4, 8, 16, 32, 16, 8, 2)
    conv_kernel: int = 3
    conv_stride: int = 2
    fa_kernel: int = 9
    fa_heads: int = 2
    teaca_dim: int = 64
    teaca_heads: int = 8
    cond_proj_dim: int = 16
    # Condition vectors are projected to this many channels before being
    # tiled over frequency and concatenated at the denoiser input.
    cond_channels: int = 8


@dataclass
class DiscriminatorConfig:
    windows: tuple[int, ...] = (256, 512, 1024)
    channels: int = 12


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.8
    beta2: float = 0.99
    weight_decay: float = 0.0
    batch_size: int = 8
    total_steps: int = 2000
    checkpoint_every: int = 500
    sigma_max: float = 0.5
    sigma_min: float = 0.01
    lambda_l1: float = 1.0
    lambda_consist_max: float = 0.25
    lambda_consist_warmup_frac: float = 0.1
    consistency_metric: str = "l1"  # or "l2"
    # Optional noise-level conditioning of the denoiser; off by default.
    sigma_conditioning: bool = False
    # Declared-but-inert schedule knobs, kept in the config for
    # completeness; the training loop never consults them.
    step_schedule: str = "constant"
    ema_decay: float = 0.999


@dataclass
class DataConfig:
    chunk_seconds: float = 1.0
    caption_components: int = 2
    keyword_components_min: int = 2
    keyword_components_max: int = 4
    snr_db_min: float = -20.0
    snr_db_max: float = 20.0


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 7
    dsp: DspConfig = field(default_factory=DspConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fe: FEConfig = field(default_factory=FEConfig)
    aet: AETConfig = field(default_factory=AETConfig)
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            value = d[f.name]
            current = getattr(cfg, f.name)
            if dataclasses.is_dataclass(current):
                sub = copy.deepcopy(current)
                for sf in dataclasses.fields(sub):
                    if sf.name in value:
                        v = value[sf.name]
                        if isinstance(getattr(sub, sf.name), tuple):
                            v = tuple(v)
                        setattr(sub, sf.name, v)
                setattr(cfg, f.name, sub)
            else:
                setattr(cfg, f.name, value)
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def override(self, dotted: str, value: str) -> None:
        """Apply a ``section.key=value`` style override, coercing to the
        existing field's type."""
        parts = dotted.split(".")
        obj: object = self
        for p in parts[:-1]:
            if not hasattr(obj, p):
                raise KeyError(f"unknown config section: {dotted!r}")
            obj = getattr(obj, p)
        key = parts[-1]
        if not hasattr(obj, key):
            raise KeyError(f"unknown config key: {dotted!r}")
        old = getattr(obj, key)
        if isinstance(old, bool):
            new: object = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(old, int):
            new = int(value)
        elif isinstance(old, float):
            new = float(value)
        elif isinstance(old, tuple):
            new = tuple(type(old[0])(v) for v in value.split(","))
        else:
            new = value
        setattr(obj, key, new)


def desk_config(seed: int = 7) -> RunConfig:
    return RunConfig(preset="desk", seed=seed)


def paper_full_config(seed: int = 7) -> RunConfig:
    """Full-scale preset: 44.1 kHz, 10 s chunks, 512-dim embeddings,
    3x512/8-head feature extractor, 32-layer embedding transformer, full
    separator channel counts."""
    cfg = RunConfig(preset="paper-full", seed=seed)
    cfg.dsp.sample_rate = 44100
    cfg.data.chunk_seconds = 10.0
    cfg.encoder.embed_dim = 512
    cfg.encoder.frame_feat_dim = 64
    cfg.fe = FEConfig(layers=3, dim=512, heads=8)
    cfg.aet = AETConfig(layers=32, dim=512, heads=8)
    cfg.separator = SeparatorConfig(
        channels=(48, 96, 192, 384, 192, 96, 48, 8),
        bilstm_dims=(12, 24, 48, 96, 48, 24, 2),
        fa_kernel=9,
        fa_heads=2,
        teaca_dim=64,
        teaca_heads=8,
        cond_proj_dim=16,
        cond_channels=8,
    )
    cfg.discriminator = DiscriminatorConfig(windows=(512, 1024, 2048), channels=32)
    cfg.train.total_steps = 60000
    cfg.train.batch_size = 128
    return cfg


PRESETS = {
    "desk": desk_config,
    "paper-full": paper_full_config,
}


def make_config(preset: str = "desk", seed: int = 7) -> RunConfig:
    if preset not in PRESETS:
        raise KeyError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return PRESETS[preset](seed=seed)
