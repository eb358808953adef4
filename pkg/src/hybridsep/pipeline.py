"""Model builders and end-to-end wiring shared by the CLI and tests."""

from __future__ import annotations

import numpy as np
import torch

from .act import Stage2Batch, TrainState, init_train_state
from .config import RunConfig
from .data import MixtureExample
from .dsp import Waveform
from .encoders import EncoderSuite, FeatureExtractor, stub_suite
from .separation import ASMModel, CDModel, DiscriminatorModel
from .stage1 import AETModel, Stage1Example


def build_suite(cfg: RunConfig) -> EncoderSuite:
    return stub_suite(
        seed=cfg.encoder.seed,
        embed_dim=cfg.encoder.embed_dim,
        frame_feat_dim=cfg.encoder.frame_feat_dim,
        mel_bands=cfg.encoder.mel_bands,
        frame_rate_hz=cfg.encoder.frame_rate_hz,
    )


def build_fe(cfg: RunConfig) -> FeatureExtractor:
    return FeatureExtractor(
        window_len=cfg.dsp.stft_window,
        hop_len=cfg.dsp.stft_hop,
        dim=cfg.fe.dim,
        heads=cfg.fe.heads,
        layers=cfg.fe.layers,
    )


def build_aet(cfg: RunConfig) -> AETModel:
    return AETModel(
        embed_dim=cfg.encoder.embed_dim,
        frame_dim=cfg.fe.dim,
        dim=cfg.aet.dim,
        heads=cfg.aet.heads,
        layers=cfg.aet.layers,
    )


def build_asm(cfg: RunConfig) -> ASMModel:
    return ASMModel(cfg.dsp, cfg.separator, cfg.encoder.embed_dim,
                    cfg.encoder.frame_feat_dim)


def build_cd(cfg: RunConfig) -> CDModel:
    return CDModel(cfg.dsp, cfg.separator, 4 * cfg.separator.cond_proj_dim)


def build_disc(cfg: RunConfig) -> DiscriminatorModel:
    return DiscriminatorModel(cfg.discriminator)


def build_stage2(cfg: RunConfig, seed: int | None = None
                 ) -> tuple[ASMModel, CDModel, DiscriminatorModel, TrainState]:
    torch.manual_seed(cfg.seed if seed is None else seed)
    asm = build_asm(cfg)
    cd = build_cd(cfg)
    disc = build_disc(cfg)
    state = init_train_state(asm, cd, disc, cfg.train,
                             seed=cfg.seed if seed is None else seed)
    return asm, cd, disc, state


def stage1_examples(examples: list[MixtureExample]) -> list[Stage1Example]:
    return [Stage1Example(query=e.query, mixture=e.mixture, target=e.target)
            for e in examples]


def prepare_stage2_data(examples: list[MixtureExample],
                        suite: EncoderSuite) -> Stage2Batch:
    """Precompute the frozen-encoder inputs for stage-2 training.

    Target embeddings come from the frozen audio encoder on the ground
    truth (teacher forcing); frame features from the frozen frame encoder
    on the mixtures.
    """
    mixtures = np.stack([e.mixture.samples for e in examples])
    targets = np.stack([e.target.samples for e in examples])
    embs = np.stack([suite.encode_audio(e.target).values for e in examples])
    feats = np.stack([suite.encode_frames(e.mixture).values for e in examples])
    return Stage2Batch(
        mixtures=torch.from_numpy(mixtures).float(),
        targets=torch.from_numpy(targets).float(),
        target_embeddings=torch.from_numpy(embs).float(),
        frame_features=torch.from_numpy(feats).float(),
    )


def separate_with_embedding(asm: ASMModel, suite: EncoderSuite,
                            mixture: Waveform, embedding: np.ndarray) -> Waveform:
    """Run the separator on one mixture given a target-audio embedding."""
    mix = torch.from_numpy(np.asarray(mixture.samples, dtype=np.float32)).unsqueeze(0)
    emb = torch.from_numpy(np.asarray(embedding, dtype=np.float32)).unsqueeze(0)
    feats = torch.from_numpy(
        suite.encode_frames(mixture).values.astype(np.float32)
    ).unsqueeze(0)
    with torch.no_grad():
        estimate, _ = asm(mix, emb, feats)
    return Waveform(estimate.squeeze(0).numpy().astype(np.float64),
                    mixture.sample_rate)
