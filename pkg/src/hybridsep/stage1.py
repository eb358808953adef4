"""Stage 1: the audio embedding transformer (AET) and its trainer.

The AET maps a text embedding plus mixture frame features to a predicted
target-audio embedding. The text embedding enters as a prepended token
(with a learned type embedding), frame features as the remaining tokens
(with sinusoidal positions); the prediction is read from the text-token
position and L2-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dsp import Waveform
from .encoders import EncoderSuite, FeatureExtractor, FrameFeatures, SemanticEmbedding
from .layers import TransformerBlock, sinusoidal_positions


class AETModel(nn.Module):
    def __init__(self, embed_dim: int = 64, frame_dim: int = 64, dim: int = 64,
                 heads: int = 4, layers: int = 4):
        super().__init__()
        self.embed_dim = embed_dim
        self.dim = dim
        self.text_proj = nn.Linear(embed_dim, dim)
        self.frame_proj = nn.Linear(frame_dim, dim)
        self.text_type = nn.Parameter(torch.zeros(dim))
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, embed_dim)

    def forward(self, text_emb: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
        """text_emb: [B, embed_dim]; frames: [B, F, frame_dim] -> [B, embed_dim],
        L2-normalized."""
        if text_emb.shape[-1] != self.embed_dim:
            raise ValueError(
                f"text embedding dim {text_emb.shape[-1]} != model dim {self.embed_dim}"
            )
        tok = self.text_proj(text_emb) + self.text_type
        fr = self.frame_proj(frames)
        fr = fr + sinusoidal_positions(fr.shape[1], self.dim, dtype=fr.dtype)
        h = torch.cat([tok.unsqueeze(1), fr], dim=1)
        for block in self.blocks:
            h = block(h)
        out = self.head(self.norm(h[:, 0]))
        return F.normalize(out, dim=-1)


def aet_forward(model: AETModel, text_emb: SemanticEmbedding,
                frames: FrameFeatures) -> SemanticEmbedding:
    """Single-example convenience wrapper around :class:`AETModel`."""
    te = torch.from_numpy(text_emb.values.astype(np.float32)).unsqueeze(0)
    fr = torch.from_numpy(frames.values.astype(np.float32)).unsqueeze(0)
    with torch.no_grad():
        out = model(te, fr).squeeze(0)
    return SemanticEmbedding(values=out.numpy().astype(np.float64), modality="audio")


def stage1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between predicted and target embeddings."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


@dataclass
class Stage1Example:
    query: str
    mixture: Waveform
    target: Waveform


@dataclass
class Stage1Batch:
    text_embeddings: torch.Tensor  # [B, D]
    mixtures: torch.Tensor  # [B, T]
    target_embeddings: torch.Tensor  # [B, D]


def build_stage1_batch(examples: list[Stage1Example], suite: EncoderSuite) -> Stage1Batch:
    """Precompute frozen-encoder embeddings for a fixed example set."""
    text = np.stack([suite.encode_text(e.query).values for e in examples])
    target = np.stack([suite.encode_audio(e.target).values for e in examples])
    mix = np.stack([e.mixture.samples for e in examples])
    return Stage1Batch(
        text_embeddings=torch.from_numpy(text).float(),
        mixtures=torch.from_numpy(mix).float(),
        target_embeddings=torch.from_numpy(target).float(),
    )


def stage1_train(aet: AETModel, fe: FeatureExtractor, suite: EncoderSuite,
                 examples: list[Stage1Example], steps: int,
                 lr: float = 1e-4, betas: tuple[float, float] = (0.8, 0.99),
                 weight_decay: float = 0.0, batch_size: int = 16,
                 seed: int = 0, log_every: int = 50,
                 log_fn=None) -> list[float]:
    """Train AET and FE jointly with AdamW; encoders stay frozen.

    Returns the per-step loss history.

    Raises:
        ValueError: if the encoder suite is not frozen.
    """
    if not suite.frozen:
        raise ValueError("stage-1 training requires a frozen encoder suite")
    batch = build_stage1_batch(examples, suite)
    params = list(aet.parameters()) + list(fe.parameters())
    opt = torch.optim.AdamW(params, lr=lr, betas=betas, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    n = len(examples)
    losses: list[float] = []
    for step in range(steps):
        idx = torch.randperm(n, generator=gen)[: min(batch_size, n)]
        frames = fe(batch.mixtures[idx])
        pred = aet(batch.text_embeddings[idx], frames)
        loss = stage1_loss(pred, batch.target_embeddings[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_fn is not None and (step % log_every == 0 or step == steps - 1):
            log_fn(step, float(loss))
    return losses


def predict_embedding(aet: AETModel, fe: FeatureExtractor, suite: EncoderSuite,
                      query: str, mixture: Waveform) -> SemanticEmbedding:
    """Full stage-1 inference: text + mixture -> predicted audio embedding."""
    text_emb = suite.encode_text(query)
    mix = torch.from_numpy(np.asarray(mixture.samples, dtype=np.float32)).unsqueeze(0)
    te = torch.from_numpy(text_emb.values.astype(np.float32)).unsqueeze(0)
    with torch.no_grad():
        frames = fe(mix)
        out = aet(te, frames).squeeze(0)
    return SemanticEmbedding(values=out.numpy().astype(np.float64), modality="audio")
