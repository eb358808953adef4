"""Pluggable text/audio/frame encoders and the trainable feature extractor.

Two encoder suites are available:

* ``stub`` (default): deterministic seeded random projections over hashed
  bag-of-tokens (text) and log-mel statistics (audio). Zero trainable
  parameters, bitwise-stable outputs.
* ``toy``: a small contrastive text/audio pair of towers trained on a
  synthetic paired corpus, so cosine-based retrieval metrics become
  meaningful.

The frame encoder (the stand-in for a pretrained frame-wise SSL model) is
always the fixed stub: log-mel frames at 50 fps through a seeded linear map.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dsp import Waveform
from .layers import TransformerBlock, sinusoidal_positions

VOCAB_SIZE = 4096
_STUB_STFT_LEN = 512
_STUB_STFT_HOP = 256
_MEL_FLOOR = 1e-8


@dataclass
class SemanticEmbedding:
    values: np.ndarray
    modality: str  # "text" or "audio"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("embedding must be a vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding contains non-finite values")

    @property
    def dim(self) -> int:
        return int(self.values.size)


@dataclass
class FrameFeatures:
    values: np.ndarray  # [frame, feat_dim]
    frame_rate_hz: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError("frame features must be [frame, feat_dim]")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("frame features contain non-finite values")


def cosine(a: SemanticEmbedding | np.ndarray, b: SemanticEmbedding | np.ndarray) -> float:
    va = a.values if isinstance(a, SemanticEmbedding) else np.asarray(a)
    vb = b.values if isinstance(b, SemanticEmbedding) else np.asarray(b)
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(va, vb) / (na * nb))


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def _token_index(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % VOCAB_SIZE


def bag_of_tokens(text: str) -> np.ndarray:
    """Hashed token-count vector over a fixed vocabulary."""
    bag = np.zeros(VOCAB_SIZE)
    for tok in tokenize(text):
        bag[_token_index(tok)] += 1.0
    return bag


def _child_seed(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


@functools.lru_cache(maxsize=16)
def _text_projection(seed: int, dim: int) -> np.ndarray:
    rng = _child_seed(seed, 0)
    return rng.standard_normal((dim, VOCAB_SIZE)) / np.sqrt(VOCAB_SIZE)


@functools.lru_cache(maxsize=16)
def _audio_projection(seed: int, dim: int, stat_dim: int) -> np.ndarray:
    rng = _child_seed(seed, 1)
    return rng.standard_normal((dim, stat_dim)) / np.sqrt(stat_dim)


@functools.lru_cache(maxsize=16)
def _frame_projection(seed: int, feat_dim: int, mel_bands: int) -> np.ndarray:
    rng = _child_seed(seed, 2)
    return rng.standard_normal((feat_dim, mel_bands)) / np.sqrt(mel_bands)


def silence_embedding(dim: int) -> SemanticEmbedding:
    """The fixed embedding returned for all-zero audio: the constant unit
    vector (1, ..., 1) / sqrt(D)."""
    return SemanticEmbedding(values=np.full(dim, 1.0 / np.sqrt(dim)), modality="audio")


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank matrix [n_mels, n_fft // 2 + 1]."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (freqs - lo) / max(ctr - lo, 1e-12)
        falling = (hi - freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def _frame_signal(x: np.ndarray, window_len: int, hop_len: int) -> np.ndarray:
    if len(x) < window_len:
        x = np.pad(x, (0, window_len - len(x)))
    n_frames = 1 + (len(x) - window_len) // hop_len
    idx = np.arange(window_len)[None, :] + hop_len * np.arange(n_frames)[:, None]
    return x[idx]


def _mel_power(wave: Waveform, n_mels: int, window_len: int = _STUB_STFT_LEN,
               hop_len: int = _STUB_STFT_HOP) -> np.ndarray:
    frames = _frame_signal(np.asarray(wave.samples, dtype=np.float64), window_len, hop_len)
    win = np.hanning(window_len)
    spec = np.abs(np.fft.rfft(frames * win, axis=1)) ** 2
    return spec @ mel_filterbank(n_mels, window_len, wave.sample_rate).T


def log_mel_frames(wave: Waveform, n_mels: int, window_len: int = _STUB_STFT_LEN,
                   hop_len: int = _STUB_STFT_HOP) -> np.ndarray:
    """Log mel-power frames, shape [frame, n_mels]."""
    return np.log(_mel_power(wave, n_mels, window_len, hop_len) + _MEL_FLOOR)


def _audio_stats(wave: Waveform, n_mels: int) -> np.ndarray:
    """Gain-invariant log-mel statistics: mel power is normalised by its
    global mean before the log, with a relative floor of 1e-3 so broadband
    perturbations well below the signal barely move the statistics."""
    mel = _mel_power(wave, n_mels)
    logmel = np.log(mel / max(mel.mean(), 1e-300) + 1e-3)
    return np.concatenate([logmel.mean(axis=0), logmel.std(axis=0)])


def stub_text_encode(query: str, seed: int, dim: int) -> SemanticEmbedding:
    """Deterministic text embedding: seeded random projection of the hashed
    bag-of-tokens vector, L2-normalized."""
    if not query or not tokenize(query):
        raise ValueError("query must be a nonempty string")
    bag = bag_of_tokens(query)
    vec = _text_projection(seed, dim) @ bag
    return SemanticEmbedding(values=vec / np.linalg.norm(vec), modality="text")


def stub_audio_encode(wave: Waveform, seed: int, dim: int, n_mels: int = 64) -> SemanticEmbedding:
    """Deterministic audio embedding from gain-invariant log-mel statistics
    (per-band mean and std), projected through a seeded random matrix and
    L2-normalized. All-zero input returns :func:`silence_embedding`.
    """
    x = np.asarray(wave.samples)
    if len(x) < _STUB_STFT_LEN:
        raise ValueError(f"waveform shorter than one analysis window ({_STUB_STFT_LEN})")
    if np.max(np.abs(x)) == 0.0:
        return silence_embedding(dim)
    stats = _audio_stats(wave, n_mels)
    vec = _audio_projection(seed, dim, 2 * n_mels) @ stats
    return SemanticEmbedding(values=vec / np.linalg.norm(vec), modality="audio")


def stub_frame_encode(wave: Waveform, seed: int, feat_dim: int, n_mels: int = 64,
                      frame_rate_hz: float = 50.0) -> FrameFeatures:
    """Frame-wise acoustic features: log-mel frames at ``frame_rate_hz``
    through a fixed seeded linear map. The stand-in for a pretrained
    frame-wise SSL encoder."""
    hop = int(round(wave.sample_rate / frame_rate_hz))
    window = min(2 * hop, len(wave.samples))
    window = max(window - window % 2, 32)
    frames = _frame_signal(np.asarray(wave.samples, dtype=np.float64), window, hop)
    win = np.hanning(window)
    spec = np.abs(np.fft.rfft(frames * win, axis=1)) ** 2
    mel = spec @ mel_filterbank(n_mels, window, wave.sample_rate).T
    logmel = np.log(mel + _MEL_FLOOR)
    feats = logmel @ _frame_projection(seed, feat_dim, n_mels).T
    return FrameFeatures(values=feats, frame_rate_hz=wave.sample_rate / hop)


class EncoderSuite:
    """Bundles the text, audio, and frame encoders behind one interface.

    When ``frozen`` is true the suite owns no trainable state and repeated
    calls are bitwise identical.
    """

    def __init__(self, kind: str, seed: int, embed_dim: int, frame_feat_dim: int,
                 mel_bands: int = 64, frame_rate_hz: float = 50.0,
                 text_tower: nn.Module | None = None,
                 audio_tower: nn.Module | None = None,
                 frozen: bool = True):
        if kind not in ("stub", "toy"):
            raise ValueError(f"unknown suite kind {kind!r}")
        if kind == "toy" and (text_tower is None or audio_tower is None):
            raise ValueError("toy suite requires trained towers")
        self.kind = kind
        self.seed = seed
        self.embed_dim = embed_dim
        self.frame_feat_dim = frame_feat_dim
        self.mel_bands = mel_bands
        self.frame_rate_hz = frame_rate_hz
        self.text_tower = text_tower
        self.audio_tower = audio_tower
        self.frozen = frozen
        if frozen:
            for tower in (text_tower, audio_tower):
                if tower is not None:
                    tower.eval()
                    for p in tower.parameters():
                        p.requires_grad_(False)

    def encode_text(self, query: str) -> SemanticEmbedding:
        if self.kind == "stub":
            return stub_text_encode(query, self.seed, self.embed_dim)
        if not query or not tokenize(query):
            raise ValueError("query must be a nonempty string")
        bag = torch.from_numpy(bag_of_tokens(query)).float()
        with torch.no_grad():
            vec = self.text_tower(bag.unsqueeze(0)).squeeze(0)
        vec = F.normalize(vec, dim=0).numpy().astype(np.float64)
        return SemanticEmbedding(values=vec, modality="text")

    def encode_audio(self, wave: Waveform) -> SemanticEmbedding:
        if self.kind == "stub":
            return stub_audio_encode(wave, self.seed, self.embed_dim, self.mel_bands)
        if np.max(np.abs(wave.samples)) == 0.0:
            return silence_embedding(self.embed_dim)
        stats = torch.from_numpy(_audio_stats(wave, self.mel_bands)).float()
        with torch.no_grad():
            vec = self.audio_tower(stats.unsqueeze(0)).squeeze(0)
        vec = F.normalize(vec, dim=0).numpy().astype(np.float64)
        return SemanticEmbedding(values=vec, modality="audio")

    def encode_frames(self, wave: Waveform) -> FrameFeatures:
        return stub_frame_encode(wave, self.seed, self.frame_feat_dim,
                                 self.mel_bands, self.frame_rate_hz)

    def trainable_parameters(self) -> list[torch.Tensor]:
        params: list[torch.Tensor] = []
        for tower in (self.text_tower, self.audio_tower):
            if tower is not None:
                params.extend(p for p in tower.parameters() if p.requires_grad)
        return params

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.kind}|{self.seed}|{self.embed_dim}|{self.frame_feat_dim}|"
                 f"{self.mel_bands}|{self.frame_rate_hz}".encode())
        for tower in (self.text_tower, self.audio_tower):
            if tower is not None:
                for name, p in sorted(tower.state_dict().items()):
                    h.update(name.encode())
                    h.update(p.numpy().tobytes())
        return h.hexdigest()

    def state(self) -> dict:
        out = {
            "kind": self.kind,
            "seed": self.seed,
            "embed_dim": self.embed_dim,
            "frame_feat_dim": self.frame_feat_dim,
            "mel_bands": self.mel_bands,
            "frame_rate_hz": self.frame_rate_hz,
        }
        if self.kind == "toy":
            out["text_tower"] = self.text_tower.state_dict()
            out["audio_tower"] = self.audio_tower.state_dict()
        return out

    @classmethod
    def from_state(cls, state: dict) -> "EncoderSuite":
        kind = state["kind"]
        text_tower = audio_tower = None
        if kind == "toy":
            text_tower = _TextTower(state["embed_dim"])
            audio_tower = _AudioTower(state["embed_dim"], state["mel_bands"])
            text_tower.load_state_dict(state["text_tower"])
            audio_tower.load_state_dict(state["audio_tower"])
        return cls(
            kind=kind,
            seed=state["seed"],
            embed_dim=state["embed_dim"],
            frame_feat_dim=state["frame_feat_dim"],
            mel_bands=state["mel_bands"],
            frame_rate_hz=state["frame_rate_hz"],
            text_tower=text_tower,
            audio_tower=audio_tower,
        )


def stub_suite(seed: int, embed_dim: int, frame_feat_dim: int,
               mel_bands: int = 64, frame_rate_hz: float = 50.0) -> EncoderSuite:
    return EncoderSuite(kind="stub", seed=seed, embed_dim=embed_dim,
                        frame_feat_dim=frame_feat_dim, mel_bands=mel_bands,
                        frame_rate_hz=frame_rate_hz)


def _audio_stats(wave: Waveform, n_mels: int) -> np.ndarray:
    logmel = log_mel_frames(wave, n_mels)
    mean = logmel.mean(axis=0)
    mean = mean - mean.mean()
    return np.concatenate([mean, logmel.std(axis=0)])


class _TextTower(nn.Module):
    def __init__(self, embed_dim: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(VOCAB_SIZE, hidden), nn.ReLU(), nn.Linear(hidden, embed_dim)
        )

    def forward(self, x):
        return self.net(x)


class _AudioTower(nn.Module):
    def __init__(self, embed_dim: int, n_mels: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2 * n_mels, hidden), nn.ReLU(), nn.Linear(hidden, embed_dim)
        )

    def forward(self, x):
        return self.net(x)


def toy_clap_train(paired_corpus: list[tuple[str, Waveform]], epochs: int,
                   embed_dim: int = 64, frame_feat_dim: int = 16,
                   mel_bands: int = 64, seed: int = 7, lr: float = 1e-3,
                   batch_size: int = 32, temperature: float = 0.07) -> EncoderSuite:
    """Train the toy contrastive suite on (text, audio) pairs.

    Uses a symmetric InfoNCE loss over in-batch negatives. The returned
    suite is frozen.

    Raises:
        ValueError: if the corpus contains fewer than 2 distinct text
            classes (the contrastive loss is degenerate).
    """
    texts = [t for t, _ in paired_corpus]
    if len(set(texts)) < 2:
        raise ValueError("toy contrastive training needs >= 2 distinct text classes")

    bags = torch.from_numpy(np.stack([bag_of_tokens(t) for t in texts])).float()
    stats = torch.from_numpy(
        np.stack([_audio_stats(w, mel_bands) for _, w in paired_corpus])
    ).float()

    torch.manual_seed(seed)
    text_tower = _TextTower(embed_dim)
    audio_tower = _AudioTower(embed_dim, mel_bands)
    opt = torch.optim.Adam(
        list(text_tower.parameters()) + list(audio_tower.parameters()), lr=lr
    )
    gen = torch.Generator().manual_seed(seed)
    n = len(paired_corpus)
    for _ in range(epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            te = F.normalize(text_tower(bags[idx]), dim=1)
            ae = F.normalize(audio_tower(stats[idx]), dim=1)
            logits = te @ ae.T / temperature
            # Same-text entries in a batch are all valid matches; mask the
            # softmax targets accordingly so duplicated classes don't fight.
            labels = torch.arange(len(idx))
            loss = 0.5 * (
                F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels)
            )
            opt.zero_grad()
            loss.backward()
            opt.step()

    return EncoderSuite(kind="toy", seed=seed, embed_dim=embed_dim,
                        frame_feat_dim=frame_feat_dim, mel_bands=mel_bands,
                        text_tower=text_tower, audio_tower=audio_tower)


def contrastive_loss(text_emb: torch.Tensor, audio_emb: torch.Tensor,
                     temperature: float = 0.07) -> torch.Tensor:
    """Symmetric InfoNCE over in-batch negatives; rows are paired."""
    te = F.normalize(text_emb, dim=1)
    ae = F.normalize(audio_emb, dim=1)
    logits = te @ ae.T / temperature
    labels = torch.arange(len(te))
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


class FeatureExtractor(nn.Module):
    """Trainable front end: STFT magnitudes projected to the model dim,
    followed by self-attention layers. Output keeps the STFT frame count.
    """

    def __init__(self, window_len: int = 512, hop_len: int = 128, dim: int = 64,
                 heads: int = 4, layers: int = 3):
        super().__init__()
        self.window_len = window_len
        self.hop_len = hop_len
        self.dim = dim
        n_bins = window_len // 2 + 1
        self.input_proj = nn.Linear(n_bins, dim)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(layers))
        self.register_buffer("window", torch.hann_window(window_len, periodic=True))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: [B, T] waveform batch -> [B, frames, dim]."""
        if x.dim() != 2:
            raise ValueError(f"expected [B, T] input, got shape {tuple(x.shape)}")
        spec = torch.stft(
            x, self.window_len, self.hop_len, window=self.window.to(x.dtype),
            center=True, pad_mode="reflect", return_complex=True,
        )
        mag = spec.abs().transpose(-1, -2)  # [B, frames, bins]
        h = self.input_proj(torch.log1p(mag))
        h = h + sinusoidal_positions(h.shape[1], self.dim, dtype=h.dtype)
        for block in self.blocks:
            h = block(h)
        return h


def fe_forward(model: FeatureExtractor, mixture: Waveform) -> FrameFeatures:
    """Run the feature extractor on one waveform."""
    x = torch.from_numpy(np.asarray(mixture.samples, dtype=np.float32)).unsqueeze(0)
    with torch.no_grad():
        out = model(x).squeeze(0)
    frame_rate = mixture.sample_rate / model.hop_len
    return FrameFeatures(values=out.numpy(), frame_rate_hz=frame_rate)
