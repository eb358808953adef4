"""Stage 2 networks: separation model, conditional denoiser, discriminator.

Both the separator (ASM) and the conditional denoiser (CD) share the same
trunk: a PQMF + per-band STFT front end, four strided conv encoder blocks
and four transposed-conv decoder blocks (each conv -> GELU -> BiLSTM over
time), frequency-axis conformer attention after blocks 2, 4, 6, 8, and an
iSTFT + iPQMF back end. The ASM additionally applies target-embedding
cross-attention (TEACA) before every decoder block and emits per-frame
condition vectors from its four decoder feature maps; the CD instead takes
those condition vectors as extra input channels.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import dsp
from .config import DiscriminatorConfig, DspConfig, SeparatorConfig


def _align_frames(x: torch.Tensor, n_frames: int) -> torch.Tensor:
    """Nearest-frame interpolation along the last axis of [B, C, T]."""
    if x.shape[-1] == n_frames:
        return x
    return F.interpolate(x, size=n_frames, mode="nearest")


class SubbandSTFT:
    """Waveform <-> 8-channel sub-band spectrogram (4 bands x real/imag)."""

    def __init__(self, dsp_cfg: DspConfig):
        self.bank = dsp.design_pqmf(
            dsp_cfg.pqmf_bands, dsp_cfg.pqmf_taps, dsp_cfg.pqmf_target_atten_db
        )
        self.window = dsp_cfg.stft_window
        self.hop = dsp_cfg.stft_hop
        self.n_bins = self.window // 2 + 1

    def pad_length(self, T: int) -> int:
        # Tail margin of one filter length keeps filterbank edge effects
        # out of the analysed content; round up to a multiple of 4.
        return -(-(T + self.bank.taps_len) // 4) * 4

    def encode(self, wave: torch.Tensor) -> tuple[torch.Tensor, int]:
        """[B, T] -> ([B, 8, bins, frames], band_samples)."""
        B, T = wave.shape
        Tp = self.pad_length(T)
        x = F.pad(wave, (0, Tp - T))
        bands = dsp.pqmf_analyze(self.bank, x)  # [B, 4, Tp/4]
        n = bands.shape[-1]
        spec = dsp.stft(bands.reshape(B * 4, n), self.window, self.hop)
        spec = spec.reshape(B, 4, spec.shape[-2], spec.shape[-1])  # [B,4,frames,bins]
        ch = torch.view_as_real(spec)  # [B,4,frames,bins,2]
        ch = ch.permute(0, 1, 4, 3, 2).reshape(B, 8, self.n_bins, spec.shape[-2])
        return ch, n

    def decode(self, ch: torch.Tensor, band_samples: int, out_len: int) -> torch.Tensor:
        """[B, 8, bins, frames] -> [B, out_len]."""
        B = ch.shape[0]
        parts = ch.reshape(B, 4, 2, self.n_bins, ch.shape[-1])
        parts = parts.permute(0, 1, 4, 3, 2).contiguous()  # [B,4,frames,bins,2]
        spec = torch.view_as_complex(parts)
        bands = dsp.istft(
            spec.reshape(B * 4, spec.shape[-2], spec.shape[-1]),
            self.window, self.hop, band_samples,
        ).reshape(B, 4, band_samples)
        wave = dsp.pqmf_synthesize(self.bank, bands)
        return wave[..., :out_len]

    def frames_for_length(self, T: int) -> int:
        return (self.pad_length(T) // 4) // self.hop + 1


class TRCNNBlock(nn.Module):
    """Conv2d (or transposed) -> GELU -> residual BiLSTM over time."""

    def __init__(self, in_ch: int, out_ch: int, lstm_dim: int | None,
                 kernel: int = 3, stride: int = 2, transpose: bool = False):
        super().__init__()
        pad = kernel // 2
        if transpose:
            self.conv = nn.ConvTranspose2d(
                in_ch, out_ch, kernel, stride=stride, padding=pad, output_padding=stride - 1
            )
        else:
            self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=pad)
        self.act = nn.GELU()
        if lstm_dim is not None:
            hidden = max(lstm_dim // 2, 1)
            self.lstm = nn.LSTM(out_ch, hidden, batch_first=True, bidirectional=True)
            self.lstm_proj = nn.Linear(2 * hidden, out_ch)
        else:
            self.lstm = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.act(self.conv(x))
        if self.lstm is not None:
            b, c, f, t = x.shape
            seq = x.permute(0, 2, 3, 1).reshape(b * f, t, c)
            out, _ = self.lstm(seq)
            out = self.lstm_proj(out).reshape(b, f, t, c).permute(0, 3, 1, 2)
            x = x + out
        return x


class FABlock(nn.Module):
    """Conformer layer recalibrating features along the frequency axis."""

    def __init__(self, channels: int, heads: int = 2, kernel: int = 9):
        super().__init__()
        self.norm_ff1 = nn.LayerNorm(channels)
        self.ff1 = nn.Sequential(
            nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels)
        )
        self.norm_attn = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm_conv = nn.LayerNorm(channels)
        self.conv = nn.Sequential(
            nn.Conv1d(channels, channels, kernel, padding=kernel // 2, groups=channels),
            nn.Conv1d(channels, channels, 1),
            nn.GELU(),
        )
        self.norm_ff2 = nn.LayerNorm(channels)
        self.ff2 = nn.Sequential(
            nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels)
        )
        self.norm_out = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, f, t = x.shape
        h = x.permute(0, 3, 2, 1).reshape(b * t, f, c)  # tokens = frequency bins
        h = h + 0.5 * self.ff1(self.norm_ff1(h))
        a = self.norm_attn(h)
        h = h + self.attn(a, a, a, need_weights=False)[0]
        cv = self.norm_conv(h).transpose(1, 2)
        h = h + self.conv(cv).transpose(1, 2)
        h = h + 0.5 * self.ff2(self.norm_ff2(h))
        h = self.norm_out(h)
        return h.reshape(b, t, f, c).permute(0, 3, 2, 1)


class TEACABlock(nn.Module):
    """Channel-adaptive cross-attention: the target audio embedding is
    projected to the query; per-channel feature statistics form the keys
    and values. The attended vector gates the channels."""

    def __init__(self, channels: int, embed_dim: int, dim: int = 64, heads: int = 8):
        super().__init__()
        self.q_proj = nn.Linear(embed_dim, dim)
        self.kv_proj = nn.Linear(2, dim)
        self.channel_embed = nn.Parameter(torch.zeros(channels, dim))
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.gate_proj = nn.Linear(dim, channels)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        stats = torch.stack([x.mean(dim=(2, 3)), x.std(dim=(2, 3))], dim=-1)  # [B,C,2]
        kv = self.kv_proj(stats) + self.channel_embed
        q = self.q_proj(emb).unsqueeze(1)
        attended, _ = self.attn(q, kv, kv, need_weights=False)
        # 2*sigmoid keeps the block neutral (unit gain) at zero weights.
        gate = 2.0 * torch.sigmoid(self.gate_proj(attended.squeeze(1)))
        return x * gate.unsqueeze(-1).unsqueeze(-1)


class SeparatorTrunk(nn.Module):
    """Shared 8-block encoder/decoder stack with additive skips.

    ``use_teaca`` adds a TEACA unit before each decoder block (the ASM
    variant); without it the trunk is the CD variant and owns no
    cross-attention parameters at all.
    """

    def __init__(self, in_channels: int, cfg: SeparatorConfig, embed_dim: int = 0,
                 use_teaca: bool = False):
        super().__init__()
        ch = cfg.channels
        if len(ch) != 8:
            raise ValueError("separator needs exactly 8 block channel counts")
        lstm = list(cfg.bilstm_dims) + [None]  # block 8 has no BiLSTM
        self.enc = nn.ModuleList()
        prev = in_channels
        for i in range(4):
            self.enc.append(TRCNNBlock(prev, ch[i], lstm[i], cfg.conv_kernel, cfg.conv_stride))
            prev = ch[i]
        self.dec = nn.ModuleList()
        for i in range(4, 8):
            self.dec.append(
                TRCNNBlock(prev, ch[i], lstm[i], cfg.conv_kernel, cfg.conv_stride,
                           transpose=True)
            )
            prev = ch[i]
        self.fa_enc = nn.ModuleList(
            FABlock(ch[i], cfg.fa_heads, cfg.fa_kernel) for i in (1, 3)
        )
        self.fa_dec = nn.ModuleList(
            FABlock(ch[i], cfg.fa_heads, cfg.fa_kernel) for i in (5, 7)
        )
        if use_teaca:
            self.teaca = nn.ModuleList(
                TEACABlock(c, embed_dim, cfg.teaca_dim, cfg.teaca_heads)
                for c in (ch[3], ch[4], ch[5], ch[6])
            )
        else:
            self.teaca = None
        self.head = nn.Conv2d(ch[7], 8, 1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None = None
                ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Returns (output channels, the four decoder feature maps)."""
        in_shape = x.shape[-2:]
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i == 1:
                x = self.fa_enc[0](x)
            elif i == 3:
                x = self.fa_enc[1](x)
            skips.append(x)
        dec_maps = []
        for j, block in enumerate(self.dec):
            ref = skips[3 - j]
            if j > 0:
                # Crop the transposed conv's overshoot, then add the skip.
                x = x[..., : ref.shape[2], : ref.shape[3]] + ref
            if self.teaca is not None:
                x = self.teaca[j](x, emb)
            x = block(x)
            if j == 1:
                x = self.fa_dec[0](x)
            elif j == 3:
                x = self.fa_dec[1](x)
            dec_maps.append(x)
        # The last transposed conv overshoots; crop back to the input grid.
        dec_maps[-1] = dec_maps[-1][..., : in_shape[0], : in_shape[1]]
        return self.head(dec_maps[-1]), dec_maps


class ASMModel(nn.Module):
    """Audio separation model: mixture + target embedding -> target estimate
    and the condition stack for the denoiser."""

    def __init__(self, dsp_cfg: DspConfig, sep_cfg: SeparatorConfig,
                 embed_dim: int, frame_feat_dim: int):
        super().__init__()
        self.dsp_cfg = dsp_cfg
        self.sep_cfg = sep_cfg
        self.embed_dim = embed_dim
        self.frame_feat_dim = frame_feat_dim
        self.subband = SubbandSTFT(dsp_cfg)
        self.trunk = SeparatorTrunk(
            8 + frame_feat_dim, sep_cfg, embed_dim=embed_dim, use_teaca=True
        )
        ch = sep_cfg.channels
        self.cond_projectors = nn.ModuleList(
            nn.Linear(ch[i], sep_cfg.cond_proj_dim) for i in (4, 5, 6, 7)
        )

    @property
    def cond_dim(self) -> int:
        return 4 * self.sep_cfg.cond_proj_dim

    def forward(self, mixture: torch.Tensor, target_emb: torch.Tensor,
                frame_feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """mixture [B, T]; target_emb [B, D]; frame_feats [B, frames, feat]
        -> (estimate [B, T], condition stack [B, frames', cond_dim])."""
        if not torch.isfinite(mixture).all():
            raise ValueError("mixture contains non-finite samples")
        if target_emb.shape[-1] != self.embed_dim:
            raise ValueError(
                f"embedding dim {target_emb.shape[-1]} != model dim {self.embed_dim}"
            )
        B, T = mixture.shape
        ch, band_samples = self.subband.encode(mixture)
        n_frames = ch.shape[-1]
        feats = _align_frames(frame_feats.transpose(1, 2), n_frames)  # [B, feat, T']
        feats = feats.unsqueeze(2).expand(-1, -1, ch.shape[2], -1)
        x = torch.cat([ch, feats], dim=1)
        out_ch, dec_maps = self.trunk(x, target_emb)
        estimate = self.subband.decode(out_ch, band_samples, T)
        cond = self.build_condition(dec_maps, n_frames)
        return estimate, cond

    def build_condition(self, dec_maps: list[torch.Tensor], n_frames: int) -> torch.Tensor:
        """Project the four decoder feature maps to per-frame vectors and
        channel-concatenate them at a common frame rate."""
        parts = []
        for proj, fmap in zip(self.cond_projectors, dec_maps):
            pooled = fmap.mean(dim=2).transpose(1, 2)  # [B, T_j, C_j]
            vec = proj(pooled).transpose(1, 2)  # [B, P, T_j]
            parts.append(_align_frames(vec, n_frames))
        return torch.cat(parts, dim=1).transpose(1, 2)  # [B, n_frames, 4P]


class CDModel(nn.Module):
    """Conditional denoiser: the ASM trunk minus all TEACA units, with the
    condition stack entering as extra input channels."""

    def __init__(self, dsp_cfg: DspConfig, sep_cfg: SeparatorConfig, cond_dim: int):
        super().__init__()
        self.dsp_cfg = dsp_cfg
        self.sep_cfg = sep_cfg
        self.cond_dim = cond_dim
        self.subband = SubbandSTFT(dsp_cfg)
        self.cond_adapter = nn.Linear(cond_dim, sep_cfg.cond_channels)
        self.trunk = SeparatorTrunk(8 + sep_cfg.cond_channels, sep_cfg, use_teaca=False)

    def forward(self, noisy: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """noisy [B, T]; cond [B, frames, cond_dim] -> [B, T]."""
        if cond.shape[-1] != self.cond_dim:
            raise ValueError(f"condition dim {cond.shape[-1]} != {self.cond_dim}")
        B, T = noisy.shape
        n_frames = self.subband.frames_for_length(T)
        if abs(cond.shape[1] - n_frames) > 1:
            raise ValueError(
                f"condition frames {cond.shape[1]} incompatible with "
                f"{n_frames} audio frames"
            )
        ch, band_samples = self.subband.encode(noisy)
        c = self.cond_adapter(cond).transpose(1, 2)  # [B, cond_ch, frames]
        c = _align_frames(c, ch.shape[-1])
        c = c.unsqueeze(2).expand(-1, -1, ch.shape[2], -1)
        x = torch.cat([ch, c], dim=1)
        out_ch, _ = self.trunk(x)
        return self.subband.decode(out_ch, band_samples, T)


class SpectrogramScaleDiscriminator(nn.Module):
    """Five strided 2-D convolutions over one log-magnitude STFT."""

    def __init__(self, window: int, channels: int = 12):
        super().__init__()
        self.window = window
        self.hop = window // 2
        self.convs = nn.ModuleList([
            nn.Conv2d(1, channels, (3, 9), (2, 2), (1, 4)),
            nn.Conv2d(channels, channels, (3, 9), (2, 2), (1, 4)),
            nn.Conv2d(channels, channels, (3, 9), (2, 2), (1, 4)),
            nn.Conv2d(channels, channels, (3, 3), (2, 1), (1, 1)),
        ])
        self.out = nn.Conv2d(channels, 1, (3, 3), 1, (1, 1))

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        spec = dsp.stft(wave, self.window, self.hop)
        mag = torch.log1p(spec.abs()).transpose(-1, -2).unsqueeze(1)  # [B,1,bins,frames]
        h = mag
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        return self.out(h)  # patch logits [B, 1, F', T']


class DiscriminatorModel(nn.Module):
    """Multi-scale spectrogram discriminator emitting per-scale patch logits."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        if len(cfg.windows) < 2:
            raise ValueError("discriminator needs at least 2 scales")
        self.windows = tuple(cfg.windows)
        self.scales = nn.ModuleList(
            SpectrogramScaleDiscriminator(w, cfg.channels) for w in cfg.windows
        )

    def forward(self, wave: torch.Tensor) -> list[torch.Tensor]:
        if wave.shape[-1] <= max(self.windows):
            raise ValueError(
                f"input length {wave.shape[-1]} must exceed the largest "
                f"STFT window {max(self.windows)}"
            )
        return [scale(wave) for scale in self.scales]


def _as_logit_list(d) -> list[torch.Tensor]:
    return [d] if torch.is_tensor(d) else list(d)


def lsgan_d_loss(d_real, d_fake) -> torch.Tensor:
    """Least-squares discriminator loss, averaged over patches and scales."""
    d_real, d_fake = _as_logit_list(d_real), _as_logit_list(d_fake)
    total = 0.0
    for dr, df in zip(d_real, d_fake, strict=True):
        if dr.shape != df.shape:
            raise ValueError(f"logit shape mismatch: {tuple(dr.shape)} vs {tuple(df.shape)}")
        total = total + 0.5 * (((dr - 1.0) ** 2).mean() + (df**2).mean())
    return total / len(d_real)


def lsgan_g_loss(d_fake) -> torch.Tensor:
    """Least-squares generator (adversarial) loss."""
    d_fake = _as_logit_list(d_fake)
    total = 0.0
    for df in d_fake:
        total = total + ((df - 1.0) ** 2).mean()
    return total / len(d_fake)
