"""Log-mel front end, convolutional stem and transformer speech encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class EncoderConfig:
    mel_channels: int = 80
    window_ms: float = 25.0
    hop_ms: float = 10.0
    model_dim: int = 256
    layers: int = 4
    heads: int = 4
    kernel: int = 3
    ff_mult: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.kernel % 2 == 0:
            raise ValueError("stem kernel width must be odd")
        if self.mel_channels < 1:
            raise ValueError("mel_channels must be positive")


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T0, C)
    frame_rate: float

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class EncoderStates:
    h: torch.Tensor  # (T, d) or (B, T, d)
    lengths: torch.Tensor | None = None

    @property
    def T(self) -> int:
        return self.h.shape[-2]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-style filters, shape (n_mels, n_fft // 2 + 1)."""
    bins = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))
    fb = np.zeros((n_mels, bins.size))
    for i in range(n_mels):
        lo, mid, hi = edges[i : i + 3]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


_FB_CACHE: dict = {}


def frame_count(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


def extract_features(clip, cfg: EncoderConfig) -> MelSpectrogram:
    """Log-mel spectrogram with ``ceil(samples / hop)`` centered frames."""
    sr = clip.sample_rate
    win = int(round(cfg.window_ms * sr / 1000))
    hop = int(round(cfg.hop_ms * sr / 1000))
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size < win:
        raise ValueError(f"clip {getattr(clip, 'id', '')!r} shorter than one {cfg.window_ms} ms window")
    n_frames = frame_count(x.size, hop)
    pad = win // 2
    padded = np.pad(x, (pad, pad + win), mode="constant")
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * np.hanning(win + 1)[:-1]
    power = np.abs(np.fft.rfft(frames, n=win, axis=1)) ** 2
    key = (cfg.mel_channels, win, sr)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(cfg.mel_channels, win, sr)
    mel = power @ _FB_CACHE[key].T
    return MelSpectrogram(np.log(mel + LOG_FLOOR), 1000.0 / cfg.hop_ms)


def stem_length(t0):
    return -(-t0 // 2)


def sinusoids(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    inv = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    out = torch.zeros(length, dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(pos * inv)
    out[:, 1::2] = torch.cos(pos * inv[: dim // 2])
    return out.to(dtype)


def length_mask(lengths: torch.Tensor, T: int) -> torch.Tensor:
    """True on valid positions, shape (B, T)."""
    return torch.arange(T, device=lengths.device)[None, :] < lengths[:, None]


class ConvStem(nn.Module):
    """Two 1-D convolutions over time with GELU; the second has stride 2."""

    def __init__(self, in_channels: int, dim: int, kernel: int = 3):
        super().__init__()
        self.conv1 = nn.Conv1d(in_channels, dim, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(dim, dim, kernel, stride=2, padding=kernel // 2)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None):
        # x: (B, T0, C)
        if lengths is None:
            lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
        x = x * length_mask(lengths, x.shape[1])[..., None]
        y = F.gelu(self.conv1(x.transpose(1, 2)))
        # zero the padding so batched and single-clip outputs agree
        y = y * length_mask(lengths, y.shape[-1])[:, None, :]
        y = F.gelu(self.conv2(y))
        out_len = stem_length(lengths)
        y = y.transpose(1, 2) * length_mask(out_len, y.shape[-1])[..., None]
        return y, out_len


class SpeechEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = ConvStem(cfg.mel_channels, cfg.model_dim, cfg.kernel)
        # puts stem outputs on the same scale as the position signal
        self.stem_norm = nn.LayerNorm(cfg.model_dim)
        layer = nn.TransformerEncoderLayer(
            cfg.model_dim, cfg.heads, cfg.ff_mult * cfg.model_dim, cfg.dropout,
            activation="gelu", batch_first=True, norm_first=True,
        )
        self.layers = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.model_dim)
        # fixed per-channel feature standardization, set from training data
        self.register_buffer("feat_mean", torch.zeros(cfg.mel_channels))
        self.register_buffer("feat_std", torch.ones(cfg.mel_channels))

    def encode(self, s: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Transformer over stem outputs ``s`` of shape (B, T, d)."""
        T = s.shape[1]
        x = self.stem_norm(s) + sinusoids(T, s.shape[-1], s.dtype).to(s.device)
        pad = None if lengths is None else ~length_mask(lengths, T)
        x = self.layers(x, src_key_padding_mask=pad)
        x = self.norm(x)
        if lengths is not None:
            x = x * length_mask(lengths, T)[..., None]
        return x

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor | None = None):
        mel = (mel - self.feat_mean) / self.feat_std
        s, out_len = self.stem(mel, lengths)
        return EncoderStates(self.encode(s, out_len), out_len)


class TextEncoder(nn.Module):
    """Word-embedding transformer encoder used by the pipeline baseline."""

    def __init__(self, vocab_size: int, cfg: EncoderConfig):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, cfg.model_dim, padding_idx=0)
        layer = nn.TransformerEncoderLayer(
            cfg.model_dim, cfg.heads, cfg.ff_mult * cfg.model_dim, cfg.dropout,
            activation="gelu", batch_first=True, norm_first=True,
        )
        self.layers = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.model_dim)
        self.scale = math.sqrt(cfg.model_dim)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor):
        T = ids.shape[1]
        x = self.embed(ids) * self.scale + sinusoids(T, self.embed.embedding_dim).to(ids.device)
        x = self.layers(x, src_key_padding_mask=~length_mask(lengths, T))
        x = self.norm(x) * length_mask(lengths, T)[..., None]
        return EncoderStates(x, lengths)
