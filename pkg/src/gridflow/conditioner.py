"""Mel-spectrogram conditioner: analysis, upsampling, and grid layout.

Analysis: centered frames (reflect padding of win/2), periodic Hann window,
magnitude FFT, 80 triangular mel filters (HTK scale, peak 1) spanning 0 to
Nyquist, log with a 1e-5 clamp. Frame count is exactly ceil(n_samples/hop),
so hop * n_frames always covers the padded waveform.

Upsampling to sample rate: two single-channel transposed 2-D convs, each
with time stride 16 and kernel (3, 32), pads (1, 8), followed by leaky ReLU
(slope 0.4). Together they stretch time by hop = 256 while preserving the
mel axis. The result is cut to h*w samples and squeezed into an
(n_mels, h, w) grid column-major, exactly like the waveform, so grid entry
(m, i, j) conditions waveform grid entry (i, j). Per-flow copies are then
row-permuted cumulatively to track the latent's row order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ValidationError
from .network import NormedWeight
from .signal import Permutation, Waveform

LEAKY_SLOPE = 0.4
LOG_FLOOR = 1e-5


@dataclass
class MelConfig:
    n_mels: int = 80
    n_fft: int = 1024
    hop: int = 256
    win: int = 1024

    def __post_init__(self):
        if self.win > self.n_fft:
            raise ValidationError("window longer than FFT size")
        if self.hop < 1 or self.win < 1:
            raise ValidationError("hop and window must be positive")


@dataclass
class MelSpectrogram:
    """Log-mel frames, one row per frame."""

    frames: np.ndarray  # (n_frames, n_mels)
    sample_rate: int
    config: MelConfig

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters, peak 1, 0..Nyquist."""
    nyquist = sample_rate / 2.0
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, len(bin_freqs)))
    for m in range(n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (bin_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - center, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_spectrogram(wav: Waveform, config: MelConfig | None = None) -> MelSpectrogram:
    """Log-mel analysis with exactly ceil(n_samples / hop) frames."""
    cfg = config or MelConfig()
    x = np.asarray(wav.samples, dtype=np.float64)
    if len(x) < cfg.win:
        raise ValidationError(
            f"waveform of {len(x)} samples is shorter than the {cfg.win}-sample window"
        )
    n_frames = -(-len(x) // cfg.hop)
    half = cfg.win // 2
    padded = np.pad(x, (half, half + cfg.hop), mode="reflect")
    window = np.hanning(cfg.win + 1)[:-1]  # periodic Hann
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.win)[:: cfg.hop]
    frames = frames[:n_frames] * window
    mag = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1))
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, wav.sample_rate)
    mel = np.log(np.maximum(mag @ fb.T, LOG_FLOOR))
    return MelSpectrogram(frames=mel, sample_rate=wav.sample_rate, config=cfg)


@dataclass
class UpsamplerParams:
    """Two strided transposed-conv layers stretching mel frames to samples."""

    kernel1: NormedWeight  # (1, 1, 3, 2*stride)
    bias1: Parameter
    kernel2: NormedWeight
    bias2: Parameter
    stride: int

    def parameters(self) -> list[Parameter]:
        return (
            self.kernel1.parameters()
            + [self.bias1]
            + self.kernel2.parameters()
            + [self.bias2]
        )

    @property
    def total_stride(self) -> int:
        return self.stride * self.stride


def init_upsampler(
    hop: int = 256, rng=None, dtype=np.float32, weight_norm: bool = True
) -> UpsamplerParams:
    """Build the upsampler for a given hop; hop must be a perfect square of the stride pair."""
    stride = int(round(hop**0.5))
    if stride * stride != hop:
        raise ValidationError(f"hop {hop} is not a product of two equal strides")
    if rng is None:
        rng = np.random.default_rng(0)

    def kernel(pname):
        shape = (1, 1, 3, 2 * stride)
        v = Parameter((rng.standard_normal(shape) * 0.05).astype(dtype), f"{pname}.v")
        if not weight_norm:
            return NormedWeight(v, None)
        g0 = np.sqrt((v.data.astype(np.float64) ** 2).sum()).reshape(1).astype(dtype)
        return NormedWeight(v, Parameter(g0, f"{pname}.g"))

    return UpsamplerParams(
        kernel1=kernel("upsampler.kernel1"),
        bias1=Parameter(np.zeros((), dtype=dtype), "upsampler.bias1"),
        kernel2=kernel("upsampler.kernel2"),
        bias2=Parameter(np.zeros((), dtype=dtype), "upsampler.bias2"),
        stride=stride,
    )


def upsample(mel_frames, up: UpsamplerParams) -> Tensor:
    """(n_frames, n_mels) log-mel -> (n_mels, n_frames * hop) features."""
    x = mel_frames if isinstance(mel_frames, Tensor) else Tensor(np.asarray(mel_frames))
    feat = ad.transpose(x, (1, 0))  # mel bands become rows
    for kern, bias in ((up.kernel1, up.bias1), (up.kernel2, up.bias2)):
        k = ad.reshape(kern.tensor(), kern.v.data.shape[-2:])
        feat = ad.conv2d_transpose(
            feat, k, bias, stride_t=up.stride, pad=(1, up.stride // 2)
        )
        feat = ad.leaky_relu(feat, LEAKY_SLOPE)
    return feat


def build_conditioner_grid(
    features, h: int, permutations: list[Permutation]
) -> list[Tensor]:
    """Cut features to h*w samples, squeeze, and track per-flow row orders.

    Returns one (M, h, w) grid per flow: grid k is the squeezed features
    with permutations 0..k-1 applied cumulatively, matching the row order
    the k-th flow's input arrives in.
    """
    ft = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
    n_mels, t = ft.data.shape
    if t % h != 0:
        if t < h:
            raise ValidationError(f"features cover {t} samples, need at least {h}")
        ft = ad.narrow(ft, 1, 0, t - t % h)
        t = ft.data.shape[1]
    w = t // h
    # column-major squeeze on the time axis, matching the waveform layout
    grid = ad.transpose(ad.reshape(ft, (n_mels, w, h)), (0, 2, 1))
    grids = [grid]
    for perm in permutations[:-1]:
        grid = ad.permute_rows(grid, perm.row_map)
        grids.append(grid)
    return grids


def conditioner_grids_for_length(
    features, n_samples: int, h: int, permutations: list[Permutation]
) -> list[Tensor]:
    """Like build_conditioner_grid but first cut features to exactly n_samples."""
    ft = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
    t = ft.data.shape[1]
    if t < n_samples:
        raise ValidationError(f"features cover {t} samples, need {n_samples}")
    if t > n_samples:
        ft = ad.narrow(ft, 1, 0, n_samples)
    return build_conditioner_grid(ft, h, permutations)
