"""Objective metrics: Wave L2, STFT amplitude/phase L2 and multi-resolution STFT loss."""
from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, duplicate_mono, read_wav
from .dsp_render import clip_id, read_manifest
from .errors import BadConfig, MissingPrediction, ShapeMismatch, SilentReference

LOG_EPS = 1e-7
SILENT_BIN = 1e-8
DEFAULT_RESOLUTIONS = ((512, 128), (1024, 256), (2048, 512))
METRIC_NAMES = ("wave_l2", "amplitude_l2", "phase_l2", "mrstft")


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    hop: int = 256
    window: str = "hann"
    center: bool = True

    def __post_init__(self):
        if not 0 < self.hop <= self.fft_size:
            raise BadConfig(f"need 0 < hop <= fft_size, got hop={self.hop}, fft_size={self.fft_size}")
        if self.window not in ("hann", "rect"):
            raise BadConfig(f"window must be 'hann' or 'rect', got {self.window!r}")


def _window(cfg: StftConfig) -> np.ndarray:
    if cfg.window == "rect":
        return np.ones(cfg.fft_size)
    # periodic Hann
    n = np.arange(cfg.fft_size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / cfg.fft_size)


def _reflect_pad(x, pad):
    # np.pad's reflect mode needs at least two samples
    if len(x) < 2:
        return np.pad(x, pad, mode="edge")
    return np.pad(x, pad, mode="reflect")


def stft(x, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """One-sided STFT, shape (frames, fft_size // 2 + 1).

    With centering the signal is reflect-padded by ``fft_size // 2`` and frame
    ``i`` is centred on sample ``i * hop``, giving ``ceil(N / hop)`` frames.
    Without centering frames start at ``i * hop`` and must fit in the signal.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) < 1:
        raise BadConfig("stft needs a non-empty 1-D signal")
    n = len(x)
    if cfg.center:
        pad = cfg.fft_size // 2
        xp = _reflect_pad(x, pad)
        n_frames = -(-n // cfg.hop)
        need = (n_frames - 1) * cfg.hop + cfg.fft_size
        if len(xp) < need:
            xp = np.pad(xp, (0, need - len(xp)))
    else:
        if n < cfg.fft_size:
            raise BadConfig(f"signal of {n} samples is shorter than fft_size {cfg.fft_size} without centering")
        xp = x
        n_frames = 1 + (n - cfg.fft_size) // cfg.hop
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(xp[idx] * _window(cfg), axis=1)


def _pair(pred, ref):
    p = pred.samples if isinstance(pred, AudioClip) else np.atleast_2d(np.asarray(pred, float))
    r = ref.samples if isinstance(ref, AudioClip) else np.atleast_2d(np.asarray(ref, float))
    if p.shape != r.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} != reference shape {r.shape}")
    return p, r


def wave_l2(pred, ref) -> float:
    p, r = _pair(pred, ref)
    return float(np.mean((p - r) ** 2))


def wrap_phase(d):
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - d, 2.0 * np.pi)


def _spectra(p, r, cfg):
    return [(stft(pc, cfg), stft(rc, cfg)) for pc, rc in zip(p, r)]


def amplitude_l2(pred, ref, cfg: StftConfig = StftConfig()) -> float:
    p, r = _pair(pred, ref)
    return float(np.mean([np.mean((np.abs(P) - np.abs(R)) ** 2) for P, R in _spectra(p, r, cfg)]))


def phase_error(P, R) -> np.ndarray:
    """Squared wrapped phase difference per bin, zero where both bins are silent."""
    d2 = wrap_phase(np.angle(P) - np.angle(R)) ** 2
    silent = (np.abs(P) < SILENT_BIN) & (np.abs(R) < SILENT_BIN)
    return np.where(silent, 0.0, d2)


def phase_l2(pred, ref, cfg: StftConfig = StftConfig()) -> float:
    p, r = _pair(pred, ref)
    return float(np.mean([np.mean(phase_error(P, R)) for P, R in _spectra(p, r, cfg)]))


def stft_loss_terms(pred_ch, ref_ch, cfg: StftConfig) -> tuple[float, float, float]:
    """(spectral convergence, mean abs log-magnitude error, mean abs magnitude error)."""
    P = np.abs(stft(pred_ch, cfg))
    R = np.abs(stft(ref_ch, cfg))
    ref_norm = np.linalg.norm(R)
    if ref_norm == 0.0:
        raise SilentReference("reference magnitude spectrogram is all zero")
    sc = np.linalg.norm(R - P) / ref_norm
    log_mag = np.mean(np.abs(np.log(R + LOG_EPS) - np.log(P + LOG_EPS)))
    lin_mag = np.mean(np.abs(R - P))
    return float(sc), float(log_mag), float(lin_mag)


def mrstft(pred, ref, resolutions=DEFAULT_RESOLUTIONS, window: str = "hann") -> float:
    p, r = _pair(pred, ref)
    if not len(resolutions):
        raise BadConfig("mrstft needs at least one resolution")
    total = []
    for fft_size, hop in resolutions:
        cfg = StftConfig(int(fft_size), int(hop), window)
        for pc, rc in zip(p, r):
            total.append(sum(stft_loss_terms(pc, rc, cfg)))
    return float(np.mean(total))


@dataclass(frozen=True)
class MetricConfig:
    stft: StftConfig = StftConfig()
    resolutions: tuple = DEFAULT_RESOLUTIONS
    pesq_command: str = ""


def score(pred, ref, cfg: MetricConfig = MetricConfig()) -> dict[str, float]:
    return {
        "wave_l2": wave_l2(pred, ref),
        "amplitude_l2": amplitude_l2(pred, ref, cfg.stft),
        "phase_l2": phase_l2(pred, ref, cfg.stft),
        "mrstft": mrstft(pred, ref, cfg.resolutions, cfg.stft.window),
    }


def external_pesq(command: str, pred_path, ref_path) -> float:
    """Run a user-configured PESQ tool as ``<command> <ref> <pred>``; it must print one number."""
    out = subprocess.run(shlex.split(command) + [str(ref_path), str(pred_path)],
                         check=True, capture_output=True, text=True)
    return float(out.stdout.strip().split()[-1])


@dataclass
class MetricReport:
    rows: list[tuple[str, dict]] = field(default_factory=list)

    @property
    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            return {k: float("nan") for k in METRIC_NAMES}
        keys = self.rows[0][1].keys()
        return {k: float(np.mean([m[k] for _, m in self.rows])) for k in keys}

    def to_text(self) -> str:
        keys = list(self.rows[0][1]) if self.rows else list(METRIC_NAMES)
        lines = ["clip," + ",".join(keys)]
        for name, m in self.rows + [("AGGREGATE", self.aggregate)]:
            lines.append(name + "," + ",".join(repr(float(m[k])) for k in keys))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def evaluate_manifest(pred_dir, manifest, cfg: MetricConfig = MetricConfig()) -> MetricReport:
    """Score ``<pred_dir>/<clip>.wav`` against each manifest row's binaural file.

    Mono predictions are duplicated to both ears before scoring.
    """
    pred_dir = Path(pred_dir)
    report = MetricReport()
    for i, (_, _, bin_path) in enumerate(read_manifest(manifest), start=1):
        name = clip_id(bin_path)
        pred_path = pred_dir / f"{name}.wav"
        if not pred_path.is_file():
            raise MissingPrediction(i, pred_path)
        ref = read_wav(bin_path)
        pred = read_wav(pred_path)
        if pred.channels == 1:
            pred = duplicate_mono(pred)
        m = score(pred, ref, cfg)
        if cfg.pesq_command:
            m["pesq"] = external_pesq(cfg.pesq_command, pred_path, bin_path)
        report.rows.append((name, m))
    return report
