"""Distance-driven fractional-delay warping of mono audio to each ear."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import AudioClip, PoseTrack, align_pose
from .errors import LengthMismatch, WrongChannelCount

SPEED_OF_SOUND = 343.0
EARS = ("left", "right")


@dataclass(frozen=True, eq=False)
class Warpfield:
    """Per-sample fractional read index into the source signal."""

    rho: np.ndarray
    sample_rate: float

    def __len__(self):
        return len(self.rho)


def rotate(quaternions, vectors):
    """Rotate ``vectors`` (K, 3) by unit quaternions (K, 4), scalar-last."""
    q = np.asarray(quaternions, float)
    v = np.asarray(vectors, float)
    u, w = q[..., :3], q[..., 3:4]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def ear_positions(track: PoseTrack, ear: str) -> np.ndarray:
    """Ear location for every pose: the ear offset rotated by the head orientation."""
    idx = EARS.index(ear)
    offset = np.broadcast_to(track.ear_offsets[idx], track.positions.shape)
    return rotate(track.quaternions, offset)


def ear_distances(track: PoseTrack, ear: str) -> np.ndarray:
    return np.linalg.norm(track.positions - ear_positions(track, ear), axis=1)


def compute_warpfield(track: PoseTrack, ear: str, sample_rate: float,
                      speed_of_sound: float = SPEED_OF_SOUND, n_samples: int | None = None) -> Warpfield:
    """rho(n) = n - (sample_rate / speed_of_sound) * distance(source, ear)(n).

    ``track`` must already hold one pose per audio sample.
    """
    if ear not in EARS:
        raise ValueError(f"ear must be 'left' or 'right', got {ear!r}")
    if not speed_of_sound > 0:
        raise ValueError("speed_of_sound must be positive")
    if n_samples is not None and n_samples != len(track):
        raise LengthMismatch(f"pose track has {len(track)} samples, audio has {n_samples}")
    c = sample_rate / speed_of_sound
    d = ear_distances(track, ear)
    rho = np.arange(len(track), dtype=np.float64) - c * d
    return Warpfield(rho, float(sample_rate))


def apply_warp(x: AudioClip, w: Warpfield) -> AudioClip:
    """Linear-interpolation read of ``x`` at the fractional indices ``w.rho``.

    Reads before sample 0 return silence; reads past the end clamp to the
    last sample.
    """
    if x.channels != 1:
        raise WrongChannelCount(f"apply_warp needs a mono clip, got {x.channels} channels")
    sig = x.samples[0]
    n = len(sig)
    if len(w.rho) != n:
        raise LengthMismatch(f"warpfield length {len(w.rho)} != signal length {n}")
    if n == 0:
        return AudioClip(np.zeros((1, 0)), x.sample_rate)
    rho = np.asarray(w.rho, float)
    lo = np.floor(rho)
    frac = rho - lo
    lo = lo.astype(np.int64)
    out = (1.0 - frac) * _read(sig, lo) + frac * _read(sig, lo + 1)
    return AudioClip(out, x.sample_rate)


def _read(sig, idx):
    vals = sig[np.clip(idx, 0, len(sig) - 1)]
    return np.where(idx < 0, 0.0, vals)


def warp_binaural(x: AudioClip, track: PoseTrack, sample_rate: float | None = None,
                  speed_of_sound: float = SPEED_OF_SOUND) -> AudioClip:
    """Warp a mono clip separately towards the left and right ear."""
    if sample_rate is None:
        sample_rate = x.sample_rate
    if len(x) == 0:
        return AudioClip(np.zeros((2, 0)), x.sample_rate)
    track = align_pose(track, x)
    chans = [apply_warp(x, compute_warpfield(track, ear, sample_rate, speed_of_sound, len(x))).samples[0]
             for ear in EARS]
    return AudioClip(np.stack(chans), x.sample_rate)
