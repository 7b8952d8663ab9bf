"""Audio clips, pose tracks and their file formats.

WAV files are read and written with a small RIFF parser so that the exact
quantization rules (PCM16 rounding/clamping, lossless float32) are under our
control.  Pose tracks use a plain CSV layout::

    t,px,py,pz,qx,qy,qz,qw
    0.0,1.0,0.5,0.0,0.0,0.0,0.0,1.0
    ...

Positions are meters in listener coordinates (x front, y right, z up);
quaternions are scalar-last.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadRow,
    EmptyTrack,
    MalformedHeader,
    NonUniformRate,
    TruncatedData,
    UnsupportedEncoding,
    WrongChannelCount,
    ZeroNormQuaternion,
)

POSE_HEADER = ["t", "px", "py", "pz", "qx", "qy", "qz", "qw"]
DEFAULT_EAR_OFFSETS = ((0.0, -0.09, 0.0), (0.0, 0.09, 0.0))

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Multi-channel waveform, ``samples`` has shape (channels, N)."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] < 1:
            raise WrongChannelCount(f"samples must be (channels, N), got {s.shape}")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]

    @classmethod
    def mono(cls, x, sample_rate) -> "AudioClip":
        return cls(np.asarray(x, dtype=np.float64)[None, :], sample_rate)

    @classmethod
    def stereo(cls, left, right, sample_rate) -> "AudioClip":
        return cls(np.stack([np.asarray(left, float), np.asarray(right, float)]), sample_rate)


@dataclass(frozen=True)
class PoseSample:
    position: np.ndarray
    orientation: np.ndarray


@dataclass(frozen=True, eq=False)
class PoseTrack:
    """Uniformly sampled source pose relative to the listener.

    ``positions`` is (K, 3) meters, ``quaternions`` is (K, 4) as
    (qx, qy, qz, qw), ``ear_offsets`` is (2, 3) with the left ear first.
    ``start`` is the time of the first pose relative to audio sample 0.
    """

    rate: float
    positions: np.ndarray
    quaternions: np.ndarray
    ear_offsets: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_EAR_OFFSETS))
    start: float = 0.0

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"pose rate must be positive, got {self.rate}")
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        quat = np.asarray(self.quaternions, dtype=np.float64).reshape(-1, 4)
        if len(pos) != len(quat):
            raise ValueError("positions and quaternions differ in length")
        ears = np.asarray(self.ear_offsets, dtype=np.float64).reshape(2, 3)
        for a in (pos, quat, ears):
            a.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "quaternions", quat)
        object.__setattr__(self, "ear_offsets", ears)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i) -> PoseSample:
        return PoseSample(self.positions[i], self.quaternions[i])

    @classmethod
    def static(cls, position, quaternion=(0.0, 0.0, 0.0, 1.0), n=1, rate=120.0, ear_offsets=None):
        pos = np.tile(np.asarray(position, float), (n, 1))
        quat = np.tile(np.asarray(quaternion, float), (n, 1))
        if ear_offsets is None:
            ear_offsets = DEFAULT_EAR_OFFSETS
        return cls(rate, pos, quat, np.asarray(ear_offsets, float))

    def as_channels(self) -> np.ndarray:
        """Pose as a (7, K) array: px, py, pz, qx, qy, qz, qw."""
        return np.concatenate([self.positions, self.quaternions], axis=1).T.copy()


# ---------------------------------------------------------------- WAV

def read_wav(path) -> AudioClip:
    """Read a RIFF/WAVE file holding PCM16, PCM24 or float32 samples.

    Integer PCM is scaled to [-1, 1) by dividing by ``2**(bits - 1)``.
    """
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise MalformedHeader("RIFF header: file shorter than 12 bytes")
    riff, _, wave = struct.unpack("<4sI4s", data[:12])
    if riff != b"RIFF":
        raise MalformedHeader(f"RIFF chunk id: expected b'RIFF', got {riff!r}")
    if wave != b"WAVE":
        raise MalformedHeader(f"RIFF form type: expected b'WAVE', got {wave!r}")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedHeader(f"fmt chunk size: expected >= 16, got {len(body)}")
            fmt = body
        elif cid == b"data":
            if len(body) < size:
                raise TruncatedData(f"data chunk size: header says {size} bytes, {len(body)} present")
            payload = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise MalformedHeader("fmt chunk: missing")
    if payload is None:
        raise MalformedHeader("data chunk: missing")

    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 26:
            raise MalformedHeader("fmt extension: too short for subformat")
        tag = struct.unpack("<H", fmt[24:26])[0]
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"channels: {channels} (only 1 or 2 supported)")
    if rate == 0:
        raise MalformedHeader("sample_rate: zero")
    if tag == _WAVE_FORMAT_PCM and bits in (16, 24):
        pass
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        pass
    else:
        raise UnsupportedEncoding(f"format tag/bits: tag={tag:#06x}, bits={bits}")
    width = bits // 8
    if block_align != width * channels:
        raise MalformedHeader(f"block_align: expected {width * channels}, got {block_align}")
    if len(payload) % block_align:
        raise TruncatedData(f"data chunk: {len(payload)} bytes is not a multiple of block_align {block_align}")

    if tag == _WAVE_FORMAT_IEEE_FLOAT:
        flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    elif bits == 16:
        flat = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    else:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        flat = ints.astype(np.float64) / float(1 << 23)
    samples = flat.reshape(-1, channels).T
    return AudioClip(samples, float(rate))


def quantize_pcm16(x) -> np.ndarray:
    """Round half away from zero after clamping to [-1, 1 - 2**-15]."""
    q = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0 - 2.0 ** -15) * 32768.0
    return (np.sign(q) * np.floor(np.abs(q) + 0.5)).astype("<i2")


def write_wav(clip: AudioClip, path, encoding: str = "float32") -> None:
    if encoding == "pcm16":
        tag, bits = _WAVE_FORMAT_PCM, 16
        payload = quantize_pcm16(clip.samples.T).tobytes()
    elif encoding == "float32":
        tag, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
        payload = clip.samples.T.astype("<f4").tobytes()
    else:
        raise ValueError(f"encoding must be 'pcm16' or 'float32', got {encoding!r}")
    rate = int(round(clip.sample_rate))
    block_align = clip.channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, clip.channels, rate, rate * block_align, block_align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------- pose CSV

def read_pose_csv(path, ear_offsets=None) -> PoseTrack:
    lines = Path(path).read_text().splitlines()
    if not lines or [h.strip() for h in lines[0].split(",")] != POSE_HEADER:
        raise BadRow(1, "header must be " + ",".join(POSE_HEADER))
    rows = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise BadRow(line_no, f"expected 8 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise BadRow(line_no, str(exc)) from None
        if not np.all(np.isfinite(vals)):
            raise BadRow(line_no, "non-finite value")
        q = np.array(vals[4:])
        norm = np.linalg.norm(q)
        if norm == 0.0:
            raise ZeroNormQuaternion(line_no)
        rows.append((vals[0], vals[1:4], q / norm))
    if not rows:
        raise EmptyTrack(f"{path}: no pose rows")

    times = np.array([r[0] for r in rows])
    if len(times) >= 2:
        dt = times[1] - times[0]
        if not dt > 0:
            raise NonUniformRate(f"{path}: non-increasing timestamps at line 3")
        steps = np.diff(times)
        bad = np.flatnonzero(np.abs(steps - dt) > 1e-6 * dt)
        if bad.size:
            raise NonUniformRate(f"{path}: step {steps[bad[0]]!r} at line {bad[0] + 3} differs from {dt!r}")
        rate = 1.0 / dt
    else:
        rate = 120.0
    if ear_offsets is None:
        ear_offsets = DEFAULT_EAR_OFFSETS
    return PoseTrack(
        rate=rate,
        positions=np.array([r[1] for r in rows]),
        quaternions=np.array([r[2] for r in rows]),
        ear_offsets=np.asarray(ear_offsets, float),
        start=float(times[0]),
    )


def write_pose_csv(track: PoseTrack, path) -> None:
    out = [",".join(POSE_HEADER)]
    for k in range(len(track)):
        t = track.start + k / track.rate
        vals = [t, *track.positions[k], *track.quaternions[k]]
        out.append(",".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------- pose alignment

def slerp(q0, q1, frac):
    """Row-wise spherical interpolation of unit quaternions along the shorter arc."""
    q0 = np.atleast_2d(np.asarray(q0, float))
    q1 = np.atleast_2d(np.asarray(q1, float))
    frac = np.atleast_1d(np.asarray(frac, float))[:, None]
    dot = np.sum(q0 * q1, axis=1, keepdims=True)
    q1 = np.where(dot < 0.0, -q1, q1)
    dot = np.clip(np.abs(dot), 0.0, 1.0)
    theta = np.arccos(dot)
    sin_theta = np.sin(theta)
    close = sin_theta < 1e-9
    safe = np.where(close, 1.0, sin_theta)
    w0 = np.where(close, 1.0 - frac, np.sin((1.0 - frac) * theta) / safe)
    w1 = np.where(close, frac, np.sin(frac * theta) / safe)
    out = w0 * q0 + w1 * q1
    if np.any(close):
        n = np.linalg.norm(out, axis=1, keepdims=True)
        out = np.where(close, out / n, out)
    return out


def resample_pose(track: PoseTrack, target_rate: float, n_samples: int) -> PoseTrack:
    """Evaluate the pose track at ``n_samples`` instants spaced ``1/target_rate``.

    Positions are linearly interpolated and orientations slerped.  Instants
    before the first or after the last pose hold the nearest pose.
    """
    if len(track) == 0:
        raise EmptyTrack("cannot resample an empty pose track")
    n = np.arange(n_samples, dtype=np.float64)
    u = (n - track.start * target_rate) * (track.rate / target_rate)
    u = np.clip(u, 0.0, len(track) - 1)
    k0 = np.floor(u).astype(np.int64)
    k1 = np.minimum(k0 + 1, len(track) - 1)
    frac = u - k0
    pos = (1.0 - frac)[:, None] * track.positions[k0] + frac[:, None] * track.positions[k1]
    quat = slerp(track.quaternions[k0], track.quaternions[k1], frac) if n_samples else np.zeros((0, 4))
    return PoseTrack(float(target_rate), pos, quat, track.ear_offsets, 0.0)


def align_pose(track: PoseTrack, clip: AudioClip) -> PoseTrack:
    """Resample ``track`` to one pose per audio sample of ``clip``."""
    if track.rate == clip.sample_rate and len(track) == len(clip) and track.start == 0.0:
        return track
    return resample_pose(track, clip.sample_rate, len(clip))


# ---------------------------------------------------------------- channel arithmetic

def channel_average(clip: AudioClip) -> AudioClip:
    if clip.channels != 2:
        raise WrongChannelCount(f"channel_average needs 2 channels, got {clip.channels}")
    return AudioClip(0.5 * (clip.samples[0] + clip.samples[1]), clip.sample_rate)


def duplicate_mono(clip: AudioClip) -> AudioClip:
    if clip.channels != 1:
        raise WrongChannelCount(f"duplicate_mono needs 1 channel, got {clip.channels}")
    return AudioClip(np.repeat(clip.samples, 2, axis=0), clip.sample_rate)


def split_channels(clip: AudioClip) -> list[AudioClip]:
    return [AudioClip(ch, clip.sample_rate) for ch in clip.samples]
