"""Classical binaural renderer: geometric warp, room response and HRTF filtering.

Also generates the synthetic mono/pose/binaural triples used as ground truth
for desk-scale training.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import (
    AudioClip,
    PoseTrack,
    align_pose,
    read_pose_csv,
    read_wav,
    write_pose_csv,
    write_wav,
)
from .errors import BadRow, EmptyHrtfBank, PointOutsideRoom, RateMismatch, WrongChannelCount
from .geom_warp import EARS, SPEED_OF_SOUND, ear_positions, rotate, warp_binaural

MANIFEST_HEADER = "mono_path,pose_path,binaural_path"
_HRTF_NAME = re.compile(r"^az(-?\d+(?:\.\d+)?)_el(-?\d+(?:\.\d+)?)_([lr])\.wav$")


@dataclass(frozen=True, eq=False)
class ImpulseResponse:
    taps: np.ndarray
    sample_rate: float
    label: str = ""

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64).ravel()
        if taps.size == 0 or not np.all(np.isfinite(taps)):
            raise ValueError(f"impulse response {self.label!r} must be nonempty and finite")
        object.__setattr__(self, "taps", taps)


@dataclass(frozen=True)
class ShoeboxRoom:
    """Rectangular room spanning [0, L] on each axis.

    ``absorption`` is either one coefficient for all walls or six, ordered
    (x=0, x=L, y=0, y=L, z=0, z=L).  ``listener_at`` places the listener
    (the origin of pose coordinates) in room coordinates; it defaults to the
    room centre.
    """

    dimensions: tuple = (6.0, 5.0, 3.0)
    absorption: float | tuple = 0.7
    max_order: int = 1
    listener_at: tuple | None = None

    def __post_init__(self):
        dims = np.asarray(self.dimensions, float)
        if dims.shape != (3,) or np.any(dims <= 0):
            raise ValueError(f"room dimensions must be three positive lengths, got {self.dimensions}")
        a = self.wall_absorption
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError(f"absorption must lie in (0, 1], got {self.absorption}")
        if self.max_order < 0:
            raise ValueError("max_order must be >= 0")

    @property
    def wall_absorption(self) -> np.ndarray:
        a = np.atleast_1d(np.asarray(self.absorption, float))
        if a.size == 1:
            a = np.repeat(a, 6)
        if a.size != 6:
            raise ValueError("absorption needs 1 or 6 coefficients")
        return a.reshape(3, 2)

    @property
    def listener(self) -> np.ndarray:
        if self.listener_at is None:
            return 0.5 * np.asarray(self.dimensions, float)
        return np.asarray(self.listener_at, float)

    def contains(self, p) -> bool:
        p = np.asarray(p, float)
        return bool(np.all(p > 0) and np.all(p < np.asarray(self.dimensions, float)))


def fir_convolve(x: AudioClip, ir: ImpulseResponse) -> AudioClip:
    """Causal FIR filtering, output truncated to the input length."""
    if x.channels != 1:
        raise WrongChannelCount("fir_convolve needs a mono clip")
    if x.sample_rate != ir.sample_rate:
        raise RateMismatch(f"signal at {x.sample_rate} Hz, impulse response {ir.label!r} at {ir.sample_rate} Hz")
    n = len(x)
    y = np.convolve(x.samples[0], ir.taps)[:n] if n else np.zeros(0)
    return AudioClip(y, x.sample_rate)


def image_sources(room: ShoeboxRoom, src, lstn):
    """Enumerate image sources up to ``room.max_order`` reflections.

    Returns (distances, gains) for every image whose wall-reflection gain is
    nonzero; the direct path comes first.
    """
    src = np.asarray(src, float)
    lstn = np.asarray(lstn, float)
    for name, p in (("source", src), ("listener", lstn)):
        if not room.contains(p):
            raise PointOutsideRoom(f"{name} at {p.tolist()} is not strictly inside room {room.dimensions}")
    dims = np.asarray(room.dimensions, float)
    refl = 1.0 - room.wall_absorption
    order = room.max_order
    ls = np.arange(-order, order + 1)

    # per axis: candidate coordinates, reflection count, gain
    axes = []
    for ax in range(3):
        coords, counts, gains = [], [], []
        for u in (0, 1):
            for l in ls:
                n_lo, n_hi = abs(l - u), abs(l)
                if n_lo + n_hi > order:
                    continue
                coords.append((1 - 2 * u) * src[ax] + 2 * l * dims[ax])
                counts.append(n_lo + n_hi)
                g = 1.0
                if n_lo:
                    g *= refl[ax, 0] ** n_lo
                if n_hi:
                    g *= refl[ax, 1] ** n_hi
                gains.append(g)
        axes.append((np.array(coords), np.array(counts), np.array(gains)))

    cx, cy, cz = np.meshgrid(*(a[0] for a in axes), indexing="ij")
    nx, ny, nz = np.meshgrid(*(a[1] for a in axes), indexing="ij")
    gx, gy, gz = np.meshgrid(*(a[2] for a in axes), indexing="ij")
    keep = (nx + ny + nz) <= order
    pts = np.stack([cx[keep], cy[keep], cz[keep]], axis=1)
    gain = (gx * gy * gz)[keep]
    total = (nx + ny + nz)[keep]
    nz_mask = gain != 0.0
    pts, gain, total = pts[nz_mask], gain[nz_mask], total[nz_mask]
    dist = np.linalg.norm(pts - lstn, axis=1)
    # direct path first, then by distance for a stable layout
    order_idx = np.lexsort((dist, total))
    return dist[order_idx], gain[order_idx]


def _place_taps(delays, amps):
    length = int(np.floor(delays.max())) + 2
    taps = np.zeros(length)
    lo = np.floor(delays).astype(np.int64)
    frac = delays - lo
    np.add.at(taps, lo, amps * (1.0 - frac))
    np.add.at(taps, lo + 1, amps * frac)
    return taps


def image_source_rir(room: ShoeboxRoom, src, lstn, sample_rate: float,
                     speed_of_sound: float = SPEED_OF_SOUND, relative: bool = False) -> ImpulseResponse:
    """Image-source room impulse response between two points in room coordinates.

    Each image contributes ``gain / distance`` at the fractional tap
    ``sample_rate / speed_of_sound * distance``, split over two taps by linear
    interpolation.  With ``relative=True`` all delays are measured from the
    direct path, so the direct arrival sits exactly on tap 0; this is the
    form used after geometric warping, which already applies the direct delay.
    """
    dist, gain = image_sources(room, src, lstn)
    c = sample_rate / speed_of_sound
    delays = c * dist
    if relative:
        delays = delays - delays[0]
    taps = _place_taps(delays, gain / dist)
    return ImpulseResponse(taps, sample_rate, f"rir@order{room.max_order}")


# ---------------------------------------------------------------- HRTF bank

def direction_angles(v) -> tuple[float, float]:
    """Azimuth (positive to the right) and elevation in degrees of a head-frame vector."""
    v = np.asarray(v, float)
    az = np.degrees(np.arctan2(v[1], v[0]))
    el = np.degrees(np.arctan2(v[2], np.hypot(v[0], v[1])))
    return float(az), float(el)


def _unit(az_deg, el_deg):
    az, el = np.radians(az_deg), np.radians(el_deg)
    return np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def nearest_direction(bank: dict, direction) -> tuple:
    if not bank:
        raise EmptyHrtfBank("HRTF bank is empty")
    d = np.asarray(direction, float)
    d = d / (np.linalg.norm(d) or 1.0)
    keys = sorted(bank)
    scores = [float(np.dot(_unit(*k), d)) for k in keys]
    return keys[int(np.argmax(scores))]


def make_toy_hrtf_bank(sample_rate: float, azimuths=range(-180, 180, 30), elevations=(0,), n_taps: int = 16) -> dict:
    """Spherical-head-like generic HRTFs.

    Each ear gets a gain and a one-pole low-pass whose strength grows as the
    source moves to the far side of the head, plus a weak elevation-dependent
    reflection.  Mirroring the azimuth swaps the two ears exactly.
    """
    bank = {}
    k = np.arange(n_taps)
    for el in elevations:
        for az in azimuths:
            d = _unit(az, el)
            pair = []
            for ear_axis in (np.array([0.0, -1.0, 0.0]), np.array([0.0, 1.0, 0.0])):
                c = float(np.dot(d, ear_axis))
                gain = 0.65 + 0.35 * c
                pole = 0.1 + 0.5 * (1.0 - c) / 2.0
                h = gain * (1.0 - pole) * pole ** k
                echo = 3 + int(round(2.0 * (1.0 + np.sin(np.radians(el)))))
                h[echo] -= 0.15 * gain
                pair.append(h.astype(np.float32).astype(np.float64))
            bank[(float(az), float(el))] = (
                ImpulseResponse(pair[0], sample_rate, f"hrtf_left@az{az}_el{el}"),
                ImpulseResponse(pair[1], sample_rate, f"hrtf_right@az{az}_el{el}"),
            )
    return bank


def _fmt_deg(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def save_hrtf_bank(bank: dict, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for (az, el), (left, right) in sorted(bank.items()):
        for ear, ir in (("l", left), ("r", right)):
            write_wav(AudioClip(ir.taps, ir.sample_rate), directory / f"az{_fmt_deg(az)}_el{_fmt_deg(el)}_{ear}.wav")


def load_hrtf_bank(directory) -> dict:
    """Load ``az<deg>_el<deg>_{l,r}.wav`` pairs from a directory."""
    found: dict = {}
    for path in sorted(Path(directory).iterdir()):
        m = _HRTF_NAME.match(path.name)
        if not m:
            continue
        key = (float(m.group(1)), float(m.group(2)))
        clip = read_wav(path)
        if clip.channels != 1:
            raise WrongChannelCount(f"{path}: HRTF files must be mono")
        ear = "left" if m.group(3) == "l" else "right"
        found.setdefault(key, {})[ear] = ImpulseResponse(clip.samples[0], clip.sample_rate, f"hrtf_{ear}@{path.stem[:-2]}")
    bank = {}
    for key, pair in found.items():
        if set(pair) != {"left", "right"}:
            raise EmptyHrtfBank(f"direction az={key[0]} el={key[1]} lacks one ear")
        bank[key] = (pair["left"], pair["right"])
    if not bank:
        raise EmptyHrtfBank(f"no HRTF pairs found in {directory}")
    return bank


# ---------------------------------------------------------------- rendering

def mean_head_direction(track: PoseTrack) -> np.ndarray:
    """Mean source direction in head coordinates."""
    q = track.quaternions
    conj = np.concatenate([-q[:, :3], q[:, 3:]], axis=1)
    local = rotate(conj, track.positions)
    norms = np.linalg.norm(local, axis=1, keepdims=True)
    local = local / np.where(norms == 0, 1.0, norms)
    return local.mean(axis=0)


def dsp_render_binaural(x: AudioClip, track: PoseTrack, hrtf_bank: dict, room: ShoeboxRoom,
                        speed_of_sound: float = SPEED_OF_SOUND) -> AudioClip:
    """Render a mono clip to binaural: warp, room response, then HRTF, per ear.

    The HRTF pair is chosen once per clip from the mean source direction.
    The room response is computed from the mean source and ear positions and
    is taken relative to the direct path, whose delay the warp already applies.
    """
    if not hrtf_bank:
        raise EmptyHrtfBank("HRTF bank is empty")
    if x.channels != 1:
        raise WrongChannelCount("dsp_render_binaural needs a mono source")
    n = len(x)
    if n == 0:
        return AudioClip(np.zeros((2, 0)), x.sample_rate)
    track = align_pose(track, x)
    warped = warp_binaural(x, track, x.sample_rate, speed_of_sound)
    hrtfs = hrtf_bank[nearest_direction(hrtf_bank, mean_head_direction(track))]
    src = room.listener + track.positions.mean(axis=0)
    out = []
    for i, ear in enumerate(EARS):
        ear_pos = room.listener + ear_positions(track, ear).mean(axis=0)
        rir = image_source_rir(room, src, ear_pos, x.sample_rate, speed_of_sound, relative=True)
        ch = fir_convolve(AudioClip(warped.samples[i], x.sample_rate), rir)
        ch = fir_convolve(ch, hrtfs[i])
        out.append(ch.samples[0])
    return AudioClip(np.stack(out), x.sample_rate)


# ---------------------------------------------------------------- synthetic data

def _lowpass_fir(cutoff, n_taps=31):
    k = np.arange(n_taps) - (n_taps - 1) / 2
    h = 2 * cutoff * np.sinc(2 * cutoff * k) * np.hanning(n_taps)
    return h / h.sum()


def _envelope(rng, n, sample_rate, kind):
    t = np.arange(n) / sample_rate
    if kind == "bursts":
        env = np.zeros(n)
        pos = int(rng.integers(0, max(1, n // 8)))
        while pos < n:
            length = int(rng.uniform(0.08, 0.25) * sample_rate)
            ramp = max(1, int(0.01 * sample_rate))
            seg = np.ones(min(length, n - pos))
            r = min(ramp, len(seg) // 2)
            if r:
                seg[:r] = np.linspace(0, 1, r, endpoint=False)
                seg[-r:] = np.linspace(1, 0, r, endpoint=False)
            env[pos:pos + len(seg)] = seg * rng.uniform(0.5, 1.0)
            pos += length + int(rng.uniform(0.05, 0.15) * sample_rate)
        return env
    rate = rng.uniform(3.0, 5.0)
    return 0.5 * (1 - np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))


def synth_source(rng, n, sample_rate, kind):
    """Deterministic speech-like test source, peak-normalised to 0.5."""
    if kind == "bursts":
        noise = rng.standard_normal(n + 30)
        sig = np.convolve(noise, _lowpass_fir(rng.uniform(0.08, 0.2)), mode="valid")[:n]
    else:
        t = np.arange(n) / sample_rate
        f0 = rng.uniform(110.0, 260.0)
        sig = np.zeros(n)
        h = 1
        while h * f0 < 0.4 * sample_rate and h <= 12:
            sig += np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h
            h += 1
    sig = sig * _envelope(rng, n, sample_rate, kind)
    peak = np.max(np.abs(sig))
    return 0.5 * sig / peak if peak > 0 else sig


def synth_pose(rng, duration, rate=120.0):
    """Slowly moving source 1-1.8 m from the head, small head yaw wobble."""
    k = int(np.floor(duration * rate)) + 2
    s = np.linspace(0.0, 1.0, k)
    az0 = rng.uniform(-np.pi, np.pi)
    daz = rng.uniform(-0.6, 0.6)
    r0 = rng.uniform(1.0, 1.8)
    dr = rng.uniform(-0.3, 0.3)
    el = rng.uniform(-0.2, 0.2)
    az = az0 + daz * s
    r = np.clip(r0 + dr * s, 0.8, 2.0)
    pos = np.stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el) * np.ones_like(s)], axis=1)
    yaw = rng.uniform(-0.15, 0.15) * np.sin(2 * np.pi * rng.uniform(0.2, 0.8) * s)
    quat = np.stack([np.zeros(k), np.zeros(k), np.sin(yaw / 2), np.cos(yaw / 2)], axis=1)
    return PoseTrack(rate, pos, quat)


def read_manifest(path) -> list[tuple[Path, Path, Path]]:
    """Rows of (mono, pose, binaural) paths, resolved against the manifest directory."""
    path = Path(path)
    base = path.parent
    rows = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line == MANIFEST_HEADER:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise BadRow(line_no, f"{path}: expected 3 comma-separated paths")
        rows.append(tuple(p if Path(p).is_absolute() else base / p for p in map(Path, parts)))
    return rows


def clip_id(binaural_path) -> str:
    stem = Path(binaural_path).stem
    return stem[: -len("_binaural")] if stem.endswith("_binaural") else stem


def make_synthetic_dataset(seed: int, n_clips: int, clip_len: float, sample_rate: float,
                           room: ShoeboxRoom, hrtf_bank: dict, out_dir,
                           speed_of_sound: float = SPEED_OF_SOUND) -> Path:
    """Write ``n_clips`` mono/pose/binaural triples plus ``manifest.csv``.

    Output is a pure function of the arguments.  Returns the manifest path.
    """
    if sample_rate > 48000:
        raise ValueError("sample_rate must be <= 48000")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = int(round(clip_len * sample_rate))
    lines = [MANIFEST_HEADER]
    for i in range(n_clips):
        rng = np.random.default_rng([seed, i])
        kind = "bursts" if i % 2 == 0 else "tones"
        # quantise to the stored precision first so the triple is self-consistent
        x = synth_source(rng, n, sample_rate, kind).astype(np.float32).astype(np.float64)
        mono = AudioClip(x, sample_rate)
        name = f"clip{i:04d}"
        pose_path = out_dir / f"{name}_pose.csv"
        write_pose_csv(synth_pose(rng, clip_len), pose_path)
        # render from the track as stored so file consumers see the same geometry
        track = read_pose_csv(pose_path)
        y = dsp_render_binaural(mono, track, hrtf_bank, room, speed_of_sound)
        write_wav(mono, out_dir / f"{name}_mono.wav", "float32")
        write_wav(y, out_dir / f"{name}_binaural.wav", "float32")
        lines.append(f"{name}_mono.wav,{name}_pose.csv,{name}_binaural.wav")
    manifest = out_dir / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
