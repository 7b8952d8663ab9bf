"""Binaural audio synthesis from mono audio and pose with two-stage diffusion.

The package is organised as small numpy modules:

- ``audio_io``: WAV and pose CSV files, pose alignment, channel arithmetic
- ``geom_warp``: distance-based fractional-delay warping per ear
- ``dsp_render``: image-source rooms, HRTF banks, the classical renderer and synthetic data
- ``diffusion``: noise schedules, forward corruption, reverse steps, sampling
- ``denoiser``: the dilated-convolution noise predictor with exact gradients
- ``two_stage``: common and specific stages, training and synthesis
- ``metrics``: Wave L2, STFT amplitude and phase L2, multi-resolution STFT
- ``cli``: the ``binaural-diffusion`` command
"""
from .audio_io import AudioClip, PoseTrack, channel_average, duplicate_mono, read_pose_csv, read_wav, write_wav
from .diffusion import NoiseSchedule, make_schedule
from .denoiser import NetConfig
from .errors import BinauralError, ConfigError, DataError
from .geom_warp import compute_warpfield, apply_warp, warp_binaural
from .metrics import mrstft, score, wave_l2
from .two_stage import synthesize, train_stage

__all__ = [
    "AudioClip", "PoseTrack", "channel_average", "duplicate_mono", "read_pose_csv", "read_wav", "write_wav",
    "NoiseSchedule", "make_schedule", "NetConfig", "BinauralError", "ConfigError", "DataError",
    "compute_warpfield", "apply_warp", "warp_binaural", "mrstft", "score", "wave_l2", "synthesize", "train_stage",
]
__version__ = "0.1.0"
