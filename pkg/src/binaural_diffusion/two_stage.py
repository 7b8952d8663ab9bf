"""Common (mono) and specific (binaural) diffusion stages: conditions, training, synthesis.

Stage 1 learns the channel average of the binaural target from the mono
source and its averaged warp.  Stage 2 learns both ears; it is trained on
the golden channel average but at inference it only sees stage 1's output.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import denoiser as net
from .audio_io import AudioClip, PoseTrack, align_pose, channel_average, read_pose_csv, read_wav
from .diffusion import NoiseSchedule, align_inference_schedule, forward_sample, sample
from .dsp_render import read_manifest
from .errors import (
    EmptyDataset,
    LengthMismatch,
    MissingStage2Conditioner,
    RateMismatch,
    StageConfigMismatch,
    WrongChannelCount,
)
from .geom_warp import SPEED_OF_SOUND, warp_binaural

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageSpec:
    stage: str
    channels: int
    cond_audio_channels: int
    target: str

    def __post_init__(self):
        if (self.channels == 1) != (self.stage == "common"):
            raise ValueError("the common stage is single-channel, the specific stage two-channel")


STAGES = {
    "common": StageSpec("common", 1, 2, "channel average of the binaural recording"),
    "specific": StageSpec("specific", 2, 4, "left and right binaural channels"),
}


def stage_spec(stage) -> StageSpec:
    key = {1: "common", 2: "specific", "1": "common", "2": "specific"}.get(stage, stage)
    if key not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; use 1/common or 2/specific")
    return STAGES[key]


@dataclass(frozen=True, eq=False)
class ConditionSet:
    pos: np.ndarray         # (7, N) raw position + quaternion per sample
    cond_audio: np.ndarray  # (2, N) stage 1, (4, N) stage 2

    def __len__(self):
        return self.pos.shape[1]


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 3000
    batch: int = 1
    crop: int = 0  # samples per training segment; 0 uses whole clips

    def __post_init__(self):
        if self.batch < 1 or self.crop < 0:
            raise ValueError("batch must be >= 1 and crop >= 0")


def stage_net_config(stage, base: net.NetConfig, schedule: NoiseSchedule) -> net.NetConfig:
    spec = stage_spec(stage)
    return replace(base, in_channels=spec.channels, out_channels=spec.channels,
                   cond_audio_channels=spec.cond_audio_channels, diffusion_steps=schedule.T)


def build_condition(stage, x: AudioClip, track: PoseTrack, mono_cond: AudioClip | None = None,
                    speed_of_sound: float = SPEED_OF_SOUND) -> ConditionSet:
    """Assemble conditioning inputs for one clip.

    Stage 1 audio: [mean of the two warped channels, x].  Stage 2 audio:
    [left warp, right warp, x, mono_cond], where ``mono_cond`` is the golden
    channel average during training and the stage 1 output at inference.
    """
    spec = stage_spec(stage)
    if x.channels != 1:
        raise WrongChannelCount("source must be mono")
    track = align_pose(track, x)
    warped = warp_binaural(x, track, x.sample_rate, speed_of_sound)
    pos = track.as_channels()
    if spec.stage == "common":
        audio = np.stack([warped.samples.mean(axis=0), x.samples[0]])
    else:
        if mono_cond is None:
            raise MissingStage2Conditioner("stage 2 needs the channel average (training) or the stage 1 output (inference)")
        if mono_cond.channels != 1:
            raise WrongChannelCount("stage 2 mono condition must be single-channel")
        if len(mono_cond) != len(x):
            raise LengthMismatch(f"stage 2 mono condition has {len(mono_cond)} samples, source has {len(x)}")
        audio = np.stack([warped.samples[0], warped.samples[1], x.samples[0], mono_cond.samples[0]])
    return ConditionSet(pos, audio)


@dataclass(frozen=True, eq=False)
class Example:
    name: str
    x: AudioClip
    track: PoseTrack
    y: AudioClip


def load_examples(manifest) -> list[Example]:
    rows = read_manifest(manifest)
    if not rows:
        raise EmptyDataset(f"{manifest}: manifest lists no clips")
    out = []
    rate = None
    for mono_path, pose_path, bin_path in rows:
        x = read_wav(mono_path)
        y = read_wav(bin_path)
        if x.channels != 1 or y.channels != 2:
            raise WrongChannelCount(f"{bin_path}: expected mono source and stereo target")
        if len(x) != len(y):
            raise LengthMismatch(f"{bin_path}: {len(y)} samples, source has {len(x)}")
        if rate is None:
            rate = x.sample_rate
        if x.sample_rate != rate or y.sample_rate != rate:
            raise RateMismatch(f"{bin_path}: clips must share one sample rate ({rate} Hz)")
        track = align_pose(read_pose_csv(pose_path), x)
        out.append(Example(Path(bin_path).stem.removesuffix("_binaural"), x, track, y))
    return out


def stage_target(stage, ex: Example) -> np.ndarray:
    if stage_spec(stage).stage == "common":
        return channel_average(ex.y).samples
    return ex.y.samples


def training_condition(stage, ex: Example, speed_of_sound=SPEED_OF_SOUND) -> ConditionSet:
    mono = channel_average(ex.y) if stage_spec(stage).stage == "specific" else None
    return build_condition(stage, ex.x, ex.track, mono, speed_of_sound)


def train_stage(stage, manifest, net_config: net.NetConfig, schedule: NoiseSchedule, optim: OptimConfig,
                seed: int, out_checkpoint=None, log_path=None, speed_of_sound: float = SPEED_OF_SOUND,
                examples: list[Example] | None = None):
    """Fit one stage by noise regression; returns the list of (step, loss).

    Each step draws ``optim.batch`` items from a generator seeded with
    ``seed``. An item is a clip, a diffusion step, an optional random crop of
    ``optim.crop`` samples and Gaussian noise. The target is corrupted, and
    one Adam step is taken on the batch-mean squared noise error.
    """
    spec = stage_spec(stage)
    if examples is None:
        examples = load_examples(manifest)
    if not examples:
        raise EmptyDataset("no training clips")
    cfg = stage_net_config(spec.stage, net_config, schedule)
    targets = [stage_target(spec.stage, ex) for ex in examples]
    conds = [training_condition(spec.stage, ex, speed_of_sound) for ex in examples]
    if spec.stage == "specific":
        log.info("stage 2 trains on the golden channel average; inference substitutes the stage 1 output")

    rng = np.random.default_rng(seed)
    params = net.init_params(cfg, seed)
    moments = net.init_moments(params)
    history = []
    for step in range(1, optim.steps + 1):
        loss, grads = 0.0, None
        for _ in range(optim.batch):
            i = int(rng.integers(len(examples)))
            t = int(rng.integers(1, schedule.T + 1))
            n = targets[i].shape[1]
            seg = slice(None)
            if 0 < optim.crop < n:
                start = int(rng.integers(n - optim.crop + 1))
                seg = slice(start, start + optim.crop)
            x0 = targets[i][:, seg]
            eps = rng.standard_normal(x0.shape)
            z_t = forward_sample(x0, t, eps, schedule)
            item_loss, g = net.loss_and_grads(params, cfg, z_t, t, conds[i].pos[:, seg],
                                              conds[i].cond_audio[:, seg], eps)
            loss += item_loss / optim.batch
            grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
        if optim.batch > 1:
            grads = {k: v / optim.batch for k, v in grads.items()}
        params, moments = net.adam_step(params, grads, moments, optim.lr, optim.beta1, optim.beta2, optim.eps, step)
        history.append((step, loss))
        if step % 500 == 0:
            log.info("stage %s step %d loss %.5f", spec.stage, step, loss)

    meta = {"stage": spec.stage, "train_betas": schedule.betas.tolist(), "seed": seed, "steps": optim.steps,
            "batch": optim.batch, "crop": optim.crop, "lr": optim.lr, "sample_rate": examples[0].x.sample_rate}
    if out_checkpoint is not None:
        net.save_checkpoint(params, cfg, out_checkpoint, meta)
    if log_path is not None:
        write_loss_log(history, log_path)
    return history, params, cfg, meta


def write_loss_log(history, path) -> None:
    lines = ["step,loss"] + [f"{s},{loss!r}" for s, loss in history]
    Path(path).write_text("\n".join(lines) + "\n")


def smoothed(losses, width=50) -> np.ndarray:
    losses = np.asarray(losses, float)
    width = max(1, min(width, len(losses)))
    return np.convolve(losses, np.ones(width) / width, mode="valid")


# ---------------------------------------------------------------- inference

@dataclass(frozen=True, eq=False)
class StageModel:
    params: dict
    config: net.NetConfig
    meta: dict

    @classmethod
    def load(cls, path) -> "StageModel":
        params, config, meta = net.load_checkpoint(path)
        return cls(params, config, meta)

    @property
    def stage(self) -> str:
        return self.meta.get("stage", "common" if self.config.in_channels == 1 else "specific")

    def train_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.meta["train_betas"])

    def denoiser(self, cond: ConditionSet):
        feats = net.conditioner(cond.pos, cond.cond_audio, self.params, self.config)

        def eps_model(z, t, _condition):
            return net.forward(z, t, None, None, self.params, self.config, cond_features=feats)
        return eps_model

    def generate(self, cond: ConditionSet, infer_betas, rng) -> np.ndarray:
        schedule = align_inference_schedule(infer_betas, self.train_schedule())
        shape = (self.config.in_channels, len(cond))
        return sample(self.denoiser(cond), cond, schedule, shape, rng)


def check_stage(model: StageModel, stage: str, what: str) -> None:
    spec = stage_spec(stage)
    if model.stage != spec.stage or model.config.in_channels != spec.channels \
            or model.config.cond_audio_channels != spec.cond_audio_channels:
        raise StageConfigMismatch(
            f"{what} is a {model.stage} model with {model.config.in_channels} channel(s); "
            f"expected the {spec.stage} stage with {spec.channels}")


def _as_model(m) -> StageModel:
    return m if isinstance(m, StageModel) else StageModel.load(m)


def synthesize_stages(x: AudioClip, track: PoseTrack, stage1, stage2, infer_betas, seed: int,
                      speed_of_sound: float = SPEED_OF_SOUND, stage2_condition: AudioClip | None = None):
    """Run both stages; returns (stage 1 mono output, binaural output).

    ``stage2_condition`` replaces the stage 1 output as stage 2's mono
    condition (the oracle probe that feeds the golden channel average).
    """
    m1, m2 = _as_model(stage1), _as_model(stage2)
    check_stage(m1, "common", "stage 1 checkpoint")
    check_stage(m2, "specific", "stage 2 checkpoint")
    rng1, rng2 = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    track = align_pose(track, x)
    c1 = build_condition("common", x, track, speed_of_sound=speed_of_sound)
    y_c = AudioClip(m1.generate(c1, infer_betas, rng1), x.sample_rate)
    mono = y_c if stage2_condition is None else stage2_condition
    c2 = build_condition("specific", x, track, mono, speed_of_sound)
    y = AudioClip(m2.generate(c2, infer_betas, rng2), x.sample_rate)
    return y_c, y


def synthesize(x: AudioClip, track: PoseTrack, stage1, stage2, infer_betas, seed: int,
               speed_of_sound: float = SPEED_OF_SOUND) -> AudioClip:
    return synthesize_stages(x, track, stage1, stage2, infer_betas, seed, speed_of_sound)[1]
