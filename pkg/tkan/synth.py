"""Synthetic walking silhouettes for running the whole pipeline without CASIA-B.

A subject is a gait signature: cadence, limb phase profile, swing amplitudes
and a body outline. Clips jitter scale, position, speed and starting phase, so
identity lives mostly in the motion rather than in the average image. BG clips
attach a bag blob to the body, CL clips add a coat and dilate the contour.
Every subject and clip draws from its own named random stream.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .clips import CLIP_LENGTH, FRAME_SIZE, ClipRecord, DatasetSplit
from .errors import ContractError
from .numerics import split_rng

logger = logging.getLogger(__name__)

DEFAULT_VIEWS = ("072", "090", "108")
# CASIA-B order for one view; the first eight cover gallery, NM, BG and CL probes
SEQUENCE_PLAN = (
    ("NM", 1),
    ("NM", 2),
    ("NM", 3),
    ("NM", 4),
    ("NM", 5),
    ("BG", 1),
    ("CL", 1),
    ("NM", 6),
    ("BG", 2),
    ("CL", 2),
)
FRAME_DROP_RATE = 0.04
SPECKLE_RATE = 0.004


@dataclass(frozen=True)
class GaitSignature:
    frequency: float
    arm_lag: float
    leg_asymmetry: float
    leg_swing: float
    arm_swing: float
    bob: float
    lean: float
    torso_width: float
    torso_height: float
    head_radius: float
    leg_length: float
    arm_length: float


def sample_signature(rng):
    return GaitSignature(
        frequency=rng.uniform(1.0 / 40.0, 1.0 / 14.0),
        arm_lag=rng.uniform(0.1 * math.pi, 0.9 * math.pi),
        leg_asymmetry=rng.uniform(-0.5, 0.5),
        leg_swing=rng.uniform(0.2, 0.7),
        arm_swing=rng.uniform(0.1, 0.65),
        bob=rng.uniform(0.005, 0.03),
        lean=rng.uniform(-0.2, 0.2),
        torso_width=rng.uniform(0.06, 0.115),
        torso_height=rng.uniform(0.13, 0.19),
        head_radius=rng.uniform(0.04, 0.07),
        leg_length=rng.uniform(0.27, 0.36),
        arm_length=rng.uniform(0.19, 0.28),
    )


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _capsule(yy, xx, y0, x0, y1, x1, radius):
    dy, dx = y1 - y0, x1 - x0
    length2 = dy * dy + dx * dx
    t = 0.0 if length2 == 0 else np.clip(((yy - y0) * dy + (xx - x0) * dx) / length2, 0.0, 1.0)
    return (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2 <= radius * radius


def _dilate(mask):
    padded = np.pad(mask, 1)
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy in range(3):
        for dx in range(3):
            out |= padded[dy : dy + h, dx : dx + w]
    return out


def _view_visibility(view):
    angle = math.radians(float(view))
    return 0.6 + 0.4 * abs(math.sin(angle)), 0.92 + 0.08 * abs(math.cos(angle))


def render_frame(signature, phase, condition, view, size=FRAME_SIZE, scale=1.0, shift=0.0):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    swing_vis, width_vis = _view_visibility(view)
    s = size * scale
    ground = size * 0.94
    hip_y = ground - signature.leg_length * s + signature.bob * s * math.cos(2.0 * phase)
    hip_x = size / 2.0 + shift
    shoulder_y = hip_y - 1.8 * signature.torso_height * s
    shoulder_x = hip_x + math.sin(signature.lean) * (hip_y - shoulder_y)

    torso_ry = signature.torso_height * s
    torso_rx = signature.torso_width * s * width_vis
    mask = _ellipse(yy, xx, (hip_y + shoulder_y) / 2.0, (hip_x + shoulder_x) / 2.0, torso_ry, torso_rx)
    head_r = signature.head_radius * s
    mask |= _ellipse(yy, xx, shoulder_y - 1.1 * head_r, shoulder_x, head_r, head_r)

    segment = signature.leg_length * s / 2.0
    for offset in (0.0, math.pi + signature.leg_asymmetry):
        thigh = signature.leg_swing * math.sin(phase + offset)
        shin = thigh - 0.5 * signature.leg_swing * max(0.0, math.sin(phase + offset + math.pi / 2.0))
        knee_y = hip_y + segment * math.cos(thigh)
        knee_x = hip_x + segment * math.sin(thigh) * swing_vis
        foot_y = knee_y + segment * math.cos(shin)
        foot_x = knee_x + segment * math.sin(shin) * swing_vis
        mask |= _capsule(yy, xx, hip_y, hip_x, knee_y, knee_x, 0.035 * s)
        mask |= _capsule(yy, xx, knee_y, knee_x, foot_y, foot_x, 0.03 * s)

    reach = signature.arm_length * s
    for offset in (0.0, math.pi):
        angle = signature.arm_swing * math.sin(phase + signature.arm_lag + offset)
        hand_y = shoulder_y + reach * math.cos(angle)
        hand_x = shoulder_x + reach * math.sin(angle) * swing_vis
        mask |= _capsule(yy, xx, shoulder_y, shoulder_x, hand_y, hand_x, 0.025 * s)

    if condition == "BG":
        mask |= _ellipse(
            yy, xx, hip_y - 0.02 * s, hip_x + 1.6 * signature.torso_width * s, 0.07 * s, 0.05 * s
        )
    elif condition == "CL":
        mask |= _ellipse(yy, xx, hip_y + 0.02 * s, hip_x, 1.3 * torso_ry, 1.35 * torso_rx)
        mask = _dilate(mask)
    return mask.astype(np.float64)


def render_clip(signature, condition, view, rng, clip_length=CLIP_LENGTH, size=FRAME_SIZE):
    """One ``(T, 1, size, size)`` binary clip with per-clip jitter and noise."""
    start = rng.uniform(0.0, 2.0 * math.pi)
    frequency = signature.frequency * rng.uniform(0.98, 1.02)
    scale = rng.uniform(0.98, 1.02)
    shift = rng.uniform(-0.06, 0.06) * size
    frames = np.stack(
        [
            render_frame(
                signature,
                start + 2.0 * math.pi * frequency * t,
                condition,
                view,
                size=size,
                scale=scale,
                shift=shift,
            )
            for t in range(clip_length)
        ]
    )
    frames[rng.random(clip_length) < FRAME_DROP_RATE] = 0.0
    speckle = rng.random(frames.shape) < SPECKLE_RATE
    frames[speckle] = 1.0 - frames[speckle]
    return frames[:, None, :, :]


def synth_gait_dataset(
    num_subjects,
    clips_per_subject,
    seed=0,
    num_test_subjects=None,
    clip_length=CLIP_LENGTH,
    frame_size=FRAME_SIZE,
    views=DEFAULT_VIEWS,
):
    """Subjects ``1..num_subjects``; the last ``num_test_subjects`` form the test split."""
    if num_subjects < 2:
        raise ContractError(f"need at least two subjects, got {num_subjects}")
    if clips_per_subject < 1:
        raise ContractError(f"need at least one clip per subject, got {clips_per_subject}")
    if num_test_subjects is None:
        num_test_subjects = num_subjects // 2
    if not 1 <= num_test_subjects < num_subjects:
        raise ContractError(f"test subject count {num_test_subjects} leaves no train or test subjects")
    train, test = [], []
    first_test = num_subjects - num_test_subjects + 1
    for subject in range(1, num_subjects + 1):
        signature = sample_signature(split_rng(seed, f"subject:{subject}"))
        for index in range(clips_per_subject):
            condition, seq = SEQUENCE_PLAN[index % len(SEQUENCE_PLAN)]
            seq += 10 * (index // len(SEQUENCE_PLAN))
            view = views[index % len(views)]
            frames = render_clip(
                signature,
                condition,
                view,
                split_rng(seed, f"clip:{subject}:{index}"),
                clip_length=clip_length,
                size=frame_size,
            )
            record = ClipRecord(
                subject=subject,
                condition=condition,
                seq=seq,
                view=view,
                frames=frames,
                source=f"synthetic:{seed}",
            )
            (test if subject >= first_test else train).append(record)
    logger.info(
        "synthesised %d train and %d test clip(s) for %d subject(s)",
        len(train),
        len(test),
        num_subjects,
    )
    return DatasetSplit(train=train, test=test)
