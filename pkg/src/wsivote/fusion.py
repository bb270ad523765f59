"""Binarisation and multi-level voting.

Each level's prob map is brought back to level-0 size, thresholded at a
single global ``Th`` and counted as ``weight`` votes; a pixel is tumour
when its tally reaches ``N``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .pyramid import DEFAULT_LEVELS, expand_to, level_shape
from .raster import RasterError, nearest_upsample

UPSAMPLERS = ("nearest", "pyramid")


@dataclass
class VoteConfig:
    threshold_th: float = 0.7
    min_votes_n: int = 6
    level_weights: dict = field(default_factory=lambda: {n: 1 for n in DEFAULT_LEVELS})

    def __post_init__(self):
        self.level_weights = {int(k): int(v) for k, v in self.level_weights.items()}
        if not 0.0 <= self.threshold_th <= 1.0:
            raise ValueError(f"threshold {self.threshold_th} outside [0, 1]")
        if self.min_votes_n < 1:
            raise ValueError("min_votes_n must be a positive integer")
        if any(v < 1 for v in self.level_weights.values()):
            raise ValueError("level weights must be positive integers")
        if self.min_votes_n > self.total_votes():
            raise ValueError(f"N={self.min_votes_n} exceeds the {self.total_votes()} available votes")

    def total_votes(self, levels=None) -> int:
        keys = self.level_weights if levels is None else levels
        return sum(self.level_weights[k] for k in keys)

    @classmethod
    def double_vote(cls, threshold_th=0.7, min_votes_n=6, levels=DEFAULT_LEVELS):
        """Two votes each for levels 6 and 7, one for the rest."""
        return cls(threshold_th, min_votes_n, {n: 2 if n in (6, 7) else 1 for n in levels})

    def to_dict(self):
        return {"threshold": self.threshold_th, "min_votes": self.min_votes_n,
                "level_weights": {str(k): v for k, v in sorted(self.level_weights.items())}}

    @classmethod
    def from_dict(cls, d):
        weights = d.get("level_weights")
        return cls(float(d.get("threshold", 0.7)), int(d.get("min_votes", 6)),
                   weights if weights is not None else {n: 1 for n in DEFAULT_LEVELS})

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _check_participation(levels, cfg: VoteConfig):
    total = cfg.total_votes(levels)
    if cfg.min_votes_n > total:
        raise ValueError(f"N={cfg.min_votes_n} exceeds the {total} votes of levels {sorted(levels)}")


def binarize(m: np.ndarray, th: float) -> np.ndarray:
    if not 0.0 <= th <= 1.0:
        raise ValueError(f"threshold {th} outside [0, 1]")
    return np.asarray(m) >= np.float32(th)


def vote(levels: dict, cfg: VoteConfig) -> np.ndarray:
    """V = (sum_k weight_k * v_k >= N) over binary masks already at level-0 size."""
    if not levels:
        raise ValueError("no levels to vote on")
    unknown = set(levels) - set(cfg.level_weights)
    if unknown:
        raise ValueError(f"levels {sorted(unknown)} have no vote weight")
    _check_participation(levels, cfg)
    shape = None
    tally = None
    for n in sorted(levels):
        v = np.asarray(levels[n], dtype=bool)
        if shape is None:
            shape, tally = v.shape, np.zeros(v.shape, np.int32)
        elif v.shape != shape:
            raise RasterError(f"level {n} mask is {v.shape}, expected {shape}")
        tally += cfg.level_weights[n] * v
    return tally >= cfg.min_votes_n


def upsample_to(m: np.ndarray, level: int, width: int, height: int, upsampler="nearest"):
    if upsampler == "nearest":
        return nearest_upsample(m, width, height, factor=1 << level)
    if upsampler == "pyramid":
        return expand_to(m, width, height) if level else np.asarray(m, np.float32)
    raise ValueError(f"unknown upsampler {upsampler!r}; expected one of {UPSAMPLERS}")


def fuse(stacks: dict, cfg: VoteConfig, level0_size=None, upsampler="nearest") -> np.ndarray:
    """Upsample each level to level 0, binarise at Th and vote.

    ``stacks`` maps level -> prob map at that level's native size.
    ``level0_size`` is ``(width, height)``; it defaults to the level-0 map.
    Masks are tallied one level at a time so only one full-size upsampled
    map is alive at once.
    """
    if level0_size is None:
        if 0 not in stacks:
            raise ValueError("level0_size is required when level 0 is absent")
        level0_size = (stacks[0].shape[1], stacks[0].shape[0])
    w0, h0 = level0_size
    unknown = set(stacks) - set(cfg.level_weights)
    if unknown:
        raise ValueError(f"levels {sorted(unknown)} have no vote weight")
    _check_participation(stacks, cfg)
    tally = np.zeros((h0, w0), np.int32)
    for n in sorted(stacks):
        m = stacks[n]
        want = level_shape(w0, h0, n)
        if (m.shape[1], m.shape[0]) != want:
            raise RasterError(f"level {n} map is {m.shape[1]}x{m.shape[0]}, expected {want[0]}x{want[1]}")
        if upsampler == "nearest":
            # threshold before enlarging: identical result, 4x less memory
            up = upsample_to(binarize(m, cfg.threshold_th), n, w0, h0, upsampler)
        else:
            up = binarize(upsample_to(m, n, w0, h0, upsampler), cfg.threshold_th)
        tally += cfg.level_weights[n] * up
        del up
    return tally >= cfg.min_votes_n
