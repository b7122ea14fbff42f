"""Synthetic data generation: uniform parameter draws, clean signals and
Rician noise at configurable SNR.

Randomness is counter-based (Philox 4x64) with one documented stream per
voxel, keyed as (master_seed, voxel_id).  Within a voxel stream the draw
order is: rejection blocks for the (f_ic, f_ees) pair, then radius and
d_ees uniforms, then the two Gaussian noise fields in protocol order.
Generation is therefore order-independent and reproduces bit-identically
for a fixed seed regardless of chunking or worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import forward_model as fm
from .protocol import AcquisitionProtocol, default_protocol

GENERATOR_NAME = "philox4x64.per-voxel.v1"

_MASK64 = (1 << 64) - 1

# Candidate pairs drawn per rejection block; acceptance is ~0.51 per draw
# so a block is effectively never exhausted, but the loop is exact anyway.
_PAIR_BLOCK = 64


@dataclass(frozen=True)
class SamplingRanges:
    """Closed sampling intervals per parameter."""

    f_ic: tuple[float, float] = fm.F_IC_RANGE
    f_ees: tuple[float, float] = fm.F_EES_RANGE
    radius: tuple[float, float] = fm.RADIUS_RANGE
    d_ees: tuple[float, float] = fm.D_EES_RANGE

    def __post_init__(self):
        for name in ("f_ic", "f_ees", "radius", "d_ees"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} range needs lower < upper, got ({lo}, {hi})")

    def lows(self) -> np.ndarray:
        return np.array([self.f_ic[0], self.f_ees[0], self.radius[0], self.d_ees[0]])

    def highs(self) -> np.ndarray:
        return np.array([self.f_ic[1], self.f_ees[1], self.radius[1], self.d_ees[1]])


@dataclass
class SyntheticDataset:
    """Ground-truth parameters with matching clean and noisy signals."""

    params: np.ndarray  # (N, 5) columns f_ic, f_ees, radius, d_ees, s0
    clean: np.ndarray  # (N, M)
    noisy: np.ndarray  # (N, M)
    snr: float
    seed: int
    protocol: AcquisitionProtocol

    def __post_init__(self):
        n = self.params.shape[0]
        m = len(self.protocol)
        if self.clean.shape != (n, m) or self.noisy.shape != (n, m):
            raise ValueError("params/clean/noisy shapes disagree with protocol")

    def __len__(self) -> int:
        return self.params.shape[0]


def voxel_rng(seed: int, voxel_id: int) -> np.random.Generator:
    """The per-voxel Philox stream, keyed (seed, voxel_id)."""
    key = np.array([seed & _MASK64, voxel_id & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(master_seed: int, index: int) -> int:
    """Deterministic child seed for sweep levels and training streams."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def _draw_voxel_params(rng, lows, highs, allow_unphysical):
    pair_span = highs[:2] - lows[:2]
    if allow_unphysical:
        pair = lows[:2] + rng.uniform(size=2) * pair_span
    else:
        pair = None
        while pair is None:
            block = lows[:2] + rng.uniform(size=(_PAIR_BLOCK, 2)) * pair_span
            ok = np.nonzero(block.sum(axis=1) <= 1.0)[0]
            if ok.size:
                pair = block[ok[0]]
    tail = lows[2:] + rng.uniform(size=2) * (highs[2:] - lows[2:])
    return pair[0], pair[1], tail[0], tail[1]


def sample_params(
    n: int,
    ranges: SamplingRanges = SamplingRanges(),
    seed: int = 0,
    allow_unphysical: bool = False,
) -> np.ndarray:
    """Draw n parameter rows, uniform per coordinate, with the
    (f_ic, f_ees) pair rejection-resampled until f_ic + f_ees <= 1
    (unless allow_unphysical).  s0 is 1 for all simulated voxels.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lows, highs = ranges.lows(), ranges.highs()
    out = np.ones((n, 5))
    for i in range(n):
        rng = voxel_rng(seed, i)
        out[i, 0], out[i, 1], out[i, 2], out[i, 3] = _draw_voxel_params(
            rng, lows, highs, allow_unphysical
        )
    return out


def add_rician_noise(clean, snr: float, rng: np.random.Generator) -> np.ndarray:
    """Rician-corrupt a signal array: sqrt((s + e1)^2 + e2^2) with e1, e2
    zero-mean Gaussians of standard deviation 1/snr (s0 reference = 1)."""
    if not snr > 0:
        raise ValueError(f"snr must be > 0, got {snr}")
    clean = np.asarray(clean, dtype=float)
    sigma = 1.0 / snr
    e1 = rng.normal(scale=sigma, size=clean.shape)
    e2 = rng.normal(scale=sigma, size=clean.shape)
    return np.sqrt((clean + e1) ** 2 + e2**2)


def generate_dataset(
    n: int,
    snr: float,
    protocol: AcquisitionProtocol | None = None,
    ranges: SamplingRanges = SamplingRanges(),
    seed: int = 0,
    allow_unphysical: bool = False,
) -> SyntheticDataset:
    """sample_params -> signal_total -> add_rician_noise, one Philox
    stream per voxel so regeneration is bit-identical under the seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not snr > 0:
        raise ValueError(f"snr must be > 0, got {snr}")
    if protocol is None:
        protocol = default_protocol()
    lows, highs = ranges.lows(), ranges.highs()
    m = len(protocol)
    params = np.ones((n, 5))
    eps = np.empty((n, 2, m))
    sigma = 1.0 / snr
    for i in range(n):
        rng = voxel_rng(seed, i)
        params[i, 0], params[i, 1], params[i, 2], params[i, 3] = _draw_voxel_params(
            rng, lows, highs, allow_unphysical
        )
        eps[i] = rng.normal(scale=sigma, size=(2, m))
    clean = fm.signal_total(params, protocol, validate=not allow_unphysical)
    noisy = np.sqrt((clean + eps[:, 0, :]) ** 2 + eps[:, 1, :] ** 2)
    return SyntheticDataset(
        params=params, clean=clean, noisy=noisy, snr=snr, seed=seed, protocol=protocol
    )


def snr_sweep(
    n_per_level: int,
    snr_levels,
    protocol: AcquisitionProtocol | None = None,
    ranges: SamplingRanges = SamplingRanges(),
    seed: int = 0,
) -> list[SyntheticDataset]:
    """One dataset per SNR level; level seeds derive from (seed, index)."""
    levels = list(snr_levels)
    if not levels:
        raise ValueError("snr_levels must be non-empty")
    if any(not s > 0 for s in levels):
        raise ValueError("all SNR levels must be > 0")
    return [
        generate_dataset(
            n_per_level, level, protocol=protocol, ranges=ranges, seed=derive_seed(seed, i)
        )
        for i, level in enumerate(levels)
    ]
