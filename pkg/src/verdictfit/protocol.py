"""Acquisition protocol: measurement settings, unit conventions and
derived pulse quantities.

Internal unit system: time in ms, length in um, diffusivity in um^2/ms,
b-values in ms/um^2 (stored externally in s/mm^2), gradient strength in
T/um.  With these units b = gamma^2 G^2 delta^2 (Delta - delta/3) comes
out in ms/um^2 with no stray conversion factors.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

# Proton gyromagnetic ratio, rad / (ms * T)  (2.6752218744e8 rad/s/T).
GAMMA_PROTON = 2.6752218744e5

# Fixed conversion: b in s/mm^2 -> b in ms/um^2.
B_SI_TO_INTERNAL = 1e-3

PROTOCOL_CSV_HEADER = ["b_s_per_mm2", "delta_ms", "Delta_ms", "te_ms", "is_b0"]


@dataclass(frozen=True)
class PhysicalConstants:
    """Physical constants, fixed for the lifetime of a run.

    gamma is the gyromagnetic ratio in rad/(ms*T); any consistent value
    only rescales the reported gradient strength G, since the signal
    model consumes gamma^2 G^2 which equals b / (delta^2 (Delta - delta/3)).
    """

    gamma: float = GAMMA_PROTON

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


@dataclass(frozen=True)
class MeasurementSetting:
    """One acquisition: b-value (s/mm^2), pulse duration delta (ms),
    pulse separation Delta (ms), echo time te (ms) and the b=0 flag.

    te is carried as metadata only; no implemented equation consumes it.
    """

    b: float
    delta: float
    Delta: float
    te: float
    is_b0: bool = False

    def __post_init__(self):
        if self.b < 0:
            raise ValueError(f"b must be >= 0, got {self.b}")
        if self.is_b0 != (self.b == 0):
            raise ValueError(f"is_b0={self.is_b0} inconsistent with b={self.b}")
        if not 0 < self.delta < self.Delta:
            raise ValueError(
                f"need 0 < delta < Delta, got delta={self.delta}, Delta={self.Delta}"
            )
        if not self.te > 0:
            raise ValueError(f"te must be > 0, got {self.te}")


@dataclass(frozen=True)
class AcquisitionProtocol:
    """Ordered measurement settings; the order defines the index layout
    of every signal vector produced or consumed by this package.

    Immutable after construction and safe to share across workers.
    """

    settings: tuple[MeasurementSetting, ...]

    def __post_init__(self):
        object.__setattr__(self, "settings", tuple(self.settings))
        if not any(not s.is_b0 for s in self.settings):
            raise ValueError("protocol needs at least one diffusion-weighted setting")

    def __len__(self) -> int:
        return len(self.settings)

    def _array(self, attr) -> np.ndarray:
        arr = np.array([getattr(s, attr) for s in self.settings], dtype=float)
        arr.setflags(write=False)
        return arr

    @cached_property
    def b_si(self) -> np.ndarray:
        """b-values in s/mm^2, protocol order."""
        return self._array("b")

    @cached_property
    def b_internal(self) -> np.ndarray:
        """b-values in ms/um^2, protocol order."""
        arr = self.b_si * B_SI_TO_INTERNAL
        arr.setflags(write=False)
        return arr

    @cached_property
    def delta(self) -> np.ndarray:
        return self._array("delta")

    @cached_property
    def Delta(self) -> np.ndarray:
        return self._array("Delta")

    @cached_property
    def te(self) -> np.ndarray:
        return self._array("te")

    @cached_property
    def is_b0(self) -> np.ndarray:
        arr = np.array([s.is_b0 for s in self.settings], dtype=bool)
        arr.setflags(write=False)
        return arr


def b_to_internal(b_si: float) -> float:
    """Convert a b-value from s/mm^2 to the internal ms/um^2."""
    if b_si < 0:
        raise ValueError(f"b must be >= 0, got {b_si}")
    return b_si * B_SI_TO_INTERNAL


def b_from_internal(b_internal: float) -> float:
    """Inverse of b_to_internal; exact for representable values."""
    if b_internal < 0:
        raise ValueError(f"b must be >= 0, got {b_internal}")
    return b_internal / B_SI_TO_INTERNAL


def gradient_strength(
    setting: MeasurementSetting, constants: PhysicalConstants = PhysicalConstants()
) -> float:
    """Gradient amplitude G in T/um for a pulsed-gradient setting.

    Inverts b = gamma^2 G^2 delta^2 (Delta - delta/3).  Returns 0 for b=0.
    """
    if setting.b == 0:
        return 0.0
    if not setting.delta < setting.Delta:
        raise ValueError("need delta < Delta")
    b_int = b_to_internal(setting.b)
    denom = constants.gamma**2 * setting.delta**2 * (setting.Delta - setting.delta / 3.0)
    return math.sqrt(b_int / denom)


def gradient_strengths(
    protocol: AcquisitionProtocol, constants: PhysicalConstants = PhysicalConstants()
) -> np.ndarray:
    """Vector of gradient amplitudes (T/um), zero at b=0 entries."""
    b = protocol.b_internal
    denom = constants.gamma**2 * protocol.delta**2 * (protocol.Delta - protocol.delta / 3.0)
    out = np.zeros_like(b)
    dw = b > 0
    out[dw] = np.sqrt(b[dw] / denom[dw])
    return out


# Optimised prostate protocol: five b / delta / Delta combinations.  The
# published duration/separation list carries a duplicated leading value
# which we treat as a typographical repeat; pairing is overridable via a
# protocol file.  TE values are evenly spaced placeholders over the
# published 50-90 ms span and are metadata only.
_DEFAULT_TABLE = (
    # (b s/mm^2, delta ms, Delta ms, te ms)
    (90.0, 3.9, 23.8, 50.0),
    (500.0, 11.4, 31.3, 60.0),
    (1500.0, 23.9, 43.8, 70.0),
    (2000.0, 14.4, 34.3, 80.0),
    (3000.0, 18.9, 38.8, 90.0),
)


def default_protocol() -> AcquisitionProtocol:
    """The ten-volume default protocol.

    Index layout: entries 0-4 are the diffusion-weighted settings in
    ascending b order (90, 500, 1500, 2000, 3000 s/mm^2); entries 5-9 are
    the matched b=0 settings, one per delta/Delta/TE combination, in the
    same order.
    """
    dw = [MeasurementSetting(b, d, D, te, is_b0=False) for b, d, D, te in _DEFAULT_TABLE]
    b0 = [MeasurementSetting(0.0, d, D, te, is_b0=True) for _, d, D, te in _DEFAULT_TABLE]
    return AcquisitionProtocol(settings=tuple(dw + b0))


def save_protocol(protocol: AcquisitionProtocol, path) -> None:
    """Write a protocol CSV (row order = signal index order)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PROTOCOL_CSV_HEADER)
        for s in protocol.settings:
            writer.writerow([repr(s.b), repr(s.delta), repr(s.Delta), repr(s.te), int(s.is_b0)])


def load_protocol(path) -> AcquisitionProtocol:
    """Read a protocol CSV written by save_protocol (or hand-authored)."""
    path = Path(path)
    settings = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != PROTOCOL_CSV_HEADER:
            raise ValueError(f"bad protocol header in {path}: {header}")
        for row in reader:
            if not row:
                continue
            b, delta, Delta, te, is_b0 = row
            settings.append(
                MeasurementSetting(
                    b=float(b),
                    delta=float(delta),
                    Delta=float(Delta),
                    te=float(te),
                    is_b0=bool(int(is_b0)),
                )
            )
    return AcquisitionProtocol(settings=tuple(settings))
