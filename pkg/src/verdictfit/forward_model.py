"""Three-compartment prostate signal model and its analytic derivatives.

The total signal per measurement is

    S = s0 * [ f_vasc * S_vasc + f_ic * S_ic + f_ees * S_ees ]

with f_vasc = 1 - f_ic - f_ees.  Compartments:

* vascular: spherical mean of randomly oriented sticks with fixed
  diffusivity d_vasc, (sqrt(pi)/2) erf(sqrt(b d)) / sqrt(b d);
* intracellular: water restricted in a sphere of radius R, Gaussian
  phase distribution (GPD) approximation with fixed diffusivity d_ic;
* extracellular-extravascular: isotropic ball, exp(-b d_ees).

All functions are vectorised over voxels; analytic partial derivatives
with respect to (f_ic, f_ees, radius, d_ees, s0) feed both the
Levenberg-Marquardt solver and network backpropagation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erf

from .protocol import AcquisitionProtocol, MeasurementSetting, PhysicalConstants

PARAM_NAMES = ("f_ic", "f_ees", "radius", "d_ees", "s0")

# Biophysical parameter ranges (also the sampling/fit box downstream).
F_IC_RANGE = (0.01, 0.99)
F_EES_RANGE = (0.01, 0.99)
RADIUS_RANGE = (0.01, 15.0)
D_EES_RANGE = (0.5, 3.0)

# Below this b*d the astrosticks expression switches to its Taylor series
# to avoid the 0/0 at b=0.
_VASC_SERIES_THRESHOLD = 1e-6

# Voxel-axis chunk for the (voxels x measurements x roots) temporaries.
_CHUNK = 16384

DEFAULT_ROOT_COUNT = 20


@dataclass(frozen=True)
class ModelConstants:
    """Fixed compartment diffusivities (um^2/ms); never fitted."""

    d_ic: float = 2.0
    d_vasc: float = 8.0


@dataclass(frozen=True)
class TissueParams:
    """One voxel's free parameters.  f_vasc is derived, not stored."""

    f_ic: float
    f_ees: float
    radius: float
    d_ees: float
    s0: float = 1.0

    @property
    def f_vasc(self) -> float:
        return 1.0 - self.f_ic - self.f_ees

    def to_array(self) -> np.ndarray:
        return np.array([self.f_ic, self.f_ees, self.radius, self.d_ees, self.s0])

    @classmethod
    def from_array(cls, arr) -> "TissueParams":
        f_ic, f_ees, radius, d_ees, s0 = (float(v) for v in arr)
        return cls(f_ic=f_ic, f_ees=f_ees, radius=radius, d_ees=d_ees, s0=s0)

    def validate(self) -> None:
        validate_params(self.to_array())


def validate_params(params: np.ndarray) -> None:
    """Raise ValueError when any row violates the parameter box or
    f_ic + f_ees <= 1."""
    p = np.atleast_2d(np.asarray(params, dtype=float))
    checks = [
        ("f_ic", p[:, 0], F_IC_RANGE),
        ("f_ees", p[:, 1], F_EES_RANGE),
        ("radius", p[:, 2], RADIUS_RANGE),
        ("d_ees", p[:, 3], D_EES_RANGE),
    ]
    for name, col, (lo, hi) in checks:
        if np.any(col < lo) or np.any(col > hi):
            raise ValueError(f"{name} outside [{lo}, {hi}]")
    if np.any(p[:, 0] + p[:, 1] > 1.0 + 1e-12):
        raise ValueError("f_ic + f_ees exceeds 1")
    if np.any(p[:, 4] <= 0):
        raise ValueError("s0 must be > 0")


# ---------------------------------------------------------------------------
# GPD sphere roots
# ---------------------------------------------------------------------------

def sphere_root_equation(x):
    """Defining condition for the sphere roots: (x^2-2) sin x + 2x cos x.

    Zeros are the stationary points of the spherical Bessel function j1,
    equivalently the roots of x J'_{3/2}(x) - J_{3/2}(x)/2.
    """
    x = np.asarray(x, dtype=float)
    return (x * x - 2.0) * np.sin(x) + 2.0 * x * np.cos(x)


def _root_equation_prime(x):
    # d/dx [(x^2-2) sin x + 2x cos x] collapses to x^2 cos x.
    return x * x * np.cos(x)


@dataclass(frozen=True)
class SphereRootTable:
    """First m_count positive roots of the sphere condition, ascending."""

    roots: np.ndarray
    m_count: int

    def __post_init__(self):
        arr = np.asarray(self.roots, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "roots", arr)
        if arr.shape != (self.m_count,):
            raise ValueError("roots length disagrees with m_count")
        if np.any(arr <= 0) or np.any(np.diff(arr) <= 0):
            raise ValueError("roots must be positive and strictly increasing")

    def residuals(self) -> np.ndarray:
        """Equation residual per root, normalised by x^2 so the scale is
        O(1) across the table."""
        return sphere_root_equation(self.roots) / self.roots**2


def compute_gpd_roots(m_count: int) -> SphereRootTable:
    """Find the first m_count sphere roots.

    Root m lives strictly inside ((m-1) pi, m pi); the endpoints have
    opposite equation signs, so bisection brackets each root and a
    safeguarded Newton step (f' = x^2 cos x) polishes it.  Deterministic;
    failure to converge raises.
    """
    if m_count < 1:
        raise ValueError("m_count must be >= 1")
    roots = np.empty(m_count)
    for m in range(1, m_count + 1):
        lo = 0.5 if m == 1 else (m - 1) * math.pi
        hi = m * math.pi
        roots[m - 1] = _polish_root(lo, hi)
    return SphereRootTable(roots=roots, m_count=m_count)


def _polish_root(lo: float, hi: float) -> float:
    f_lo = float(sphere_root_equation(lo))
    f_hi = float(sphere_root_equation(hi))
    if not (f_lo > 0) != (f_hi > 0):
        raise RuntimeError(f"bracket ({lo}, {hi}) does not change sign")
    x = 0.5 * (lo + hi)
    for _ in range(200):
        f = float(sphere_root_equation(x))
        if f == 0.0:
            return x
        if (f > 0) == (f_lo > 0):
            lo = x
        else:
            hi = x
        fp = float(_root_equation_prime(x))
        step = f / fp if fp != 0 else math.inf
        x_new = x - step
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)  # Newton left the bracket: bisect
        if abs(x_new - x) <= 4 * np.finfo(float).eps * x:
            return x_new
        x = x_new
    # Residual check instead of hard failure on slow last-ulp dithering.
    if abs(float(sphere_root_equation(x)) / x**2) <= 1e-12:
        return x
    raise RuntimeError(f"sphere root in ({lo}, {hi}) did not converge")


@lru_cache(maxsize=8)
def default_root_table(m_count: int = DEFAULT_ROOT_COUNT) -> SphereRootTable:
    """Shared read-only root table (computed once per root count)."""
    return compute_gpd_roots(m_count)


# ---------------------------------------------------------------------------
# Compartment signals
# ---------------------------------------------------------------------------

def signal_ees(b, d_ees):
    """Isotropic ball: exp(-b * d_ees).  b in ms/um^2, d in um^2/ms."""
    b = np.asarray(b, dtype=float)
    out = np.exp(-b * np.asarray(d_ees, dtype=float))
    return out if out.ndim else float(out)


def signal_vasc(b, d_vasc):
    """Spherical mean of randomly oriented sticks.

    (sqrt(pi)/2) erf(sqrt(b d)) / sqrt(b d), with a 3-term Taylor branch
    1 - x/3 + x^2/10 for x = b*d below 1e-6 to remove the 0/0 limit.
    """
    x = np.asarray(b, dtype=float) * np.asarray(d_vasc, dtype=float)
    x = np.atleast_1d(x.astype(float))
    out = np.empty_like(x)
    small = x < _VASC_SERIES_THRESHOLD
    xs = x[small]
    out[small] = 1.0 - xs / 3.0 + xs * xs / 10.0
    xl = x[~small]
    root = np.sqrt(xl)
    out[~small] = 0.5 * math.sqrt(math.pi) * erf(root) / root
    out = out.reshape(np.shape(np.asarray(b) * np.asarray(d_vasc)))
    return out if out.ndim else float(out)


def _sphere_core(radius, delta, Delta, g2, roots, d_ic, want_derivative=False):
    """GPD sphere attenuation for a batch of radii against a set of
    measurements.

    radius: (N,); delta, Delta, g2: (M,) with g2 = gamma^2 G^2 in
    1/(ms um^2) (zero marks b=0).  Returns (N, M) signal and, when
    requested, its derivative with respect to radius.
    """
    x = roots  # (K,)
    r = radius[:, None, None]  # (N,1,1)
    dd = delta[None, :, None]  # (1,M,1)
    DD = Delta[None, :, None]

    u = (x * x * d_ic)[None, None, :] / (r * r)  # (N,1,K) -> broadcasts
    e_diff = np.exp(-u * (DD - dd))
    e_d = np.exp(-u * dd)
    e_D = np.exp(-u * DD)
    e_sum = np.exp(-u * (DD + dd))
    p = 2.0 + e_diff - 2.0 * e_d - 2.0 * e_D + e_sum
    bracket = 2.0 * dd - p / u

    coef = 1.0 / (x**4 * (x * x - 2.0))  # (K,)
    series = np.einsum("nmk,k->nm", bracket, coef)
    scale = -(2.0 / d_ic) * g2[None, :] * radius[:, None] ** 4  # (N,M)
    signal = np.exp(scale * series)

    if not want_derivative:
        return signal, None

    p_prime = (
        -(DD - dd) * e_diff + 2.0 * dd * e_d + 2.0 * DD * e_D - (DD + dd) * e_sum
    )
    dbracket_du = (p - u * p_prime) / (u * u)
    # d/dR of R^4 * bracket(u(R)) with u = x^2 d / R^2:
    #   R^3 * (4 bracket - 2 u dbracket/du)
    inner = np.einsum("nmk,k->nm", 4.0 * bracket - 2.0 * u * dbracket_du, coef)
    dlog_dr = -(2.0 / d_ic) * g2[None, :] * radius[:, None] ** 3 * inner
    return signal, signal * dlog_dr


def signal_sphere(
    setting: MeasurementSetting,
    radius: float,
    constants: ModelConstants = ModelConstants(),
    physical: PhysicalConstants = PhysicalConstants(),
    roots: SphereRootTable | None = None,
) -> float:
    """GPD sphere attenuation for a single measurement setting."""
    if roots is None:
        roots = default_root_table()
    if roots.m_count < 1:
        raise ValueError("empty root table")
    if setting.b == 0:
        return 1.0
    b_int = setting.b * 1e-3
    g2 = b_int / (setting.delta**2 * (setting.Delta - setting.delta / 3.0))
    sig, _ = _sphere_core(
        np.array([radius]),
        np.array([setting.delta]),
        np.array([setting.Delta]),
        np.array([g2]),
        roots.roots,
        constants.d_ic,
    )
    return float(sig[0, 0])


def _protocol_arrays(protocol: AcquisitionProtocol):
    """(b, delta, Delta, g2) in internal units; g2 = gamma^2 G^2 comes
    straight from b so the gamma value never enters the signal."""
    b = protocol.b_internal
    delta = protocol.delta
    Delta = protocol.Delta
    g2 = np.zeros_like(b)
    dw = b > 0
    g2[dw] = b[dw] / (delta[dw] ** 2 * (Delta[dw] - delta[dw] / 3.0))
    return b, delta, Delta, g2


def _as_param_matrix(params):
    if isinstance(params, TissueParams):
        arr = params.to_array()[None, :]
        return arr, True
    arr = np.asarray(params, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def signal_total(
    params,
    protocol: AcquisitionProtocol,
    constants: ModelConstants = ModelConstants(),
    roots: SphereRootTable | None = None,
    validate: bool = True,
):
    """Total signal for TissueParams, a 5-vector, or an (N, 5) batch.

    Returns shape (M,) for single-voxel input, (N, M) for a batch.  The
    b=0 entries equal s0 exactly: the convex combination is evaluated as
    S_vasc + f_ic (S_ic - S_vasc) + f_ees (S_ees - S_vasc), which is
    identically 1 when all compartments are 1.
    """
    p, single = _as_param_matrix(params)
    if validate:
        validate_params(p)
    if roots is None:
        roots = default_root_table()
    if roots.m_count < 1:
        raise ValueError("empty root table")
    b, delta, Delta, g2 = _protocol_arrays(protocol)

    out = np.empty((p.shape[0], len(protocol)))
    for lo in range(0, p.shape[0], _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, p.shape[0]))
        out[sl] = _total_chunk(p[sl], b, delta, Delta, g2, constants, roots.roots)[0]
    return out[0] if single else out


def _total_chunk(p, b, delta, Delta, g2, constants, roots, want_jacobian=False):
    f_ic = p[:, 0:1]
    f_ees = p[:, 1:2]
    radius = p[:, 2]
    d_ees = p[:, 3:4]
    s0 = p[:, 4:5]

    s_ees = np.exp(-b[None, :] * d_ees)  # (N,M)
    s_vasc = np.broadcast_to(signal_vasc(b, constants.d_vasc), s_ees.shape)
    s_ic, ds_ic_dr = _sphere_core(
        radius, delta, Delta, g2, roots, constants.d_ic, want_derivative=want_jacobian
    )

    mix = s_vasc + f_ic * (s_ic - s_vasc) + f_ees * (s_ees - s_vasc)
    total = s0 * mix
    if not want_jacobian:
        return total, None

    jac = np.empty(total.shape + (5,))
    jac[:, :, 0] = s0 * (s_ic - s_vasc)
    jac[:, :, 1] = s0 * (s_ees - s_vasc)
    jac[:, :, 2] = s0 * f_ic * ds_ic_dr
    jac[:, :, 3] = s0 * f_ees * (-b[None, :]) * s_ees
    jac[:, :, 4] = mix
    return total, jac


def signal_jacobian(
    params,
    protocol: AcquisitionProtocol,
    constants: ModelConstants = ModelConstants(),
    roots: SphereRootTable | None = None,
    validate: bool = False,
):
    """Analytic partial derivatives of each measurement with respect to
    (f_ic, f_ees, radius, d_ees, s0).

    Returns (M, 5) for single-voxel input, (N, M, 5) for a batch.
    """
    p, single = _as_param_matrix(params)
    if validate:
        validate_params(p)
    if roots is None:
        roots = default_root_table()
    b, delta, Delta, g2 = _protocol_arrays(protocol)

    jac = np.empty((p.shape[0], len(protocol), 5))
    for lo in range(0, p.shape[0], _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, p.shape[0]))
        jac[sl] = _total_chunk(
            p[sl], b, delta, Delta, g2, constants, roots.roots, want_jacobian=True
        )[1]
    return jac[0] if single else jac


def signal_and_jacobian(
    params,
    protocol: AcquisitionProtocol,
    constants: ModelConstants = ModelConstants(),
    roots: SphereRootTable | None = None,
):
    """Batched total signal and Jacobian in one pass (shared exponentials).

    params must be (N, 5); returns ((N, M), (N, M, 5)).
    """
    p = np.asarray(params, dtype=float)
    if roots is None:
        roots = default_root_table()
    b, delta, Delta, g2 = _protocol_arrays(protocol)
    total = np.empty((p.shape[0], len(protocol)))
    jac = np.empty((p.shape[0], len(protocol), 5))
    for lo in range(0, p.shape[0], _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, p.shape[0]))
        total[sl], jac[sl] = _total_chunk(
            p[sl], b, delta, Delta, g2, constants, roots.roots, want_jacobian=True
        )
    return total, jac
