"""Scattering simulation: transmission matrices, fields, and speckle.

A disordered medium is modelled as an M x N complex matrix coupling N
input phase modes to M output field modes.  Entries are i.i.d.
circularly-symmetric complex normal with unit total variance (1/2 per
real component), which makes the mean unnormalized speckle intensity
for random incident phases equal to 1 and keeps enhancement factors
dimensionless.

Conventions used throughout the package:

* phases are stored as values in [0, 1] and map to radians as 2*pi*v;
* every input mode carries the same amplitude 1/sqrt(N), so the output
  field is E_m = sum_n t_mn * exp(2i*pi*v_n) / sqrt(N) and the
  intensity is I_m = |E_m|^2;
* speckle grids are reshaped to a square when the mode count is a
  perfect square, and flagged `normalized` after division by their max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rng import make_rng


class ShapeError(ValueError):
    """Inputs whose dimensions do not line up."""


class CalibrationError(RuntimeError):
    """Interferometric matrix recovery could not be completed."""


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _grid_shape(n: int) -> tuple[int, ...]:
    side = math.isqrt(n)
    return (side, side) if side * side == n else (n,)


@dataclass(frozen=True)
class TransmissionMatrix:
    """Complex coupling matrix, output modes (rows) x input modes (columns)."""

    entries: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.complex128)
        if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 1:
            raise ValueError(f"transmission matrix must be 2-D and nonempty, got shape {e.shape}")
        if not np.all(np.isfinite(e.view(np.float64))):
            raise ValueError("transmission matrix contains non-finite entries")
        object.__setattr__(self, "entries", _as_readonly(e))

    @property
    def n_outputs(self) -> int:
        return self.entries.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class PhasePattern:
    """Input-mode phases as values in [0, 1]; phase in radians is 2*pi*value.

    `levels` marks patterns quantized to the grey levels k/levels,
    k = 0 .. levels-1 (the discretization a phase modulator realizes).
    """

    values: np.ndarray
    levels: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.size == 0:
            raise ValueError("phase pattern is empty")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("phase values must lie in [0, 1]")
        if self.levels is not None:
            if self.levels < 2:
                raise ValueError(f"levels must be >= 2, got {self.levels}")
            scaled = v * self.levels
            if not np.allclose(scaled, np.round(scaled), atol=1e-9):
                raise ValueError("values are not on the k/levels grid")
        object.__setattr__(self, "values", _as_readonly(v))

    @property
    def n_modes(self) -> int:
        return self.values.size

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def radians(self) -> np.ndarray:
        return 2.0 * np.pi * self.flat


@dataclass(frozen=True)
class ComplexField:
    """Complex field at the output modes."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128).reshape(-1)
        if v.size == 0:
            raise ValueError("field is empty")
        if not np.all(np.isfinite(v.view(np.float64))):
            raise ValueError("field contains non-finite entries")
        object.__setattr__(self, "values", _as_readonly(v))

    @property
    def n_modes(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class SpecklePattern:
    """Nonnegative output intensities; `normalized` means divided by the max."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.size == 0:
            raise ValueError("speckle pattern is empty")
        if v.min() < 0.0:
            raise ValueError("speckle intensities must be nonnegative")
        if self.normalized and v.max() > 0.0 and abs(v.max() - 1.0) > 1e-9:
            raise ValueError("normalized speckle must have max 1 (or be all zero)")
        object.__setattr__(self, "values", _as_readonly(v))

    @property
    def n_modes(self) -> int:
        return self.values.size

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


def gen_tm(n_inputs: int, n_outputs: int, seed: int) -> TransmissionMatrix:
    """Draw an n_outputs x n_inputs matrix of i.i.d. CSCN(0, 1) entries.

    Deterministic for a fixed seed (PCG64 stream).
    """
    if n_inputs < 1 or n_outputs < 1:
        raise ValueError(f"matrix dimensions must be positive, got {n_outputs}x{n_inputs}")
    rng = make_rng(seed)
    re = rng.standard_normal((n_outputs, n_inputs))
    im = rng.standard_normal((n_outputs, n_inputs))
    return TransmissionMatrix(entries=(re + 1j * im) / np.sqrt(2.0), seed=seed)


def fields_from_phases(entries: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """Output fields for a stack of phase vectors.

    `phases` has shape (..., N) with values in [0, 1]; returns (..., M).
    Every input mode carries amplitude 1/sqrt(N).
    """
    n = entries.shape[1]
    if phases.shape[-1] != n:
        raise ShapeError(f"phase length {phases.shape[-1]} does not match {n} input modes")
    waves = np.exp(2j * np.pi * phases) / np.sqrt(n)
    return waves @ entries.T


def propagate(tm: TransmissionMatrix, phase: PhasePattern) -> ComplexField:
    """Couple a phase pattern through the medium to the output field."""
    if phase.n_modes != tm.n_inputs:
        raise ShapeError(
            f"phase pattern has {phase.n_modes} modes, matrix expects {tm.n_inputs}"
        )
    return ComplexField(fields_from_phases(tm.entries, phase.flat))


def intensity(field: ComplexField, normalize: bool = False) -> SpecklePattern:
    """Speckle intensities I_m = |E_m|^2, optionally scaled to peak 1."""
    vals = np.abs(field.values) ** 2
    if normalize:
        peak = vals.max()
        if peak > 0.0:
            vals = vals / peak
    return SpecklePattern(values=vals.reshape(_grid_shape(vals.size)), normalized=normalize)


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _sylvester(n: int) -> np.ndarray:
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


def hadamard_basis(n: int) -> list[PhasePattern]:
    """Orthogonal +-1 probe patterns encoded as phase values 0 / 0.5.

    Pattern k is row k of the order-n Sylvester-Hadamard matrix; +1 maps
    to phase value 0 and -1 to 0.5 (a pi flip).
    """
    if not _is_pow2(n):
        raise ValueError(f"Hadamard basis size must be a power of 2, got {n}")
    h = _sylvester(n)
    return [PhasePattern(values=(1.0 - h[k]) / 4.0) for k in range(n)]


def quantize_phases(values: np.ndarray, levels: int) -> np.ndarray:
    """Snap values in [0, 1] down to the grey-level grid k/levels."""
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    return np.clip(np.floor(np.asarray(values) * levels), 0, levels - 1) / levels


def calibrate_tm(
    probe: Callable[[PhasePattern], SpecklePattern],
    n_inputs: int,
    n_outputs: int,
    phase_steps: int = 4,
) -> TransmissionMatrix:
    """Recover a transmission matrix from intensity-only probing.

    Displays each Hadamard basis pattern with the whole pattern stepped
    through `phase_steps` offsets while input mode 0 is pinned at phase
    zero.  Mode 0 carries +1 in every Sylvester row, so it serves as a
    common interferometric reference: demodulating the intensity sweep
    yields each Hadamard response relative to that reference, and the
    reference magnitude itself is fixed by requiring a consistent
    quadratic relation across all probes.  Inverting the Hadamard
    transform then gives each matrix row up to one unknown unit-modulus
    factor (the unobservable reference phase of that output mode).

    The probe must return raw (unnormalized) intensities; per-pattern
    normalization would destroy the interferometric ratios.
    """
    if not _is_pow2(n_inputs):
        raise ValueError(f"n_inputs must be a power of 2, got {n_inputs}")
    if n_outputs < 1:
        raise ValueError(f"n_outputs must be positive, got {n_outputs}")
    if phase_steps < 3:
        raise ValueError(f"phase_steps must be >= 3, got {phase_steps}")

    h = _sylvester(n_inputs)
    deltas = 2.0 * np.pi * np.arange(phase_steps) / phase_steps
    meas = np.empty((n_outputs, n_inputs, phase_steps))
    for k in range(n_inputs):
        base = (1.0 - h[k]) / 4.0
        for j, d in enumerate(deltas):
            vals = np.mod(base + d / (2.0 * np.pi), 1.0)
            vals[0] = 0.0  # reference mode stays put
            out = probe(PhasePattern(values=vals))
            if out.n_modes != n_outputs:
                raise ShapeError(
                    f"oracle returned {out.n_modes} modes, expected {n_outputs}"
                )
            if out.normalized:
                raise ValueError("calibration needs unnormalized intensities")
            meas[:, k, j] = out.flat

    # Per (mode, probe): I(d) = c0 + 2*Re(e^{id} G) with
    # G = (S_k - T_0) * conj(T_0); demodulate the sweep.
    phasors = np.exp(-1j * deltas) / phase_steps
    g = meas @ phasors                  # (M, N) complex
    c0 = meas.mean(axis=2)              # (M, N)

    rows = np.empty((n_outputs, n_inputs), dtype=np.complex128)
    for m in range(n_outputs):
        gm, cm = g[m], c0[m]
        k_star = int(np.argmax(np.abs(gm)))
        disc = max(cm[k_star] ** 2 - 4.0 * np.abs(gm[k_star]) ** 2, 0.0)
        roots = ((cm[k_star] + np.sqrt(disc)) / 2.0, (cm[k_star] - np.sqrt(disc)) / 2.0)

        def residual(x: float) -> float:
            return float(np.abs(x * x - cm * x + np.abs(gm) ** 2).sum())

        r0, r1 = residual(roots[0]), residual(roots[1])
        if abs(r0 - r1) <= 1e-9 * (1.0 + r0 + r1):
            ref_power = roots[0]  # tie (e.g. N == 1): keep the live reference
        else:
            ref_power = roots[0] if r0 < r1 else roots[1]
        if not ref_power > 0.0:
            raise CalibrationError(f"reference response vanished for output mode {m}")
        w = gm + ref_power              # S_k * conj(T_0)
        rows[m] = (w @ h) * np.sqrt(n_inputs) / (n_inputs * np.sqrt(ref_power))

    return TransmissionMatrix(entries=rows, seed=None)
