"""Three-step phase-shifting measurement and field reconstruction.

Sign convention: the shift ``delta_m`` is added to the SLM phase, i.e. the
modulated arm is multiplied by ``exp(+1j * delta_m)``. With that choice the
three-step combination returns ``2 * r * conj(y)`` for a reference ``r`` and
element amplitude ``y``, so the physical field is the complex conjugate of the
combination and the correction phase to display is ``+arg`` of the
combination. :func:`check_sign_convention` verifies this on a small bench.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .basis import CANONICAL, BasisMatrix, Ordering, make_basis, reshape_2d
from .optics import (
    BenchState,
    DetectorModel,
    NoPerturbation,
    GlassSlide,
    amplitude_at_detector,
    cell_sums,
    detect,
    encode_correction,
    encode_element,
    make_bench,
    noise_stream,
)

PHASE_SHIFTS = (0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0)

# The three-step combination yields conj(field) under the +delta convention above.
CONJUGATE_OUTPUT = True


@dataclass(frozen=True, eq=False)
class ComplexField:
    """Per-super-pixel complex field, known up to a global complex factor."""

    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.size

    def grid(self) -> np.ndarray:
        return reshape_2d(self.values)

    def correction_phase(self) -> np.ndarray:
        """Phase grid that brings every super-pixel into phase at the focus."""
        return np.mod(-np.angle(self.grid()), 2 * np.pi)

    def correlation(self, other) -> float:
        """Normalized complex correlation ``|<a, b>| / (|a| |b|)``."""
        b = other.values if isinstance(other, ComplexField) else np.asarray(other)
        a = self.values
        den = np.linalg.norm(a) * np.linalg.norm(b)
        if den == 0:
            return 0.0
        return float(abs(np.vdot(a, b)) / den)


@dataclass(eq=False)
class InterferogramSet:
    """Intensities ``values[k, m]`` for basis row ``k`` and shift ``m``.

    ``natural_index[k]`` is the natural-order row displayed for record ``k``;
    reordering to another ordering of the same basis only permutes records.
    """

    values: np.ndarray
    basis_kind: str
    ordering: str
    natural_index: np.ndarray
    exposure_ms: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.natural_index = np.asarray(self.natural_index, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape[1] != 3:
            raise ValueError("interferograms must be an n x 3 array")
        if self.natural_index.shape != (self.values.shape[0],):
            raise ValueError("natural_index length mismatch")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("interferograms must be finite")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def shift_vectors(self):
        """The three length-``n`` vectors ``I_m`` (one per phase shift)."""
        return tuple(self.values[:, m] for m in range(3))

    def reorder(self, basis: BasisMatrix) -> InterferogramSet:
        """Records permuted into the row order of ``basis``."""
        if basis.n != self.n:
            raise ValueError("basis size does not match interferograms")
        if (basis.kind == CANONICAL) != (self.basis_kind == CANONICAL):
            raise ValueError("cannot reorder between canonical and Hadamard")
        pos = np.empty(self.n, dtype=np.int64)
        pos[self.natural_index] = np.arange(self.n)
        take = pos[basis.perm]
        return InterferogramSet(self.values[take], self.basis_kind, basis.label,
                                basis.perm.copy(), self.exposure_ms, dict(self.meta))

    def to_csv(self, path) -> tuple[Path, Path]:
        """Write ``element,shift_index,intensity`` rows plus a JSON sidecar."""
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["element", "shift_index", "intensity"])
            for k in range(self.n):
                for m in range(3):
                    w.writerow([k, m, repr(float(self.values[k, m]))])
        meta = {
            "n": self.n,
            "basis": self.basis_kind,
            "ordering": self.ordering,
            "natural_index": [int(i) for i in self.natural_index],
            "exposure_ms": self.exposure_ms,
            "phase_shifts": list(PHASE_SHIFTS),
            **self.meta,
        }
        side = path.with_suffix(".json")
        side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path, side

    @classmethod
    def from_csv(cls, path) -> InterferogramSet:
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        n = int(meta.pop("n"))
        values = np.full((n, 3), np.nan)
        with path.open(newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                values[int(rec["element"]), int(rec["shift_index"])] = float(rec["intensity"])
        if np.isnan(values).any():
            raise ValueError(f"{path}: missing interferogram records")
        meta.pop("phase_shifts", None)
        return cls(values, meta.pop("basis"), meta.pop("ordering"),
                   np.asarray(meta.pop("natural_index")), float(meta.pop("exposure_ms")), meta)

    def basis(self) -> BasisMatrix:
        if self.basis_kind == CANONICAL:
            return make_basis(self.n, CANONICAL)
        b = make_basis(self.n, "hadamard", Ordering.parse(self.ordering))
        if not np.array_equal(b.perm, self.natural_index):
            raise ValueError("stored row order does not match the named ordering")
        return b


def element_amplitudes(bench: BenchState, basis: BasisMatrix) -> np.ndarray:
    """Noiseless focal amplitudes ``(n, 3)`` of every element and shift.

    Exact for the simulated optics: the amplitude at ``detect_px`` is a linear
    functional of the SLM field, so each pattern's value is assembled from
    per-super-pixel sums of the quantized pixel contributions instead of one
    full propagation per pattern.
    """
    n = basis.n
    prism = bench.prism_pattern()
    out = np.empty((n, 3), dtype=complex)
    for m, delta in enumerate(PHASE_SHIFTS):
        plus = cell_sums(bench.contribution_map(prism + delta), n)
        if basis.kind == CANONICAL:
            flat = cell_sums(bench.contribution_map(np.zeros_like(prism) + delta), n)
            idx = basis.perm
            out[:, m] = flat.sum() - flat[idx] + plus[idx]
        else:
            minus = cell_sums(bench.contribution_map(prism + np.pi + delta), n)
            out[:, m] = 0.5 * (plus + minus).sum() + basis.apply(0.5 * (plus - minus))
    return out


def element_amplitude_direct(bench: BenchState, basis: BasisMatrix, k: int, m: int) -> complex:
    """Same quantity as :func:`element_amplitudes` via an explicit SLM render."""
    slm = encode_element(bench, basis, k, PHASE_SHIFTS[m])
    return amplitude_at_detector(bench, slm.phase)


def measure(bench: BenchState, basis: BasisMatrix, exposure_ms: float = 1.0,
            seed: int | None = None) -> InterferogramSet:
    """Record ``3n`` interferograms ``|r + exp(i delta_m) y_k|**2`` at ``detect_px``.

    Noise for record ``(natural row, shift)`` comes from a fixed position of
    a stream keyed by ``seed``, so measuring in any order gives the same
    numbers for the same pattern.
    """
    det = bench.detector
    seed = det.rng_seed if seed is None else seed
    y = element_amplitudes(bench, basis) * np.sqrt(bench.modulated_fraction)
    total = bench.reference_amp + y
    nat = np.asarray(basis.perm)
    # detect() reads draws in C order, so present the records in natural order.
    order = np.argsort(nat, kind="stable")
    values = np.empty((basis.n, 3))
    values[order] = detect(total[order], det, exposure_ms, noise_stream(seed, 0xA11, basis.n))
    ideal = exposure_ms * np.abs(total) ** 2
    sat = float(np.mean(ideal >= det.full_scale)) if np.isfinite(det.full_scale) else 0.0
    return InterferogramSet(values, basis.kind, basis.label, nat, exposure_ms,
                            {"seed": int(seed), "saturation_fraction": sat,
                             "reference_amp": [bench.reference_amp.real, bench.reference_amp.imag]})


def combine_three_step(x1, x2, x3) -> np.ndarray:
    """x = -(x2 + x3 - 2 x1) / 3 + i (x2 - x3) / sqrt(3), elementwise."""
    x1, x2, x3 = (np.asarray(v, dtype=float) for v in (x1, x2, x3))
    if not (x1.shape == x2.shape == x3.shape):
        raise ValueError("shift vectors must have equal length")
    return -(x2 + x3 - 2.0 * x1) / 3.0 + 1j * (x2 - x3) / np.sqrt(3.0)


def to_field(combined: np.ndarray) -> ComplexField:
    return ComplexField(np.conj(combined) if CONJUGATE_OUTPUT else np.asarray(combined))


def reconstruct_full(basis: BasisMatrix, igrams: InterferogramSet) -> ComplexField:
    """Invert the basis for each shift, then combine the three shifts."""
    if basis.n != igrams.n:
        raise ValueError("basis size does not match interferograms")
    if not np.array_equal(basis.perm, igrams.natural_index):
        igrams = igrams.reorder(basis)
    xs = basis.solve(igrams.values.T)
    return to_field(combine_three_step(*xs))


def correction_slm(bench: BenchState, fld: ComplexField):
    return encode_correction(bench, fld.correction_phase())


@lru_cache(maxsize=1)
def check_sign_convention() -> bool:
    """Correct a tiny noiseless glass bench with both signs; ours must win."""
    det = DetectorModel(quant_bits=0, shot_noise=False, read_noise_sigma=0.0, full_scale=np.inf)
    bench = make_bench(64, GlassSlide(phase_step=np.pi / 2), det, slm_levels=0, n_ref=16)
    basis = make_basis(16, "hadamard")
    fld = reconstruct_full(basis, measure(bench, basis))
    ours = abs(amplitude_at_detector(bench, correction_slm(bench, fld).phase))
    flipped = ComplexField(np.conj(fld.values))
    theirs = abs(amplitude_at_detector(bench, correction_slm(bench, flipped).phase))
    if not ours > theirs:
        raise RuntimeError("three-step sign convention is inverted")
    return True
