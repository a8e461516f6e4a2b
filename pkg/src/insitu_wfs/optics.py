"""Simulated bench: SLM with blazed prism, phase screens, Fraunhofer focus, camera.

Units: the SLM amplitude is scaled so that the plain, unperturbed prism
focuses to an intensity of ``BenchState.peak_rate`` (detector units per ms)
at the first-order detection pixel. Detector images are ``exposure_ms`` times
intensity, clipped to ``full_scale`` and quantized.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np
from scipy import fft as sfft
from scipy.special import ndtri

from .basis import BasisMatrix, CANONICAL, is_power_of_four

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------- perturbations


@dataclass(frozen=True)
class NoPerturbation:
    name = "none"

    def phase(self, side: int) -> np.ndarray:
        return np.zeros((side, side))

    def amplitude(self) -> float:
        return 1.0


@dataclass(frozen=True)
class GlassSlide:
    """Straight phase step across the aperture.

    The edge passes ``edge_offset`` px from the grid centre at ``edge_angle``
    radians from the row axis; pixels on the positive side get ``phase_step``.
    """

    edge_angle: float = np.deg2rad(30.0)
    phase_step: float = np.pi
    edge_offset: float = 0.0
    name = "glass"

    def phase(self, side: int) -> np.ndarray:
        r, c = _centred_coords(side)
        dist = np.cos(self.edge_angle) * r - np.sin(self.edge_angle) * c - self.edge_offset
        return np.where(dist > 0, self.phase_step, 0.0) % TWO_PI

    def amplitude(self) -> float:
        return 1.0


@dataclass(frozen=True)
class RandomScreen:
    """i.i.d. uniform phases on square cells of ``correlation_px``, upsampled.

    ``transmission`` is the field amplitude factor for light lost to wide-angle
    scattering.
    """

    seed: int = 7
    correlation_px: int = 6
    transmission: float = 1.0
    name = "scatterer"

    def phase(self, side: int) -> np.ndarray:
        if self.correlation_px < 1:
            raise ValueError("correlation_px must be >= 1")
        cells = -(-side // self.correlation_px)
        rng = np.random.Generator(np.random.PCG64(int(self.seed)))
        coarse = rng.uniform(0.0, TWO_PI, size=(cells, cells))
        up = np.repeat(np.repeat(coarse, self.correlation_px, axis=0), self.correlation_px, axis=1)
        return up[:side, :side].copy()

    def amplitude(self) -> float:
        return float(self.transmission)


Perturbation = Union[NoPerturbation, GlassSlide, RandomScreen]


def perturbation_from_dict(spec: dict | None) -> Perturbation:
    """Build a perturbation from ``{"kind": ..., **params}``; angles in degrees."""
    if not spec:
        return NoPerturbation()
    spec = dict(spec)
    kind = spec.pop("kind", "none")
    if kind in ("none", None):
        return NoPerturbation()
    if kind == "glass":
        if "edge_angle_deg" in spec:
            spec["edge_angle"] = np.deg2rad(spec.pop("edge_angle_deg"))
        return GlassSlide(**spec)
    if kind in ("scatterer", "random"):
        return RandomScreen(**spec)
    raise ValueError(f"unknown perturbation kind {kind!r}")


def perturbation_to_dict(p: Perturbation) -> dict:
    if isinstance(p, GlassSlide):
        return {"kind": "glass", "edge_angle_deg": float(np.rad2deg(p.edge_angle)),
                "phase_step": float(p.phase_step), "edge_offset": float(p.edge_offset)}
    if isinstance(p, RandomScreen):
        return {"kind": "scatterer", "seed": int(p.seed), "correlation_px": int(p.correlation_px),
                "transmission": float(p.transmission)}
    return {"kind": "none"}


def _centred_coords(side: int):
    ax = np.arange(side) - side / 2 + 0.5
    return np.meshgrid(ax, ax, indexing="ij")


# ---------------------------------------------------------------- SLM


@dataclass(frozen=True)
class PrismPhase:
    """Diagonal blazed grating.

    The ramp completes ``round(side / period_px)`` cycles across the aperture
    along each axis, so the first order lands exactly on a Fourier bin.
    """

    period_px: float = 20.0

    def __post_init__(self):
        if self.period_px < 2:
            raise ValueError("prism period must be at least 2 px")

    def cycles(self, side: int) -> int:
        return int(round(side / self.period_px))

    def pattern(self, side: int) -> np.ndarray:
        k = self.cycles(side)
        idx = np.arange(side)
        return (TWO_PI * k * (idx[:, None] + idx[None, :]) / side) % TWO_PI


@dataclass(frozen=True, eq=False)
class SlmPlane:
    side_px: int
    phase: np.ndarray
    amplitude: np.ndarray

    def field(self, perturbation_phase=None, transmission: float = 1.0) -> np.ndarray:
        ph = self.phase if perturbation_phase is None else self.phase + perturbation_phase
        return transmission * self.amplitude * np.exp(1j * ph)


def quantize_phase(phase: np.ndarray, levels: int) -> np.ndarray:
    """Wrap to [0, 2pi) and, if ``levels`` > 0, snap to ``levels`` grey levels."""
    phase = np.mod(phase, TWO_PI)
    if not levels:
        return phase
    step = TWO_PI / levels
    return np.mod(np.round(phase / step), levels) * step


# ---------------------------------------------------------------- detector


@dataclass(frozen=True)
class DetectorModel:
    """Single camera model used for spot photographs and interferograms.

    Shot noise is Gaussian with variance ``signal * full_scale / full_well``;
    read noise is additive with standard deviation ``read_noise_sigma`` in
    intensity units. ``quant_bits = 0`` disables quantization.
    """

    quant_bits: int = 8
    full_scale: float = 1.0
    shot_noise: bool = True
    full_well: float = 60000.0
    read_noise_sigma: float = 1e-3
    rng_seed: int = 1

    @property
    def noiseless(self) -> bool:
        return not self.shot_noise and self.read_noise_sigma == 0

    def ideal(self) -> DetectorModel:
        """Same detector with noise, clipping and quantization switched off."""
        return replace(self, quant_bits=0, shot_noise=False, read_noise_sigma=0.0,
                       full_scale=np.inf)


def noise_stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, *key)``.

    Draw ``k`` of a stream sits at a fixed counter position, so measurement
    ``(element, shift)`` always sees the same noise however the work is split.
    """
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *[int(k) for k in key]])
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))


def detect(field: np.ndarray, detector: DetectorModel, exposure_ms: float,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Intensity recorded by the camera for a complex field.

    Returns ``exposure_ms * |field|**2`` with shot and read noise added, then
    clipped to ``[0, full_scale]`` and quantized. Pixel ``p`` uses uniform
    draws ``2p`` and ``2p + 1`` of ``rng``.
    """
    if exposure_ms <= 0:
        raise ValueError("exposure must be positive")
    signal = exposure_ms * np.abs(field) ** 2
    if detector.shot_noise or detector.read_noise_sigma > 0:
        if rng is None:
            rng = noise_stream(detector.rng_seed)
        u = rng.random(signal.shape + (2,))
        u = np.clip(u, 1e-300, 1.0 - 1e-16)
        z = ndtri(u)
        if detector.shot_noise:
            signal = signal + np.sqrt(signal * detector.full_scale / detector.full_well) * z[..., 0]
        if detector.read_noise_sigma > 0:
            signal = signal + detector.read_noise_sigma * z[..., 1]
    out = np.clip(signal, 0.0, detector.full_scale)
    if detector.quant_bits:
        top = 2 ** detector.quant_bits - 1
        out = np.round(out / detector.full_scale * top) * (detector.full_scale / top)
    return out


def quantization_levels(image: np.ndarray, detector: DetectorModel) -> np.ndarray:
    """Integer grey levels of a detected image (for PGM export)."""
    top = 2 ** (detector.quant_bits or 16) - 1
    fs = detector.full_scale if np.isfinite(detector.full_scale) else max(float(image.max()), 1e-300)
    return np.clip(np.round(image / fs * top), 0, top).astype(np.uint16)


# ---------------------------------------------------------------- bench


@dataclass(frozen=True, eq=False)
class BenchState:
    """Everything fixed for one experiment on the simulated bench.

    Build with :func:`make_bench`, which locates ``detect_px`` and calibrates
    the field scale and reference amplitude.
    """

    side_px: int = 512
    waist_px: float = 256.0
    slm_levels: int = 256
    prism: PrismPhase = field(default_factory=PrismPhase)
    perturbation: Perturbation = field(default_factory=NoPerturbation)
    detector: DetectorModel = field(default_factory=DetectorModel)
    peak_rate: float = 10.0
    modulated_fraction: float = 0.08
    reference_amp: complex = 0.0
    detect_px: tuple = (0, 0)
    camera_oversample: int = 8
    field_scale: float = 1.0

    # -- cached derived arrays (computed lazily, bench is immutable)
    def _cache(self) -> dict:
        c = self.__dict__.get("_derived")
        if c is None:
            c = {}
            object.__setattr__(self, "_derived", c)
        return c

    def amplitude(self) -> np.ndarray:
        c = self._cache()
        if "amp" not in c:
            r, col = _centred_coords(self.side_px)
            c["amp"] = self.field_scale * np.exp(-(r**2 + col**2) / self.waist_px**2)
        return c["amp"]

    def prism_pattern(self) -> np.ndarray:
        c = self._cache()
        if "prism" not in c:
            c["prism"] = self.prism.pattern(self.side_px)
        return c["prism"]

    def perturbation_phase(self) -> np.ndarray:
        c = self._cache()
        if "pert" not in c:
            c["pert"] = self.perturbation.phase(self.side_px)
        return c["pert"]

    def detect_kernel(self):
        """Row/column phasors evaluating the centred DFT at ``detect_px``."""
        c = self._cache()
        if "kern" not in c:
            fr = self.detect_px[0] - self.side_px // 2
            fc = self.detect_px[1] - self.side_px // 2
            idx = np.arange(self.side_px)
            c["kern"] = (np.exp(-2j * np.pi * fr * idx / self.side_px),
                         np.exp(-2j * np.pi * fc * idx / self.side_px))
        return c["kern"]

    def slm(self, phase: np.ndarray) -> SlmPlane:
        return SlmPlane(self.side_px, quantize_phase(phase, self.slm_levels), self.amplitude())

    def contribution_map(self, slm_phase: np.ndarray) -> np.ndarray:
        """Per-pixel contribution to the focal amplitude at ``detect_px``."""
        kr, kc = self.detect_kernel()
        u = self.slm(slm_phase).field(self.perturbation_phase(), self.perturbation.amplitude())
        return u * kr[:, None] * kc[None, :]

    def with_(self, **kw) -> BenchState:
        return replace(self, **kw)


def make_bench(side_px: int = 512, perturbation: Perturbation | None = None,
               detector: DetectorModel | None = None, *, n_ref: int = 64,
               reference_amp: complex | None = None, **kw) -> BenchState:
    """Assemble a bench and calibrate it.

    The detection pixel is the argmax of the unperturbed plain-prism focus,
    the field scale makes that peak equal ``peak_rate``, and unless given the
    reference amplitude equals the RMS amplitude of the Hadamard elements at
    ``n_ref`` (interferometry units), which maximises the mean fringe
    visibility at that basis size.
    """
    bench = BenchState(side_px=side_px, perturbation=perturbation or NoPerturbation(),
                       detector=detector or DetectorModel(), **kw)
    flat = bench.with_(perturbation=NoPerturbation(), field_scale=1.0)
    img = propagate(flat.slm(flat.prism_pattern()))
    pk = np.unravel_index(int(np.argmax(np.abs(img))), img.shape)
    bench = bench.with_(detect_px=(int(pk[0]), int(pk[1])))
    unscaled = bench.with_(perturbation=NoPerturbation(), field_scale=1.0)
    peak = abs(unscaled.contribution_map(unscaled.prism_pattern()).sum())
    bench = bench.with_(field_scale=float(np.sqrt(bench.peak_rate) / peak))
    if reference_amp is None:
        x = ground_truth_field(bench, n_ref) * np.sqrt(bench.modulated_fraction)
        # mean_i |(H x)_i|^2 = sum_j |x_j|^2 for a Sylvester matrix
        reference_amp = float(np.linalg.norm(x))
    return bench.with_(reference_amp=complex(reference_amp))


# ---------------------------------------------------------------- encoding


def _cell_size(bench: BenchState, n: int) -> int:
    if not is_power_of_four(n):
        raise ValueError(f"n must be a power of 4, got {n}")
    q = int(round(np.sqrt(n)))
    if bench.side_px % q:
        raise ValueError(f"side {bench.side_px} px is not divisible by sqrt(n) = {q}")
    return bench.side_px // q


def upsample(grid: np.ndarray, cell: int) -> np.ndarray:
    """Nearest-neighbour blow-up of a super-pixel grid to SLM pixels."""
    return np.repeat(np.repeat(np.asarray(grid), cell, axis=0), cell, axis=1)


def cell_sums(pixel_map: np.ndarray, n: int) -> np.ndarray:
    """Sum a side x side map over super-pixels; row-major length-``n`` result."""
    q = int(round(np.sqrt(n)))
    cell = pixel_map.shape[0] // q
    return pixel_map.reshape(q, cell, q, cell).sum(axis=(1, 3)).reshape(n)


def encode_canonical(bench: BenchState, element: int, n: int, delta: float = 0.0) -> SlmPlane:
    """Prism inside super-pixel ``element`` only, flat elsewhere; ``delta`` is global."""
    cell = _cell_size(bench, n)
    if not 0 <= element < n:
        raise ValueError("element index out of range")
    q = bench.side_px // cell
    r0, c0 = divmod(element, q)
    phase = np.zeros((bench.side_px, bench.side_px))
    sl = (slice(r0 * cell, (r0 + 1) * cell), slice(c0 * cell, (c0 + 1) * cell))
    phase[sl] = bench.prism_pattern()[sl]
    return bench.slm(phase + delta)


def encode_hadamard(bench: BenchState, row, n: int, delta: float = 0.0) -> SlmPlane:
    """Full-aperture prism with a pi offset on the -1 super-pixels."""
    cell = _cell_size(bench, n)
    row = np.asarray(row)
    if row.shape != (n,):
        raise ValueError(f"row must have length {n}")
    offset = upsample((row < 0).reshape(bench.side_px // cell, -1) * np.pi, cell)
    return bench.slm(bench.prism_pattern() + offset + delta)


def encode_correction(bench: BenchState, phase_grid) -> SlmPlane:
    phase_grid = np.asarray(phase_grid, dtype=float)
    if phase_grid.ndim != 2 or phase_grid.shape[0] != phase_grid.shape[1]:
        raise ValueError("correction grid must be square")
    n = phase_grid.size
    cell = _cell_size(bench, n)
    return bench.slm(bench.prism_pattern() + upsample(phase_grid, cell))


def encode_element(bench: BenchState, basis: BasisMatrix, k: int, delta: float = 0.0) -> SlmPlane:
    """Render row ``k`` of ``basis`` (in basis order) with phase shift ``delta``."""
    if basis.kind == CANONICAL:
        return encode_canonical(bench, int(basis.perm[k]), basis.n, delta)
    return encode_hadamard(bench, basis.row(k), basis.n, delta)


# ---------------------------------------------------------------- propagation


def propagate(slm: SlmPlane, perturbation: Perturbation | None = None) -> np.ndarray:
    """Focal field: centred 2-D DFT of the SLM field (Fraunhofer, lens at f)."""
    if perturbation is None:
        u = slm.field()
    else:
        u = slm.field(perturbation.phase(slm.side_px), perturbation.amplitude())
    return sfft.fftshift(sfft.fft2(u))


def focal_window(u: np.ndarray, center, size: int, oversample: int = 1) -> np.ndarray:
    """Centred DFT of ``u`` on a ``size`` x ``size`` window around ``center``.

    ``oversample`` camera pixels per Fourier bin; window pixel
    ``(size//2, size//2)`` is exactly bin ``center``. Matrix Fourier
    transform, so cost is independent of the oversampling.
    """
    side = u.shape[0]
    offs = (np.arange(size) - size // 2) / oversample
    idx = np.arange(side)
    fr = center[0] - side // 2 + offs
    fc = center[1] - side // 2 + offs
    er = np.exp(-2j * np.pi * np.outer(fr, idx) / side)
    ec = np.exp(-2j * np.pi * np.outer(idx, fc) / side)
    return er @ u @ ec


def amplitude_at_detector(bench: BenchState, slm_phase: np.ndarray) -> complex:
    """Noiseless focal amplitude at ``detect_px`` for an SLM phase pattern."""
    return complex(bench.contribution_map(slm_phase).sum())


def photograph(bench: BenchState, slm: SlmPlane, exposure_ms: float, size: int = 64,
               rng: np.random.Generator | None = None, detector: DetectorModel | None = None) -> np.ndarray:
    """Camera frame (no reference beam) of the first-order spot."""
    u = slm.field(bench.perturbation_phase(), bench.perturbation.amplitude())
    win = focal_window(u, bench.detect_px, size, bench.camera_oversample)
    return detect(win, detector or bench.detector, exposure_ms, rng)


def ground_truth_field(bench: BenchState, n: int) -> np.ndarray:
    """Per-super-pixel focal amplitude at ``detect_px`` (photo units).

    ``x[j]`` is the contribution of super-pixel ``j`` carrying the prism, so
    the plain-prism amplitude is ``x.sum()``.
    """
    _cell_size(bench, n)
    return cell_sums(bench.contribution_map(bench.prism_pattern()), n)
