"""Experiment orchestration: baselines, measurements, corrections and scoring.

A run photographs the uncorrected spot, measures the interferograms,
reconstructs the field (fully or compressively), projects the correction and
scores the corrected spot. Every random draw is keyed by a seed derived from
the master seed and the job parameters, so results do not depend on the order
in which jobs run.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import io
from .basis import CANONICAL, HADAMARD, Ordering, export_permutation_csv, is_power_of_four, make_basis
from .interferometry import (
    ComplexField,
    InterferogramSet,
    check_sign_convention,
    correction_slm,
    measure,
    reconstruct_full,
)
from .optics import (
    BenchState,
    DetectorModel,
    PrismPhase,
    make_bench,
    noise_stream,
    perturbation_from_dict,
    perturbation_to_dict,
    photograph,
    quantization_levels,
)
from .solver import SolverOptions, cs_reconstruct, noise_sigma

RESULT_COLUMNS = ("perturbation", "n", "basis", "ordering", "cr", "seed", "exposure_ms",
                  "snr", "max_corr", "mean_uncorr", "solver_iters", "converged")

DEFAULT_CR_GRID = (0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)

# Per-perturbation defaults; canonical exposures grow with n up to the cap.
PRESETS = {
    "none": {
        "perturbation": {"kind": "none"},
        "exposures": {"spot": 0.1, "hadamard": 1.0, "canonical": 10.0},
    },
    "glass": {
        "perturbation": {"kind": "glass", "edge_angle_deg": 30.0, "phase_step": math.pi},
        "exposures": {"spot": 0.1, "hadamard": 1.0,
                      "canonical": {64: 10.0, 256: 20.0, 1024: 40.0, 4096: 65.0}},
    },
    "scatterer": {
        "perturbation": {"kind": "scatterer", "seed": 7, "correlation_px": 6, "transmission": 0.7},
        "exposures": {"spot": 0.65, "hadamard": 20.0,
                      "canonical": {64: 30.0, 256: 40.0, 1024: 55.0, 4096: 65.0}},
    },
}


# ---------------------------------------------------------------- scoring


def snr(corrected, uncorrected, roi=None) -> float:
    """Maximum of ``corrected`` over mean of ``uncorrected`` inside ``roi``.

    Parameters
    ----------
    corrected, uncorrected : ndarray
        Frames of equal shape taken at the same exposure.
    roi : tuple, optional
        ``(row, col, height, width)``; the whole frame by default.
    """
    corrected = np.asarray(corrected, dtype=float)
    uncorrected = np.asarray(uncorrected, dtype=float)
    if corrected.shape != uncorrected.shape:
        raise ValueError("frames must have equal dimensions")
    if roi is None:
        roi = (0, 0) + corrected.shape
    r0, c0, h, w = (int(v) for v in roi)
    if r0 < 0 or c0 < 0 or h <= 0 or w <= 0 or r0 + h > corrected.shape[0] or c0 + w > corrected.shape[1]:
        raise ValueError(f"roi {roi} outside a {corrected.shape} frame")
    mean = float(uncorrected[r0:r0 + h, c0:c0 + w].mean())
    if mean <= 0:
        raise ValueError("uncorrected mean is zero: degenerate baseline")
    return float(corrected[r0:r0 + h, c0:c0 + w].max()) / mean


def derive_seed(master_seed: int, *params) -> int:
    """63-bit seed from a hash of the master seed and job parameters."""
    text = json.dumps([int(master_seed), *[str(p) for p in params]])
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little") >> 1


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    """Declarative description of a sweep.

    ``exposures`` maps ``spot``, ``hadamard`` and ``canonical`` to a time in
    ms, or for a basis to a ``{n: ms}`` table. Every time is clipped to
    ``exposure_cap_ms``. ``sigma`` is the basis-pursuit residual tolerance, a
    number or ``"auto"`` for the estimated noise floor. ``mode`` selects the
    full or compressive sweep.
    """

    perturbation: dict = field(default_factory=lambda: {"kind": "glass"})
    n_list: list = field(default_factory=lambda: [64, 256, 1024, 4096])
    bases: list = field(default_factory=lambda: [HADAMARD, CANONICAL])
    orderings: list = field(default_factory=lambda: ["natural", "walsh", "cake", "random:20240917"])
    cr_grid: list = field(default_factory=lambda: list(DEFAULT_CR_GRID))
    exposures: dict = field(default_factory=lambda: copy.deepcopy(PRESETS["glass"]["exposures"]))
    exposure_cap_ms: float = 65.0
    detector: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    sigma: float | str = 0.0
    two_d_dct: bool = False
    roi_px: int = 64
    master_seed: int = 2024
    save_interferograms: bool = True
    output_dir: str = "results"
    mode: str = "full"

    def __post_init__(self):
        self.validate()

    @classmethod
    def preset(cls, name: str, **overrides) -> ExperimentConfig:
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        base = copy.deepcopy(PRESETS[name])
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        data = dict(data or {})
        preset = data.pop("preset", None)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if preset is not None:
            return cls.preset(preset, **data)
        return cls(**data)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        """Read a YAML or JSON file."""
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self) -> dict:
        out = {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}
        for key in ("hadamard", "canonical"):
            table = out["exposures"].get(key)
            if isinstance(table, dict):
                out["exposures"][key] = {str(k): v for k, v in sorted(table.items(), key=lambda kv: int(kv[0]))}
        return out

    def replace(self, **kw) -> ExperimentConfig:
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig.from_dict(d)

    def validate(self) -> None:
        self.n_list = [int(n) for n in self.n_list]
        self.cr_grid = [float(c) for c in self.cr_grid]
        self.orderings = [str(Ordering.parse(str(o))) for o in self.orderings]
        for n in self.n_list:
            if not is_power_of_four(n):
                raise ValueError(f"n={n} is not a power of 4")
            side = int(self.bench.get("side_px", 512))
            if side % math.isqrt(n):
                raise ValueError(f"side_px={side} is not divisible by sqrt({n})")
        for cr in self.cr_grid:
            if not 0 < cr <= 1:
                raise ValueError(f"cr={cr} outside (0, 1]")
        for b in self.bases:
            if b not in (HADAMARD, CANONICAL):
                raise ValueError(f"unknown basis {b!r}")
        if self.mode not in ("full", "cs"):
            raise ValueError(f"mode must be 'full' or 'cs', got {self.mode!r}")
        if self.exposure_cap_ms <= 0:
            raise ValueError("exposure cap must be positive")
        if not (self.sigma == "auto" or (isinstance(self.sigma, (int, float)) and self.sigma >= 0)):
            raise ValueError("sigma must be a non-negative number or 'auto'")
        if "spot" not in self.exposures:
            raise ValueError("exposures needs a 'spot' entry")
        perturbation_from_dict(self.perturbation)
        DetectorModel(**self.detector)
        SolverOptions(**self.solver)

    # -- derived objects

    @property
    def perturbation_name(self) -> str:
        return perturbation_from_dict(self.perturbation).name

    def exposure(self, kind: str, n: int | None = None) -> float:
        """Exposure in ms for ``spot`` or a basis at size ``n``, after the cap."""
        value = self.exposures.get(kind)
        if value is None:
            raise ValueError(f"no exposure configured for {kind!r}")
        if isinstance(value, dict):
            table = {int(k): float(v) for k, v in value.items()}
            if n not in table:
                raise ValueError(f"no {kind} exposure configured for n={n}")
            value = table[n]
        value = float(value)
        if value <= 0:
            raise ValueError(f"{kind} exposure must be positive")
        return min(value, float(self.exposure_cap_ms))

    def detector_model(self) -> DetectorModel:
        return DetectorModel(**self.detector)

    def make_bench(self) -> BenchState:
        kw = dict(self.bench)
        if "prism_period_px" in kw:
            kw["prism"] = PrismPhase(float(kw.pop("prism_period_px")))
        return make_bench(kw.pop("side_px", 512), perturbation_from_dict(self.perturbation),
                          self.detector_model(), **kw)

    def solver_options(self) -> SolverOptions:
        return SolverOptions(**self.solver)


# ---------------------------------------------------------------- records


@dataclass(eq=False)
class RunRecord:
    """One scored correction. ``snr == max_corrected / mean_uncorrected``."""

    perturbation: str
    n: int
    basis: str
    ordering: str
    cr: float
    seed: int
    exposure_ms: float
    max_corrected: float = float("nan")
    mean_uncorrected: float = float("nan")
    solver_iters: int = 0
    converged: bool = False
    mode: str = "full"
    error: str = ""
    diagnostics: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)
    images: dict = field(default_factory=dict, repr=False)

    @property
    def snr(self) -> float:
        if not self.mean_uncorrected > 0:
            return float("nan")
        return self.max_corrected / self.mean_uncorrected

    @property
    def run_id(self) -> str:
        order = self.ordering.replace(":", "-")
        return f"{self.perturbation}_n{self.n}_{self.basis}_{order}_cr{self.cr:.4f}"

    def csv_row(self) -> list:
        return [self.perturbation, self.n, self.basis, self.ordering, repr(float(self.cr)),
                self.seed, repr(float(self.exposure_ms)), repr(float(self.snr)),
                repr(float(self.max_corrected)), repr(float(self.mean_uncorrected)),
                self.solver_iters, str(bool(self.converged)).lower()]

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id, "mode": self.mode, "perturbation": self.perturbation,
            "n": self.n, "basis": self.basis, "ordering": self.ordering, "cr": self.cr,
            "seed": self.seed, "exposure_ms": self.exposure_ms, "snr": self.snr,
            "max_corrected": self.max_corrected, "mean_uncorrected": self.mean_uncorrected,
            "solver_iters": self.solver_iters, "converged": self.converged, "error": self.error,
            "diagnostics": self.diagnostics, "files": self.files,
        }


# ---------------------------------------------------------------- runner


class _Session:
    """Shared state of one sweep: the bench, baselines and measured data."""

    def __init__(self, config: ExperimentConfig, replay_dir=None):
        check_sign_convention()
        self.config = config
        self.bench = config.make_bench()
        self.pert = config.perturbation_name
        self.replay_dir = Path(replay_dir) if replay_dir is not None else None
        self.spot_ms = config.exposure("spot")
        self._baselines: dict = {}
        self.interferograms: dict = {}

    def seed(self, *params) -> int:
        return derive_seed(self.config.master_seed, self.pert, *params)

    def baseline(self, n: int) -> np.ndarray:
        """Uncorrected spot (plain prism, no reference), once per ``n``."""
        if n not in self._baselines:
            rng = noise_stream(self.seed("baseline", n))
            self._baselines[n] = photograph(self.bench, self.bench.slm(self.bench.prism_pattern()),
                                            self.spot_ms, self.config.roi_px, rng)
        return self._baselines[n]

    def igram_name(self, n: int, kind: str) -> str:
        return f"{self.pert}_n{n}_{kind}.csv"

    def interferogram_set(self, n: int, kind: str) -> InterferogramSet:
        """Measured (or reloaded) interferograms in the natural row order."""
        key = (n, kind)
        if key not in self.interferograms:
            basis = make_basis(n, kind)
            if self.replay_dir is not None:
                igrams = InterferogramSet.from_csv(self.replay_dir / self.igram_name(n, kind))
                if igrams.n != n or igrams.basis_kind != kind:
                    raise ValueError(f"replayed interferograms do not match n={n}, basis={kind}")
                if not np.array_equal(igrams.natural_index, basis.perm):
                    igrams = igrams.reorder(basis)
            else:
                igrams = measure(self.bench, basis, self.config.exposure(kind, n), seed=self.seed("measure", n, kind))
            self.interferograms[key] = igrams
        return self.interferograms[key]

    def score(self, rec: RunRecord, fld: ComplexField) -> None:
        rng = noise_stream(self.seed("photo", rec.n, rec.basis, rec.cr))
        corrected = photograph(self.bench, correction_slm(self.bench, fld), self.spot_ms,
                               self.config.roi_px, rng)
        uncorrected = self.baseline(rec.n)
        rec.max_corrected = float(corrected.max())
        rec.mean_uncorrected = float(uncorrected.mean())
        if rec.mean_uncorrected <= 0:
            raise ValueError("uncorrected mean is zero: degenerate baseline")
        rec.images = {"corrected": corrected, "uncorrected": uncorrected,
                      "phase": fld.correction_phase()}

    def new_record(self, n: int, kind: str, ordering: str, cr: float, mode: str) -> RunRecord:
        igram_seed = self.seed("measure", n, kind)
        try:
            exposure = self.config.exposure(kind, n)
        except ValueError:
            exposure = float("nan")
        return RunRecord(self.pert, n, kind, ordering, float(cr), igram_seed, exposure, mode=mode)

    def full_record(self, n: int, kind: str) -> RunRecord:
        label = CANONICAL if kind == CANONICAL else "natural"
        rec = self.new_record(n, kind, label, 1.0, "full")
        try:
            igrams = self.interferogram_set(n, kind)
            fld = reconstruct_full(make_basis(n, kind), igrams)
            self.score(rec, fld)
            rec.converged = True
            rec.diagnostics = {"saturation_fraction": igrams.meta.get("saturation_fraction", 0.0)}
        except (ValueError, RuntimeError, OSError) as exc:
            rec.error = f"{type(exc).__name__}: {exc}"
        return rec

    def cs_record(self, n: int, ordering: str, cr: float) -> RunRecord:
        rec = self.new_record(n, HADAMARD, ordering, cr, "cs")
        try:
            basis = make_basis(n, HADAMARD, ordering)
            igrams = self.interferogram_set(n, HADAMARD).reorder(basis)
            sigma = self.config.sigma
            if sigma == "auto":
                sigma = noise_sigma(igrams, self.bench.detector, int(round(cr * n)))
            res = cs_reconstruct(igrams, basis, cr, float(sigma), self.config.solver_options(),
                                 two_d=self.config.two_d_dct)
            rec.solver_iters = res.iterations
            rec.converged = res.converged
            rec.diagnostics = res.diagnostics()
            self.score(rec, res.field)
        except (ValueError, RuntimeError, OSError) as exc:
            rec.converged = False
            rec.error = f"{type(exc).__name__}: {exc}"
        return rec


def run_full(config: ExperimentConfig, replay_dir=None, session: _Session | None = None) -> list:
    """Full 3n-measurement corrections for every ``(n, basis)`` in the config."""
    s = session or _Session(config, replay_dir)
    return [s.full_record(n, kind) for n in config.n_list for kind in config.bases]


def run_cs_sweep(config: ExperimentConfig, replay_dir=None, session: _Session | None = None) -> list:
    """Compressive corrections per ``(n, ordering, cr)``.

    Each ``n`` is measured once in the natural order and the records are
    permuted for every ordering. The full-measurement Hadamard record of each
    ``n`` leads its block as the reference.
    """
    if HADAMARD not in config.bases:
        raise ValueError("compressive sweeps need the Hadamard basis")
    s = session or _Session(config, replay_dir)
    out = []
    for n in config.n_list:
        out.append(s.full_record(n, HADAMARD))
        for ordering in config.orderings:
            for cr in config.cr_grid:
                out.append(s.cs_record(n, ordering, cr))
    return out


# ---------------------------------------------------------------- output


def emit(records, output_dir, config: ExperimentConfig | None = None,
         interferograms: dict | None = None) -> Path:
    """Write ``results.csv``, per-run JSON, PGM images and the resolved config.

    A ``.partial`` marker sits in ``output_dir`` until everything is written.
    """
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        marker = out / ".partial"
        marker.write_text("incomplete output\n", encoding="utf-8")
        detector = config.detector_model() if config is not None else DetectorModel()
        if config is not None:
            io.write_json(out / "config.resolved.json", config.to_dict())
        if interferograms:
            pert = config.perturbation_name if config is not None else records[0].perturbation
            (out / "interferograms").mkdir(exist_ok=True)
            for (n, kind), igrams in sorted(interferograms.items()):
                igrams.to_csv(out / "interferograms" / f"{pert}_n{n}_{kind}.csv")
        written_baselines = set()
        for rec in records:
            if rec.images:
                base = out / "images" / f"{rec.perturbation}_n{rec.n}_uncorrected.pgm"
                if base not in written_baselines:
                    io.write_pgm(base, quantization_levels(rec.images["uncorrected"], detector))
                    written_baselines.add(base)
                rec.files = {
                    "uncorrected": base.relative_to(out).as_posix(),
                    "corrected": io.write_pgm(out / "images" / f"{rec.run_id}_corrected.pgm",
                                              quantization_levels(rec.images["corrected"], detector)
                                              ).relative_to(out).as_posix(),
                    "phase": io.write_pgm(out / "images" / f"{rec.run_id}_phase.pgm",
                                          io.phase_to_levels(rec.images["phase"])).relative_to(out).as_posix(),
                }
            io.write_json(out / "runs" / f"{rec.run_id}.json", rec.to_dict())
        io.write_csv(out / "results.csv", RESULT_COLUMNS, (r.csv_row() for r in records))
        marker.unlink()
    except OSError as exc:
        raise OSError(f"failed writing results to {out}: {exc}") from exc
    return out / "results.csv"


def export_bench(config: ExperimentConfig, output_dir) -> list:
    """Perturbation screen, uncorrected spots and basis permutations."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / ".partial"
    marker.write_text("incomplete output\n", encoding="utf-8")
    s = _Session(config)
    bench = s.bench
    files = []
    screen = bench.perturbation_phase()
    files.append(io.write_pgm(out / f"{s.pert}_screen.pgm", io.phase_to_levels(screen)))
    files.append(io.write_json(out / f"{s.pert}_screen.json", {
        "perturbation": perturbation_to_dict(bench.perturbation), "side_px": bench.side_px,
        "encoding": "phase mapped to 8-bit grey over [0, 2pi)",
        "detect_px": list(bench.detect_px), "reference_amp": bench.reference_amp,
        "field_scale": bench.field_scale, "master_seed": config.master_seed}))
    for n in config.n_list:
        img = s.baseline(n)
        files.append(io.write_pgm(out / f"{s.pert}_n{n}_uncorrected.pgm",
                                  quantization_levels(img, bench.detector)))
        files.append(io.write_json(out / f"{s.pert}_n{n}_uncorrected.json", {
            "n": n, "exposure_ms": s.spot_ms, "seed": s.seed("baseline", n),
            "roi_px": config.roi_px, "detect_px": list(bench.detect_px),
            "max": float(img.max()), "mean": float(img.mean())}))
        if HADAMARD in config.bases:
            for ordering in config.orderings:
                basis = make_basis(n, HADAMARD, ordering)
                files.append(export_permutation_csv(
                    basis, out / f"perm_n{n}_{str(ordering).replace(':', '-')}.csv"))
    io.write_json(out / "config.resolved.json", config.to_dict())
    marker.unlink()
    return files


def run(config: ExperimentConfig, replay_dir=None) -> tuple:
    """Run the sweep named by ``config.mode``; returns records and measured data."""
    session = _Session(config, replay_dir)
    runner = run_cs_sweep if config.mode == "cs" else run_full
    records = runner(config, session=session)
    return records, session.interferograms
