"""Compressive reconstruction: DCT sparsity, sensing operator, basis pursuit.

The basis-pursuit solver follows the spectral projected-gradient approach:
the Pareto curve ``phi(tau) = min ||Theta s - b||_2 over ||s||_1 <= tau`` is
root-found with Newton steps, and every LASSO subproblem is solved by a
nonmonotone projected gradient method with Barzilai-Borwein step lengths.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .basis import CANONICAL, BasisMatrix, flatten_2d, fwht, reshape_2d
from .interferometry import ComplexField, InterferogramSet, combine_three_step, to_field
from .optics import DetectorModel


# ---------------------------------------------------------------- sparsity


def dct_forward(x) -> np.ndarray:
    """Orthonormal type-II DCT along the last axis."""
    return sfft.dct(np.asarray(x, dtype=float), type=2, norm="ortho", axis=-1)


def dct_inverse(s) -> np.ndarray:
    """Inverse of :func:`dct_forward` (orthonormal type-III DCT)."""
    return sfft.idct(np.asarray(s, dtype=float), type=2, norm="ortho", axis=-1)


@dataclass(frozen=True)
class SparsifyingBasis:
    """Orthonormal DCT pair, 1-D over the vector or 2-D over its square layout."""

    n: int
    two_d: bool = False

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise ValueError(f"expected length {self.n}, got {x.shape[-1]}")
        if self.two_d:
            return flatten_2d(sfft.dctn(reshape_2d(x), type=2, norm="ortho", axes=(-2, -1)))
        return dct_forward(x)

    def inverse(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.shape[-1] != self.n:
            raise ValueError(f"expected length {self.n}, got {s.shape[-1]}")
        if self.two_d:
            return flatten_2d(sfft.idctn(reshape_2d(s), type=2, norm="ortho", axes=(-2, -1)))
        return dct_inverse(s)


# ---------------------------------------------------------------- projection


def project_l1_ball(v, tau: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{w : ||w||_1 <= tau}``.

    Soft thresholding with the threshold found by sorting magnitudes.
    """
    v = np.asarray(v, dtype=float)
    if tau < 0:
        raise ValueError("tau must be non-negative")
    a = np.abs(v)
    if a.sum() <= tau:
        return v.copy()
    if tau == 0:
        return np.zeros_like(v)
    u = np.sort(a.ravel())[::-1]
    css = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    hits = np.nonzero(u * k > css - tau)[0]
    # index 0 always qualifies; rounding can hide it when tau is tiny
    rho = hits[-1] if hits.size else 0
    theta = (css[rho] - tau) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)


# ---------------------------------------------------------------- operator


@dataclass(eq=False)
class SensingProblem:
    """``Theta = select(first m rows of basis) o basis o Psi^-1`` and data ``b``.

    The operator is matrix-free; ``adjoint`` is its exact transpose.
    """

    basis: BasisMatrix
    m: int
    b: np.ndarray
    sigma: float = 0.0
    psi: SparsifyingBasis | None = None

    def __post_init__(self):
        n = self.basis.n
        if not 1 <= self.m <= n:
            raise ValueError(f"need 1 <= m <= n, got m={self.m}, n={n}")
        self.b = np.asarray(self.b, dtype=float)
        if self.b.shape != (self.m,):
            raise ValueError(f"b must have length {self.m}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.psi is None:
            self.psi = SparsifyingBasis(n)
        self._rows = np.asarray(self.basis.perm[: self.m])

    @property
    def n(self) -> int:
        return self.basis.n

    def apply(self, s) -> np.ndarray:
        x = self.psi.inverse(s)
        if self.basis.kind == CANONICAL:
            return x[..., self._rows]
        return fwht(x)[..., self._rows]

    def adjoint(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        z = np.zeros(r.shape[:-1] + (self.n,))
        z[..., self._rows] = r
        if self.basis.kind != CANONICAL:
            z = fwht(z)
        return self.psi.forward(z)

    def dot_test(self, trials: int = 20, seed: int = 0) -> float:
        """Worst relative mismatch of ``<Theta u, v>`` and ``<u, Theta^T v>``."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(trials):
            u = rng.standard_normal(self.n)
            v = rng.standard_normal(self.m)
            lhs = float(self.apply(u) @ v)
            rhs = float(u @ self.adjoint(v))
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
        return worst


# ---------------------------------------------------------------- solver


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int | None = None  # None means 10 * n
    opt_tol: float = 1e-6
    pareto_tol: float = 1e-4
    memory: int = 3
    max_line_search: int = 12
    step_min: float = 1e-16
    step_max: float = 1e5

    def __post_init__(self):
        if self.max_iters is not None and self.max_iters <= 0:
            raise ValueError("max_iters must be positive")
        for name in ("opt_tol", "pareto_tol", "memory", "max_line_search"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def iteration_cap(self, n: int) -> int:
        return self.max_iters if self.max_iters is not None else 10 * n


@dataclass(eq=False)
class SolverResult:
    s: np.ndarray
    residual_norm: float
    tau_final: float
    iterations: int
    converged: bool
    sigma: float = 0.0
    b_norm: float = 0.0
    message: str = ""
    pareto_path: list = field(default_factory=list)

    def diagnostics(self) -> dict:
        return {
            "converged": self.converged,
            "message": self.message,
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
            "tau_final": self.tau_final,
            "sigma": self.sigma,
            "b_norm": self.b_norm,
            "l1_norm": float(np.abs(self.s).sum()),
            "pareto_path": [{"iteration": i, "tau": t, "residual_norm": r}
                            for i, t, r in self.pareto_path],
        }


def basis_pursuit(problem: SensingProblem, opts: SolverOptions | None = None,
                  s0: np.ndarray | None = None) -> SolverResult:
    """Solve ``min ||s||_1`` subject to ``||Theta s - b||_2 <= sigma``.

    Returns the best iterate found. ``converged`` is set only if the residual
    bound holds: ``<= sigma * (1 + pareto_tol)``, or ``<= pareto_tol * ||b||``
    when ``sigma`` is zero.
    """
    opts = opts or SolverOptions()
    b, sigma, n = problem.b, float(problem.sigma), problem.n
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0 or sigma >= b_norm:
        return SolverResult(np.zeros(n), b_norm, 0.0, 0, True, sigma, b_norm, "trivial solution s = 0")

    target = sigma * (1 + opts.pareto_tol) if sigma > 0 else opts.pareto_tol * b_norm
    cap = opts.iteration_cap(n)

    x = np.zeros(n) if s0 is None else np.asarray(s0, dtype=float).copy()
    tau = float(np.abs(x).sum())
    r = b - problem.apply(x)
    f = 0.5 * float(r @ r)
    g = -problem.adjoint(r)

    dx = project_l1_ball(x - g, tau) - x
    dx_norm = float(np.abs(dx).max())
    step_g = opts.step_max if dx_norm < 1 / opts.step_max else min(opts.step_max, max(opts.step_min, 1 / dx_norm))

    last_f = np.full(opts.memory, -np.inf)
    last_f[0] = f
    f_old = f
    updated_last = False
    best = (np.sqrt(2 * f), x.copy(), tau)
    path = []
    message = "iteration limit reached"
    converged = False
    it = 0
    stalls = 0

    while True:
        r_norm = float(np.sqrt(2 * f))
        g_norm = float(np.abs(g).max())
        if r_norm < best[0]:
            best = (r_norm, x.copy(), tau)
        # with sigma = 0 the gap vanishes with the residual, so aim for opt_tol
        if r_norm <= target and (sigma > 0 or r_norm <= opts.opt_tol * b_norm):
            converged, message = True, "residual bound met"
            break
        if it >= cap:
            break
        gap = float(r @ (r - b)) + tau * g_norm
        rel_gap = abs(gap) / max(1.0, f)
        if g_norm == 0.0:
            message = "zero gradient with nonzero residual"
            break

        change = abs(f - f_old)
        small_change = (change <= 1e-4 * f and r_norm > 2 * sigma) or \
                       (change <= 0.1 * f * abs(r_norm - sigma) and r_norm <= 2 * sigma)
        if (small_change or rel_gap <= opts.opt_tol) and not updated_last:
            path.append((it, tau, r_norm))
            tau_old = tau
            tau = max(0.0, tau + r_norm * (r_norm - sigma) / g_norm)
            updated_last = True
            if tau < tau_old:
                x = project_l1_ball(x, tau)
                r = b - problem.apply(x)
                f = 0.5 * float(r @ r)
                g = -problem.adjoint(r)
                last_f[:] = -np.inf
                last_f[0] = f
            f_old = f
            continue
        updated_last = False
        f_old = f

        # nonmonotone projected gradient step
        it += 1
        dx = project_l1_ball(x - step_g * g, tau) - x
        gtd = float(g @ dx)
        if gtd >= 0:
            # stationary for this tau; force a Newton update
            f_old = f
            stalls += 1
            if stalls > 50:
                message = "projected gradient stalled"
                break
            continue
        f_max = float(last_f.max())
        alpha = 1.0
        for _ in range(opts.max_line_search):
            x_new = x + alpha * dx
            r_new = b - problem.apply(x_new)
            f_new = 0.5 * float(r_new @ r_new)
            if f_new <= f_max + 1e-4 * alpha * gtd:
                break
            alpha *= 0.5
        else:
            stalls += 1
            step_g = max(opts.step_min, step_g * 0.1)
            if stalls > 50:
                message = "line search failed"
                break
            continue
        stalls = 0
        g_new = -problem.adjoint(r_new)
        s_vec = x_new - x
        y_vec = g_new - g
        sty = float(s_vec @ y_vec)
        if sty <= 0:
            step_g = opts.step_max
        else:
            step_g = min(opts.step_max, max(opts.step_min, float(s_vec @ s_vec) / sty))
        x, r, f, g = x_new, r_new, f_new, g_new
        last_f[it % opts.memory] = f

    r_best, x_best, tau_best = best
    if not converged and r_best <= target:
        converged, message = True, f"residual bound met ({message})"
    elif converged and r_norm <= r_best:
        x_best, r_best, tau_best = x, float(np.sqrt(2 * f)), tau
    path.append((it, tau_best, float(r_best)))
    return SolverResult(x_best, float(r_best), float(tau_best), it, converged, sigma, b_norm, message, path)


# ---------------------------------------------------------------- reconstruction


@dataclass(eq=False)
class CSReconstruction:
    field: ComplexField
    m: int
    solves: list

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.solves)

    @property
    def iterations(self) -> int:
        return int(sum(r.iterations for r in self.solves))

    def diagnostics(self) -> dict:
        return {"m": self.m, "converged": self.converged, "iterations": self.iterations,
                "shifts": [r.diagnostics() for r in self.solves]}


def noise_sigma(igrams: InterferogramSet, detector: DetectorModel, m: int) -> float:
    """Expected residual norm of the common-mode-free data of one shift.

    Per-sample variance is read noise plus quantization plus shot noise at
    the mean recorded level; removing the mean of three shifts keeps 2/3 of it.
    """
    var = detector.read_noise_sigma ** 2
    if detector.quant_bits and np.isfinite(detector.full_scale):
        lsb = detector.full_scale / (2 ** detector.quant_bits - 1)
        var += lsb ** 2 / 12
    if detector.shot_noise and np.isfinite(detector.full_scale):
        var += float(np.mean(igrams.values[:m])) * detector.full_scale / detector.full_well
    return float(np.sqrt(m * var * 2.0 / 3.0))


def cs_reconstruct(igrams: InterferogramSet, basis: BasisMatrix, cr: float,
                   sigma: float = 0.0, opts: SolverOptions | None = None,
                   two_d: bool = False) -> CSReconstruction:
    """Field from the first ``round(cr * n)`` records in ``basis`` order.

    The shift-independent part of the data (the mean over the three shifts)
    is removed first; the three-step combination is blind to it, and it holds
    the reference and self-interference terms, which are not DCT-sparse.
    """
    if basis.kind == CANONICAL:
        raise ValueError("compressive reconstruction needs a Hadamard basis")
    if not 0 < cr <= 1:
        raise ValueError("cr must be in (0, 1]")
    if basis.n != igrams.n:
        raise ValueError("basis size does not match interferograms")
    m = int(round(cr * basis.n))
    if m < 1:
        raise ValueError(f"cr={cr} keeps no measurements at n={basis.n}")
    if not np.array_equal(basis.perm, igrams.natural_index):
        igrams = igrams.reorder(basis)
    data = igrams.values[:m]
    data = data - data.mean(axis=1, keepdims=True)
    psi = SparsifyingBasis(basis.n, two_d)
    solves = []
    xs = []
    for k in range(3):
        prob = SensingProblem(basis, m, data[:, k], sigma, psi)
        res = basis_pursuit(prob, opts)
        solves.append(res)
        xs.append(psi.inverse(res.s))
    return CSReconstruction(to_field(combine_three_step(*xs)), m, solves)
