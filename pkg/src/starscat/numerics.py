"""Shared numerical infrastructure.

Real-line quadrature grids (symmetric, with a gap around 0), the
principal-value Cauchy matrix and off-axis Cauchy rows with O(1/rho)
tail models, Laurent-coefficient extraction by circle contours,
argument-principle root counting/finding, and dense solves with a
condition estimate.

Cauchy conventions: (Cf)(z) = (2 pi i)^{-1} int f(mu)/(mu - z) dmu,
boundary operators C_pm = P +- E/2 with P the principal-value matrix,
so C_+ - C_- = E holds exactly by construction.
"""

from __future__ import annotations

import cmath
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

TWO_PI_I = 2j * math.pi


class BoundaryProximityError(ArithmeticError):
    """A zero sits too close to the contour for a trustworthy winding."""


class RankDeficiencyError(np.linalg.LinAlgError):
    """Dense system numerically rank-deficient."""

    def __init__(self, message, cond):
        super().__init__(message)
        self.cond = cond


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RealGrid:
    """Symmetric quadrature grid on [-rho_max, -rho_min] U [rho_min, rho_max].

    Nodes are sorted ascending and exactly closed under negation; weights
    are composite trapezoid per side.
    """

    nodes: np.ndarray
    weights: np.ndarray
    rho_min: float
    rho_max: float

    @classmethod
    def symmetric_hybrid(cls, rho_min: float = 1e-2, rho_max: float = 40.0,
                         n_per_side: int = 512, knee: float = 1.0) -> "RealGrid":
        """Geometric spacing near rho_min blending smoothly into uniform
        spacing beyond `knee`.

        Nodes are the image of a uniform grid under the C1 map
        s -> knee*exp(s) (s < 0), knee*(1 + s) (s >= 0); the smooth
        spacing keeps the punctured Cauchy sums nearly antisymmetric.
        """
        if not (0 < rho_min < knee < rho_max):
            raise ValueError("require 0 < rho_min < knee < rho_max")
        if n_per_side < 16:
            raise ValueError("n_per_side too small")
        s_lo = math.log(rho_min / knee)
        s_hi = (rho_max - knee) / knee
        s = np.linspace(s_lo, s_hi, n_per_side)
        pos = np.where(s < 0, knee * np.exp(s), knee * (1.0 + s))
        pos[0] = rho_min
        pos[-1] = rho_max
        w_pos = np.zeros_like(pos)
        d = np.diff(pos)
        w_pos[:-1] += d / 2.0
        w_pos[1:] += d / 2.0
        nodes = np.concatenate([-pos[::-1], pos])
        weights = np.concatenate([w_pos[::-1], w_pos])
        return cls(nodes=nodes, weights=weights, rho_min=float(rho_min),
                   rho_max=float(rho_max))

    @property
    def n(self) -> int:
        return self.nodes.size

    def negation_index(self) -> np.ndarray:
        """Index map i -> j with nodes[j] == -nodes[i] (exact by symmetry)."""
        return np.arange(self.n)[::-1]

    def integrate(self, samples) -> complex:
        samples = np.asarray(samples)
        return np.tensordot(self.weights, samples, axes=(0, 0))


# ---------------------------------------------------------------------------
# Cauchy transforms
# ---------------------------------------------------------------------------

def _gap_coeffs(grid: RealGrid, z: complex) -> tuple[complex, complex]:
    """Exact integral over the gap (-m, m) of the linear interpolant
    between f(-m) and f(m), against the Cauchy kernel 1/(mu - z).

    Returns the coefficients of f(+m) and f(-m).  Valid for z off
    [-m, m]; the map (z-m)/(z+m) avoids the principal-log cut there.
    """
    m = grid.rho_min
    lam = cmath.log((z - m) / (z + m))
    a_plus = 1.0 + (z + m) * lam / (2.0 * m)
    a_minus = -1.0 + (m - z) * lam / (2.0 * m)
    return a_plus, a_minus


def _gap_coeffs_deriv(grid: RealGrid, z: complex) -> tuple[complex, complex]:
    """d/dz of the two gap coefficients."""
    m = grid.rho_min
    lam = cmath.log((z - m) / (z + m))
    dlam = 1.0 / (z - m) - 1.0 / (z + m)
    da_plus = lam / (2.0 * m) + (z + m) * dlam / (2.0 * m)
    da_minus = -lam / (2.0 * m) + (m - z) * dlam / (2.0 * m)
    return da_plus, da_minus


def _tail_coeffs(grid: RealGrid, z: complex) -> tuple[complex, complex]:
    """Coefficients of f(R) and f(-R) modeling the O(1/mu) tails.

    Model: f(mu) = f(+-R) (+-R)/mu beyond the grid ends.
    """
    R = grid.rho_max
    cp = (R / z) * cmath.log(R / (R - z))
    cm = (-R / z) * cmath.log((R + z) / R)
    return cp, cm


def _tail_coeffs_deriv(grid: RealGrid, z: complex) -> tuple[complex, complex]:
    R = grid.rho_max
    lp = cmath.log(R / (R - z))
    lm = cmath.log((R + z) / R)
    dp = (-R / z ** 2) * lp + (R / z) / (R - z)
    dm = (R / z ** 2) * lm + (-R / z) / (R + z)
    return dp, dm


def cauchy_weights(grid: RealGrid, z: complex, tail: bool = True,
                   gap: bool = True) -> np.ndarray:
    """Row c with (Cf)(z) ~= sum_j c_j f(nodes[j]), for z off the real
    grid segments."""
    z = complex(z)
    c = (grid.weights / (grid.nodes - z)).astype(complex)
    if tail:
        cp, cm = _tail_coeffs(grid, z)
        c[-1] += cp
        c[0] += cm
    if gap:
        ap, am = _gap_coeffs(grid, z)
        half = grid.n // 2
        c[half] += ap       # node +rho_min
        c[half - 1] += am   # node -rho_min
    return c / TWO_PI_I


def cauchy_weights_deriv(grid: RealGrid, z: complex, tail: bool = True,
                         gap: bool = True) -> np.ndarray:
    """Row for (Cf)'(z) = (2 pi i)^{-1} int f(mu)/(mu - z)^2 dmu."""
    z = complex(z)
    c = (grid.weights / (grid.nodes - z) ** 2).astype(complex)
    if tail:
        dp, dm = _tail_coeffs_deriv(grid, z)
        c[-1] += dp
        c[0] += dm
    if gap:
        dap, dam = _gap_coeffs_deriv(grid, z)
        half = grid.n // 2
        c[half] += dap
        c[half - 1] += dam
    return c / TWO_PI_I


def pv_cauchy_matrix(grid: RealGrid, tail: bool = True, gap: bool = True) -> np.ndarray:
    """Dense matrix P realizing the principal-value Cauchy operator on nodes.

    Diagonal handling by singularity subtraction: the kernel acts on
    f(mu) - f(rho_i) (the missing smooth diagonal term is restored with
    a neighbor difference stencil) while f(rho_i) multiplies the exact
    principal-value integral of the kernel over the covered segments.
    The gap (-m, m) carries a linear interpolation model between f(-m)
    and f(m), the tails an f(+-R) R/mu decay model; at the four segment
    boundary nodes the one-sided log divergences of segment, gap and
    tail integrals cancel analytically and the combined finite parts
    are used.
    """
    mu = grid.nodes
    w = grid.weights
    n = grid.n
    if n < 16:
        raise ValueError("grid too coarse for a Cauchy matrix")
    half = n // 2
    R, m = grid.rho_max, grid.rho_min
    i_mp, i_mm = half, half - 1      # nodes +m, -m
    i_Rp, i_Rm = n - 1, 0            # nodes +R, -R

    diffs = mu[None, :] - mu[:, None]
    np.fill_diagonal(diffs, 1.0)
    P = (w[None, :] / diffs).astype(complex)
    np.fill_diagonal(P, 0.0)
    row_sums = P.sum(axis=1)

    for i in range(n):
        zi = mu[i]
        gap_here = gap
        tail_r_here = tail
        tail_l_here = tail
        if gap and i == i_mp:
            # gap + own-segment principal value combined through +m
            L = 1.0 + math.log((R - m) / (R + m))
            P[i, i_mm] += -1.0
            gap_here = False
        elif gap and i == i_mm:
            L = -1.0 + math.log((R + m) / (R - m))
            P[i, i_mp] += 1.0
            gap_here = False
        elif tail and i == i_Rp:
            # own segment + right tail combined through +R
            L = math.log((m + R) / (2.0 * (R - m)))
            tail_r_here = False
        elif tail and i == i_Rm:
            L = math.log(2.0 * (R - m) / (m + R))
            tail_l_here = False
        elif zi > 0:
            L = math.log((R - zi) / (zi - m)) + math.log((m + zi) / (R + zi))
        else:
            L = math.log((-m - zi) / (zi + R)) + math.log((R - zi) / (m - zi))
        P[i, i] += L - row_sums[i]

        if gap_here:
            lam = math.log(abs((zi - m) / (zi + m)))
            P[i, i_mp] += 1.0 + (zi + m) * lam / (2.0 * m)
            P[i, i_mm] += -1.0 + (m - zi) * lam / (2.0 * m)
        if tail_r_here and i != i_Rp:
            P[i, i_Rp] += (R / zi) * math.log(abs(R / (R - zi)))
        if tail_l_here and i != i_Rm:
            P[i, i_Rm] += (-R / zi) * math.log(abs((R + zi) / R))

    # smooth diagonal term w_i f'(rho_i), one-sided at segment edges
    for i in range(n):
        on_pos = i >= half
        lo = half if on_pos else 0
        hi = n - 1 if on_pos else half - 1
        if lo < i < hi:
            j1, j2 = i - 1, i + 1
        elif i == lo:
            j1, j2 = i, i + 1
        else:
            j1, j2 = i - 1, i
        dd = mu[j2] - mu[j1]
        P[i, j2] += w[i] / dd
        P[i, j1] -= w[i] / dd
    return P / TWO_PI_I


def cauchy_apply(samples, grid: RealGrid, z: complex, side: str | None = None,
                 tail: bool = True, gap: bool = True,
                 pv_matrix: np.ndarray | None = None):
    """Cauchy transform of grid samples at z.

    For nonreal z this is plain (tail/gap corrected) quadrature.  For
    real z, ``side`` selects the boundary value: "+" or "-" adds the
    Plemelj-Sokhotskii term +- f(z)/2 to the principal value; side=None
    returns the principal value itself.  Real z must coincide with a
    grid node (pass pv_matrix to amortize its construction).
    """
    samples = np.asarray(samples, dtype=complex)
    z = complex(z)
    if z.imag != 0.0:
        c = cauchy_weights(grid, z, tail, gap)
        return np.tensordot(c, samples, axes=(0, 0))
    hits = np.nonzero(grid.nodes == z.real)[0]
    if hits.size == 0:
        raise ValueError("real evaluation points must be grid nodes")
    i = int(hits[0])
    if pv_matrix is None:
        pv_matrix = pv_cauchy_matrix(grid, tail, gap)
    val = np.tensordot(pv_matrix[i], samples, axes=(0, 0))
    if side == "+":
        val = val + samples[i] / 2.0
    elif side == "-":
        val = val - samples[i] / 2.0
    elif side is not None:
        raise ValueError("side must be '+', '-' or None")
    return val

# ---------------------------------------------------------------------------
# contours and Laurent coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContourSpec:
    """Circle c + r e^{i theta} sampled at `nodes` equispaced angles."""

    center: complex
    radius: float
    nodes: int = 64

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.nodes < 8:
            raise ValueError("need at least 8 contour nodes")

    def points(self) -> np.ndarray:
        th = 2.0 * math.pi * np.arange(self.nodes) / self.nodes
        return self.center + self.radius * np.exp(1j * th)


def laurent_coefficient(f, contour: ContourSpec, m: int) -> complex:
    """f_{<m>} = (2 pi i)^{-1} oint (rho - rho0)^{-m-1} f(rho) d rho."""
    pts = contour.points()
    vals = np.asarray([f(z) for z in pts], dtype=complex)
    return laurent_coefficients_array(vals, contour, (m,))[0]


def laurent_coefficients_array(values: np.ndarray, contour: ContourSpec, orders):
    """Laurent coefficients for several m from one set of circle samples.

    values may have extra trailing dimensions (matrix samples).
    """
    values = np.asarray(values, dtype=complex)
    nn = contour.nodes
    th = 2.0 * math.pi * np.arange(nn) / nn
    e = np.exp(1j * th)
    out = []
    for m in orders:
        kern = contour.radius ** (-m) * e ** (-m)  # (rho-c)^{-m-1} * drho/(i dtheta) /r... folded
        # (2 pi i)^{-1} oint (rho-c)^{-m-1} f drho
        #   = (2 pi)^{-1} int_0^{2pi} f(c + r e^{i th}) r^{-m} e^{-i m th} dth
        coeff = np.tensordot(kern, values, axes=(0, 0)) / nn
        out.append(coeff)
    return out


# ---------------------------------------------------------------------------
# argument principle
# ---------------------------------------------------------------------------

def _rect_boundary(rect, n_per_side: int) -> np.ndarray:
    re_lo, re_hi, im_lo, im_hi = rect
    a = np.linspace(re_lo, re_hi, n_per_side, endpoint=False) + 1j * im_lo
    b = re_hi + 1j * np.linspace(im_lo, im_hi, n_per_side, endpoint=False)
    c = np.linspace(re_hi, re_lo, n_per_side, endpoint=False) + 1j * im_hi
    d = re_lo + 1j * np.linspace(im_hi, im_lo, n_per_side, endpoint=False)
    return np.concatenate([a, b, c, d])


def winding_number(f, rect, n_per_side: int = 32, max_points: int = 40000,
                   proximity_rtol: float = 1e-8) -> int:
    """Zero count (with multiplicity) of analytic f inside the rectangle.

    The boundary sampling refines adaptively until adjacent phase steps
    are below pi/2.  Raises BoundaryProximityError when |f| dips too
    close to zero on the boundary (caller should jitter the rectangle).
    """
    pts = list(_rect_boundary(rect, n_per_side))
    vals = [complex(f(z)) for z in pts]
    for _ in range(24):
        scale = float(np.median(np.abs(vals)))
        if scale == 0 or min(abs(v) for v in vals) < proximity_rtol * scale:
            raise BoundaryProximityError("zero (numerically) on the contour")
        new_pts, new_vals, refined = [], [], False
        npts = len(pts)
        for i in range(npts):
            z0, v0 = pts[i], vals[i]
            z1, v1 = pts[(i + 1) % npts], vals[(i + 1) % npts]
            new_pts.append(z0)
            new_vals.append(v0)
            dphi = cmath.phase(v1 / v0)
            if abs(dphi) >= math.pi / 2:
                zm = (z0 + z1) / 2.0
                new_pts.append(zm)
                new_vals.append(complex(f(zm)))
                refined = True
        pts, vals = new_pts, new_vals
        if not refined:
            break
        if len(pts) > max_points:
            raise BoundaryProximityError("boundary refinement exploded")
    total = 0.0
    npts = len(pts)
    for i in range(npts):
        total += cmath.phase(vals[(i + 1) % npts] / vals[i])
    return int(round(total / (2.0 * math.pi)))


def _newton_polish(f, z0: complex, tol: float = 1e-13, iters: int = 60) -> complex:
    z = z0
    h = 1e-6 * max(1.0, abs(z0))
    for _ in range(iters):
        fz = complex(f(z))
        df = (complex(f(z + h)) - complex(f(z - h))) / (2.0 * h)
        if df == 0:
            break
        step = fz / df
        z = z - step
        if abs(step) < tol * max(1.0, abs(z)):
            h = max(1e-9, abs(step))
            break
        h = max(1e-9 * max(1.0, abs(z)), min(h, abs(step)))
    return z


def find_zeros_rectangle(f, rect, min_cell: float = 1e-6,
                         n_per_side: int = 32,
                         newton_cell: float = 0.75) -> list[tuple[complex, int]]:
    """All zeros of f in the rectangle, by winding-number bisection.

    Returns (location, multiplicity) pairs.  Once a cell isolates a
    single zero and is small enough, Newton iteration from the cell
    center replaces further bisection; the polished point must land
    inside the cell (with a margin) and satisfy a small-residual check,
    otherwise bisection continues.
    """
    out = []

    def residual_ok(z, r):
        # compare against the boundary magnitude of the isolating cell
        probes = [complex(r[0], r[2]), complex(r[1], r[3]),
                  complex((r[0] + r[1]) / 2, r[2])]
        scale = np.median([abs(complex(f(p))) for p in probes])
        return abs(complex(f(z))) < 1e-9 * max(scale, 1e-300)

    def inside(z, r, margin=0.05):
        dx = margin * (r[1] - r[0])
        dy = margin * (r[3] - r[2])
        return (r[0] - dx <= z.real <= r[1] + dx) and (r[2] - dy <= z.imag <= r[3] + dy)

    def recurse(r, depth):
        re_lo, re_hi, im_lo, im_hi = r
        try:
            wn = winding_number(f, r, n_per_side)
        except BoundaryProximityError:
            if depth > 60:
                raise
            # jitter the box outward slightly and retry
            dx = 0.0137 * (re_hi - re_lo) + 1e-9
            dy = 0.0173 * (im_hi - im_lo) + 1e-9
            r = (re_lo - dx, re_hi + dx, im_lo - dy, im_hi + dy)
            wn = winding_number(f, r, n_per_side)
            re_lo, re_hi, im_lo, im_hi = r
        if wn == 0:
            return
        size = max(re_hi - re_lo, im_hi - im_lo)
        if wn == 1 and size < newton_cell:
            z0 = complex((re_lo + re_hi) / 2.0, (im_lo + im_hi) / 2.0)
            z = _newton_polish(f, z0)
            if inside(z, r) and residual_ok(z, r):
                out.append((z, 1))
                return
        if size < min_cell:
            z0 = complex((re_lo + re_hi) / 2.0, (im_lo + im_hi) / 2.0)
            out.append((z0, wn))
            return
        if re_hi - re_lo >= im_hi - im_lo:
            mid = (re_lo + re_hi) / 2.0
            recurse((re_lo, mid, im_lo, im_hi), depth + 1)
            recurse((mid, re_hi, im_lo, im_hi), depth + 1)
        else:
            mid = (im_lo + im_hi) / 2.0
            recurse((re_lo, re_hi, im_lo, mid), depth + 1)
            recurse((re_lo, re_hi, mid, im_hi), depth + 1)

    recurse(tuple(rect), 0)
    return out


# ---------------------------------------------------------------------------
# dense solves
# ---------------------------------------------------------------------------

def solve_dense(A: np.ndarray, b: np.ndarray, cond_warn: float = 1e12):
    """Solve A x = b, returning (x, cond_estimate, relative_residual).

    Raises RankDeficiencyError on numerical singularity; warns when the
    condition estimate passes cond_warn.
    """
    A = np.asarray(A, dtype=complex)
    b = np.asarray(b, dtype=complex)
    try:
        lu, piv = sla.lu_factor(A)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise RankDeficiencyError(f"factorization failed: {exc}", math.inf)
    anorm = float(np.max(np.sum(np.abs(A), axis=0)))
    gecon = sla.get_lapack_funcs(("gecon",), (A,))[0]
    rcond, _ = gecon(lu, anorm, norm="1")
    cond = math.inf if rcond == 0 else 1.0 / float(rcond)
    if not math.isfinite(cond) or cond > 1e15:
        raise RankDeficiencyError(f"system numerically rank-deficient (cond~{cond:.2e})",
                                  cond)
    if cond > cond_warn:
        warnings.warn(f"ill-conditioned dense system: cond ~ {cond:.2e}",
                      RuntimeWarning, stacklevel=2)
    x = sla.lu_solve((lu, piv), b)
    num = float(np.linalg.norm(A @ x - b))
    den = float(np.linalg.norm(b))
    rel = num / den if den > 0 else num
    return x, cond, rel


# ---------------------------------------------------------------------------
# oscillatory tail refinement
# ---------------------------------------------------------------------------
#
# Samples on the grid may carry slowly decaying tails of the form
# (a + b e^{2 i mu x} + c e^{-2 i mu x}) / mu with x a known parameter.
# The plain 1/mu model built into the Cauchy operators captures only a;
# the helpers below fit the oscillatory parts from the end samples and
# evaluate their tail integrals in closed form (exponential integrals),
# so Cauchy transforms can be corrected after the fact.

def _exp1(z: complex) -> complex:
    from scipy.special import exp1
    if z == 0:
        return complex(np.inf)
    if z.imag == 0 and z.real < 0:
        z = complex(z.real, 1e-300)
    return complex(exp1(complex(z)))


def _tail_I(grid: RealGrid, z: complex, x: float, side: str, phase: int) -> complex:
    """int over the tail of e^{i phase 2 x mu} / (mu (mu - z)) d mu.

    side '+' is [R, inf), side '-' is (-inf, -R]; phase in {0, +1, -1}.
    """
    R = grid.rho_max
    z = complex(z)
    if z == 0:
        raise ValueError("tail integrals need z != 0")
    w = 2.0 * x
    if side == "+":
        if phase == 0:
            return (1.0 / z) * cmath.log(R / (R - z))
        wp = phase * w
        return (1.0 / z) * (cmath.exp(1j * wp * z) * _exp1(-1j * wp * (R - z))
                            - _exp1(-1j * wp * R))
    if phase == 0:
        return (1.0 / z) * cmath.log((R + z) / R)
    wp = phase * w
    return (1.0 / z) * (_exp1(1j * wp * R) - cmath.exp(1j * wp * z) * _exp1(1j * wp * (R + z)))


def _tail_J(grid: RealGrid, z: complex, x: float, side: str, phase: int) -> complex:
    """int over the tail of e^{i phase 2 x mu} / (mu - z) d mu (Abel sense)."""
    R = grid.rho_max
    z = complex(z)
    w = 2.0 * phase * x
    if phase == 0:
        raise ValueError("nonoscillatory version diverges; use _tail_I terms")
    if side == "+":
        return cmath.exp(1j * w * z) * _exp1(-1j * w * (R - z))
    return -cmath.exp(1j * w * z) * _exp1(1j * w * (R + z))


# column order of the tail model for mu * F(mu):
#   a (constant), a2 (1/mu), b0/b1 (e^{+2 i mu x}, const and linear),
#   c0/c1 (e^{-2 i mu x}, const and linear)
TAIL_COLS = 6


def tail_fit(grid: RealGrid, samples: np.ndarray, x: float,
             window_fraction: float = 1.0 / 3.0):
    """Fit the tail model to mu * samples on each end of the grid.

    Model: mu F(mu) ~ a + a2/mu + (b0 + b1 mu) e^{2 i mu x}
    + (c0 + c1 mu) e^{-2 i mu x}.  The linear-growth columns capture
    derivative samples (whose tails oscillate without decay); the fixed
    outer-third window keeps the fit continuous in x, and the default
    least-squares cutoff absorbs the collinearity at small phase span.
    Returns {side: coefficients of shape (6, ...)}.
    """
    samples = np.asarray(samples, dtype=complex)
    n = grid.n
    k = max(12, int(window_fraction * (n // 2)))
    out = {}
    for side in ("+", "-"):
        if side == "+":
            mu = grid.nodes[n - k:]
            s = samples[n - k:]
        else:
            mu = grid.nodes[:k]
            s = samples[:k]
        y = s * mu.reshape((-1,) + (1,) * (samples.ndim - 1))
        ep = np.exp(2j * x * mu)
        cols = [np.ones_like(mu, dtype=complex), 1.0 / mu.astype(complex),
                ep, mu * ep, np.conj(ep), mu * np.conj(ep)]
        A = np.column_stack(cols)
        scale = np.max(np.abs(A), axis=0)
        coef, *_ = np.linalg.lstsq(A / scale[None, :], y.reshape(k, -1), rcond=None)
        coef = (coef / scale[:, None]).reshape((TAIL_COLS,) + samples.shape[1:])
        out[side] = coef
    return out


def tail_correction(grid: RealGrid, samples: np.ndarray, x: float, z: complex,
                    fit: dict | None = None) -> np.ndarray:
    """Difference between the fitted tail-model transform and the built-in
    smooth tail model, at evaluation point z.

    Add this to Cauchy transforms computed with the default weights to
    refine their tail handling; works for complex z and for real z
    strictly inside (-R, R).
    """
    samples = np.asarray(samples, dtype=complex)
    if fit is None:
        fit = tail_fit(grid, samples, x)
    R = grid.rho_max
    corr = np.zeros(samples.shape[1:], dtype=complex)
    for side, edge in (("+", -1), ("-", 0)):
        a, a2, b0, b1, c0, c1 = fit[side]
        I0 = _tail_I(grid, z, x, side, 0)
        corr = corr + a * I0
        # 1/mu^2 kernel against 1/(mu - z)
        corr = corr + a2 * (1.0 / z) * (I0 - 1.0 / R)
        if x > 0:
            Ip = _tail_I(grid, z, x, side, +1)
            Im_ = _tail_I(grid, z, x, side, -1)
            Jp = _tail_J(grid, z, x, side, +1)
            Jm = _tail_J(grid, z, x, side, -1)
            corr = corr + b0 * Ip + b1 * Jp + c0 * Im_ + c1 * Jm
        # remove the smooth model already applied through the end column
        base = samples[edge] * grid.nodes[edge]
        corr = corr - base * I0
    return corr / TWO_PI_I
