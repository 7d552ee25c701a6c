"""Direct scattering on a noncompact star graph.

A graph problem is a list of rays, each carrying its own order
parameter nu_k, vertex coefficients (sigma_k, sigma_k1, sigma_k2) and
potential q_k.  Vertex coupling is expressed through the Wronskian
forms U_k1(y) = sigma_k <y, S_k2> and
U_k2(y) = sigma_k1 <y, S_k2> + sigma_k2 <S_k1, y>, with the matching
conditions: all U_j1(y_j) equal, and sum_j U_j2(y_j) = 0.

Orientation conventions (fixed by requiring det [[psi, f], [psi', f']]
= 2 i rho and psi_kk = e^{-i rho x}(1 + o(1)) at infinity):

    psi_kk = gamma_kk f_k - (2 i rho / b_k1) S_k2,
    psi_kj = gamma_kj f_j (j != k),

with the gamma row solving the vertex system
    sigma_j b_j1 gamma_kj + beta_k = 0,
    sum_j (sigma_j1 b_j1 + sigma_j2 b_j2) gamma_kj = + sigma_k2 delta_k.

The characteristic function is
    Delta = sum_s (sigma_s1 b_s1 + sigma_s2 b_s2) prod_{j != s} sigma_j b_j1,
and the reflection coefficient on ray k for real rho is
    r_k(rho) = gamma_kk(rho) - b_k1(-rho)/b_k1(rho),
equivalent to psi_kk = f_k(., -rho) + r_k(rho) f_k(., rho).
"""

from __future__ import annotations

import cmath
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .halfline import HalflineProblem, InconsistentSolutionError, stokes_multipliers
from .numerics import (BoundaryProximityError, ContourSpec,
                       find_zeros_rectangle, laurent_coefficients_array,
                       winding_number)
from .potentials import Potential
from .unperturbed import (DEFAULT_TRUNCATION, RayParameters, SeriesTruncation,
                          branch_power, stokes_constants)


class ConditionViolationError(RuntimeError):
    """A genericity/regularity condition fails for this graph."""


def _c2pair(z) -> dict:
    z = complex(z)
    return {"re": z.real, "im": z.imag}


def _pair2c(d) -> complex:
    return complex(d["re"], d["im"])


@dataclass
class GraphSpec:
    """The star graph: p >= 2 rays of (RayParameters, Potential)."""

    rays: list

    def __post_init__(self):
        if len(self.rays) < 2:
            raise ValueError("a star graph needs at least two rays")
        nus = [complex(r.nu) for r, _ in self.rays]
        for i in range(len(nus)):
            for j in range(i + 1, len(nus)):
                if abs(nus[i] - nus[j]) > 1e-12 and abs(nus[i].real - nus[j].real) < 1e-12:
                    raise ValueError(
                        f"rays {i+1} and {j+1}: distinct nu must have distinct Re nu")

    @property
    def p(self) -> int:
        return len(self.rays)

    @property
    def ray_params(self) -> list:
        return [r for r, _ in self.rays]

    def to_json(self) -> dict:
        out = []
        for ray, pot in self.rays:
            out.append({
                "nu": _c2pair(ray.nu),
                "sigma": _c2pair(ray.sigma),
                "sigma1": _c2pair(ray.sigma1),
                "sigma2": _c2pair(ray.sigma2),
                "potential": pot.to_json(),
            })
        return {"rays": out}

    @classmethod
    def from_json(cls, obj: dict) -> "GraphSpec":
        rays = []
        for r in obj["rays"]:
            ray = RayParameters(nu=_pair2c(r["nu"]), sigma=_pair2c(r["sigma"]),
                                sigma1=_pair2c(r["sigma1"]), sigma2=_pair2c(r["sigma2"]))
            rays.append((ray, Potential.from_json(r["potential"])))
        return cls(rays=rays)


# ---------------------------------------------------------------------------
# matching forms and the vertex system
# ---------------------------------------------------------------------------

def matching_forms(ray: RayParameters, y, yp, S1, S1p, S2, S2p,
                   spread_tol: float = 1e-4):
    """(U1, U2) for a solution y given regular solutions at shared x points.

    U1 = sigma <y, S2>, U2 = sigma1 <y, S2> + sigma2 <S1, y> with
    <a, b> = a b' - a' b; both are x-independent and the spread across
    the supplied points is checked.
    """
    y, yp, S1, S1p, S2, S2p = map(np.atleast_1d, (y, yp, S1, S1p, S2, S2p))
    w_y_s2 = y * S2p - yp * S2
    w_s1_y = S1 * yp - S1p * y
    u1 = ray.sigma * w_y_s2
    u2 = ray.sigma1 * w_y_s2 + ray.sigma2 * w_s1_y
    out = []
    for u in (u1, u2):
        med = complex(np.median(u.real) + 1j * np.median(u.imag))
        scale = max(float(np.max(np.abs(u))), 1e-300)
        if float(np.max(np.abs(u - med))) > spread_tol * scale:
            raise InconsistentSolutionError(
                f"matching form spread {np.max(np.abs(u - med))/scale:.2e}")
        out.append(med)
    return out[0], out[1]


def characteristic_function(rays: list, b1: np.ndarray, b2: np.ndarray,
                            rho: complex, k: int | None = None):
    """Delta, the per-ray closed forms Delta_k, and (for ray k) the gamma row.

    rays is the list of RayParameters; b1, b2 the multipliers of every
    ray at this rho.  Returns (Delta, [Delta_k], gamma_row, beta) with
    gamma_row/beta None when k is None.  k is 1-based.
    """
    p = len(rays)
    b1 = np.asarray(b1, dtype=complex)
    b2 = np.asarray(b2, dtype=complex)
    sig = np.array([r.sigma for r in rays], dtype=complex)
    sig1 = np.array([r.sigma1 for r in rays], dtype=complex)
    sig2 = np.array([r.sigma2 for r in rays], dtype=complex)

    a = sig * b1
    bb = sig1 * b1 + sig2 * b2
    prods = np.empty(p, dtype=complex)
    for s in range(p):
        prods[s] = np.prod(np.delete(a, s)) if p > 1 else 1.0
    delta = complex(np.sum(bb * prods))
    delta_k = [complex(rays[s].sigma ** 2 * prods[s]) for s in range(p)]

    gamma = beta = None
    if k is not None:
        kk = k - 1
        delta_kk = 2j * rho / b1[kk]
        M = np.zeros((p + 1, p + 1), dtype=complex)
        rhs = np.zeros(p + 1, dtype=complex)
        for j in range(p):
            M[j, j] = a[j]
            M[j, p] = 1.0
        M[p, :p] = bb
        rhs[p] = rays[kk].sigma2 * delta_kk
        sol = np.linalg.solve(M, rhs)
        gamma = sol[:p]
        beta = complex(sol[p])
    return delta, delta_k, gamma, beta


def vertex_system_matrix(rays: list, b1, b2, rho: complex, k: int):
    """The (p+1) x (p+1) matrix and right-hand side of the vertex system.

    Row/column order: gamma_1..gamma_p then beta; the determinant of
    this ordering equals -Delta (sign from the bordered structure).
    """
    p = len(rays)
    b1 = np.asarray(b1, dtype=complex)
    b2 = np.asarray(b2, dtype=complex)
    sig = np.array([r.sigma for r in rays], dtype=complex)
    M = np.zeros((p + 1, p + 1), dtype=complex)
    for j in range(p):
        M[j, j] = sig[j] * b1[j]
        M[j, p] = 1.0
    M[p, :p] = np.array([r.sigma1 for r in rays]) * b1 + \
        np.array([r.sigma2 for r in rays]) * b2
    rhs = np.zeros(p + 1, dtype=complex)
    rhs[p] = rays[k - 1].sigma2 * (2j * rho / b1[k - 1])
    return M, rhs


# ---------------------------------------------------------------------------
# scattering data containers
# ---------------------------------------------------------------------------

@dataclass
class ScatteringDataRay:
    """Reflection samples, upper-half-plane poles and residue factors for one ray."""

    k: int                       # 1-based ray index
    rho_grid: np.ndarray         # symmetric real grid
    r: np.ndarray                # r_k on rho_grid
    poles: list = field(default_factory=list)        # points in Im > 0
    residues: dict = field(default_factory=dict)     # pole -> alpha_k

    def __post_init__(self):
        self.rho_grid = np.asarray(self.rho_grid, dtype=float)
        self.r = np.asarray(self.r, dtype=complex)
        if self.rho_grid.shape != self.r.shape:
            raise ValueError("rho_grid and r must align")
        for p in self.poles:
            if complex(p).imag <= 0:
                raise ValueError("stored poles must lie in the open upper half-plane")

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "rho_grid": [float(v) for v in self.rho_grid],
            "r_re": [float(v) for v in self.r.real],
            "r_im": [float(v) for v in self.r.imag],
            "poles": [{"re": complex(p).real, "im": complex(p).imag,
                       "alpha_re": self.residues[p].real,
                       "alpha_im": self.residues[p].imag}
                      for p in self.poles],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScatteringDataRay":
        poles = []
        residues = {}
        for entry in obj.get("poles", []):
            z = complex(entry["re"], entry["im"])
            poles.append(z)
            residues[z] = complex(entry["alpha_re"], entry["alpha_im"])
        r = np.asarray(obj["r_re"], dtype=float) + 1j * np.asarray(obj["r_im"], dtype=float)
        return cls(k=int(obj["k"]), rho_grid=np.asarray(obj["rho_grid"], dtype=float),
                   r=r, poles=poles, residues=residues)


@dataclass
class ScatteringData:
    """Bundle J = {J_k} for rays k = 1..p-1."""

    p: int
    rays: list  # of ScatteringDataRay

    def __post_init__(self):
        ks = sorted(r.k for r in self.rays)
        if ks != list(range(1, self.p)):
            raise ValueError(f"scattering data must cover rays 1..{self.p-1}, got {ks}")

    def ray(self, k: int) -> ScatteringDataRay:
        for r in self.rays:
            if r.k == k:
                return r
        raise KeyError(k)

    def to_json(self) -> dict:
        return {"p": self.p, "rays": [r.to_json() for r in self.rays]}

    @classmethod
    def from_json(cls, obj: dict) -> "ScatteringData":
        return cls(p=int(obj["p"]),
                   rays=[ScatteringDataRay.from_json(r) for r in obj["rays"]])

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ScatteringData":
        return cls.from_json(json.loads(text))


@dataclass
class ConditionReport:
    """Outcome and numeric witnesses of the graph admissibility conditions."""

    condition_nu: bool
    condition_g: bool
    condition_r0: bool
    condition_rinf: bool
    witnesses: dict

    @property
    def all_pass(self) -> bool:
        return (self.condition_nu and self.condition_g
                and self.condition_r0 and self.condition_rinf)

    def to_json(self) -> dict:
        def clean(v):
            if isinstance(v, complex):
                return _c2pair(v)
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (np.floating, np.integer)):
                return float(v)
            return v
        return {
            "condition_nu": self.condition_nu,
            "condition_g": self.condition_g,
            "condition_r0": self.condition_r0,
            "condition_rinf": self.condition_rinf,
            "all_pass": self.all_pass,
            "witnesses": clean(self.witnesses),
        }


# ---------------------------------------------------------------------------
# the assembled graph problem
# ---------------------------------------------------------------------------

class GraphProblem:
    """Star-graph direct scattering with cached per-ray half-line solvers."""

    def __init__(self, spec: GraphSpec, trunc: SeriesTruncation = DEFAULT_TRUNCATION):
        self.spec = spec
        self.trunc = trunc
        self.halflines = [HalflineProblem(ray, pot, trunc) for ray, pot in spec.rays]

    @property
    def p(self) -> int:
        return self.spec.p

    @property
    def rays(self) -> list:
        return self.spec.ray_params

    # -- multipliers and characteristic function ----------------------

    def b_all(self, rho: complex):
        vals = [hl.stokes(rho) for hl in self.halflines]
        b1 = np.array([v[0] for v in vals], dtype=complex)
        b2 = np.array([v[1] for v in vals], dtype=complex)
        return b1, b2

    def delta(self, rho: complex) -> complex:
        b1, b2 = self.b_all(rho)
        d, _, _, _ = characteristic_function(self.rays, b1, b2, rho)
        return d

    def gamma_row(self, k: int, rho: complex):
        """(gamma_k1..gamma_kp, beta_k) solving the vertex system; k is 1-based."""
        b1, b2 = self.b_all(rho)
        _, _, gamma, beta = characteristic_function(self.rays, b1, b2, rho, k)
        return gamma, beta

    def gamma_kk_closed_form(self, k: int, rho: complex) -> complex:
        """delta_k * Delta_k / Delta with Delta_k = sigma_k^2 prod sigma_j b_j1."""
        b1, b2 = self.b_all(rho)
        d, dks, _, _ = characteristic_function(self.rays, b1, b2, rho)
        return (2j * rho / b1[k - 1]) * dks[k - 1] / d

    # -- Weyl-type solutions ------------------------------------------

    def psi_kk(self, k: int, rho: complex, x_grid):
        """(psi_kk, psi_kk') on x_grid; rho in the closed upper half-plane."""
        kk = k - 1
        b1, _ = self.b_all(rho)
        gamma, _ = self.gamma_row(k, rho)
        delta_k = 2j * rho / b1[kk]
        hl = self.halflines[kk]
        f, fp = hl.jost(rho, x_grid)
        lam = rho * rho
        _, _, S2, S2p = hl.regular(lam, x_grid)
        return gamma[kk] * f - delta_k * S2, gamma[kk] * fp - delta_k * S2p

    def psi_off(self, k: int, j: int, rho: complex, x_grid):
        """(psi_kj, psi_kj') = gamma_kj (f_j, f_j') for j != k (1-based)."""
        gamma, _ = self.gamma_row(k, rho)
        f, fp = self.halflines[j - 1].jost(rho, x_grid)
        return gamma[j - 1] * f, gamma[j - 1] * fp

    def psi_matrix(self, k: int, rho: complex, x: float) -> np.ndarray:
        """2x2 matrix [[psi_kk, f_k], [psi_kk', f_k']] at one x (Im rho >= 0)."""
        xg = np.array([x])
        psi, psip = self.psi_kk(k, rho, xg)
        f, fp = self.halflines[k - 1].jost(rho, xg)
        return np.array([[psi[0], f[0]], [psip[0], fp[0]]])

    def matching_residual(self, k: int, rho: complex) -> float:
        """Relative residual of the vertex matching conditions for psi_k."""
        hl_k = self.halflines[k - 1]
        xw = hl_k.eval_window(rho)
        u1 = []
        u2 = []
        for j in range(1, self.p + 1):
            hl = self.halflines[j - 1]
            xj = hl.eval_window(rho)
            S1, S1p, S2, S2p = hl.regular(rho * rho, xj)
            if j == k:
                y, yp = self.psi_kk(k, rho, xj)
            else:
                y, yp = self.psi_off(k, j, rho, xj)
            a, b = matching_forms(self.rays[j - 1], y, yp, S1, S1p, S2, S2p)
            u1.append(a)
            u2.append(b)
        scale = max(max(abs(v) for v in u1), max(abs(v) for v in u2), 1e-300)
        r1 = max(abs(v - u1[k - 1]) for v in u1)
        r2 = abs(sum(u2))
        return max(r1, r2) / scale

    # -- reflection coefficients --------------------------------------

    def reflection(self, k: int, rho: float) -> complex:
        """r_k at real nonzero rho via the multiplier form."""
        rho = complex(rho)
        if rho.imag != 0 or rho == 0:
            raise ValueError("reflection coefficient needs real nonzero rho")
        b1p, _ = self.b_all(rho)
        b1m, _ = self.b_all(-rho)
        gamma, _ = self.gamma_row(k, rho)
        return complex(gamma[k - 1] - b1m[k - 1] / b1p[k - 1])

    def reflection_wronskian(self, k: int, rho: float, x: float | None = None) -> complex:
        """r_k from <f(-rho), psi_kk(rho)> / <f(-rho), f(rho)>."""
        rho = float(rho)
        hl = self.halflines[k - 1]
        xg = hl.eval_window(complex(rho)) if x is None else np.atleast_1d(x)
        psi, psip = self.psi_kk(k, complex(rho), xg)
        fm, fmp = hl.jost(complex(-rho), xg)
        f, fp = hl.jost(complex(rho), xg)
        num = fm * psip - fmp * psi
        den = fm * fp - fmp * f
        if np.min(np.abs(den)) < 1e-10:
            raise ValueError("rho too close to 0 for the Wronskian ratio")
        vals = num / den
        return complex(np.median(vals.real) + 1j * np.median(vals.imag))

    # -- poles and residues --------------------------------------------

    def pole_indicator(self, k: int):
        """b_k1(rho) Delta(rho), whose upper-half-plane zeros carry the poles."""
        def F(rho):
            b1, b2 = self.b_all(rho)
            d, _, _, _ = characteristic_function(self.rays, b1, b2, rho)
            return b1[k - 1] * d
        return F

    def zero_census(self, region) -> dict:
        """Zeros of Delta and of every b_k1 in the region (cached).

        b_k1 of a zero-potential ray has no zeros and is skipped.
        """
        key = tuple(region)
        cache = getattr(self, "_census_cache", None)
        if cache is None:
            cache = self._census_cache = {}
        hit = cache.get(key)
        if hit is not None:
            return hit
        delta_zeros = find_zeros_rectangle(self.delta, region)
        b1_zeros = {}
        for k in range(1, self.p + 1):
            if self.halflines[k - 1].potential.is_zero:
                b1_zeros[k] = []
            else:
                b1_zeros[k] = find_zeros_rectangle(
                    lambda z, kk=k: self.halflines[kk - 1].stokes(z)[0], region)
        out = {"delta": delta_zeros, "b1": b1_zeros}
        cache[key] = out
        return out

    def residue_at(self, k: int, rho0: complex, radius: float,
                   contour_nodes: int = 64, x_check=None):
        """alpha_k with res psi_kk = alpha_k f_k(., rho0), by contour integral.

        Cross-checked at two x values; returns (alpha, x_spread).
        """
        hl = self.halflines[k - 1]
        if x_check is None:
            base = hl.support if hl.support > 0 else 1.0
            x_check = np.array([0.4 * base, 0.9 * base])
        x_check = np.atleast_1d(x_check)
        spec = ContourSpec(rho0, radius, contour_nodes)
        pts = spec.points()
        vals = np.empty((contour_nodes, x_check.size), dtype=complex)
        for i, z in enumerate(pts):
            psi, _ = self.psi_kk(k, z, x_check)
            vals[i] = psi
        res = laurent_coefficients_array(vals, spec, (-1,))[0]
        f0, _ = hl.jost(rho0, x_check)
        ratios = res / f0
        alpha = complex(np.mean(ratios))
        spread = float(np.max(np.abs(ratios - alpha))) / max(abs(alpha), 1e-300)
        return alpha, spread

    def find_poles_and_residues(self, k: int, region, removable_rtol: float = 1e-8,
                                min_cell: float = 1e-6):
        """Poles of psi_kk in the upper half-plane region with residue factors.

        region = (re_lo, re_hi, im_lo, im_hi), im_lo > 0.  Zeros of
        b_k1 Delta are located by winding-number subdivision; each is
        classified as a genuine (simple) pole or a removable point by
        the size of the contour residue.
        """
        re_lo, re_hi, im_lo, im_hi = region
        if im_lo <= 0:
            raise ValueError("search region must lie in the open upper half-plane")
        census = self.zero_census(region)
        zeros = census["delta"] + census["b1"][k]
        poles = []
        residues = {}
        for z0, mult in zeros:
            if mult != 1:
                raise ConditionViolationError(
                    f"multiple zero (order {mult}) of the pole indicator at {z0}")
            others = [z for z, _ in zeros if z != z0]
            dist = min([abs(z0 - z) for z in others], default=math.inf)
            radius = min(1e-3, dist / 2.0, z0.imag / 2.0)
            alpha, spread = self.residue_at(k, z0, radius)
            psi_scale = np.max(np.abs(self.psi_kk(k, z0 + 2 * radius, np.array([1.0]))[0]))
            if abs(alpha) < removable_rtol * max(psi_scale, 1e-300):
                continue  # removable singularity
            if spread > 1e-4:
                raise InconsistentSolutionError(
                    f"residue direction spread {spread:.2e} at {z0}")
            poles.append(z0)
            residues[z0] = alpha
        return poles, residues

    # -- conditions ----------------------------------------------------

    def exponent_groups(self):
        """Partition of rays by equal nu, ordered by decreasing Re nu."""
        groups = []
        for i, ray in enumerate(self.rays):
            for g in groups:
                if abs(complex(ray.nu) - complex(self.rays[g[0]].nu)) <= 1e-12:
                    g.append(i)
                    break
            else:
                groups.append([i])
        groups.sort(key=lambda g: -complex(self.rays[g[0]].nu).real)
        taus = [complex(self.rays[g[0]].nu) for g in groups]
        return groups, taus

    def a_inf_constants(self):
        """Leading coefficients of Delta at infinity, from closed forms."""
        groups, taus = self.exponent_groups()
        b1i = np.array([stokes_constants(r)[0] for r in self.rays], dtype=complex)
        b2i = np.array([stokes_constants(r)[1] for r in self.rays], dtype=complex)
        sig = np.array([r.sigma for r in self.rays], dtype=complex)
        sig2 = np.array([r.sigma2 for r in self.rays], dtype=complex)
        out = []
        for g in groups:
            total = 0j
            for s in g:
                total += sig2[s] * b2i[s] * np.prod(np.delete(sig * b1i, s))
            out.append(complex(total))
        return out, taus

    def mu1_sum(self) -> complex:
        return sum(r.mu1 for r in self.rays)

    def check_conditions(self, rho_grid: np.ndarray, region,
                         rho_small=(0.02, 0.03, 0.045), rho_large=None) -> ConditionReport:
        """Numeric verdicts for the nu / G / R0 / Rinf conditions."""
        witnesses: dict = {}

        nus = [complex(r.nu) for r in self.rays]
        cond_nu = True
        for i in range(self.p):
            for j in range(i + 1, self.p):
                if abs(nus[i] - nus[j]) > 1e-12 and abs(nus[i].real - nus[j].real) < 1e-12:
                    cond_nu = False
        witnesses["nu"] = [_c2pair(v) for v in nus]

        # G: no real zeros (min over the grid) and no multiple zeros (census)
        min_abs = math.inf
        scale = 0.0
        for k in range(1, self.p + 1):
            F = self.pole_indicator(k)
            vals = np.array([F(complex(r)) for r in rho_grid])
            min_abs = min(min_abs, float(np.min(np.abs(vals))))
            scale = max(scale, float(np.median(np.abs(vals))))
        witnesses["min_abs_indicator_real_axis"] = min_abs
        witnesses["indicator_scale"] = scale
        cond_g = min_abs > 1e-6 * scale
        try:
            census = self.zero_census(region)
            listing = {"delta": [(str(z), mult) for z, mult in census["delta"]]}
            for k, zs in census["b1"].items():
                listing[f"b1_ray{k}"] = [(str(z), mult) for z, mult in zs]
            if any(mult > 1 for _, mult in census["delta"]):
                cond_g = False
            for zs in census["b1"].values():
                if any(mult > 1 for _, mult in zs):
                    cond_g = False
            # a common zero of Delta and b_k1 is a double zero of the indicator
            for k, zs in census["b1"].items():
                for z, _ in zs:
                    if any(abs(z - zd) < 1e-8 for zd, _ in census["delta"]):
                        cond_g = False
            witnesses["zero_census"] = listing
        except BoundaryProximityError as exc:
            witnesses["census_error"] = str(exc)
            cond_g = False

        # R_inf: a_1^inf != 0 (closed form) and the large-rho fit of Delta
        a_inf, taus = self.a_inf_constants()
        witnesses["a_inf"] = [_c2pair(v) for v in a_inf]
        cond_rinf = abs(a_inf[0]) > 1e-12
        if rho_large is None:
            rho_large = np.linspace(0.5 * rho_grid.max(), rho_grid.max(), 8)
        fit = self.delta_large_rho_fit(rho_large)
        witnesses["delta_large_fit"] = {
            "a1_fitted": _c2pair(fit["a"][0]),
            "a1_closed_form": _c2pair(a_inf[0]),
            "rel_mismatch": fit["rel_mismatch"],
            "residual": fit["residual"],
        }
        if fit["rel_mismatch"] > 0.05:
            warnings.warn("large-rho fit of Delta disagrees with closed form",
                          RuntimeWarning, stacklevel=2)

        # R_0: b_j1^0 != 0 for all j and d^0 != 0, from small-rho sampling
        rho_small = np.asarray(rho_small, dtype=float)
        b10 = []
        b20 = []
        for j, hl in enumerate(self.halflines):
            mu1 = self.rays[j].mu1
            vals1 = []
            vals2 = []
            for r in rho_small:
                b1v, b2v = hl.stokes(complex(r))
                vals1.append(b1v * branch_power(complex(r), -mu1))
                vals2.append(b2v * branch_power(complex(r), -mu1))
            b10.append(complex(np.mean(vals1)))
            b20.append(complex(np.mean(vals2)))
        d0 = 0j
        sig = np.array([r.sigma for r in self.rays], dtype=complex)
        b10a = np.array(b10)
        for s in range(self.p):
            d0 += (self.rays[s].sigma1 * b10[s] + self.rays[s].sigma2 * b20[s]) * \
                np.prod(np.delete(sig * b10a, s))
        witnesses["b1_zero"] = [_c2pair(v) for v in b10]
        witnesses["b2_zero"] = [_c2pair(v) for v in b20]
        witnesses["d_zero"] = _c2pair(d0)
        scale0 = max(max(abs(v) for v in b10), 1e-300)
        cond_r0 = all(abs(v) > 1e-8 * scale0 for v in b10) and abs(d0) > 1e-10 * scale0 ** self.p

        return ConditionReport(cond_nu, cond_g, cond_r0, cond_rinf, witnesses)

    def delta_large_rho_fit(self, rho_large) -> dict:
        """Least-squares fit of Delta against its exponent set at large rho.

        The model divides out the leading power: Delta rho^{-mu1-2 tau_1}
        = a_1 + sum_x a_x rho^{2(tau_x - tau_1)} + c / rho.  Columns are
        normalized to unit peak to tame the near-collinearity of close
        exponents.
        """
        groups, taus = self.exponent_groups()
        mu1 = self.mu1_sum()
        rho_large = np.asarray(rho_large, dtype=float)
        dvals = np.array([self.delta(complex(r)) for r in rho_large])
        y = dvals * branch_power(rho_large.astype(complex), -mu1 - 2 * taus[0])
        cols = [branch_power(rho_large.astype(complex), 2 * (t - taus[0])) for t in taus]
        cols.append(1.0 / rho_large.astype(complex))
        scales = [float(np.max(np.abs(c))) for c in cols]
        A = np.column_stack([c / s for c, s in zip(cols, scales)])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        coef = np.asarray(coef) / np.asarray(scales)
        resid = float(np.max(np.abs(y - np.column_stack(cols) @ coef)) / np.max(np.abs(y)))
        a_closed, _ = self.a_inf_constants()
        rel = abs(coef[0] - a_closed[0]) / max(abs(a_closed[0]), 1e-300)
        return {"a": [complex(c) for c in coef[:len(taus)]], "residual": resid,
                "rel_mismatch": float(rel), "taus": taus}

    def delta_small_rho_fit(self, rho_small=(0.02, 0.03, 0.045)) -> dict:
        """Delta(rho) rho^{-mu1} -> d^0 as rho -> 0 (mean + spread)."""
        mu1 = self.mu1_sum()
        rho_small = np.asarray(rho_small, dtype=float)
        vals = np.array([self.delta(complex(r)) for r in rho_small])
        y = vals * branch_power(rho_small.astype(complex), -mu1)
        d0 = complex(np.mean(y))
        spread = float(np.max(np.abs(y - d0)) / max(abs(d0), 1e-300))
        return {"d0": d0, "spread": spread}

    # -- forward map -----------------------------------------------------

    def ray_scattering(self, k: int, rho_grid: np.ndarray, region) -> ScatteringDataRay:
        """J_k for one ray (usable for k = p as an optional diagnostic)."""
        rho_grid = np.asarray(rho_grid, dtype=float)
        r_vals = np.array([self.reflection(k, float(r)) for r in rho_grid])
        poles, residues = self.find_poles_and_residues(k, region)
        return ScatteringDataRay(k=k, rho_grid=rho_grid, r=r_vals,
                                 poles=poles, residues=residues)

    def forward_scattering(self, rho_grid: np.ndarray, region,
                           check: bool = True) -> ScatteringData:
        """Assemble the scattering bundle J = {J_k}, k = 1..p-1.

        rho_grid must be a symmetric real grid (as built by RealGrid);
        region is the upper-half-plane pole search box.
        """
        rho_grid = np.asarray(rho_grid, dtype=float)
        if check:
            report = self.check_conditions(rho_grid, region)
            if not report.all_pass:
                raise ConditionViolationError(
                    f"graph conditions fail: {json.dumps(report.to_json()['witnesses'], default=str)[:500]}")
        rays_out = [self.ray_scattering(k, rho_grid, region)
                    for k in range(1, self.p)]
        return ScatteringData(p=self.p, rays=rays_out)

    # -- Weyl functions (for the complete problem) -----------------------

    def weyl(self, j: int, rho: complex) -> complex:
        return self.halflines[j - 1].weyl(rho)

    def matching_quotient_residual(self, rho: complex) -> float:
        """Residual of sum_j U_j2(psi_1j)/U_j1(psi_1j) = 0 at this rho."""
        total = 0j
        scale = 0.0
        for j in range(1, self.p + 1):
            hl = self.halflines[j - 1]
            xj = hl.eval_window(rho)
            S1, S1p, S2, S2p = hl.regular(rho * rho, xj)
            if j == 1:
                y, yp = self.psi_kk(1, rho, xj)
            else:
                y, yp = self.psi_off(1, j, rho, xj)
            u1, u2 = matching_forms(self.rays[j - 1], y, yp, S1, S1p, S2, S2p)
            total += u2 / u1
            scale = max(scale, abs(u2 / u1))
        return abs(total) / max(scale, 1e-300)
