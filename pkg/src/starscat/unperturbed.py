"""Solutions of the unperturbed singular equation -y'' + nu0/x^2 y = rho^2 y.

Everything downstream is built on the pair of power-series solutions
C1, C2 (fractional powers x^{1/2 -+ nu} at the origin, Wronskian
C1*C2' - C1'*C2 = 1), the Green kernel they generate, and the closed
forms for the outgoing (Jost) solution of the unperturbed equation.

Branch convention: every fractional power in this package goes through
``branch_power``, i.e. z^mu = exp(mu*(log|z| + i*arg z)) with
arg z in (-pi, pi].
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special as _sp


class TruncationError(ArithmeticError):
    """Power series not converged within the allowed number of terms."""

    def __init__(self, message, last_term):
        super().__init__(message)
        self.last_term = last_term


class NearIntegerOrderError(ValueError):
    """nu is too close to an excluded integer for stable coefficients."""


@dataclass(frozen=True)
class RayParameters:
    """Order parameter and vertex coefficients attached to one ray.

    nu must satisfy Re nu > 1/2 and nu not a positive integer; sigma
    and sigma2 must be nonzero.  mu1 = 1/2 - nu, mu2 = 1/2 + nu and
    nu0 = nu^2 - 1/4 are derived.
    """

    nu: complex
    sigma: complex = 1.0
    sigma1: complex = 0.0
    sigma2: complex = 1.0

    def __post_init__(self):
        nu = complex(self.nu)
        if nu.real <= 0.5:
            raise ValueError(f"require Re nu > 1/2, got nu={nu}")
        if abs(nu.imag) < 1e-12 and abs(nu.real - round(nu.real)) < 1e-9:
            raise ValueError(f"nu={nu} too close to an excluded integer")
        if self.sigma == 0:
            raise ValueError("sigma must be nonzero")
        if self.sigma2 == 0:
            raise ValueError("sigma2 must be nonzero")

    @property
    def nu0(self) -> complex:
        return complex(self.nu) ** 2 - 0.25

    @property
    def mu1(self) -> complex:
        return 0.5 - complex(self.nu)

    @property
    def mu2(self) -> complex:
        return 0.5 + complex(self.nu)

    def mu(self, j: int) -> complex:
        if j == 1:
            return self.mu1
        if j == 2:
            return self.mu2
        raise ValueError("solution index j must be 1 or 2")


@dataclass(frozen=True)
class SeriesTruncation:
    """Stop at the earlier of max_terms or first term below tail_tolerance."""

    max_terms: int = 60
    tail_tolerance: float = 1e-12

    def __post_init__(self):
        if self.max_terms <= 0:
            raise ValueError("max_terms must be positive")
        if self.tail_tolerance <= 0:
            raise ValueError("tail_tolerance must be positive")


DEFAULT_TRUNCATION = SeriesTruncation()

# Beyond this value of |rho*x| the alternating series loses too many
# digits in double precision; callers switch to the Bessel-backed path.
SERIES_ARG_LIMIT = 12.0


def branch_power(z, mu):
    """z^mu on the fixed branch arg z in (-pi, pi].

    Accepts scalars or arrays in z.  z = 0 maps to 0 when Re mu > 0 and
    raises otherwise.
    """
    mu = complex(mu)
    if np.isscalar(z) or isinstance(z, complex):
        z = complex(z)
        if z == 0:
            if mu.real > 0:
                return 0j
            raise ValueError("branch_power: z=0 with Re mu <= 0")
        if z.imag == 0.0:
            arg = 0.0 if z.real > 0 else math.pi
        else:
            arg = math.atan2(z.imag, z.real)
        return cmath.exp(mu * (math.log(abs(z)) + 1j * arg))
    z = np.asarray(z, dtype=complex)
    if np.any(z == 0):
        if mu.real > 0:
            out = np.zeros_like(z)
            nz = z != 0
            out[nz] = branch_power(z[nz], mu)
            return out
        raise ValueError("branch_power: z=0 with Re mu <= 0")
    arg = np.angle(z)
    # np.angle maps negative reals with -0j to -pi; the branch wants +pi
    arg = np.where((z.imag == 0.0) & (z.real < 0), math.pi, arg)
    return np.exp(mu * (np.log(np.abs(z)) + 1j * arg))


@lru_cache(maxsize=4096)
def _coeff_cache(nu: complex, j: int, k_max: int):
    nu = complex(nu)
    mu = 0.5 - nu if j == 1 else 0.5 + nu
    nu0 = nu * nu - 0.25
    c0 = 1.0 + 0j if j == 1 else 1.0 / (2.0 * nu)
    out = [c0]
    c = c0
    for s in range(1, k_max + 1):
        factor = (2 * s + mu) * (2 * s + mu - 1) - nu0
        if abs(factor) < 1e-14:
            raise NearIntegerOrderError(
                f"series coefficient factor ~0 at s={s} for nu={nu}, j={j}"
            )
        c = -c / factor
        out.append(c)
    return tuple(out)


def series_coefficients(ray: RayParameters, j: int, k_max: int) -> np.ndarray:
    """Coefficients c_{j0..k_max} of the series solution C_j.

    Normalization: c_{10} = 1 and c_{20} = 1/(2 nu), so that
    c_{10}*c_{20} = (2 nu)^{-1} and the Wronskian of (C1, C2) is 1.
    """
    if j not in (1, 2):
        raise ValueError("solution index j must be 1 or 2")
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    return np.array(_coeff_cache(complex(ray.nu), j, k_max))


def eval_C(ray: RayParameters, j: int, x, lam: complex,
           trunc: SeriesTruncation = DEFAULT_TRUNCATION):
    """Series solution C_j(x, lam) and its x-derivative.

    x may be a positive scalar or array; lam is a single complex
    spectral parameter.  Raises TruncationError when the first omitted
    term would still exceed trunc.tail_tolerance at the largest x.
    """
    scalar = np.isscalar(x)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x <= 0):
        raise ValueError("eval_C requires x > 0")
    lam = complex(lam)
    mu = ray.mu(j)
    coeffs = series_coefficients(ray, j, trunc.max_terms)

    x2l = lam * x * x
    term = np.ones_like(x2l)  # lam^k x^{2k}, k = 0
    s_val = coeffs[0] * term
    s_der = coeffs[0] * mu * term
    converged = lam == 0
    for k in range(1, trunc.max_terms + 1):
        term = term * x2l
        tk = coeffs[k] * term
        s_val = s_val + tk
        s_der = s_der + tk * (mu + 2 * k)
        # the derivative series carries the extra factor mu + 2k; bound both
        if np.max(np.abs(tk)) * (abs(mu) + 2 * k) < trunc.tail_tolerance:
            converged = True
            break
    if not converged:
        raise TruncationError(
            f"series for C_{j} not converged: |lam| x^2 = {np.max(np.abs(x2l)):.3g}",
            last_term=float(np.max(np.abs(tk))),
        )
    xp = branch_power(x.astype(complex), mu)
    val = xp * s_val
    der = xp / x * s_der
    if scalar:
        return complex(val[0]), complex(der[0])
    return val, der


def _bessel_pair(ray: RayParameters, j: int, x, lam: complex):
    """C_j via Bessel functions of real order (large-argument path)."""
    nu = complex(ray.nu)
    if abs(nu.imag) > 1e-13:
        raise TruncationError(
            "series argument too large and nu is not real; no Bessel route",
            last_term=math.inf,
        )
    v = nu.real
    x = np.asarray(x, dtype=float)
    rho = complex(np.sqrt(complex(lam)))  # either root: the result is even in rho
    if rho.real < 0 or (rho.real == 0 and rho.imag < 0):
        rho = -rho  # keep rho*x off the negative real axis / principal cut
    u = rho * x.astype(complex)
    logu = np.log(u)
    if j == 1:
        const = _sp.gamma(1.0 - v) * 2.0 ** (-v)
        jv = _sp.jv(-v, u)
        jm = _sp.jv(-v - 1.0, u)
        E = np.exp(v * logu) * jv
        dE_du = np.exp(v * logu) * jm + 2.0 * v * np.exp((v - 1.0) * logu) * jv
        mu = ray.mu1
    else:
        const = _sp.gamma(v) * 2.0 ** (v - 1.0)
        jv = _sp.jv(v, u)
        jm = _sp.jv(v - 1.0, u)
        E = np.exp(-v * logu) * jv
        dE_du = np.exp(-v * logu) * jm - 2.0 * v * np.exp((-v - 1.0) * logu) * jv
        mu = ray.mu2
    xp = branch_power(x.astype(complex), mu)
    val = const * xp * E
    der = const * (mu * xp / x * E + xp * rho * dE_du)
    return val, der


def eval_C_auto(ray: RayParameters, j: int, x, lam: complex,
                trunc: SeriesTruncation = DEFAULT_TRUNCATION):
    """C_j and derivative by series where safe, Bessel route otherwise."""
    scalar = np.isscalar(x)
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    if math.sqrt(abs(lam)) * float(np.max(xa)) <= SERIES_ARG_LIMIT:
        return eval_C(ray, j, x, lam, trunc)
    val, der = _bessel_pair(ray, j, xa, lam)
    if scalar:
        return complex(val[0]), complex(der[0])
    return val, der


def green_kernel(ray: RayParameters, x: float, t: float, lam: complex,
                 trunc: SeriesTruncation = DEFAULT_TRUNCATION) -> complex:
    """Green kernel C1(x)C2(t) - C2(x)C1(t); antisymmetric in (x, t)."""
    c1x, _ = eval_C(ray, 1, x, lam, trunc)
    c2x, _ = eval_C(ray, 2, x, lam, trunc)
    c1t, _ = eval_C(ray, 1, t, lam, trunc)
    c2t, _ = eval_C(ray, 2, t, lam, trunc)
    return c1x * c2t - c2x * c1t


# ---------------------------------------------------------------------------
# Closed forms for the q == 0 problem.
#
# With the normalization c10 = 1, c20 = 1/(2 nu) one has
#   C1(x, rho^2) = Gamma(1-nu) 2^{-nu} x^{mu1} [u^nu J_{-nu}(u)],  u = rho x,
#   C2(x, rho^2) = Gamma(nu) 2^{nu-1} x^{mu2} [u^{-nu} J_{nu}(u)],
# and the outgoing solution normalized to e^{i rho x} at infinity is
#   f0(x, rho) = sqrt(pi rho / 2) e^{i(nu pi/2 + pi/4)} sqrt(x) H1_nu(rho x).
# Expanding H1 in J_{+-nu} gives the exact multipliers below.
# ---------------------------------------------------------------------------

def stokes_constants(ray: RayParameters) -> tuple[complex, complex]:
    """Leading multiplier constants (B1, B2): b_j(rho) = B_j rho^{mu_j} for q == 0."""
    nu = complex(ray.nu)
    pref = cmath.sqrt(math.pi / 2.0) * cmath.exp(1j * (nu * math.pi / 2 + math.pi / 4))
    s = cmath.sin(math.pi * nu)
    b1 = pref * 2.0 ** nu / (1j * s * _sp.gamma(1.0 - nu))
    b2 = -pref * 2.0 ** (1.0 - nu) * cmath.exp(-1j * math.pi * nu) / (1j * s * _sp.gamma(nu))
    return complex(b1), complex(b2)


def b_unperturbed(ray: RayParameters, rho):
    """Multipliers (b1, b2) of the outgoing solution for q == 0.

    Valid for rho in the closed upper half-plane, rho != 0; accepts
    arrays.  Exact: for q == 0 there is no lower-order correction.
    """
    B1, B2 = stokes_constants(ray)
    return B1 * branch_power(rho, ray.mu1), B2 * branch_power(rho, ray.mu2)


def weyl_unperturbed(ray: RayParameters, rho):
    """Weyl function b2/b1 of the q == 0 problem at rho (upper half-plane)."""
    b1, b2 = b_unperturbed(ray, rho)
    return b2 / b1


def eval_C_grid(ray: RayParameters, x: float, lams,
                trunc: SeriesTruncation = DEFAULT_TRUNCATION):
    """(C1, C1', C2, C2') at one x for an array of spectral parameters.

    Series evaluation vectorized over lambda inside the convergence
    window, Bessel route (real nu) outside.
    """
    lams = np.asarray(lams, dtype=complex)
    x = float(x)
    out = [np.empty(lams.shape, dtype=complex) for _ in range(4)]
    small = np.abs(lams) * x * x <= SERIES_ARG_LIMIT ** 2
    if np.any(small):
        ls = lams[small]
        for j, (sl_v, sl_d) in ((1, (0, 1)), (2, (2, 3))):
            mu = ray.mu(j)
            coeffs = series_coefficients(ray, j, trunc.max_terms)
            x2l = ls * x * x
            term = np.ones_like(ls)
            s_val = coeffs[0] * term
            s_der = coeffs[0] * mu * term
            for kk in range(1, trunc.max_terms + 1):
                term = term * x2l
                tk = coeffs[kk] * term
                s_val = s_val + tk
                s_der = s_der + tk * (mu + 2 * kk)
                if np.max(np.abs(tk)) * (abs(mu) + 2 * kk) < trunc.tail_tolerance:
                    break
            else:
                raise TruncationError("series not converged on grid",
                                      float(np.max(np.abs(tk))))
            xp = branch_power(complex(x), mu)
            out[sl_v][small] = xp * s_val
            out[sl_d][small] = xp / x * s_der
    big = ~small
    if np.any(big):
        for j, (sl_v, sl_d) in ((1, (0, 1)), (2, (2, 3))):
            vals, ders = _bessel_pair_grid(ray, j, x, lams[big])
            out[sl_v][big] = vals
            out[sl_d][big] = ders
    return tuple(out)


def _bessel_pair_grid(ray: RayParameters, j: int, x: float, lams):
    """C_j at fixed x over a lambda array via real-order Bessel functions."""
    nu = complex(ray.nu)
    if abs(nu.imag) > 1e-13:
        raise TruncationError(
            "series argument too large and nu is not real; no Bessel route",
            last_term=math.inf)
    v = nu.real
    rho = np.sqrt(np.asarray(lams, dtype=complex))
    flip = (rho.real < 0) | ((rho.real == 0) & (rho.imag < 0))
    rho = np.where(flip, -rho, rho)
    u = rho * x
    logu = np.log(u)
    if j == 1:
        const = _sp.gamma(1.0 - v) * 2.0 ** (-v)
        jv = _sp.jv(-v, u)
        jm = _sp.jv(-v - 1.0, u)
        E = np.exp(v * logu) * jv
        dE = np.exp(v * logu) * jm + 2.0 * v * np.exp((v - 1.0) * logu) * jv
        mu = ray.mu1
    else:
        const = _sp.gamma(v) * 2.0 ** (v - 1.0)
        jv = _sp.jv(v, u)
        jm = _sp.jv(v - 1.0, u)
        E = np.exp(-v * logu) * jv
        dE = np.exp(-v * logu) * jm - 2.0 * v * np.exp((-v - 1.0) * logu) * jv
        mu = ray.mu2
    xp = branch_power(complex(x), mu)
    return const * xp * E, const * (mu * xp / x * E + xp * rho * dE)


def jost_unperturbed_grid(ray: RayParameters, x: float, rhos,
                          trunc: SeriesTruncation = DEFAULT_TRUNCATION):
    """(f0, f0') at one x over an array of rho in the closed upper half-plane."""
    rhos = np.asarray(rhos, dtype=complex)
    x = float(x)
    f = np.empty(rhos.shape, dtype=complex)
    fp = np.empty(rhos.shape, dtype=complex)
    nu = complex(ray.nu)
    small = np.abs(rhos) * x <= SERIES_ARG_LIMIT
    if abs(nu.imag) > 1e-13:
        small = np.ones(rhos.shape, dtype=bool)
    if np.any(small):
        rs = rhos[small]
        B1, B2 = stokes_constants(ray)
        b1 = B1 * branch_power(rs, ray.mu1)
        b2 = B2 * branch_power(rs, ray.mu2)
        c1, d1, c2, d2 = eval_C_grid(ray, x, rs * rs, trunc)
        f[small] = b1 * c1 + b2 * c2
        fp[small] = b1 * d1 + b2 * d2
    big = ~small
    if np.any(big):
        v = nu.real
        rs = rhos[big]
        z = rs * x
        h = _sp.hankel1(v, z)
        hm = _sp.hankel1(v - 1.0, z)
        hd = hm - (v / z) * h
        pref = cmath.sqrt(math.pi / 2.0) * cmath.exp(1j * (v * math.pi / 2 + math.pi / 4))
        sq = branch_power(rs, 0.5)
        sqx = math.sqrt(x)
        f[big] = pref * sq * sqx * h
        fp[big] = pref * sq * (h / (2.0 * sqx) + sqx * rs * hd)
    return f, fp


def jost_unperturbed(ray: RayParameters, x, rho: complex,
                     trunc: SeriesTruncation = DEFAULT_TRUNCATION):
    """Outgoing solution (f0, f0') of the unperturbed equation.

    rho in the closed upper half-plane, rho != 0.  Uses the Hankel
    closed form for real nu when |rho x| is large, the series pair with
    the exact multipliers otherwise.
    """
    rho = complex(rho)
    if rho == 0:
        raise ValueError("rho = 0 is excluded")
    if rho.imag < -1e-14:
        raise ValueError("jost solution lives in the closed upper half-plane")
    scalar = np.isscalar(x)
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    nu = complex(ray.nu)

    if abs(rho) * float(np.max(xa)) <= SERIES_ARG_LIMIT or abs(nu.imag) > 1e-13:
        lam = rho * rho
        b1, b2 = b_unperturbed(ray, rho)
        c1, d1 = eval_C(ray, 1, xa, lam, trunc)
        c2, d2 = eval_C(ray, 2, xa, lam, trunc)
        f = b1 * c1 + b2 * c2
        fp = b1 * d1 + b2 * d2
    else:
        v = nu.real
        z = rho * xa.astype(complex)
        # rho x stays off the negative real axis for Im rho >= 0, x > 0
        h = _sp.hankel1(v, z)
        hm = _sp.hankel1(v - 1.0, z)
        hp_der = hm - (v / z) * h
        pref = cmath.sqrt(math.pi / 2.0) * cmath.exp(1j * (v * math.pi / 2 + math.pi / 4))
        sq = branch_power(rho, 0.5)
        sqx = np.sqrt(xa)
        f = pref * sq * sqx * h
        fp = pref * sq * (h / (2.0 * sqx) + sqx * rho * hp_der)
    if scalar:
        return complex(f[0]), complex(fp[0])
    return f, fp
