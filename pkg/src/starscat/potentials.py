"""Potential objects: complex-valued q on (0, infinity) with weighted integrability.

A potential must satisfy the two weighted bounds
    int_0^1 |x^{1-2 Re nu} q(x)| dx < inf,   int_1^inf |x q(x)| dx < inf,
which are checked numerically on construction against a given nu.

Named closed forms (gaussian_bump, box, exp_decay, zero) and sampled
potentials share one JSON representation; complex numbers are always
serialized as paired re/im fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad


class IntegrabilityError(ValueError):
    """The weighted norms of q are not finite."""


def _c2pair(z) -> dict:
    z = complex(z)
    return {"re": z.real, "im": z.imag}


def _pair2c(d) -> complex:
    return complex(d["re"], d["im"])


@dataclass
class Potential:
    """Complex potential with compact support or an exponential-decay tail.

    x_support is the point beyond which q vanishes identically; it is
    math.inf for decaying (non-compact) potentials, in which case
    ``tail_cutoff`` supplies the decay certificate.
    """

    kind: str                      # "analytic" | "samples"
    x_support: float
    name: Optional[str] = None
    params: dict = field(default_factory=dict)
    samples_x: Optional[np.ndarray] = None
    samples_q: Optional[np.ndarray] = None
    _eval: Optional[Callable] = field(default=None, repr=False)

    # -- constructors ------------------------------------------------

    @classmethod
    def zero(cls) -> "Potential":
        return cls(kind="analytic", x_support=0.0, name="zero", params={},
                   _eval=lambda x: np.zeros_like(np.asarray(x, dtype=float), dtype=complex))

    @classmethod
    def box(cls, height: complex, left: float, right: float) -> "Potential":
        if not (0 < left < right):
            raise ValueError("box requires 0 < left < right")
        h = complex(height)

        def f(x):
            x = np.asarray(x, dtype=float)
            return np.where((x >= left) & (x <= right), h, 0j)

        return cls(kind="analytic", x_support=right, name="box",
                   params={"height": h, "left": left, "right": right}, _eval=f)

    @classmethod
    def gaussian_bump(cls, amplitude: complex, center: float, width: float,
                      cut_sigmas: float = 8.0) -> "Potential":
        if center <= 0 or width <= 0:
            raise ValueError("gaussian_bump requires center > 0 and width > 0")
        a = complex(amplitude)
        sup = center + cut_sigmas * width

        def f(x):
            x = np.asarray(x, dtype=float)
            val = a * np.exp(-((x - center) ** 2) / (2.0 * width ** 2))
            return np.where(x <= sup, val, 0j)

        return cls(kind="analytic", x_support=sup, name="gaussian_bump",
                   params={"amplitude": a, "center": center, "width": width,
                           "cut_sigmas": cut_sigmas}, _eval=f)

    @classmethod
    def exp_decay(cls, amplitude: complex, rate: float) -> "Potential":
        if rate <= 0:
            raise ValueError("exp_decay requires rate > 0")
        a = complex(amplitude)

        def f(x):
            x = np.asarray(x, dtype=float)
            return a * np.exp(-rate * x) + 0j

        return cls(kind="analytic", x_support=math.inf, name="exp_decay",
                   params={"amplitude": a, "rate": rate}, _eval=f)

    @classmethod
    def from_samples(cls, x, q, x_support: float) -> "Potential":
        x = np.asarray(x, dtype=float)
        q = np.asarray(q, dtype=complex)
        if x.ndim != 1 or x.size < 2 or np.any(np.diff(x) <= 0):
            raise ValueError("samples_x must be strictly increasing, length >= 2")
        if x[0] <= 0:
            raise ValueError("samples must start at x > 0")
        if q.shape != x.shape:
            raise ValueError("samples_q must match samples_x")
        return cls(kind="samples", x_support=float(x_support),
                   samples_x=x, samples_q=q)

    # -- evaluation ---------------------------------------------------

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "analytic":
            return self._eval(x)
        re = np.interp(x, self.samples_x, self.samples_q.real, left=0.0, right=0.0)
        im = np.interp(x, self.samples_x, self.samples_q.imag, left=0.0, right=0.0)
        out = re + 1j * im
        return np.where(x <= self.x_support, out, 0j)

    def derivative(self, x):
        """dq/dx, used by third-derivative formulas of solution fields.

        Analytic for the named closed forms; finite differences on the
        sample grid otherwise (zero where q vanishes).
        """
        x = np.asarray(x, dtype=float)
        if self.kind == "analytic":
            name = self.name
            p = self.params
            if name == "zero":
                return np.zeros_like(x, dtype=complex)
            if name == "box":
                return np.zeros_like(x, dtype=complex)  # a.e. derivative
            if name == "gaussian_bump":
                val = self(x)
                return val * (-(x - p["center"]) / p["width"] ** 2)
            if name == "exp_decay":
                return -p["rate"] * self(x)
            h = 1e-6 * max(1.0, float(self.x_support))
            return (self(x + h) - self(x - h)) / (2 * h)
        h = 1e-6 * max(1.0, float(self.x_support))
        return (self(x + h) - self(x - h)) / (2 * h)

    def scalar(self, x: float) -> complex:
        """Fast scalar evaluation (hot path of ODE right-hand sides)."""
        if self.kind == "analytic":
            name = self.name
            if name == "zero":
                return 0j
            p = self.params
            if name == "box":
                return p["height"] if p["left"] <= x <= p["right"] else 0j
            if name == "gaussian_bump":
                if x > self.x_support:
                    return 0j
                d = (x - p["center"]) / p["width"]
                return p["amplitude"] * math.exp(-0.5 * d * d)
            if name == "exp_decay":
                return p["amplitude"] * math.exp(-p["rate"] * x)
            return complex(self._eval(np.array([x]))[0])
        return complex(self(np.array([x]))[0])

    @property
    def is_zero(self) -> bool:
        if self.kind == "analytic" and self.name == "zero":
            return True
        if self.kind == "samples":
            return bool(np.all(self.samples_q == 0))
        return False

    @property
    def breakpoints(self) -> tuple[float, ...]:
        """x values where q jumps; quadrature segments must not straddle them."""
        if self.kind == "analytic" and self.name == "box":
            return (self.params["left"], self.params["right"])
        return ()

    def tail_cutoff(self, tol: float = 1e-10) -> float:
        """Smallest x_inf with int_{x_inf}^inf |t q(t)| dt < tol."""
        if math.isfinite(self.x_support):
            return self.x_support
        if self.name == "exp_decay":
            a = abs(self.params["amplitude"])
            b = self.params["rate"]
            # int_T^inf t a e^{-bt} dt = a e^{-bT} (T/b + 1/b^2)
            T = 1.0
            for _ in range(200):
                val = a * math.exp(-b * T) * (T / b + 1.0 / b ** 2)
                if val < tol:
                    return T
                T *= 1.25
            raise IntegrabilityError("tail cutoff search failed")
        raise IntegrabilityError("no decay certificate for this potential")

    # -- integrability (weighted norms) --------------------------------

    def weighted_norms(self, nu: complex) -> tuple[float, float]:
        """Numerical values of the two weighted L1 norms for this nu."""
        w = 1.0 - 2.0 * complex(nu).real

        def near(t):
            return float(np.abs(self(t))) * t ** w

        def far(t):
            return float(np.abs(self(t))) * t

        lo = 1e-10 if self.kind == "analytic" else float(self.samples_x[0])
        i0, _ = quad(near, lo, 1.0, limit=200)
        hi = self.x_support if math.isfinite(self.x_support) else self.tail_cutoff(1e-12)
        i1 = 0.0
        if hi > 1.0:
            i1, _ = quad(far, 1.0, hi, limit=200)
        return i0, i1

    def check_integrability(self, nu: complex) -> None:
        i0, i1 = self.weighted_norms(nu)
        if not (math.isfinite(i0) and math.isfinite(i1)):
            raise IntegrabilityError(f"weighted norms not finite: {i0}, {i1}")

    # -- serialization --------------------------------------------------

    def to_json(self) -> dict:
        if self.kind == "samples":
            return {
                "kind": "samples",
                "x": [float(v) for v in self.samples_x],
                "re": [float(v) for v in self.samples_q.real],
                "im": [float(v) for v in self.samples_q.imag],
                "x_support": float(self.x_support),
            }
        params = {}
        for key, val in self.params.items():
            if isinstance(val, complex):
                params[key] = _c2pair(val)
            else:
                params[key] = val
        return {"kind": "analytic", "name": self.name, "params": params}

    @classmethod
    def from_json(cls, obj: dict) -> "Potential":
        if obj["kind"] == "samples":
            q = np.asarray(obj["re"], dtype=float) + 1j * np.asarray(obj["im"], dtype=float)
            return cls.from_samples(np.asarray(obj["x"], dtype=float), q, obj["x_support"])
        if obj["kind"] != "analytic":
            raise ValueError(f"unknown potential kind {obj['kind']!r}")
        name = obj["name"]
        raw = dict(obj.get("params", {}))
        params = {k: (_pair2c(v) if isinstance(v, dict) and set(v) == {"re", "im"} else v)
                  for k, v in raw.items()}
        if name == "zero":
            return cls.zero()
        if name == "box":
            return cls.box(params["height"], params["left"], params["right"])
        if name == "gaussian_bump":
            return cls.gaussian_bump(params["amplitude"], params["center"],
                                     params["width"], params.get("cut_sigmas", 8.0))
        if name == "exp_decay":
            return cls.exp_decay(params["amplitude"], params["rate"])
        raise ValueError(f"unknown analytic potential {name!r}")
