"""Reconstruction of a ray potential from its scattering data.

The engine compares the unknown problem L against an a priori known
model problem with the same order parameters and vertex coefficients.
The row P1 of the comparison matrix P = Psi Psi_model^{-1} satisfies a
jump relation across the real axis driven by the reflection data and
has (at most simple) poles at the union of the two problems' discrete
points.  Writing the jump of P1 as Phi, the boundary values of the
contour-integral representation close into a linear system for Phi on
(grid nodes) + (discrete points); the solved Phi rebuilds P1 anywhere,
hence the outgoing solution f_k = P11 f_model + P12 f_model', and the
potential via q = f''/f + rho^2 - nu0 / x^2.

Matrix conventions: Phi and the rows G are 2-component row vectors;
all 2x2 matrices act by right multiplication.  Discrete jump matrices
carry the residue factor in the (2,1) slot: with Psi columns ordered
as (psi, f), res Psi = Psi_<0> v requires v = alpha E_21.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .graph import (ConditionViolationError, GraphProblem, GraphSpec,
                    ScatteringData, ScatteringDataRay)
from .numerics import (ContourSpec, RealGrid, cauchy_weights,
                       cauchy_weights_deriv, laurent_coefficients_array,
                       pv_cauchy_matrix, solve_dense, tail_correction, tail_fit)
from .potentials import Potential
from .unperturbed import RayParameters, branch_power

I1 = np.array([1.0, 0.0], dtype=complex)
E21 = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)

POLE_MERGE_TOL = 1e-6


class EvaluationGeometryError(ValueError):
    """Evaluation point too close to the real axis or a discrete point."""


def real_grid_from_nodes(nodes: np.ndarray) -> RealGrid:
    """Rebuild a RealGrid (with trapezoid weights) from its node set."""
    nodes = np.asarray(nodes, dtype=float)
    n = nodes.size
    if n % 2 or not np.all(nodes == -nodes[::-1]):
        raise ValueError("grid nodes must be symmetric under negation")
    pos = nodes[n // 2:]
    w_pos = np.zeros_like(pos)
    d = np.diff(pos)
    w_pos[:-1] += d / 2.0
    w_pos[1:] += d / 2.0
    weights = np.concatenate([w_pos[::-1], w_pos])
    return RealGrid(nodes=nodes, weights=weights, rho_min=float(pos[0]),
                    rho_max=float(pos[-1]))


# ---------------------------------------------------------------------------
# jump data
# ---------------------------------------------------------------------------

@dataclass
class JumpData:
    """Real-axis jump matrices and discrete jump data for one ray."""

    grid: RealGrid
    v_real: np.ndarray              # (N, 2, 2)
    z_check: tuple                  # merged discrete points (both half-planes)
    v_disc: dict                    # point -> 2x2 target jump matrix
    v_hat: dict                     # point -> 2x2 difference v - v_model

    def det_v_real(self) -> np.ndarray:
        v = self.v_real
        return v[:, 0, 0] * v[:, 1, 1] - v[:, 0, 1] * v[:, 1, 0]


def build_jump(j_k: ScatteringDataRay, model_poles: dict,
               grid: RealGrid | None = None,
               merge_tol: float = POLE_MERGE_TOL) -> JumpData:
    """Assemble jump data from ray scattering data and model pole data.

    model_poles maps each upper-half-plane pole of the model's Weyl-type
    solution to its residue factor.  Reflected (lower half-plane) points
    are generated, never stored: alpha(-rho0) = -alpha(rho0).
    """
    if grid is None:
        grid = real_grid_from_nodes(j_k.rho_grid)
    elif not np.array_equal(grid.nodes, np.asarray(j_k.rho_grid, dtype=float)):
        raise ValueError("scattering grid does not match the quadrature grid")

    r = np.asarray(j_k.r, dtype=complex)
    r_neg = r[grid.negation_index()]
    n = grid.n
    v = np.empty((n, 2, 2), dtype=complex)
    v[:, 0, 0] = r
    v[:, 0, 1] = 1.0
    v[:, 1, 0] = 1.0 - r * r_neg
    v[:, 1, 1] = -r_neg

    def reflect(points: dict) -> dict:
        out = {}
        for p, a in points.items():
            p = complex(p)
            a = complex(a)
            out[p] = a
            out[-p] = -a
        return out

    target = reflect({p: j_k.residues[p] for p in j_k.poles})
    model = reflect(dict(model_poles))

    points = list(target)
    for p in model:
        if all(abs(p - q) > merge_tol for q in points):
            points.append(p)
    points.sort(key=lambda z: (z.real, z.imag))

    v_disc = {}
    v_hat = {}
    for p in points:
        a_t = next((a for q, a in target.items() if abs(q - p) <= merge_tol), 0j)
        a_m = next((a for q, a in model.items() if abs(q - p) <= merge_tol), 0j)
        v_disc[p] = a_t * E21
        v_hat[p] = (a_t - a_m) * E21
    return JumpData(grid=grid, v_real=v, z_check=tuple(points),
                    v_disc=v_disc, v_hat=v_hat)


# ---------------------------------------------------------------------------
# field providers (target or model side)
# ---------------------------------------------------------------------------

class RayFields:
    """psi_kk, f_k, their x-derivatives up to third order, and Laurent data.

    Values are cached per rho over the whole x grid, so they can be
    sliced per x during the per-x solves.  Second and third derivatives
    come from the differential equation itself (no differencing), so the
    comparison matrix and its x-derivatives are all analytic; Laurent
    coefficients in rho at discrete points are extracted by circle
    contours, both for Psi / Psi^{-1} and for their x-derivatives.
    """

    def __init__(self, graph: GraphProblem, k: int, x_grid: np.ndarray,
                 contour_nodes: int = 64):
        self.graph = graph
        self.k = k
        self.x_grid = np.asarray(x_grid, dtype=float)
        self.contour_nodes = contour_nodes
        pot = graph.halflines[k - 1].potential
        self._qv = np.asarray(pot(self.x_grid), dtype=complex)
        self._qd = np.asarray(pot.derivative(self.x_grid), dtype=complex)
        self._nu0 = complex(graph.rays[k - 1].nu0)
        self._cache: dict = {}
        self._laurent: dict = {}
        self._radius: dict = {}

    def _compute(self, rho: complex):
        rho = complex(rho)
        hit = self._cache.get(rho)
        if hit is not None:
            return hit
        k = self.k
        gp = self.graph
        hl = gp.halflines[k - 1]
        b1, _ = gp.b_all(rho)
        gamma, _ = gp.gamma_row(k, rho)
        dk = 2j * rho / b1[k - 1]
        f, fp = hl.jost(rho, self.x_grid)
        _, _, S2, S2p = hl.regular(rho * rho, self.x_grid)
        psi = gamma[k - 1] * f - dk * S2
        psip = gamma[k - 1] * fp - dk * S2p
        x = self.x_grid
        pot_term = self._nu0 / (x * x) + self._qv - rho * rho
        pot_term_dx = -2.0 * self._nu0 / (x * x * x) + self._qd
        fpp = pot_term * f
        fppp = pot_term_dx * f + pot_term * fp
        psipp = pot_term * psi
        psippp = pot_term_dx * psi + pot_term * psip
        out = {"f": (f, fp, fpp, fppp), "psi": (psi, psip, psipp, psippp)}
        self._cache[rho] = out
        return out

    def jost_at(self, rho: complex):
        d = self._compute(rho)
        return d["f"][0], d["f"][1]

    def jost_derivs(self, rho: complex):
        return self._compute(rho)["f"]

    def psi_at(self, rho: complex):
        d = self._compute(rho)
        return d["psi"][0], d["psi"][1]

    def psi_derivs(self, rho: complex):
        return self._compute(rho)["psi"]

    def psi_matrix(self, ix: int, rho: complex, order: int = 0) -> np.ndarray:
        """d^order/dx^order of Psi(x_ix, rho) for Im rho >= 0."""
        d = self._compute(rho)
        f = d["f"]
        psi = d["psi"]
        return np.array([[psi[order][ix], f[order][ix]],
                         [psi[order + 1][ix], f[order + 1][ix]]])

    def psi_matrix_signed(self, ix: int, rho: complex, order: int = 0) -> np.ndarray:
        """Psi extended to the lower half-plane by Psi(rho) = Psi(-rho)."""
        rho = complex(rho)
        return self.psi_matrix(ix, rho if rho.imag >= 0 else -rho, order)

    def boundary_matrices(self, ix: int, grid: RealGrid, order: int = 0):
        """(Psi_plus, Psi_minus) arrays of shape (N, 2, 2) on grid nodes."""
        key = ("pm", ix, order, id(grid))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        n = grid.n
        plus = np.empty((n, 2, 2), dtype=complex)
        for i, node in enumerate(grid.nodes):
            plus[i] = self.psi_matrix(ix, complex(node), order)
        minus = plus[grid.negation_index()]
        out = (plus, minus)
        self._cache[key] = out
        return out

    def contour_radius(self, p: complex, points) -> float:
        p = complex(p)
        hit = self._radius.get(p)
        if hit is not None:
            return hit
        dist = min([abs(p - complex(q)) for q in points if complex(q) != p],
                   default=math.inf)
        r = min(0.25, dist / 2.5, abs(p.imag) / 2.5, abs(p) / 2.5)
        if r <= 0:
            raise EvaluationGeometryError(f"cannot place a contour around {p}")
        self._radius[p] = r
        return r

    def laurent(self, ix: int, p: complex, points) -> dict:
        """Laurent data at point p: coefficients m = -1..2 of Psi, Psi^{-1}
        and their x-derivatives dPsi, dInv.

        Lower-half-plane points use coeff_m(-p) = (-1)^m coeff_m(p).
        """
        p = complex(p)
        key = (ix, p)
        hit = self._laurent.get(key)
        if hit is not None:
            return hit
        if p.imag < 0:
            up = self.laurent(ix, -p, [-complex(q) for q in points])
            out = {name: {m: (-1) ** m * up[name][m] for m in up[name]}
                   for name in up}
            self._laurent[key] = out
            return out
        r = self.contour_radius(p, points)
        spec = ContourSpec(p, r, self.contour_nodes)
        pts = spec.points()
        vals = np.empty((pts.size, 2, 2), dtype=complex)
        inv = np.empty_like(vals)
        dvals = np.empty_like(vals)
        dinv = np.empty_like(vals)
        for i, z in enumerate(pts):
            M = self.psi_matrix(ix, z)
            dM = self.psi_matrix(ix, z, order=1)
            det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
            Mi = np.array([[M[1, 1], -M[0, 1]], [-M[1, 0], M[0, 0]]]) / det
            vals[i] = M
            inv[i] = Mi
            dvals[i] = dM
            dinv[i] = -Mi @ dM @ Mi
        orders = (-1, 0, 1, 2)
        out = {"Psi": dict(zip(orders, laurent_coefficients_array(vals, spec, orders))),
               "Inv": dict(zip(orders, laurent_coefficients_array(inv, spec, orders))),
               "dPsi": dict(zip(orders, laurent_coefficients_array(dvals, spec, orders))),
               "dInv": dict(zip(orders, laurent_coefficients_array(dinv, spec, orders)))}
        self._laurent[key] = out
        return out


class ModelProblem:
    """The known reference problem feeding the reconstruction of ray k."""

    def __init__(self, spec: GraphSpec, k: int, x_grid,
                 pole_region=None, rho_grid_for_conditions=None,
                 check: bool = True):
        self.spec = spec
        self.k = k
        self.graph = GraphProblem(spec)
        self.x_grid = np.asarray(x_grid, dtype=float)
        self.fields = RayFields(self.graph, k, self.x_grid)
        self.pole_region = pole_region
        self._poles = None
        self.report = None
        if check:
            if rho_grid_for_conditions is None:
                rho_grid_for_conditions = np.concatenate([
                    -np.geomspace(0.05, 12.0, 40)[::-1], np.geomspace(0.05, 12.0, 40)])
            region = pole_region if pole_region is not None else (-12.0, 12.0, 0.01, 12.0)
            self.report = self.graph.check_conditions(
                np.asarray(rho_grid_for_conditions, dtype=float), region)
            if not self.report.all_pass:
                raise ConditionViolationError(
                    "model problem fails the admissibility conditions")

    @classmethod
    def zero_model(cls, target_spec: GraphSpec, k: int, x_grid, **kw) -> "ModelProblem":
        """Zero-potential model with the target's nu and vertex data."""
        rays = [(ray, Potential.zero()) for ray, _ in target_spec.rays]
        return cls(GraphSpec(rays), k, x_grid, **kw)

    def pole_data(self, region=None) -> dict:
        """Upper-half-plane poles of the model's Weyl-type solution on ray k."""
        if self._poles is None:
            region = region or self.pole_region or (-12.0, 12.0, 0.01, 12.0)
            poles, residues = self.graph.find_poles_and_residues(self.k, region)
            self._poles = dict(residues)
        return self._poles


# ---------------------------------------------------------------------------
# spectral mapping pieces
# ---------------------------------------------------------------------------

def d1_matrix(laurent: dict, rho: complex, mu0: complex, d: str = "Inv") -> np.ndarray:
    """d1(rho, mu0) = (rho-mu0)^{-1} Inv_<0> + (rho-mu0)^{-2} Inv_<-1>.

    With d = "dInv" this is the x-derivative of d1 instead.
    """
    dz = rho - mu0
    return laurent[d][0] / dz + laurent[d][-1] / dz ** 2


def d1_matrix_deriv(laurent: dict, rho: complex, mu0: complex, d: str = "Inv") -> np.ndarray:
    """d/d rho of d1(rho, mu0)."""
    dz = rho - mu0
    return -laurent[d][0] / dz ** 2 - 2.0 * laurent[d][-1] / dz ** 3


def d2_matrix(laurent: dict, rho0: complex, mu: complex, d: str = "Psi") -> np.ndarray:
    """d2(rho0, mu) = (rho0-mu)^{-1} Psi_<0> - (rho0-mu)^{-2} Psi_<-1>."""
    dz = rho0 - mu
    return laurent[d][0] / dz - laurent[d][-1] / dz ** 2


def D_matrix(l_mu: dict, l_rho: dict, rho0: complex, mu0: complex,
             d_inv: str = "Inv", d_psi: str = "Psi") -> np.ndarray:
    """Regularized value of (rho-mu)^{-1} Psi^{-1}(mu) Psi(rho) at (rho0, mu0)."""
    if rho0 == mu0:
        return l_mu[d_inv][-1] @ l_rho[d_psi][2] + l_mu[d_inv][0] @ l_rho[d_psi][1]
    return (d1_matrix(l_mu, rho0, mu0, d_inv) @ l_rho[d_psi][0]
            + d1_matrix_deriv(l_mu, rho0, mu0, d_inv) @ l_rho[d_psi][-1])


def D_matrix_dx(l_mu: dict, l_rho: dict, rho0: complex, mu0: complex) -> np.ndarray:
    """x-derivative of D_matrix by the product rule over Laurent data."""
    return (D_matrix(l_mu, l_rho, rho0, mu0, "dInv", "Psi")
            + D_matrix(l_mu, l_rho, rho0, mu0, "Inv", "dPsi"))


def spectral_mapping_pieces(fields: RayFields, ix: int, rho: complex,
                            points) -> dict:
    """Psi, Psi^{-1} at (x_ix, rho) plus d1/d2 values against the points."""
    M = fields.psi_matrix_signed(ix, rho)
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    Minv = np.array([[M[1, 1], -M[0, 1]], [-M[1, 0], M[0, 0]]]) / det
    out = {"Psi": M, "Psi_inv": Minv, "d1": {}, "d2": {}}
    for p in points:
        l_p = fields.laurent(ix, complex(p), points)
        out["d1"][p] = d1_matrix(l_p, complex(rho), complex(p))
        out["d2"][p] = d2_matrix(l_p, complex(p), complex(rho))
    return out


# ---------------------------------------------------------------------------
# the main linear system
# ---------------------------------------------------------------------------

@dataclass
class GridOperators:
    """x-independent quadrature operators attached to one grid + point set."""

    grid: RealGrid
    pv: np.ndarray                       # principal-value Cauchy matrix
    c_rows: dict = field(default_factory=dict)    # point -> Cauchy row
    dc_rows: dict = field(default_factory=dict)   # point -> derivative row

    @classmethod
    def build(cls, grid: RealGrid, points=()) -> "GridOperators":
        ops = cls(grid=grid, pv=pv_cauchy_matrix(grid))
        ops.add_points(points)
        return ops

    def add_points(self, points):
        for p in points:
            p = complex(p)
            if p not in self.c_rows:
                self.c_rows[p] = cauchy_weights(self.grid, p)
                self.dc_rows[p] = cauchy_weights_deriv(self.grid, p)


@dataclass
class MainEquationSystem:
    """Dense realization of the main operator at one x."""

    x: float
    x_index: int
    grid: RealGrid
    points: tuple
    matrix: np.ndarray
    rhs: np.ndarray
    v_matrices: np.ndarray               # V(x, rho_i), shape (N, 2, 2)
    v_matrices_dx: np.ndarray            # d/dx V(x, rho_i)
    model_laurent: dict                  # point -> laurent dict of the model
    ops: "GridOperators"
    jump: JumpData

    @property
    def n_grid(self) -> int:
        return self.grid.n

    def split(self, vec: np.ndarray):
        n = self.grid.n
        return vec[:2 * n].reshape(n, 2), vec[2 * n:].reshape(len(self.points), 2)


@dataclass
class PhiSolution:
    """Solved jump function Phi on the grid and at discrete points.

    phi_grid_dx / phi_disc_dx hold the x-derivative of Phi, obtained by
    re-solving the differentiated system with the same factorization.
    """

    system: MainEquationSystem
    phi_grid: np.ndarray                 # (N, 2)
    phi_disc: np.ndarray                 # (M, 2)
    cond: float
    residual: float
    phi_grid_dx: np.ndarray | None = None
    phi_disc_dx: np.ndarray | None = None
    lu: tuple | None = None


def _invert_stack(mats: np.ndarray) -> np.ndarray:
    det = mats[:, 0, 0] * mats[:, 1, 1] - mats[:, 0, 1] * mats[:, 1, 0]
    out = np.empty_like(mats)
    out[:, 0, 0] = mats[:, 1, 1]
    out[:, 0, 1] = -mats[:, 0, 1]
    out[:, 1, 0] = -mats[:, 1, 0]
    out[:, 1, 1] = mats[:, 0, 0]
    return out / det[:, None, None]


def _v_matrices(jump: JumpData, model: ModelProblem, ix: int,
                with_dx: bool = True):
    """V = Psi_model_minus v Psi_model_plus^{-1} on nodes, and d/dx V."""
    plus, minus = model.fields.boundary_matrices(ix, jump.grid)
    inv_plus = _invert_stack(plus)
    V = np.einsum("nab,nbc,ncd->nad", minus, jump.v_real, inv_plus)
    if not with_dx:
        return V, None
    dplus, dminus = model.fields.boundary_matrices(ix, jump.grid, order=1)
    dinv_plus = -np.einsum("nab,nbc,ncd->nad", inv_plus, dplus, inv_plus)
    dV = np.einsum("nab,nbc,ncd->nad", dminus, jump.v_real, inv_plus) \
        + np.einsum("nab,nbc,ncd->nad", minus, jump.v_real, dinv_plus)
    return V, dV


def assemble_main_system(jump: JumpData, model: ModelProblem, x: float,
                         ops: GridOperators | None = None) -> MainEquationSystem:
    """Dense matrix and right-hand side of the main equation at this x."""
    x_idx = int(np.argmin(np.abs(model.x_grid - x)))
    if abs(model.x_grid[x_idx] - x) > 1e-12 * max(1.0, abs(x)):
        raise ValueError(f"x={x} is not a node of the model's x grid")
    grid = jump.grid
    points = jump.z_check
    n, m = grid.n, len(points)
    if ops is None:
        ops = GridOperators.build(grid, points)
    else:
        ops.add_points(points)

    V, dV = _v_matrices(jump, model, x_idx)
    eye = np.eye(2, dtype=complex)

    A = np.zeros((2 * n + 2 * m, 2 * n + 2 * m), dtype=complex)
    # rr block: A[(i,a),(j,b)] = delta_ij [(I+V_i)/2]_{ba} + P_ij (I-V_i)_{ba}
    Arr = np.einsum("ij,iba->iajb", ops.pv, eye[None, :, :] - V)
    idx = np.arange(n)
    Arr[idx, :, idx, :] += np.transpose((eye[None, :, :] + V) / 2.0, (0, 2, 1))
    A[:2 * n, :2 * n] = Arr.reshape(2 * n, 2 * n)

    laur = {p: model.fields.laurent(x_idx, complex(p), points) for p in points}

    if m:
        # rd block: sum_mu phi(mu) d1(rho_i, mu) (I - V(rho_i))
        Ard = np.zeros((n, 2, m, 2), dtype=complex)
        for jm, p in enumerate(points):
            lp = laur[p]
            dz = grid.nodes - complex(p)
            d1 = lp["Inv"][0][None, :, :] / dz[:, None, None] \
                + lp["Inv"][-1][None, :, :] / (dz ** 2)[:, None, None]
            prod = np.einsum("nab,nbc->nac", d1, eye[None, :, :] - V)
            Ard[:, :, jm, :] = np.transpose(prod, (0, 2, 1))
        A[:2 * n, 2 * n:] = Ard.reshape(2 * n, 2 * m)

        # dr block: (2 pi i)^{-1} int phi(xi) d2(rho_0, xi) d xi * v_hat(rho_0)
        Adr = np.zeros((m, 2, n, 2), dtype=complex)
        for im, p in enumerate(points):
            lp = laur[p]
            vh = jump.v_hat[p]
            M0 = lp["Psi"][0] @ vh
            M1 = lp["Psi"][-1] @ vh
            c = ops.c_rows[complex(p)]
            dc = ops.dc_rows[complex(p)]
            # (2 pi i)^{-1} int phi (rho0 - xi)^{-1} = -(C phi)(rho0)
            # (2 pi i)^{-1} int phi (rho0 - xi)^{-2} = +(C phi)'(rho0)
            Adr[im] = -np.einsum("j,ba->ajb", c, M0) - np.einsum("j,ba->ajb", dc, M1)
        A[2 * n:, :2 * n] = Adr.reshape(2 * m, 2 * n)

        # dd block: phi(rho0) - sum_mu phi(mu) A_model(rho0, mu)
        Add = np.zeros((m, 2, m, 2), dtype=complex)
        for im, p in enumerate(points):
            for jm, q in enumerate(points):
                Dm = D_matrix(laur[q], laur[p], complex(p), complex(q))
                Am = Dm @ jump.v_hat[p]
                Add[im, :, jm, :] -= Am.T
            Add[im, :, im, :] += eye
        A[2 * n:, 2 * n:] = Add.reshape(2 * m, 2 * m)

    rhs = np.zeros(2 * n + 2 * m, dtype=complex)
    rhs[:2 * n] = (V[:, 0, :] - I1[None, :]).reshape(-1)
    for im, p in enumerate(points):
        g = laur[p]["Psi"][0][0, :] @ jump.v_hat[p]
        rhs[2 * n + 2 * im: 2 * n + 2 * im + 2] = g

    return MainEquationSystem(x=float(x), x_index=x_idx, grid=grid, points=points,
                              matrix=A, rhs=rhs, v_matrices=V, v_matrices_dx=dV,
                              model_laurent=laur, ops=ops, jump=jump)


def solve_main_system(system: MainEquationSystem,
                      derivative: bool = True) -> PhiSolution:
    """Solve the assembled dense system; optionally also for d/dx Phi.

    The x-derivative re-uses the factorization: A Phi' = G' - A' Phi,
    where A' collects the x-derivatives of V, the model Laurent data and
    the discrete coupling matrices (all analytic, no differencing).
    """
    import scipy.linalg as sla

    nrm = float(np.linalg.norm(system.rhs))
    if nrm == 0.0:
        z = np.zeros_like(system.rhs)
        pg, pd = system.split(z)
        return PhiSolution(system, pg, pd, cond=1.0, residual=0.0,
                           phi_grid_dx=pg.copy(), phi_disc_dx=pd.copy())
    sol, cond, rel = solve_dense(system.matrix, system.rhs)
    pg, pd = system.split(sol)
    out = PhiSolution(system, pg, pd, cond=cond, residual=rel)
    if derivative:
        lu = sla.lu_factor(system.matrix)
        rhs_dx = _derivative_rhs(system, pg, pd)
        dsol = sla.lu_solve(lu, rhs_dx)
        out.phi_grid_dx, out.phi_disc_dx = system.split(dsol)
        out.lu = lu
    return out


def _derivative_rhs(system: MainEquationSystem, pg: np.ndarray,
                    pd: np.ndarray) -> np.ndarray:
    """G' - A'(Phi) for the differentiated main system."""
    grid = system.grid
    points = system.points
    n, m = grid.n, len(points)
    V = system.v_matrices
    dV = system.v_matrices_dx
    ops = system.ops
    laur = system.model_laurent

    rhs = np.zeros(2 * n + 2 * m, dtype=complex)
    # row part of G': V_1'
    gp = dV[:, 0, :].copy()
    # row part of A'(Phi): phi V'/2 - (P phi) V' + sum_mu phi_d [d1'(I-V) - d1 V']
    pphi = np.tensordot(ops.pv, pg, axes=(1, 0))
    act = np.einsum("na,nab->nb", pg, dV) / 2.0 - np.einsum("na,nab->nb", pphi, dV)
    eye = np.eye(2, dtype=complex)
    for jm, p in enumerate(points):
        lp = laur[p]
        dz = grid.nodes - complex(p)
        d1 = lp["Inv"][0][None, :, :] / dz[:, None, None] \
            + lp["Inv"][-1][None, :, :] / (dz ** 2)[:, None, None]
        d1x = lp["dInv"][0][None, :, :] / dz[:, None, None] \
            + lp["dInv"][-1][None, :, :] / (dz ** 2)[:, None, None]
        term = np.einsum("nab,nbc->nac", d1x, eye[None, :, :] - V) \
            - np.einsum("nab,nbc->nac", d1, dV)
        act += np.einsum("b,nba->na", pd[jm], term)
    rhs[:2 * n] = (gp - act).reshape(-1)

    # discrete part
    for im, p in enumerate(points):
        lp = laur[p]
        vh = system.jump.v_hat[p]
        g_dx = lp["dPsi"][0][0, :] @ vh
        c = ops.c_rows[complex(p)]
        dc = ops.dc_rows[complex(p)]
        M0x = lp["dPsi"][0] @ vh
        M1x = lp["dPsi"][-1] @ vh
        cphi = np.tensordot(c, pg, axes=(0, 0))
        dcphi = np.tensordot(dc, pg, axes=(0, 0))
        act_d = -(cphi @ M0x) - (dcphi @ M1x)
        for jm, q in enumerate(points):
            Adx = D_matrix_dx(laur[q], laur[p], complex(p), complex(q)) @ vh
            act_d = act_d - pd[jm] @ Adx
        rhs[2 * n + 2 * im: 2 * n + 2 * im + 2] = g_dx - act_d
    return rhs



# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

def reconstruct_row(sol: PhiSolution, model: ModelProblem, x: float,
                    rho_eval: complex, ops: GridOperators | None = None,
                    tail_refine: bool = True) -> np.ndarray:
    """P1(x, rho_eval) = I1 + sum_mu Phi(mu) d1(rho_eval, mu) + (C Phi)(rho_eval).

    With tail_refine the truncated tails of the Cauchy integral are
    re-modeled with the oscillatory fit (a + b e^{2 i mu x} +
    c e^{-2 i mu x})/mu, whose phases come from the outgoing-solution
    structure at this x; the smooth 1/mu model alone leaves an
    x-oscillatory truncation error that second differences amplify.
    """
    rho_eval = complex(rho_eval)
    grid = sol.system.grid
    points = sol.system.points
    if rho_eval.imag == 0.0:
        raise EvaluationGeometryError("rho_eval must be off the real axis")
    if any(abs(rho_eval - complex(p)) < 1e-6 for p in points):
        raise EvaluationGeometryError("rho_eval collides with a discrete point")
    if ops is not None and rho_eval in ops.c_rows:
        c = ops.c_rows[rho_eval]
    else:
        c = cauchy_weights(grid, rho_eval)
    row = I1 + np.tensordot(c, sol.phi_grid, axes=(0, 0))
    if tail_refine:
        row = row + tail_correction(grid, sol.phi_grid, x, rho_eval)
    for jm, p in enumerate(points):
        lp = sol.system.model_laurent[p]
        row = row + sol.phi_disc[jm] @ d1_matrix(lp, rho_eval, complex(p))
    return row


def boundary_row(sol: PhiSolution, side: str, ops: GridOperators,
                 tail_refine: bool = True) -> np.ndarray:
    """P1 boundary values on all grid nodes (side '+' or '-'), shape (N, 2)."""
    grid = sol.system.grid
    pv = ops.pv
    rows = I1[None, :] + np.tensordot(pv, sol.phi_grid, axes=(1, 0))
    if side == "+":
        rows = rows + sol.phi_grid / 2.0
    elif side == "-":
        rows = rows - sol.phi_grid / 2.0
    else:
        raise ValueError("side must be '+' or '-'")
    if tail_refine:
        fit = tail_fit(grid, sol.phi_grid, sol.system.x)
        for i in range(1, grid.n - 1):
            rows[i] = rows[i] + tail_correction(grid, sol.phi_grid, sol.system.x,
                                                complex(grid.nodes[i]), fit)
    for jm, p in enumerate(points := sol.system.points):
        lp = sol.system.model_laurent[p]
        dz = grid.nodes - complex(p)
        d1 = lp["Inv"][0][None, :, :] / dz[:, None, None] \
            + lp["Inv"][-1][None, :, :] / (dz ** 2)[:, None, None]
        rows = rows + np.einsum("b,nba->na", sol.phi_disc[jm], d1)
    return rows


@dataclass
class ReconstructionResult:
    """Recovered outgoing solution and potential on one ray."""

    k: int
    x_grid: np.ndarray                  # interior nodes where q is recovered
    q: np.ndarray                       # averaged over rho_eval values
    q_by_rho: np.ndarray                # (n_eval, n_x)
    f: np.ndarray                       # (n_eval, n_x_full) reconstructed f_k
    psi: np.ndarray                     # (n_eval, n_x_full) reconstructed psi_kk
    x_grid_full: np.ndarray
    rho_eval: tuple
    diagnostics: dict


def recover_potential(f_vals: np.ndarray, x_grid: np.ndarray, ray: RayParameters,
                      rho_eval, zero_tol: float = 1e-8):
    """q from second differences of f along a uniform x grid.

    The x^{mu1} leading power is peeled off first (q is computed from
    w = f x^{-mu1} via q = (w'' + 2 mu1 w'/x)/w + rho^2), which keeps
    the differencing stable against the fractional-power behavior near
    the origin.  f_vals has shape (n_eval, n_x); returns (x_interior,
    q_mean, q_each, gaps) where gaps flags x nodes at which every
    rho_eval had |f| below the zero threshold.
    """
    x_grid = np.asarray(x_grid, dtype=float)
    h = np.diff(x_grid)
    if np.max(np.abs(h - h[0])) > 1e-9 * h[0]:
        raise ValueError("potential recovery needs a uniform x grid")
    h = float(h[0])
    rho_eval = np.asarray(rho_eval, dtype=complex)
    mu1 = complex(ray.mu1)
    w = f_vals * branch_power(x_grid.astype(complex), -mu1)[None, :]
    wpp = (w[:, 2:] - 2.0 * w[:, 1:-1] + w[:, :-2]) / h ** 2
    wp = (w[:, 2:] - w[:, :-2]) / (2.0 * h)
    mid = w[:, 1:-1]
    x_int = x_grid[1:-1]
    scale = np.max(np.abs(w), axis=1, keepdims=True)
    ok = np.abs(mid) > zero_tol * scale
    denom = np.where(ok, mid, 1.0)
    q_each = np.where(ok, (wpp + 2.0 * mu1 * wp / x_int[None, :]) / denom
                      + (rho_eval ** 2)[:, None], np.nan + 0j)
    gaps = ~np.any(ok, axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        q_mean = np.nanmean(np.where(ok, q_each, np.nan + 0j), axis=0)
    return x_int, q_mean, q_each, gaps


def filter_truncation_artifact(x: np.ndarray, q: np.ndarray, rho_max: float,
                               poly_order: int = 2, periods: float = 2.2):
    """Remove the grid-truncation oscillation at frequency 2 rho_max from q.

    The truncated Cauchy tails leave an artifact at the known frequency
    2 rho_max in x, with a slowly varying envelope; a moving least
    squares fit of a low-order polynomial plus amplitude-modulated
    e^{+-2 i rho_max x} columns returns the smooth part.
    """
    x = np.asarray(x, dtype=float)
    q = np.asarray(q, dtype=complex)
    n = x.size
    if n < 12:
        return q.copy()
    h = x[1] - x[0]
    width = periods * math.pi / rho_max
    half = max(5, int(math.ceil(width / (2.0 * h))))
    out = np.empty_like(q)
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, i + half + 1)
        xs = x[lo:hi] - x[i]
        ep = np.exp(2j * rho_max * xs)
        cols = [xs ** p for p in range(poly_order + 1)]
        cols.extend([ep, xs * ep, np.conj(ep), xs * np.conj(ep)])
        A = np.column_stack(cols)
        coef, *_ = np.linalg.lstsq(A, q[lo:hi], rcond=None)
        out[i] = coef[0]
    return out


def procedure_41(j_k: ScatteringDataRay, model: ModelProblem,
                 rho_eval=(1.3j, 2.2j), grid: RealGrid | None = None,
                 ops: GridOperators | None = None,
                 collect_jump_residual: bool = False,
                 artifact_filter: bool = True) -> ReconstructionResult:
    """Reconstruct q_k from J_k against the model problem.

    The model's x grid must be uniform (it doubles as the finite
    difference grid for f''); q is recovered on its interior nodes.
    """
    jump = build_jump(j_k, model.pole_data(), grid)
    points = jump.z_check
    if ops is None:
        ops = GridOperators.build(jump.grid, points)
    else:
        for p in points:
            if p not in ops.c_rows:
                ops.c_rows[p] = cauchy_weights(jump.grid, complex(p))
                ops.dc_rows[p] = cauchy_weights_deriv(jump.grid, complex(p))

    x_grid = model.x_grid
    rho_eval = tuple(complex(r) for r in rho_eval)
    n_x = x_grid.size
    f = np.empty((len(rho_eval), n_x), dtype=complex)
    psi = np.empty_like(f)
    conds = np.empty(n_x)
    resids = np.empty(n_x)
    jump_resid = 0.0
    for ix, x in enumerate(x_grid):
        system = assemble_main_system(jump, model, float(x), ops)
        sol = solve_main_system(system)
        conds[ix] = sol.cond
        resids[ix] = sol.residual
        for ie, re_ in enumerate(rho_eval):
            row = reconstruct_row(sol, model, float(x), re_, ops)
            fm, fmp = model.fields.jost_at(re_)
            pm, pmp = model.fields.psi_at(re_)
            f[ie, ix] = row[0] * fm[ix] + row[1] * fmp[ix]
            psi[ie, ix] = row[0] * pm[ix] + row[1] * pmp[ix]
        if collect_jump_residual and ix in (0, n_x // 2, n_x - 1):
            rp = boundary_row(sol, "+", ops)
            rm = boundary_row(sol, "-", ops)
            pv = np.einsum("na,nab->nb", rm, system.v_matrices)
            jump_resid = max(jump_resid, float(np.max(np.abs(rp - pv))
                                               / max(1e-300, np.max(np.abs(rp)))))

    ray = model.spec.ray_params[model.k - 1]
    x_int, q_mean, q_each, gaps = recover_potential(f, x_grid, ray, rho_eval)
    if artifact_filter:
        q_each = np.array([filter_truncation_artifact(x_int, qe, jump.grid.rho_max)
                           for qe in q_each])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            q_mean = np.nanmean(q_each, axis=0)
    valid = ~np.isnan(q_each.real)
    agree = 0.0
    if len(rho_eval) > 1:
        both = np.all(valid, axis=0)
        if np.any(both):
            agree = float(np.max(np.abs(q_each[:, both] - q_mean[None, both])))
    diag = {
        "cond_max": float(np.max(conds)),
        "solve_residual_max": float(np.max(resids)),
        "rho_agreement": agree,
        "gap_count": int(np.sum(gaps)),
        "jump_residual": jump_resid,
        "n_points": len(points),
    }
    return ReconstructionResult(k=model.k, x_grid=x_int, q=q_mean, q_by_rho=q_each,
                                f=f, psi=psi, x_grid_full=x_grid, rho_eval=rho_eval,
                                diagnostics=diag)


# ---------------------------------------------------------------------------
# verification-mode inverse operator (needs the target problem)
# ---------------------------------------------------------------------------

def target_boundary_p(jump: JumpData, model: ModelProblem, target: RayFields,
                      ix: int):
    """(P_plus, P_minus) on grid nodes for a synthetic pair, shape (N, 2, 2)."""
    tp, tm = target.boundary_matrices(ix, jump.grid)
    mp, mm = model.fields.boundary_matrices(ix, jump.grid)

    def inv(mats):
        det = mats[:, 0, 0] * mats[:, 1, 1] - mats[:, 0, 1] * mats[:, 1, 0]
        out = np.empty_like(mats)
        out[:, 0, 0] = mats[:, 1, 1]
        out[:, 0, 1] = -mats[:, 0, 1]
        out[:, 1, 0] = -mats[:, 1, 0]
        out[:, 1, 1] = mats[:, 0, 0]
        return out / det[:, None, None]

    P_plus = np.einsum("nab,nbc->nac", tp, inv(mp))
    P_minus = np.einsum("nab,nbc->nac", tm, inv(mm))
    return P_plus, P_minus


def invert_main_system(jump: JumpData, model: ModelProblem, target: RayFields,
                       x: float, ops: GridOperators | None = None) -> np.ndarray:
    """Dense matrix realizing the inverse operator (verification mode)."""
    x_idx = int(np.argmin(np.abs(model.x_grid - x)))
    grid = jump.grid
    points = jump.z_check
    n, m = grid.n, len(points)
    if ops is None:
        ops = GridOperators.build(grid, points)

    P_plus, P_minus = target_boundary_p(jump, model, target, x_idx)
    det = P_plus[:, 0, 0] * P_plus[:, 1, 1] - P_plus[:, 0, 1] * P_plus[:, 1, 0]
    Pt_plus = np.empty_like(P_plus)   # inverse of P_plus
    Pt_plus[:, 0, 0] = P_plus[:, 1, 1]
    Pt_plus[:, 0, 1] = -P_plus[:, 0, 1]
    Pt_plus[:, 1, 0] = -P_plus[:, 1, 0]
    Pt_plus[:, 1, 1] = P_plus[:, 0, 0]
    Pt_plus /= det[:, None, None]

    E = np.eye(grid.n)
    Cp = ops.pv + E / 2.0
    Cm = ops.pv - E / 2.0

    B = np.zeros((2 * n + 2 * m, 2 * n + 2 * m), dtype=complex)
    # rr: C+(f Pt+) P+ - C-(f Pt+) P-
    Brr = np.einsum("ij,jbc,ica->iajb", Cp, Pt_plus, P_plus) \
        - np.einsum("ij,jbc,ica->iajb", Cm, Pt_plus, P_minus)
    B[:2 * n, :2 * n] = Brr.reshape(2 * n, 2 * n)

    if m:
        laur_t = {p: target.laurent(x_idx, complex(p), points) for p in points}
        jumpP = P_plus - P_minus
        Brd = np.zeros((n, 2, m, 2), dtype=complex)
        for jm, p in enumerate(points):
            lp = laur_t[p]
            dz = grid.nodes - complex(p)
            d1 = lp["Inv"][0][None, :, :] / dz[:, None, None] \
                + lp["Inv"][-1][None, :, :] / (dz ** 2)[:, None, None]
            prod = np.einsum("nab,nbc->nac", d1, jumpP)
            Brd[:, :, jm, :] = np.transpose(prod, (0, 2, 1))
        B[:2 * n, 2 * n:] = Brd.reshape(2 * n, 2 * m)

        Bdr = np.zeros((m, 2, n, 2), dtype=complex)
        for im, p in enumerate(points):
            lp = laur_t[p]
            vh = jump.v_hat[p]
            M0 = lp["Psi"][0] @ vh
            M1 = lp["Psi"][-1] @ vh
            c = ops.c_rows[p]
            dc = ops.dc_rows[p]
            # B_dr f = [(C g)(p) Psi_<0> + (C g)'(p) Psi_<-1>] v_hat, g = f Pt+
            Bdr[im] = np.einsum("j,jbc,ca->ajb", c, Pt_plus, M0) \
                + np.einsum("j,jbc,ca->ajb", dc, Pt_plus, M1)
        B[2 * n:, :2 * n] = Bdr.reshape(2 * m, 2 * n)

        Bdd = np.zeros((m, 2, m, 2), dtype=complex)
        eye = np.eye(2, dtype=complex)
        for im, p in enumerate(points):
            for jm, q in enumerate(points):
                Dt = D_matrix(laur_t[q], laur_t[p], complex(p), complex(q))
                At = -Dt @ jump.v_hat[p]
                Bdd[im, :, jm, :] -= At.T
            Bdd[im, :, im, :] += eye
        B[2 * n:, 2 * n:] = Bdd.reshape(2 * m, 2 * m)
    return B


def direct_phi(jump: JumpData, model: ModelProblem, target: RayFields,
               x: float, ops: GridOperators | None = None):
    """Phi built from its definition for a synthetic pair (grid part, discrete part)."""
    x_idx = int(np.argmin(np.abs(model.x_grid - x)))
    P_plus, P_minus = target_boundary_p(jump, model, target, x_idx)
    phi_grid = P_plus[:, 0, :] - P_minus[:, 0, :]
    points = jump.z_check
    phi_disc = np.zeros((len(points), 2), dtype=complex)
    for im, p in enumerate(points):
        lt = target.laurent(x_idx, complex(p), points)
        phi_disc[im] = lt["Psi"][0][0, :] @ jump.v_hat[p]
    return phi_grid, phi_disc


# ---------------------------------------------------------------------------
# the complete problem
# ---------------------------------------------------------------------------

@dataclass
class CompleteInversion:
    """Potentials on rays 1..p-1 plus Weyl samples of the last ray."""

    results: dict                       # k -> ReconstructionResult
    rho_weyl: np.ndarray                # real rho samples used for m_p
    m_p: np.ndarray                     # Weyl function of ray p on rho_weyl
    diagnostics: dict


def _wronskian(y, yp, z, zp):
    return y * zp - yp * z


def weyl_from_matching(spec: GraphSpec, psi11, psi11p, S11, S11p, S12, S12p,
                       m_inner) -> complex:
    """m_p from the vertex-quotient identity, given ray-1 data at one rho.

    m_inner lists the Weyl values m_j for j = 2..p-1 (possibly empty).
    """
    rays = spec.ray_params
    u11 = rays[0].sigma * _wronskian(psi11, psi11p, S12, S12p)
    u12 = rays[0].sigma1 * _wronskian(psi11, psi11p, S12, S12p) \
        + rays[0].sigma2 * _wronskian(S11, S11p, psi11, psi11p)
    total = u12 / u11
    for j, mj in enumerate(m_inner, start=2):
        total += (rays[j - 1].sigma1 + rays[j - 1].sigma2 * mj) / rays[j - 1].sigma
    rp = rays[-1]
    return (-total * rp.sigma - rp.sigma1) / rp.sigma2


def complete_inverse(data: ScatteringData, model_spec: GraphSpec, x_grid,
                     rho_eval=(1.3j, 2.2j), rho_weyl=None,
                     grid: RealGrid | None = None) -> CompleteInversion:
    """Recover q_k for k = 1..p-1 and the Weyl samples of ray p.

    Runs the single-ray reconstruction for every listed ray, rebuilds
    the inner Weyl functions by forward-solving the recovered
    potentials, and evaluates m_p through the vertex-quotient identity
    using the reconstructed psi_11.
    """
    p = data.p
    x_grid = np.asarray(x_grid, dtype=float)
    results = {}
    sols_ray1 = None
    ops = None
    for k in range(1, p):
        model = ModelProblem(model_spec, k, x_grid)
        j_k = data.ray(k)
        g = grid if grid is not None else real_grid_from_nodes(j_k.rho_grid)
        if ops is None or ops.grid is not g:
            ops = GridOperators.build(g, ())
        res = procedure_41(j_k, model, rho_eval=rho_eval, grid=g, ops=ops)
        results[k] = res
        if k == 1:
            sols_ray1 = (model, res)

    if rho_weyl is None:
        g0 = grid if grid is not None else real_grid_from_nodes(data.ray(1).rho_grid)
        pos = g0.nodes[g0.nodes > 0]
        rho_weyl = pos[np.linspace(len(pos) // 6, len(pos) - 2, 20).astype(int)]
    rho_weyl = np.asarray(rho_weyl, dtype=float)

    # rebuild recovered potentials as sampled objects and forward-solve
    rec_pots = {}
    for k in range(1, p):
        res = results[k]
        q = np.array(res.q, dtype=complex)
        bad = np.isnan(q.real) | np.isnan(q.imag)
        if np.any(bad):
            warnings.warn(f"{int(bad.sum())} gap nodes on ray {k} interpolated over",
                          RuntimeWarning, stacklevel=2)
            good = ~bad
            q = np.interp(res.x_grid, res.x_grid[good], q[good].real) \
                + 1j * np.interp(res.x_grid, res.x_grid[good], q[good].imag)
        rec_pots[k] = Potential.from_samples(res.x_grid, q,
                                             x_support=float(res.x_grid[-1]))
    from .halfline import HalflineProblem
    inner_problems = {j: HalflineProblem(model_spec.ray_params[j - 1], rec_pots[j])
                      for j in range(2, p)}
    ray1_problem = HalflineProblem(model_spec.ray_params[0], rec_pots[1])

    model1, res1 = sols_ray1
    jump1 = build_jump(data.ray(1), model1.pole_data(),
                       grid if grid is not None else real_grid_from_nodes(data.ray(1).rho_grid))
    ops1 = GridOperators.build(jump1.grid, jump1.z_check)

    # psi_11 at three adjacent x nodes (for the x-derivative), then the
    # vertex-quotient identity per weyl sample
    x_mid_idx = len(model1.x_grid) // 2
    h = float(model1.x_grid[1] - model1.x_grid[0])
    x_mid = float(model1.x_grid[x_mid_idx])
    rows_plus = []
    for ixx in range(x_mid_idx - 1, x_mid_idx + 2):
        system = assemble_main_system(jump1, model1, float(model1.x_grid[ixx]), ops1)
        sol = solve_main_system(system)
        rows_plus.append(boundary_row(sol, "+", ops1))

    m_p = np.empty(rho_weyl.size, dtype=complex)
    excluded = []
    for i, rr in enumerate(rho_weyl):
        node_idx = int(np.argmin(np.abs(jump1.grid.nodes - rr)))
        rho_node = float(jump1.grid.nodes[node_idx])
        pmv, pmvp = model1.fields.psi_at(complex(rho_node))
        psi_vals = np.array([
            rows_plus[loc][node_idx, 0] * pmv[ixx] + rows_plus[loc][node_idx, 1] * pmvp[ixx]
            for loc, ixx in enumerate(range(x_mid_idx - 1, x_mid_idx + 2))])
        psi11 = psi_vals[1]
        psi11p = (psi_vals[2] - psi_vals[0]) / (2.0 * h)
        lam = rho_node ** 2
        S11, S11p, S12, S12p = ray1_problem.regular(lam, np.array([x_mid]))
        m_inner = [inner_problems[j].weyl(complex(rho_node)) for j in range(2, p)]
        u11_probe = model_spec.ray_params[0].sigma * _wronskian(
            psi11, psi11p, S12[0], S12p[0])
        if abs(u11_probe) < 1e-12:
            m_p[i] = complex(np.nan, np.nan)
            excluded.append(rho_node)
            continue
        m_p[i] = weyl_from_matching(model_spec, psi11, psi11p,
                                    S11[0], S11p[0], S12[0], S12p[0], m_inner)

    diag = {"excluded_rho": excluded,
            "per_ray": {k: results[k].diagnostics for k in results}}
    return CompleteInversion(results=results, rho_weyl=rho_weyl, m_p=m_p,
                             diagnostics=diag)
