"""Discrete stationary Navier-Stokes residual, exact Jacobian and damped Newton.

The residual is assembled element by element in a single fused pass that
evaluates Galerkin and GLS terms together; the Jacobian is its exact
derivative, including the dependence of the element parameter ``delta`` on
the velocity.  Dirichlet rows are replaced by ``x - value`` (residual) and
identity rows (Jacobian), which keeps the sparsity pattern fixed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import (AssembledOperators, FeSpace, assemble_linear_operators,
                  element_velocity, stabilization_delta)
from .sparse import SingularMatrixError, lu_factor

__all__ = [
    "FlowState",
    "DirichletData",
    "NewtonSettings",
    "NewtonError",
    "residual",
    "jacobian",
    "residual_and_jacobian",
    "solve_newton",
    "continuation_in_reynolds",
]

log = logging.getLogger(__name__)


def _es(*args):
    return np.einsum(*args, optimize=True)


@dataclass
class FlowState:
    """Velocity coefficients ``U`` (length n_u) and kinematic pressure ``P``."""

    U: np.ndarray
    P: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.U, self.P])

    @classmethod
    def from_vector(cls, space: FeSpace, x) -> "FlowState":
        x = np.asarray(x, dtype=float)
        if x.shape != (space.n_state,):
            raise ValueError(f"state vector has shape {x.shape}, expected ({space.n_state},)")
        return cls(U=x[: space.n_u].copy(), P=x[space.n_u:].copy())

    @classmethod
    def zeros(cls, space: FeSpace) -> "FlowState":
        return cls(U=np.zeros(space.n_u), P=np.zeros(space.n_p))


@dataclass(frozen=True, eq=False)
class DirichletData:
    """Constrained velocity dofs with their values, plus an optional boundary load.

    ``neumann_load`` (length n_u) is added to the momentum residual; it
    carries the inlet traction of the pressure-control variant.
    """

    dofs: np.ndarray
    values: np.ndarray
    neumann_load: np.ndarray | None = None

    def __post_init__(self):
        if len(self.dofs) != len(self.values):
            raise ValueError("dofs and values differ in length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite Dirichlet values")

    @classmethod
    def velocity_control(cls, space: FeSpace, G) -> "DirichletData":
        """Walls (and inlet corners) pinned to zero, control dofs set to ``G``."""
        G = np.asarray(G, dtype=float)
        if G.shape != (space.n_g,):
            raise ValueError(f"control vector has shape {G.shape}, expected ({space.n_g},)")
        wall = space.wall_dofs
        return cls(dofs=np.concatenate([wall, space.control_dofs]),
                   values=np.concatenate([np.zeros(len(wall)), G]))

    @classmethod
    def traction_control(cls, space: FeSpace, g, neumann_op: sp.spmatrix) -> "DirichletData":
        """Walls pinned, inlet left free with load ``int g n . v`` from the scalar values ``g``."""
        g = np.asarray(g, dtype=float)
        if g.shape != (neumann_op.shape[1],):
            raise ValueError(f"traction vector has shape {g.shape}, expected ({neumann_op.shape[1]},)")
        wall = space.wall_dofs
        return cls(dofs=wall, values=np.zeros(len(wall)), neumann_load=neumann_op @ g)

    @classmethod
    def from_profile(cls, space: FeSpace, func) -> "DirichletData":
        """Velocity control from ``func(x, y) -> (ux, uy)`` evaluated at the control nodes."""
        p = space.nodes[space.control_nodes]
        ux, uy = func(p[:, 0], p[:, 1])
        n = len(p)
        G = np.concatenate([np.broadcast_to(ux, n), np.broadcast_to(uy, n)]).astype(float)
        return cls.velocity_control(space, G)


@dataclass(frozen=True)
class NewtonSettings:
    tol: float = 1e-10
    max_iter: int = 50
    initial_step: float = 1.0
    halving: float = 0.5
    min_step: float = 2.0 ** -20
    reuse_ratio: float = 0.25

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.halving < 1:
            raise ValueError("halving factor must lie in (0, 1)")
        if not 0 <= self.reuse_ratio < 1:
            raise ValueError("reuse_ratio must lie in [0, 1)")
        if not 0 < self.min_step <= self.initial_step <= 1:
            raise ValueError("need 0 < min_step <= initial_step <= 1")


class NewtonError(RuntimeError):
    """Newton failure; ``kind`` is 'max_iterations', 'stagnation' or 'singular'."""

    def __init__(self, kind: str, message: str, trace=None):
        super().__init__(message)
        self.kind = kind
        self.trace = trace or []


def _as_vector(space, state):
    if isinstance(state, FlowState):
        return np.concatenate([state.U, state.P])
    x = np.asarray(state, dtype=float)
    if x.shape != (space.n_state,):
        raise ValueError(f"state vector has shape {x.shape}, expected ({space.n_state},)")
    return x


def _element_terms(space: FeSpace, ops: AssembledOperators, x, want_jac: bool):
    """Local residuals (ne, m) and, optionally, local Jacobians (ne, m, m)."""
    g = space.geom
    nu, stab = ops.nu, ops.stab
    conv_on = ops.convection
    ps = stab.pressure_scale
    ne, na = space.cell_nodes.shape
    U, P = x[: space.n_u], x[space.n_u:]
    Ue = element_velocity(space, U)                                # (e, a, c)
    Pe = P[space.mesh.triangles]                                   # (e, i)
    w, phi, dphi, psi, dpsi = g.w, g.phi, g.dphi, g.psi, g.dpsi

    u = _es("qa,eac->eqc", phi, Ue)
    G = _es("eqbd,ebc->eqcd", dphi, Ue)
    p = Pe @ psi.T                                                 # (e, q)
    gp = _es("eid,ei->ed", dpsi, Pe)
    divu = G[..., 0, 0] + G[..., 1, 1]
    if conv_on:
        adv = _es("eqd,eqad->eqa", u, dphi)
        conv = _es("eqcd,eqd->eqc", G, u)
    else:
        adv = np.zeros((ne, len(psi), na))
        conv = np.zeros_like(u)

    Rm = (nu * _es("eq,eqcd,eqad->eac", w, G, dphi)
          + _es("eq,eqc,qa->eac", w, conv, phi)
          - _es("eq,eq,eqac->eac", w, p, dphi))
    Rc = -_es("eq,qi,eq->ei", w, psi, divu)

    if stab.enabled:
        delta, ddelta = stabilization_delta(space, U if conv_on else None, nu, stab)
        lapU = _es("ea,eac->ec", g.lap, Ue)
        r = conv - nu * lapU[:, None, :] + gp[:, None, :]          # strong momentum residual
        t = adv + nu * g.lap[:, None, :]                           # GLS test operator
        Srt = _es("eq,eqc,eqa->eac", w, r, t)
        Rm = Rm + delta[:, None, None] * Srt
        gpp = _es("ed,eid->ei", gp, dpsi)
        Rc = Rc - ps * (delta * g.area)[:, None] * gpp

    R = np.concatenate([Rm.transpose(0, 2, 1).reshape(ne, 2 * na), Rc], axis=1)
    if not want_jac:
        return R, None

    D = nu * _es("eq,eqak,eqbk->eab", w, dphi, dphi)      # component-diagonal part
    if conv_on:
        D += _es("eq,qa,eqb->eab", w, phi, adv)
        Kuu = _es("eq,qa,qb,eqcd->eacbd", w, phi, phi, G)
    else:
        Kuu = np.zeros((ne, na, 2, na, 2))
    Kup = -_es("eq,qj,eqac->eacj", w, psi, dphi)
    Kpu = -_es("eq,qi,eqbd->eibd", w, psi, dphi)
    Kpp = np.zeros((ne, 3, 3))

    if stab.enabled:
        dr_diag = adv - nu * g.lap[:, None, :]                     # d r_c / d U_(b,c)
        D += delta[:, None, None] * _es("eq,eqb,eqa->eab", w, dr_diag, t)
        if conv_on:
            Ks = _es("eq,qb,eqcd,eqa->eacbd", w, phi, G, t)
            Ks += _es("eq,eqc,qb,eqad->eacbd", w, r, phi, dphi)
            Kuu += delta[:, None, None, None, None] * Ks
        Kuu += _es("eac,ebd->eacbd", Srt, ddelta)
        Kup += delta[:, None, None, None] * _es("eq,eqa,ejc->eacj", w, t, dpsi)
        Kpu -= ps * _es("e,ei,ebd->eibd", g.area, gpp, ddelta)
        Kpp -= ps * (delta * g.area)[:, None, None] * _es("eid,ejd->eij", dpsi, dpsi)

    Kuu[:, :, 0, :, 0] += D
    Kuu[:, :, 1, :, 1] += D
    m = 2 * na + 3
    Kl = np.empty((ne, m, m))
    Kl[:, : 2 * na, : 2 * na] = Kuu.transpose(0, 2, 1, 4, 3).reshape(ne, 2 * na, 2 * na)
    Kl[:, : 2 * na, 2 * na:] = Kup.transpose(0, 2, 1, 3).reshape(ne, 2 * na, 3)
    Kl[:, 2 * na:, : 2 * na] = Kpu.transpose(0, 1, 3, 2).reshape(ne, 3, 2 * na)
    Kl[:, 2 * na:, 2 * na:] = Kpp
    return R, Kl


def _global_residual(space, R, x, bc):
    res = np.bincount(space.local_dofs.ravel(), weights=R.ravel(), minlength=space.n_state)
    if bc.neumann_load is not None:
        res[: space.n_u] += bc.neumann_load
    res[bc.dofs] = x[bc.dofs] - bc.values
    return res


def residual(space: FeSpace, ops: AssembledOperators, state, bc: DirichletData) -> np.ndarray:
    """Momentum and continuity residual with Dirichlet rows ``x - value``."""
    x = _as_vector(space, state)
    R, _ = _element_terms(space, ops, x, want_jac=False)
    return _global_residual(space, R, x, bc)


def jacobian(space: FeSpace, ops: AssembledOperators, state, bc: DirichletData) -> sp.csr_matrix:
    """Exact derivative of :func:`residual` with respect to ``[U, P]``."""
    return residual_and_jacobian(space, ops, state, bc)[1]


def residual_and_jacobian(space, ops, state, bc):
    x = _as_vector(space, state)
    R, Kl = _element_terms(space, ops, x, want_jac=True)
    return _global_residual(space, R, x, bc), space.pattern.matrix(Kl, identity_rows=bc.dofs)


def solve_newton(space: FeSpace, ops: AssembledOperators, bc: DirichletData,
                 settings: NewtonSettings | None = None, initial: FlowState | None = None,
                 factor=None):
    """Damped Newton iteration for the discrete flow equations.

    Each step solves ``J dx = -R`` and tries ``alpha = 1, 1/2, 1/4, ...``
    until the residual max-norm strictly decreases.  A factorization is
    kept after it is computed (or taken from ``factor``, e.g. the Jacobian
    of a nearby state) and reused for undamped steps as long as each one
    cuts the residual by at least ``settings.reuse_ratio``; otherwise the
    Jacobian is refreshed at the current iterate.

    Returns ``(state, trace)``; the trace is a list of dicts with keys
    iteration, residual, alpha (0 for the initial record) and reused.

    Raises
    ------
    NewtonError
        On exceeding ``max_iter``, on a step below ``min_step`` without
        decrease ('stagnation'), or on a singular Jacobian.
    """
    settings = settings or NewtonSettings()
    x = np.zeros(space.n_state) if initial is None else _as_vector(space, initial).copy()
    x[bc.dofs] = bc.values
    R = residual(space, ops, x, bc)
    rn = np.abs(R).max()
    trace = [{"iteration": 0, "residual": float(rn), "alpha": 0.0, "reused": False}]
    log.debug("newton iteration 0: residual %.3e", rn)
    lu = factor
    for it in range(1, settings.max_iter + 1):
        if rn <= settings.tol:
            return FlowState.from_vector(space, x), trace
        reused = False
        if lu is not None and settings.reuse_ratio > 0:
            xt = x + lu.solve(-R)
            xt[bc.dofs] = bc.values  # identity rows: drop solver roundoff
            Rt = residual(space, ops, xt, bc)
            rt = np.abs(Rt).max()
            if np.isfinite(rt) and (rt <= settings.reuse_ratio * rn or rt <= settings.tol):
                alpha, reused = 1.0, True
            else:
                lu = None
        if not reused:
            R, J = residual_and_jacobian(space, ops, x, bc)
            try:
                lu = lu_factor(J, space.ordering)
            except SingularMatrixError as exc:
                raise NewtonError("singular", f"singular Jacobian at iteration {it}: {exc}", trace) from exc
            dx = lu.solve(-R)
            alpha = settings.initial_step
            while True:
                xt = x + alpha * dx
                xt[bc.dofs] = bc.values
                Rt = residual(space, ops, xt, bc)
                rt = np.abs(Rt).max()
                if np.isfinite(rt) and (rt < rn or rt <= settings.tol):
                    break
                alpha *= settings.halving
                if alpha < settings.min_step:
                    raise NewtonError("stagnation",
                                      f"line search stagnated at iteration {it} (residual {rn:.3e})", trace)
        x, R, rn = xt, Rt, rt
        rec = {"iteration": it, "residual": float(rn), "alpha": float(alpha), "reused": reused}
        trace.append(rec)
        log.debug("newton iteration %d: residual %.3e, alpha %g%s", it, rn, alpha, " (reused)" if reused else "")
    if rn <= settings.tol:
        return FlowState.from_vector(space, x), trace
    raise NewtonError("max_iterations",
                      f"no convergence in {settings.max_iter} iterations (residual {rn:.3e})", trace)


def continuation_in_reynolds(space: FeSpace, ops: AssembledOperators, bc: DirichletData,
                             settings: NewtonSettings | None, nu_sequence, initial=None):
    """Solve for a decreasing viscosity sequence, warm-starting each solve.

    ``ops`` supplies the stabilization and convection switches; operators are
    re-assembled for each viscosity.  Returns ``(state, traces)``.
    """
    nus = [float(v) for v in nu_sequence]
    if not nus:
        raise ValueError("empty viscosity sequence")
    if any(b >= a for a, b in zip(nus, nus[1:])):
        raise ValueError("viscosity sequence must be strictly decreasing")
    state, traces = initial, []
    for nu in nus:
        ops_nu = ops if nu == ops.nu else assemble_linear_operators(
            space, nu, ops.stab, convection=ops.convection)
        state, trace = solve_newton(space, ops_nu, bc, settings, state)
        traces.append(trace)
    return state, traces
