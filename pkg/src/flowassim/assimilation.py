"""Boundary-control data assimilation: discrete cost, adjoint gradient, optimizer.

The unknown is either the inlet velocity (Dirichlet control) or a scalar
inlet traction (Neumann control).  The state equations are eliminated by a
Newton solve inside every cost evaluation, so the optimization runs in the
reduced space of controls: a BFGS model of the reduced Hessian with Powell
damping gives the search direction and an Armijo backtracking line search
on the cost picks the step.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import (AssembledOperators, FeSpace, assemble_domain_mass, assemble_inlet_mass,
                  assemble_inlet_regularizer, assemble_neumann_operator, assemble_observation_mass)
from .io import write_csv
from .flow import DirichletData, FlowState, NewtonError, NewtonSettings, jacobian, solve_newton
from .sparse import lu_factor

__all__ = [
    "ControlKind",
    "ControlVector",
    "CostWeights",
    "ObservationSet",
    "OptimizerTrace",
    "AssimilationProblem",
    "OptimizationResult",
    "evaluate_cost",
    "gradient",
    "sqp_minimize",
    "neumann_variant_solve",
    "relative_error",
    "region_mass",
    "beta2_ladder",
    "write_trace_csv",
]

log = logging.getLogger(__name__)


class ControlKind(str, enum.Enum):
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"


@dataclass
class ControlVector:
    """Control values: velocity dofs ``[gx, gy]`` on the control nodes (Dirichlet)
    or scalar traction values on all inlet nodes (Neumann)."""

    kind: ControlKind
    values: np.ndarray

    def __post_init__(self):
        self.kind = ControlKind(self.kind)
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite control values")


@dataclass(frozen=True)
class CostWeights:
    beta1: float
    beta2: float

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("weights must be nonnegative")
        if not (self.beta1 > 0 or self.beta2 > 0):
            raise ValueError("at least one weight must be positive")


@dataclass(eq=False)
class ObservationSet:
    """Target velocities on the observation sections.

    ``dofs`` are the velocity dofs of the section nodes and ``targets`` the
    observed coefficients there; ``M`` is the section mass matrix (n_u x n_u).
    """

    sections: tuple
    dofs: np.ndarray
    targets: np.ndarray
    M: sp.csr_matrix

    def __post_init__(self):
        if len(self.dofs) != len(self.targets):
            raise ValueError("targets do not match the observation dofs")
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("non-finite observation targets")

    @classmethod
    def from_field(cls, space: FeSpace, U, sections=None) -> "ObservationSet":
        """Observe the full velocity vector ``U`` on the given sections."""
        sections = tuple(space.section_edge_nodes) if sections is None else tuple(sections)
        if not sections:
            raise ValueError("no observation sections")
        dofs = space.observation_dofs(sections)
        M = assemble_observation_mass(space, sections)
        return cls(sections=sections, dofs=dofs, targets=np.asarray(U, dtype=float)[dofs].copy(), M=M)

    def full_target(self, n_u: int) -> np.ndarray:
        Ud = np.zeros(n_u)
        Ud[self.dofs] = self.targets
        return Ud


@dataclass
class OptimizerTrace:
    """Per-iteration records (iteration, cost, grad_norm, alpha, cost_evals)."""

    initial_cost: float
    initial_grad_norm: float
    records: list = field(default_factory=list)
    status: str = "running"

    @property
    def iterations(self) -> int:
        return len(self.records)

    def rows(self):
        yield {"iteration": 0, "cost": self.initial_cost, "grad_norm": self.initial_grad_norm,
               "alpha": "", "cost_evals": 1}
        yield from self.records


@dataclass
class OptimizationResult:
    control: ControlVector
    state: FlowState
    trace: OptimizerTrace
    cost: float
    grad_norm: float


class AssimilationProblem:
    """Reduced cost ``F(G) = J(U(G), G)`` with its adjoint gradient.

    Keeps the last state as a warm start for the next Newton solve and
    counts cost evaluations.
    """

    def __init__(self, space: FeSpace, ops: AssembledOperators, obs: ObservationSet,
                 weights: CostWeights, kind: ControlKind | str = ControlKind.DIRICHLET,
                 newton: NewtonSettings | None = None):
        self.space, self.ops, self.obs, self.weights = space, ops, obs, weights
        self.kind = ControlKind(kind)
        self.newton = newton or NewtonSettings()
        self.Ud = obs.full_target(space.n_u)
        if self.kind is ControlKind.DIRICHLET:
            self.A = assemble_inlet_regularizer(space, "dirichlet")
            self.N_op = None
        else:
            self.A = assemble_inlet_regularizer(space, "neumann")
            N = assemble_neumann_operator(space).tolil()
            N[space.wall_dofs] = 0.0
            self.N_op = N.tocsr()
        self.warm: FlowState | None = None
        self.n_evals = 0
        # without convection the Jacobian does not depend on the state
        self.linear = not ops.convection
        self._lu = None

    @property
    def n_control(self) -> int:
        return self.A.shape[0]

    def zero_control(self) -> ControlVector:
        return ControlVector(self.kind, np.zeros(self.n_control))

    def boundary_data(self, G) -> DirichletData:
        G = self._values(G)
        if self.kind is ControlKind.DIRICHLET:
            return DirichletData.velocity_control(self.space, G)
        return DirichletData.traction_control(self.space, G, self.N_op)

    def _values(self, G):
        if isinstance(G, ControlVector):
            if G.kind is not self.kind:
                raise ValueError(f"control kind {G.kind.value} does not match problem kind {self.kind.value}")
            G = G.values
        G = np.asarray(G, dtype=float)
        if G.shape != (self.n_control,):
            raise ValueError(f"control has shape {G.shape}, expected ({self.n_control},)")
        return G

    def solve_state(self, G, initial: FlowState | None = None):
        init = initial if initial is not None else self.warm
        state, _ = solve_newton(self.space, self.ops, self.boundary_data(G), self.newton, init,
                                factor=self._lu)
        return state

    def cost_terms(self, G, state: FlowState):
        G = self._values(G)
        e = state.U - self.Ud
        tracking = float(e @ (self.obs.M @ e))
        reg = float(G @ (self.A @ G))
        return tracking, reg

    def evaluate(self, G, initial: FlowState | None = None):
        """Return ``(cost, state)``; raises NewtonError on solver failure."""
        G = self._values(G)
        state = self.solve_state(G, initial)
        self.n_evals += 1
        tracking, reg = self.cost_terms(G, state)
        return self.weights.beta1 * tracking + self.weights.beta2 * reg, state

    def gradient(self, G, state: FlowState) -> np.ndarray:
        """Discrete adjoint gradient of the reduced cost at a converged state."""
        G = self._values(G)
        w = self.weights
        grad = 2 * w.beta2 * (self.A @ G)
        if w.beta1 == 0:
            return grad
        space = self.space
        bc = self.boundary_data(G)
        if not (self.linear and self._lu is not None):
            # also serves as the starting Jacobian for the next state solves
            self._lu = lu_factor(jacobian(space, self.ops, state, bc), space.ordering)
        rhs = np.zeros(space.n_state)
        rhs[: space.n_u] = 2 * w.beta1 * (self.obs.M @ (state.U - self.Ud))
        mu = self._lu.solve(rhs, trans=True)
        if self.kind is ControlKind.DIRICHLET:
            return grad + mu[space.control_dofs]
        return grad - self.N_op.T @ mu[: space.n_u]

    def inlet_metric(self) -> sp.csr_matrix:
        """L2 mass matrix in control coordinates."""
        if self.kind is ControlKind.NEUMANN:
            return assemble_inlet_mass(self.space, "scalar")
        M = assemble_inlet_mass(self.space, "vector")
        c = self.space.control_dofs
        return M[c][:, c].tocsr()


def _problem(space, ops, obs, w, kind, newton):
    return AssimilationProblem(space, ops, obs, w, kind, newton)


def evaluate_cost(space: FeSpace, ops: AssembledOperators, obs: ObservationSet, w: CostWeights,
                  G: ControlVector, newton: NewtonSettings | None = None):
    """Cost value and state for the control ``G``."""
    return _problem(space, ops, obs, w, G.kind, newton).evaluate(G)


def gradient(space: FeSpace, ops: AssembledOperators, obs: ObservationSet, w: CostWeights,
             G: ControlVector, state: FlowState, newton: NewtonSettings | None = None) -> np.ndarray:
    return _problem(space, ops, obs, w, G.kind, newton).gradient(G, state)


def sqp_minimize(problem: AssimilationProblem, G0: ControlVector | np.ndarray | None = None,
                 tol: float = 1e-6, max_iter: int = 200, hessian_init: str = "scaled",
                 metric_sigma: float | None = None, ftol: float = 1e-15, c1: float = 1e-4,
                 min_alpha: float = 2.0 ** -30) -> OptimizationResult:
    """Reduced-space quasi-Newton minimization of the assimilation cost.

    Parameters
    ----------
    problem : AssimilationProblem
    G0 : initial control (zero when omitted)
    tol : stop when the Euclidean norm of the reduced gradient is at most ``tol``
    max_iter : iteration limit
    hessian_init : ``"scaled"`` starts BFGS from ``|grad F(G0)| I`` and rescales
        by ``y.y / s.y`` before the first update; ``"metric"`` starts from
        ``2 beta2 A + sigma M_in`` (regularizer plus inlet mass) and is never
        rescaled.
    metric_sigma : ``sigma`` above, default ``2 beta1 * number of sections``
    ftol : stop when an accepted step lowers the cost by less than
        ``ftol * max(1, |F|)`` (stall at roundoff level)

    Returns
    -------
    OptimizationResult
        ``trace.status`` is 'converged', 'stalled', 'max_iter' or
        'line_search_failed'.
    """
    G = np.zeros(problem.n_control) if G0 is None else problem._values(G0).copy()
    F, state = problem.evaluate(G)
    problem.warm = state
    g = problem.gradient(G, state)
    gn = float(np.linalg.norm(g))
    trace = OptimizerTrace(initial_cost=F, initial_grad_norm=gn)
    n = len(G)

    def scaled_identity():
        return max(gn, np.finfo(float).tiny) * np.eye(n)

    if hessian_init == "metric":
        sigma = 2 * problem.weights.beta1 * len(problem.obs.sections) if metric_sigma is None else metric_sigma
        B = (2 * problem.weights.beta2 * problem.A + sigma * problem.inlet_metric()).toarray()
        rescale = False
    elif hessian_init == "scaled":
        B = scaled_identity()
        rescale = True
    else:
        raise ValueError(f"unknown hessian_init {hessian_init!r}")

    status = "max_iter"
    for k in range(1, max_iter + 1):
        if gn <= tol:
            status = "converged"
            break
        try:
            d = np.linalg.solve(B, -g)
        except np.linalg.LinAlgError:
            d = None
        if d is None or not np.all(np.isfinite(d)) or g @ d >= 0:
            B = scaled_identity()
            d = -g / np.linalg.norm(g)
        slope = float(g @ d)
        alpha = 1.0
        while True:
            Gt = G + alpha * d
            try:
                Ft, st = problem.evaluate(Gt)
                if Ft <= F + c1 * alpha * slope:
                    break
            except NewtonError as exc:
                log.debug("trial point rejected: %s", exc)
            alpha *= 0.5
            if alpha < min_alpha:
                break
        if alpha < min_alpha:
            status = "line_search_failed"
            break
        gt = problem.gradient(Gt, st)
        s, y = Gt - G, gt - g
        Bs = B @ s
        sBs = float(s @ Bs)
        if rescale:
            sy0 = float(s @ y)
            if sy0 > 0:
                B = (float(y @ y) / sy0) * np.eye(n)
                Bs, sBs = B @ s, float(s @ B @ s)
            rescale = False
        sy = float(s @ y)
        if sBs > 0:
            if sy < 0.2 * sBs:
                theta = 0.8 * sBs / (sBs - sy)
                y = theta * y + (1 - theta) * Bs
                sy = float(s @ y)
            B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
        decrease = F - Ft
        G, F, g, state = Gt, Ft, gt, st
        problem.warm = state
        gn = float(np.linalg.norm(g))
        trace.records.append({"iteration": k, "cost": F, "grad_norm": gn, "alpha": alpha,
                              "cost_evals": problem.n_evals})
        log.debug("optimizer iteration %d: cost %.6e, grad norm %.3e, alpha %g", k, F, gn, alpha)
        if gn <= tol:
            status = "converged"
            break
        if decrease <= ftol * max(1.0, abs(F)):
            status = "stalled"
            break
    trace.status = status
    return OptimizationResult(control=ControlVector(problem.kind, G), state=state, trace=trace,
                              cost=F, grad_norm=gn)


def neumann_variant_solve(problem: AssimilationProblem, g0=None, **kwargs) -> OptimizationResult:
    """Pressure-control optimization: the inlet carries the traction ``-g n``."""
    if problem.kind is not ControlKind.NEUMANN:
        raise ValueError("problem is not a Neumann-control problem")
    return sqp_minimize(problem, g0, **kwargs)


def region_mass(space: FeSpace, region: str, sections=None) -> sp.csr_matrix:
    """Mass matrix behind the relative errors: 'omega', 'gamma_in' or 'omega_part'."""
    if region == "omega":
        return assemble_domain_mass(space)
    if region == "gamma_in":
        return assemble_inlet_mass(space, "vector")
    if region == "omega_part":
        return assemble_observation_mass(space, sections)
    raise ValueError(f"unknown region {region!r}")


def relative_error(space: FeSpace, U, U_ref, region: str = "omega", sections=None, M=None) -> float:
    """``|u - u_ref|_{L2(X)} / |u_ref|_{L2(X)}`` with the mass matrix of region X."""
    if isinstance(U, FlowState):
        U = U.U
    if isinstance(U_ref, FlowState):
        U_ref = U_ref.U
    M = region_mass(space, region, sections) if M is None else M
    e = np.asarray(U) - np.asarray(U_ref)
    den = float(U_ref @ (M @ U_ref))
    if den <= 0:
        raise ZeroDivisionError(f"reference field vanishes on region {region!r}")
    return float(np.sqrt(max(float(e @ (M @ e)), 0.0) / den))


def beta2_ladder(make_problem, betas, G0=None, **opt_kwargs):
    """Optimize for each ``beta2`` in turn; ``make_problem(beta2)`` builds the problem.

    Each point starts from the previous optimum.  Returns a list of
    ``(beta2, OptimizationResult)``.
    """
    out = []
    G = G0
    for b in betas:
        res = sqp_minimize(make_problem(b), G, **opt_kwargs)
        out.append((b, res))
        G = res.control.values
    return out


def write_trace_csv(trace: OptimizerTrace, path) -> None:
    """Export the per-iteration records as CSV."""
    write_csv(path, trace.rows(), ["iteration", "cost", "grad_norm", "alpha", "cost_evals"])
