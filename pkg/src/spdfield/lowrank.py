"""Greedy rank-one approximation of the stochastic Galerkin solution.

The solution map is built as a canonical sum ``u^k = sum_i wx_i (x) wy_i (x)
wz_i (x)`` over space, germ chaos and parameter chaos.  Each new term
minimizes the energy functional ``J(v) = a(v, v)/2 - F(v)`` along the
residual direction by alternating exact block minimizations.  Everything
is evaluated through the quadrature of the underlying
:class:`~spdfield.sgalerkin.StochasticProblem`, so ``J`` here and the full
Galerkin solve share the same discrete space.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import sgalerkin
from .errors import ConvergenceError

log = logging.getLogger(__name__)

GREEDY_TOL = 1e-6
ALS_TOL = 1e-10
MAX_RESTARTS = 3
# factors below this fraction of the mean-coefficient solution count as zero;
# it sits above the noise left by the iterative full solve
ZERO_FACTOR = 1e-8


@dataclass
class RankOneTerm:
    """One canonical term; ``wy`` and ``wz`` have unit norm and the
    magnitude sits in ``wx`` (full nodal vector, zero on the boundary)."""

    wx: np.ndarray
    wy: np.ndarray
    wz: np.ndarray
    sweeps: int = 0
    restarts: int = 0


@dataclass
class GreedyState:
    problem: object
    terms: list = field(default_factory=list)
    j_history: list = field(default_factory=lambda: [0.0])
    residual_history: list = field(default_factory=list)
    error_history: list = field(default_factory=list)
    values: np.ndarray = None

    def __post_init__(self):
        if self.values is None:
            prob = self.problem
            self.values = np.zeros((prob.quad.size, prob.mesh.n_nodes))

    @property
    def rank(self):
        return len(self.terms)

    def factors(self):
        n = self.problem.mesh.n_nodes
        py, pz = self.problem.basis.shape
        if not self.terms:
            return np.zeros((0, n)), np.zeros((0, py)), np.zeros((0, pz))
        return (np.array([t.wx for t in self.terms]), np.array([t.wy for t in self.terms]),
                np.array([t.wz for t in self.terms]))


def j_eval(problem, v):
    """``J(v)`` for a :class:`SolutionMap` or nodal values at the
    quadrature nodes, shape (q, n_nodes)."""
    if isinstance(v, sgalerkin.SolutionMap):
        v = problem.map_values(v)
    return problem.j_value(np.asarray(v, dtype=np.float64))


def _term_values(prob, wx, wy, wz):
    psi = prob.modifier * (prob.phi_y @ wy) * (prob.phi_z @ wz)
    return psi[:, None] * wx[None, :]


class _RankOneSolver:
    """Block minimizations of ``J(u + wx (x) wy (x) wz)`` with ``u`` fixed."""

    def __init__(self, prob, values):
        self.prob = prob
        self.values = values
        self.ku = prob.apply_samples(values)
        self.w = prob.quad.weights
        self.inner = prob.mesh.interior
        scale = np.abs(sgalerkin.solve_det(
            prob.mesh, np.tensordot(self.w, prob.c, axes=1), prob.load)).max()
        self.zero = ZERO_FACTOR * max(scale, 1e-300)

    def update_x(self, wy, wz):
        prob = self.prob
        psi = prob.modifier * (prob.phi_y @ wy) * (prob.phi_z @ wz)
        wx = np.zeros(prob.mesh.n_nodes)
        weights = self.w * psi * psi
        if not np.any(weights > 0):
            return wx
        ceff = np.tensordot(weights, prob.c, axes=1)
        mat = sgalerkin._interior_block(sgalerkin.stiffness_matrix(prob.mesh, ceff), prob.mesh)
        rhs = prob.b * (self.w @ psi) - (self.w * psi) @ self.ku
        wx[self.inner] = spla.spsolve(mat.tocsc(), rhs[self.inner])
        return wx

    def update_chaos(self, wx, fixed, table):
        """Minimize over the chaos factor with table ``table`` (q, P) when the
        other chaos factor contributes ``fixed`` (q,) at each node."""
        prob = self.prob
        g = prob.mesh.grads
        grad = np.einsum("ea,ead->ed", wx[prob.mesh.elements], g)
        s = np.einsum("ed,qedf,ef,e->q", grad, prob.c, grad, prob.mesh.measures)
        t = self.ku @ wx
        gq = prob.modifier * fixed
        mat = (table * (self.w * s * gq * gq)[:, None]).T @ table
        rhs = table.T @ (self.w * gq * (wx @ prob.b - t))
        # least squares gives the minimum-norm minimizer when some basis
        # functions vanish on the weighted nodes
        sol, *_ = np.linalg.lstsq(mat, rhs, rcond=1e-13)
        return sol

    def delta_j(self, wx, wy, wz):
        """``J(u + w) - J(u)``."""
        prob = self.prob
        tv = _term_values(prob, wx, wy, wz)
        e = prob.sample_energy(tv)
        return float(self.w @ (0.5 * e + np.einsum("qi,qi->q", self.ku, tv) - tv @ prob.b))


def als_rank_one(state, max_sweeps=100, tol=ALS_TOL, seed=0):
    """Next canonical term by alternating least squares.

    Parameters
    ----------
    state : GreedyState
        Current approximation ``u^k``; not modified.
    max_sweeps : int
    tol : float
        Stop when a full sweep lowers ``J`` by less than ``tol * |J|``.
    seed : int
        Initial chaos factors are drawn from ``default_rng([seed, k])``.

    Returns
    -------
    RankOneTerm
        With ``sweeps`` and the per-update ``J`` values in ``trace``.

    Raises
    ------
    ConvergenceError
        If the spatial factor collapses to zero after every restart, which
        happens when ``u^k`` already minimizes ``J`` over rank-one updates.
    """
    prob = state.problem
    solver = _RankOneSolver(prob, state.values)
    j0 = state.j_history[-1]
    py, pz = prob.basis.shape
    rng = np.random.default_rng([seed, state.rank])
    for attempt in range(MAX_RESTARTS + 1):
        wy = rng.standard_normal(py)
        wz = rng.standard_normal(pz)
        wy /= np.linalg.norm(wy)
        wz /= np.linalg.norm(wz)
        trace = []
        collapsed = False
        prev = j0
        sweep = 0
        for sweep in range(1, max_sweeps + 1):
            wx = solver.update_x(wy, wz)
            if np.abs(wx).max() <= solver.zero:
                collapsed = True
                break
            trace.append(j0 + solver.delta_j(wx, wy, wz))
            for which in ("y", "z"):
                if which == "y":
                    new = solver.update_chaos(wx, prob.phi_z @ wz, prob.phi_y)
                else:
                    new = solver.update_chaos(wx, prob.phi_y @ wy, prob.phi_z)
                norm = np.linalg.norm(new)
                if norm * np.abs(wx).max() <= solver.zero:
                    collapsed = True
                    break
                wx = wx * norm
                if which == "y":
                    wy = new / norm
                else:
                    wz = new / norm
                trace.append(j0 + solver.delta_j(wx, wy, wz))
            if collapsed:
                break
            cur = trace[-1]
            if prev - cur < tol * max(abs(cur), 1e-300):
                break
            prev = cur
        if not collapsed:
            term = RankOneTerm(wx, wy, wz, sweeps=sweep, restarts=attempt)
            term.trace = trace
            return term
        log.debug("rank-one term %d collapsed, restarting (%d)", state.rank, attempt + 1)
    raise ConvergenceError(
        f"rank-one factor is zero after {MAX_RESTARTS} restarts; the current "
        f"approximation of rank {state.rank} is already stationary")


def _update_spatial(prob, state):
    """Re-solve all spatial factors jointly with the chaos factors fixed.

    The trial space contains the current ``u^k``, so ``J`` cannot increase.
    """
    wx, wy, wz = state.factors()
    lam = prob.modifier[:, None] * (prob.phi_y @ wy.T) * (prob.phi_z @ wz.T)
    gram = (lam * prob.quad.weights[:, None]).T @ lam
    ev, vec = np.linalg.eigh(0.5 * (gram + gram.T))
    keep = ev > 1e-12 * ev.max()
    trans = vec[:, keep] / np.sqrt(ev[keep])
    mat, rhs = prob.assemble(lam @ trans)
    n_int = len(prob.mesh.interior)
    sol = spla.spsolve(mat.tocsc(), rhs).reshape(n_int, -1) @ trans.T
    values = np.zeros((prob.quad.size, prob.mesh.n_nodes))
    values[:, prob.mesh.interior] = lam @ sol.T
    if prob.j_value(values) > state.j_history[-1]:
        return
    for i, term in enumerate(state.terms):
        term.wx = np.zeros(prob.mesh.n_nodes)
        term.wx[prob.mesh.interior] = sol[:, i]
    state.values = values


def _galerkin_residual(prob, system, state):
    mat, rhs = system
    n_int = len(prob.mesh.interior)
    wx, wy, wz = state.factors()
    coeffs = np.einsum("ri,ra,rb->iab", wx[:, prob.mesh.interior], wy, wz).reshape(n_int, -1)
    return float(np.linalg.norm(rhs - mat @ coeffs.ravel()) / max(np.linalg.norm(rhs), 1e-300))


def greedy_solve(problem, r_max, tol=GREEDY_TOL, max_sweeps=100, als_tol=ALS_TOL, seed=0,
                 reference=None, track_residual=False, update=True):
    """Greedy rank-one enrichment ``u^{k+1} = u^k + w^{k+1}``.

    Parameters
    ----------
    problem : StochasticProblem
    r_max : int
        Largest rank.
    tol : float
        Stop once a new term lowers ``J`` by less than ``tol * |J|``.  The
        term is kept.
    reference : SolutionMap or ndarray, optional
        Full Galerkin solution (or its values at the quadrature nodes);
        if given, ``||u_N - u^k||`` in the ``X`` and ``C`` norms is recorded
        after every step.
    track_residual : bool
        Record the relative residual of the assembled Galerkin system.
    update : bool
        After each new term, re-solve all spatial factors jointly on the
        span of the current chaos factors.

    Returns
    -------
    SolutionMap
        Canonical map with ``info['state']`` holding the :class:`GreedyState`.
    """
    state = GreedyState(problem)
    ref_values = None
    if reference is not None:
        ref_values = (problem.map_values(reference)
                      if isinstance(reference, sgalerkin.SolutionMap) else np.asarray(reference))
        state.error_history.append(problem.energy_norms(ref_values))
    system = problem.assemble() if track_residual else None
    stop = "rank"
    while state.rank < r_max:
        try:
            term = als_rank_one(state, max_sweeps, als_tol, seed)
        except ConvergenceError:
            stop = "stationary"
            break
        state.terms.append(term)
        state.values = state.values + _term_values(problem, term.wx, term.wy, term.wz)
        if update:
            _update_spatial(problem, state)
        j_new = problem.j_value(state.values)
        j_old = state.j_history[-1]
        state.j_history.append(j_new)
        if system is not None:
            state.residual_history.append(_galerkin_residual(problem, system, state))
        if ref_values is not None:
            state.error_history.append(problem.energy_norms(ref_values - state.values))
        log.info("greedy rank %d: J = %.12g", state.rank, j_new)
        if j_old - j_new < tol * abs(j_new):
            stop = "tolerance"
            break
    info = {"state": state, "stop": stop, "j": state.j_history[-1]}
    return problem.make_map(factors=state.factors(), info=info)
