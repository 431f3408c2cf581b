"""Identification of the field from observations of the solution.

The procedure runs in seven steps:

1. a family of algebraic prior models ``K_apm(x; w)`` (:class:`APMFamily`);
2. maximum likelihood for ``w`` (:func:`fit_apm_ml`);
3. - 5. germ realizations, their KL basis and chaos coefficients ``[y0]`` on
   the Stiefel manifold (:func:`build_oapm_chain`);
6. maximum likelihood for the tangent parameters ``z`` using only a
   precomputed solution map (:func:`ml_z`);
7. a posterior for ``Z`` by adaptive random-walk Metropolis
   (:func:`bayes_z`), optionally fed back into step 4
   (:func:`iterate_restart`).

Likelihoods compare the experimental vectors with model samples drawn with
common random numbers, so the objective is a smooth deterministic function
of the parameters.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from . import klpce, matalg, sgalerkin, stiefel
from .errors import (DomainError, InvalidInputError, InvariantViolation, LikelihoodError,
                     SamplerError)
from .repclass import (Representation, SquashFunction, denormalize_K0, normalize_K)

log = logging.getLogger(__name__)

FAMILIES = ("iso-lognormal-matern", "square-sfg")
DEFAULT_PRIOR_SCALE = 0.5
AUDIT_FACTOR = 2.0
TARGET_ACCEPT = 0.3


# --- step 1: prior model families -------------------------------------------

_PARAMS = {
    "iso-lognormal-matern": {
        "mean": (-3.0, 3.0), "std": (1e-3, 3.0), "corr_length": (1e-2, 5.0),
        "smoothness": (0.25, 5.0)},
    "square-sfg": {
        "dispersion": (1e-2, None), "corr_length": (1e-2, 5.0), "smoothness": (0.25, 5.0)},
}


class GaussianFieldSampler:
    """Matern Gaussian fields on mesh nodes with frozen standard normals.

    Reusing the same normals for every hyperparameter value makes sample
    based likelihoods smooth in the hyperparameters.
    """

    def __init__(self, mesh, count, n_fields, seed=0):
        self.mesh = mesh
        rng = np.random.default_rng(seed)
        self.normals = rng.standard_normal((count, n_fields, mesh.n_nodes))

    def fields(self, corr_length, smoothness):
        """Zero-mean unit-variance fields, shape (count, n_fields, n_nodes)."""
        cov = klpce.matern_covariance(self.mesh.nodes, corr_length, smoothness)
        lam, vec = np.linalg.eigh(cov)
        root = vec * np.sqrt(np.clip(lam, 0.0, None))
        return self.normals @ root.T


@dataclass
class APMFamily:
    """Algebraic prior model on the nodes of a mesh.

    ``iso-lognormal-matern``
        ``K0 = exp(g) I`` with ``g`` a Gaussian field with Matern covariance;
        ``w`` holds ``mean``, ``std``, ``corr_length`` and ``smoothness``.
    ``square-sfg``
        ``K0 = L^T L`` with ``L`` upper triangular built from independent
        Gaussian fields ``s U_jk`` (diagonal through the APM squash of the
        given ``dispersion``); ``w`` holds ``dispersion``, ``corr_length``
        and ``smoothness``.

    In both cases ``K = normalize_K(norm, K0)``, so every sample satisfies
    the lower bound carried by ``norm``.

    Parameters
    ----------
    kind : str
    mesh : Mesh
    norm : NormalizationField
        Lower field at the mesh nodes.
    w : dict
        Full parameter set; :attr:`free` lists those that are fitted.
    free : tuple of str
    """

    kind: str
    mesh: object
    norm: object
    w: dict
    free: tuple = ()
    bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise InvalidInputError(f"unknown APM family {self.kind!r}; use one of {FAMILIES}")
        known = _PARAMS[self.kind]
        missing = set(known) - set(self.w)
        if missing:
            raise InvalidInputError(f"APM parameters missing: {sorted(missing)}")
        unknown = (set(self.w) | set(self.free)) - set(known)
        if unknown:
            raise InvalidInputError(f"unknown APM parameters: {sorted(unknown)}")
        self.w = {k: float(v) for k, v in self.w.items()}
        box = {k: list(v) for k, v in known.items()}
        if self.kind == "square-sfg":
            n = self.n
            box["dispersion"][1] = math.inf if n == 1 else math.sqrt((n + 1) / (n - 1))
        box.update({k: list(v) for k, v in self.bounds.items()})
        self.bounds = {k: tuple(v) for k, v in box.items()}
        self.check(self.w)

    @property
    def n(self):
        return self.norm.n

    @property
    def gaussian_germ(self):
        """Both shipped families are driven by a Gaussian germ field."""
        return True

    def check(self, w):
        for k, v in w.items():
            lo, hi = self.bounds[k]
            if not (lo <= v <= hi) or (self.kind == "square-sfg" and k == "dispersion"
                                       and v >= hi):
                raise DomainError(f"APM parameter {k}={v} outside [{lo}, {hi}]")

    def with_free(self, values):
        w = dict(self.w)
        w.update(zip(self.free, (float(v) for v in values)))
        return w

    def representation(self, w=None):
        """The representation under which the germ of this family is Gaussian."""
        w = self.w if w is None else w
        if self.kind == "iso-lognormal-matern":
            return Representation.exponential()
        return Representation.square(SquashFunction.apm(self.n, w["dispersion"]))

    def n_fields(self):
        return 1 if self.kind == "iso-lognormal-matern" else matalg.n_sym(self.n)

    def sampler(self, count, seed=0):
        return GaussianFieldSampler(self.mesh, count, self.n_fields(), seed)

    def germ(self, w, sampler):
        """Germ realizations ``G`` (count, n_nodes, n, n)."""
        self.check(w)
        n = self.n
        fields = sampler.fields(w["corr_length"], w["smoothness"])
        if self.kind == "iso-lognormal-matern":
            g = w["mean"] + w["std"] * fields[:, 0]
            return g[..., None, None] * np.eye(n)
        s = w["dispersion"] / math.sqrt(n + 1)
        return matalg.vec_sym(np.moveaxis(s * fields, 1, -1), n)

    def sample(self, w, sampler, rep=None):
        rep = self.representation(w) if rep is None else rep
        return normalize_K(self.norm, rep.forward(self.germ(w, sampler)))


def apm_sample(family, w, count, seed=0):
    """``count`` realizations of ``K_apm(.; w)`` on the mesh nodes.

    Returns
    -------
    RealizationSet
        ``sym_vec`` coordinates of ``K`` per node.
    """
    family.check(w)
    return klpce.RealizationSet.from_matrices(family.sample(w, family.sampler(count, seed)))


# --- observations and likelihood --------------------------------------------

@dataclass
class ObservationSetup:
    """Linear functionals of the nodal solution and experimental data.

    Attributes
    ----------
    rows : ndarray, shape (m_obs, n_nodes)
    noise_std : ndarray, shape (m_obs,)
        Standard deviation of additive Gaussian noise per channel.
    data : ndarray, shape (nu_exp, m_obs), optional
    """

    rows: np.ndarray
    noise_std: np.ndarray = 0.0
    data: np.ndarray = None

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if self.rows.shape[0] < 1:
            raise InvalidInputError("need at least one observation functional")
        self.noise_std = np.broadcast_to(
            np.asarray(self.noise_std, dtype=np.float64), (self.m_obs,)).copy()
        if np.any(self.noise_std < 0):
            raise InvalidInputError("noise standard deviations must be non-negative")
        if self.data is not None:
            self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
            if self.data.shape[1] != self.m_obs:
                raise InvalidInputError(f"data has {self.data.shape[1]} channels, "
                                        f"expected {self.m_obs}")

    @classmethod
    def point_values(cls, mesh, points, noise_std=0.0, data=None):
        return cls(mesh.interpolation_matrix(points), noise_std, data)

    @classmethod
    def local_averages(cls, mesh, centers, radius, noise_std=0.0, data=None):
        return cls(mesh.average_matrix(centers, radius), noise_std, data)

    @property
    def m_obs(self):
        return self.rows.shape[0]

    @property
    def nu_exp(self):
        return 0 if self.data is None else self.data.shape[0]

    def observe(self, u, rng=None):
        """``B(u)`` for nodal values (..., n_nodes), with noise if ``rng``."""
        out = np.asarray(u) @ self.rows.T
        if rng is not None and np.any(self.noise_std > 0):
            out = out + rng.standard_normal(out.shape) * self.noise_std
        return out

    def with_data(self, data):
        return ObservationSetup(self.rows, self.noise_std, data)


def kde_bandwidth(data, n_model):
    """Scott's rule per channel from the spread of the data."""
    data = np.atleast_2d(data)
    d = data.shape[1]
    spread = data.std(axis=0, ddof=1) if len(data) > 1 else np.abs(data[0])
    spread = np.where(spread > 0, spread, np.maximum(np.abs(data).max(axis=0), 1.0) * 1e-3)
    return spread * n_model ** (-1.0 / (d + 4))


def log_likelihood(data, model, noise_std=0.0, method="kde", bandwidth=None, weights=None):
    """Log-likelihood of experimental vectors given model samples.

    Parameters
    ----------
    data : ndarray, shape (nu_exp, m_obs)
    model : ndarray, shape (n_model, m_obs)
        Noise-free model observations.
    noise_std : float or ndarray
    method : {'kde', 'gaussian'}
        ``kde`` estimates the density of ``model + noise`` with a Gaussian
        kernel whose width combines ``bandwidth`` and the noise;
        ``gaussian`` uses a normal law with the model mean and covariance
        plus the noise variance.
    weights : ndarray, optional
        Probability weights of the model samples (equal by default).

    Raises
    ------
    LikelihoodError
        If every experimental vector has zero likelihood.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    model = np.atleast_2d(np.asarray(model, dtype=np.float64))
    if not np.all(np.isfinite(model)):
        raise LikelihoodError("model observations are not finite")
    noise = np.broadcast_to(np.asarray(noise_std, dtype=np.float64), (data.shape[1],))
    if weights is None:
        weights = np.full(len(model), 1.0 / len(model))
    if method == "gaussian":
        mean = weights @ model
        cen = model - mean
        cov = np.atleast_2d((cen * weights[:, None]).T @ cen) + np.diag(noise ** 2)
        cov += 1e-12 * np.trace(cov) / len(cov) * np.eye(len(cov))
        chol = np.linalg.cholesky(cov)
        res = np.linalg.solve(chol, (data - mean).T)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        ll = -0.5 * np.sum(res * res, axis=0) - 0.5 * logdet - 0.5 * len(cov) * math.log(
            2 * math.pi)
        return float(ll.sum())
    if method != "kde":
        raise InvalidInputError(f"unknown likelihood method {method!r}")
    h = kde_bandwidth(data, len(model)) if bandwidth is None else np.asarray(bandwidth)
    width = np.sqrt(h ** 2 + noise ** 2)
    a = data / width
    b = model / width
    # squared distances through one matrix product
    expo = a @ b.T - 0.5 * np.sum(a * a, axis=1)[:, None] - 0.5 * np.sum(b * b, axis=1)
    top = expo.max(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        lse = top + np.log(np.exp(expo - top[:, None]) @ weights)
    ll = (lse - np.sum(np.log(width))
          - 0.5 * data.shape[1] * math.log(2 * math.pi))
    if not np.any(np.isfinite(ll)):
        raise LikelihoodError(
            f"all {len(data)} experimental vectors have zero likelihood; data mean "
            f"{data.mean(axis=0)}, model mean {model.mean(axis=0)}")
    return float(ll.sum())


def element_average(mesh):
    """(n_el, n_nodes) matrix of vertex averages."""
    avg = np.zeros((mesh.n_elements, mesh.n_nodes))
    np.put_along_axis(avg, mesh.elements, 1.0 / (mesh.dim + 1), axis=1)
    return avg


def solve_realizations(mesh, k_nodes, load=None):
    """Per-realization solutions for nodal coefficients (count, n_nodes, d, d).

    The coefficient on an element is the average of its vertex values,
    which keeps the lower bound.
    """
    load = sgalerkin.Load() if load is None else load
    k_el = np.einsum("ea,qaij->qeij", element_average(mesh), k_nodes)
    return sgalerkin.solve_det_many(mesh, k_el, load.vector(mesh))


# --- step 2 -------------------------------------------------------------------

@dataclass
class FitResult:
    w: dict
    loglik: float
    trace: list
    success: bool
    message: str = ""


def _crn_germ(n_germ, count, seed):
    """Frozen germ samples and their weights.

    A single germ coordinate uses a stratified quantile grid, otherwise
    seeded normals; the weights are equal.
    """
    if n_germ == 1:
        xi = special.ndtri((np.arange(count) + 0.5) / count)[:, None]
        return xi, np.full(count, 1.0 / count)
    xi = np.random.default_rng(seed).standard_normal((count, n_germ))
    return xi, np.full(count, 1.0 / count)


def fit_apm_ml(family, setup, n_model=400, method="gaussian", seed=0, x0=None,
               maxiter=400, load=None):
    """Maximum-likelihood fit of the free APM parameters.

    The search runs Nelder-Mead over the logarithms of the free parameters
    (the ``mean`` of the lognormal family is searched directly) starting
    from ``x0`` or the family defaults.  Model observations come from
    per-sample solves with frozen random numbers.

    Returns
    -------
    FitResult
        ``trace`` lists ``(w, loglik)`` for every evaluation.
    """
    if setup.nu_exp < 1:
        raise InvalidInputError("fit_apm_ml needs at least one experimental vector")
    if not family.free:
        raise InvalidInputError("the family has no free parameters")
    if setup.nu_exp == 1:
        warnings.warn("a single experimental vector gives a nearly flat likelihood; the "
                      "maximizer is poorly determined", UserWarning, stacklevel=2)
    sampler = family.sampler(n_model, seed)
    logged = [k != "mean" for k in family.free]
    start = [family.w[k] if x0 is None else x0[k] for k in family.free]
    u0 = np.array([math.log(v) if lg else v for v, lg in zip(start, logged)])
    bw = kde_bandwidth(setup.data, n_model)
    trace = []

    def to_w(u):
        return family.with_free(np.where(logged, np.exp(np.clip(u, -50, 50)), u))

    def objective(u):
        w = to_w(u)
        try:
            family.check(w)
        except DomainError:
            return math.inf
        model = setup.observe(solve_realizations(family.mesh, family.sample(w, sampler), load))
        try:
            ll = log_likelihood(setup.data, model, setup.noise_std, method, bw)
        except LikelihoodError:
            ll = -math.inf
        trace.append((w, ll))
        return -ll if np.isfinite(ll) else math.inf

    res = optimize.minimize(objective, u0, method="Nelder-Mead",
                            options={"maxiter": maxiter, "xatol": 1e-4, "fatol": 1e-6})
    finite = [t for t in trace if np.isfinite(t[1])]
    if not finite:
        raise LikelihoodError(
            f"likelihood is -inf everywhere searched; data mean {setup.data.mean(axis=0)}")
    w_opt = to_w(res.x)
    ll_opt = -float(res.fun)
    for k in family.free:
        lo, hi = family.bounds[k]
        if np.isclose(w_opt[k], lo, rtol=1e-3) or np.isclose(w_opt[k], hi, rtol=1e-3):
            warnings.warn(f"fitted {k}={w_opt[k]:.4g} sits on the admissible boundary",
                          UserWarning, stacklevel=2)
    return FitResult(w_opt, ll_opt, trace, bool(res.success), str(res.message))


# --- steps 3 to 5 -------------------------------------------------------------

@dataclass
class OAPMChain:
    kl: object
    y0: np.ndarray
    eta: np.ndarray
    rep: object
    germ: object = field(default=None, repr=False)


def germ_realizations(family, k_real, rep=None, w=None):
    """Step 3: ``G = rep^-1(K0)`` with ``K0`` denormalized from ``K``.

    ``k_real`` is a :class:`RealizationSet` of ``K``.  Indefinite
    denormalizations propagate with the offending node index.
    """
    rep = family.representation(w) if rep is None else rep
    k0 = denormalize_K0(family.norm, k_real.matrices())
    return klpce.RealizationSet.from_matrices(rep.inverse(k0))


def kl_from_realizations(g_real, mesh, m):
    """Step 4: KL basis of germ realizations and their projected ``eta``."""
    mean, cov = klpce.estimate_moments(g_real)
    kl = klpce.solve_kl(cov, mesh.node_weights, m, mean=mean, n=g_real.n,
                        mesh_digest=mesh.digest)
    return kl, klpce.project_eta(g_real, kl)


def fit_chaos_coeffs(eta, chaos, gaussian=False):
    """Step 5: Stiefel point ``[y0]`` with ``eta ~ [y0]^T Psi(Xi)``.

    With a Gaussian germ field and a chaos whose first ``m`` functions are
    ``Xi_1, ..., Xi_m`` the answer is ``[y0]_ji = delta_ij``.  Otherwise
    each ``eta_i`` is mapped to a standard normal ``Xi_i`` through its
    empirical distribution, ``eta`` is regressed on ``Psi(Xi)`` and the
    coefficient matrix is projected onto the manifold (polar factor).
    """
    eta = np.atleast_2d(eta)
    count, m = eta.shape
    if chaos.n_germ < m:
        raise InvalidInputError(f"need at least m={m} germ coordinates, chaos has "
                                f"{chaos.n_germ}")
    if chaos.size < m:
        raise InvalidInputError("chaos must have at least m functions")
    if gaussian:
        first = chaos.indices[:m]
        if chaos.n_germ != m or not np.array_equal(first, np.eye(m, dtype=first.dtype)):
            raise InvalidInputError("the Gaussian particular case needs N_g = m and "
                                    "Psi_j = Xi_j for j <= m")
        return klpce.identity_coeffs(chaos.size, m)
    ranks = np.argsort(np.argsort(eta, axis=0), axis=0)
    xi = np.zeros((count, chaos.n_germ))
    xi[:, :m] = special.ndtri((ranks + 0.5) / count)
    ls, *_ = np.linalg.lstsq(chaos.evaluate(xi), eta, rcond=None)
    return stiefel.polar_factor(ls)


def build_oapm_chain(family, w_opt, m, chaos, count=2000, seed=0, rep=None):
    """Steps 3-5 at the fitted parameters.

    Parameters
    ----------
    family : APMFamily
    w_opt : dict
    m : int
        KL truncation.
    chaos : ChaosBasis
        ``N`` functions of ``N_g`` germ coordinates.
    count : int
        Number of OAPM realizations.
    rep : Representation, optional
        Defaults to the representation under which the family's germ is
        Gaussian; the ``[y0] = delta`` shortcut is only taken in that case.
    """
    natural = rep is None
    rep = family.representation(w_opt) if rep is None else rep
    k_real = apm_sample(family, w_opt, count, seed)
    g_real = germ_realizations(family, k_real, rep)
    kl, eta = kl_from_realizations(g_real, family.mesh, m)
    y0 = fit_chaos_coeffs(eta, chaos, gaussian=natural and family.gaussian_germ)
    stiefel.check_point(y0)
    return OAPMChain(kl, y0, eta, rep, g_real)


# --- solution maps for steps 6 and 7 ------------------------------------------

def build_map(mesh, kl, rep, norm, chaos, base, degree=3, points=6, z_scale=DEFAULT_PRIOR_SCALE,
              load=None, degree_z=None, n_validation=50, seed=0):
    """Galerkin map ``u(x, Xi, z)`` around ``base``.

    Two accuracy figures go into ``info``: ``energy_error``, the relative
    quadrature energy error against per-sample solves, and
    ``recorded_error``, the largest relative H1 error over
    ``n_validation`` parameters drawn from the germ and prior laws inside
    the quadrature hull (see :func:`audit`).

    Returns
    -------
    coeff : FieldCoefficient
    smap : SolutionMap
    """
    load = sgalerkin.Load() if load is None else load
    coeff = sgalerkin.FieldCoefficient(mesh, kl, rep, norm, chaos, base)
    quad = sgalerkin.make_quadrature(coeff.n_germ, coeff.n_param, points=points,
                                     z_scale=z_scale)
    basis = sgalerkin.ProductBasis(coeff.n_germ, coeff.n_param, degree, z_scale=z_scale,
                                   degree_z=degree_z)
    prob = sgalerkin.StochasticProblem(mesh, coeff, load, quad, basis)
    smap = prob.solve()
    ref = prob.reference_solutions()
    num = quad.weights @ prob.sample_energy(ref - prob.map_values(smap), 0)
    den = quad.weights @ prob.sample_energy(ref, 0)
    smap.info["energy_error"] = float(math.sqrt(num / den)) if den > 0 else 0.0
    smap.info["hull"] = (np.hstack([quad.y.min(axis=0), quad.z.min(axis=0)]),
                         np.hstack([quad.y.max(axis=0), quad.z.max(axis=0)]))
    rng = np.random.default_rng([seed, 1])
    errs = _map_errors(smap, coeff, *_hull_draws(smap, coeff, n_validation, rng), load)
    smap.info["recorded_error"] = float(errs.max())
    return coeff, smap


def _hull_draws(smap, coeff, count, rng):
    """Germ and prior draws kept inside the quadrature hull."""
    lo, hi = smap.info["hull"]
    scale = np.hstack([np.ones(coeff.n_germ),
                       np.full(coeff.n_param, smap.basis.basis_z.scale)])
    picked = []
    while len(picked) < count:
        draw = rng.standard_normal((4 * count, len(scale))) * scale
        picked.extend(draw[np.all((draw >= lo) & (draw <= hi), axis=1)])
    pts = np.array(picked[:count])
    return pts[:, :coeff.n_germ], pts[:, coeff.n_germ:]


def _map_errors(smap, coeff, y, z, load):
    c, _ = coeff.sample(y, z)
    mesh = coeff.mesh
    direct = sgalerkin.solve_det_many(mesh, c, load.vector(mesh))
    return (sgalerkin.h1_seminorm(mesh, direct - smap.values(y, z))
            / sgalerkin.h1_seminorm(mesh, direct))


def class_data(coeff, z, setup, count, seed=0, load=None):
    """Synthetic experiments from the parametrized class at ``z``: direct
    per-sample solves with fresh germs and the setup's noise."""
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((count, coeff.n_germ))
    zz = np.broadcast_to(np.asarray(z, dtype=np.float64), (count, coeff.n_param))
    c, _ = coeff.sample(xi, zz)
    load = sgalerkin.Load() if load is None else load
    u = sgalerkin.solve_det_many(coeff.mesh, c, load.vector(coeff.mesh))
    return setup.observe(u, rng)


class MapLikelihood:
    """``z -> log L(z)`` through a solution map with frozen germ samples."""

    def __init__(self, smap, setup, n_model=1000, seed=0, method="gaussian",
                 bandwidth_scale=1.0):
        self.smap = smap
        self.setup = setup
        self.method = method
        self.n_param = smap.basis.basis_z.n_germ
        self.xi, self.weights = _crn_germ(smap.basis.basis_y.n_germ, n_model, seed)
        # with one germ coordinate and small noise the data sit near a curve,
        # and Scott's rule over-smooths; a scale below one sharpens the kernel
        self.bandwidth = bandwidth_scale * kde_bandwidth(setup.data, n_model)

    def model(self, z):
        z = np.broadcast_to(np.asarray(z, dtype=np.float64), (len(self.xi), self.n_param))
        return self.smap.values(self.xi, z, rows=self.setup.rows)

    def __call__(self, z):
        try:
            return log_likelihood(self.setup.data, self.model(z), self.setup.noise_std,
                                  self.method, self.bandwidth, self.weights)
        except LikelihoodError:
            return -math.inf


@dataclass
class MLZResult:
    z: np.ndarray
    y: np.ndarray
    loglik: float
    trace: list
    success: bool


def ml_z(smap, coeff, setup, n_model=1000, seed=0, method="gaussian", maxiter=2000,
         bandwidth_scale=1.0):
    """Step 6: maximum likelihood over ``z`` using only the map.

    Raises
    ------
    InvariantViolation
        If a Galerkin solve happened during the search.
    """
    if setup.nu_exp < 1:
        raise InvalidInputError("ml_z needs experimental data")
    like = MapLikelihood(smap, setup, n_model, seed, method, bandwidth_scale)
    before = sgalerkin.galerkin_solve_count()
    trace = []

    def objective(z):
        ll = like(z)
        trace.append((np.array(z), ll))
        return -ll if np.isfinite(ll) else math.inf

    res = optimize.minimize(objective, np.zeros(like.n_param), method="Nelder-Mead",
                            options={"maxiter": maxiter, "xatol": 1e-5, "fatol": 1e-4})
    if sgalerkin.galerkin_solve_count() != before:
        raise InvariantViolation("the likelihood search triggered a Galerkin solve")
    if not res.success:
        log.warning("Nelder-Mead over z did not converge: %s", res.message)
    best = min(trace, key=lambda t: -t[1] if np.isfinite(t[1]) else math.inf)
    z = best[0]
    y = coeff.chart(z)
    stiefel.check_point(y)
    return MLZResult(z, y, float(best[1]), trace, bool(res.success))


# --- step 7 -------------------------------------------------------------------

def gelman_rubin(chains):
    """Potential scale reduction per coordinate for chains (c, n, d)."""
    chains = np.asarray(chains)
    c, n = chains.shape[:2]
    if c < 2 or n < 2:
        return np.full(chains.shape[2:], np.nan)
    means = chains.mean(axis=1)
    within = chains.var(axis=1, ddof=1).mean(axis=0)
    between = n * means.var(axis=0, ddof=1)
    var = (n - 1) / n * within + between / n
    return np.sqrt(var / np.where(within > 0, within, np.nan))


@dataclass
class Posterior:
    chains: np.ndarray
    acceptance: np.ndarray
    step: np.ndarray
    rhat: np.ndarray
    prior_scale: float
    chart: object = field(default=None, repr=False)

    @property
    def samples(self):
        return self.chains.reshape(-1, self.chains.shape[-1])

    @property
    def mean(self):
        return self.samples.mean(axis=0)

    def y_samples(self, every=1):
        """``[Y_post] = M_[y](Z_post)`` for every ``every``-th sample."""
        return np.array([self.chart(z) for z in self.samples[::every]])


def bayes_z(smap, coeff, setup, prior_scale=DEFAULT_PRIOR_SCALE, n_chains=3, n_iter=3000,
            burn=1000, n_model=1000, seed=0, method="gaussian", bandwidth_scale=1.0):
    """Step 7: posterior of ``Z`` with prior ``N(0, s^2 I)``.

    Each chain is a random-walk Metropolis sampler whose step size adapts
    during the burn-in towards an acceptance rate of 0.3 and is frozen
    afterwards.  Chains use independent substreams of ``seed``.

    Raises
    ------
    SamplerError
        If a chain accepts less than 1% or more than 99% of its proposals
        after adaptation.
    """
    if prior_scale <= 0:
        raise InvalidInputError("prior scale must be positive")
    like = MapLikelihood(smap, setup, n_model, seed, method, bandwidth_scale)
    d = like.n_param
    streams = np.random.SeedSequence(seed).spawn(n_chains)
    chains = np.empty((n_chains, n_iter - burn, d))
    acc = np.empty(n_chains)
    steps = np.empty(n_chains)
    before = sgalerkin.galerkin_solve_count()

    def log_post(z):
        return like(z) - 0.5 * float(z @ z) / prior_scale ** 2

    for c, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        z = 0.1 * prior_scale * rng.standard_normal(d)
        lp = log_post(z)
        log_step = math.log(0.5 * prior_scale)
        accepted = 0
        for it in range(n_iter):
            prop = z + math.exp(log_step) * rng.standard_normal(d)
            lq = log_post(prop)
            ok = math.log(rng.random()) < lq - lp
            if ok:
                z, lp = prop, lq
            if it < burn:
                log_step += ((1.0 if ok else 0.0) - TARGET_ACCEPT) / math.sqrt(it + 1.0)
            else:
                accepted += ok
                chains[c, it - burn] = z
        acc[c] = accepted / max(n_iter - burn, 1)
        steps[c] = math.exp(log_step)
        if not 0.01 <= acc[c] <= 0.99:
            raise SamplerError(f"chain {c} acceptance rate {acc[c]:.3f} after adaptation "
                               f"(step {steps[c]:.3g}); adjust the burn-in or prior scale")
    if sgalerkin.galerkin_solve_count() != before:
        raise InvariantViolation("the sampler triggered a Galerkin solve")
    return Posterior(chains, acc, steps, gelman_rubin(chains), prior_scale, coeff.chart)


def iterate_restart(kl, chaos, posterior, count=2000, restarts=1, seed=0):
    """Re-enter step 4 with posterior germ realizations.

    Realizations ``G = G0 + sum_i sqrt(sigma_i) G_i eta_i`` use
    ``eta = [Y]^T Psi(Xi)`` with ``[Y]`` drawn from the posterior and fresh
    germs ``Xi``.  With ``restarts = 0`` the basis is returned unchanged.
    """
    rng = np.random.default_rng(seed)
    samples = posterior.samples
    for _ in range(restarts):
        pick = rng.integers(len(samples), size=count)
        xi = rng.standard_normal((count, chaos.n_germ))
        psi = chaos.evaluate(xi)
        eta = np.empty((count, kl.m))
        for k in np.unique(pick):
            sel = pick == k
            eta[sel] = psi[sel] @ posterior.chart(samples[k])
        g = klpce.RealizationSet(kl.realize(eta), kl.n)
        mean, cov = klpce.estimate_moments(g)
        kl = klpce.solve_kl(cov, kl.weights, kl.m, mean=mean, n=kl.n,
                            mesh_digest=kl.mesh_digest)
    return kl


# --- audit --------------------------------------------------------------------

@dataclass
class AuditReport:
    errors: np.ndarray
    bound: float
    ok: bool


def audit(smap, coeff, count=10, seed=0, factor=AUDIT_FACTOR, load=None):
    """Compare the map with direct solves at random parameters.

    Parameters are drawn from the germ and prior laws inside the
    quadrature hull, where the map is meant to be used, from a stream
    independent of the validation draws of :func:`build_map`.  The
    relative H1 errors must stay below ``factor`` times the recorded error.
    """
    load = sgalerkin.Load() if load is None else load
    rng = np.random.default_rng([seed, 2])
    errs = _map_errors(smap, coeff, *_hull_draws(smap, coeff, count, rng), load)
    bound = factor * smap.info["recorded_error"]
    return AuditReport(errs, bound, bool(np.all(errs <= bound)))
