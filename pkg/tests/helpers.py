"""Shared builders for test problems."""

import numpy as np

from spdfield import klpce, matalg
from spdfield.mesh import Mesh


def synthetic_kl(mesh, n, m, corr_length=0.3, variance=0.4, mean_amp=0.2, seed=0):
    """KL basis of a matrix germ whose channels are independent exponential
    fields, with a smooth deterministic mean on the diagonal."""
    n_w = matalg.n_sym(n)
    base = klpce.exponential_covariance(mesh.nodes, corr_length, variance)
    rng = np.random.default_rng(seed)
    scales = 1.0 + 0.5 * rng.random(n_w)
    cov = np.kron(base, np.diag(scales))
    x = mesh.nodes[:, 0]
    mean = np.zeros((mesh.n_nodes, n_w))
    rows, cols = matalg._tri_indices(n)
    for k in range(n_w):
        if rows[k] == cols[k]:
            mean[:, k] = mean_amp * np.sin(np.pi * x) * (1 + 0.3 * k)
    kernel = klpce.CovarianceKernel.from_matrix(cov, n_w)
    return klpce.solve_kl(kernel, mesh.node_weights, m, mean=mean, n=n,
                          mesh_digest=mesh.digest), kernel


def random_stiefel(rng, n_rows, m):
    q, r = np.linalg.qr(rng.normal(size=(n_rows, m)))
    return q * np.sign(np.diag(r))


def mesh_1d(n_el=40):
    return Mesh.interval(n_el)


def desk_coefficient(kind="square", n_el=20, variance=0.3, eps=0.1):
    """1D scalar field with two KL modes, three chaos functions
    (xi_1, xi_2, He_2(xi_1)) and nu = 3 Stiefel parameters."""
    from spdfield import klpce, sgalerkin
    from spdfield.repclass import NormalizationField, Representation, SquashFunction
    mesh = mesh_1d(n_el)
    kl, _ = synthetic_kl(mesh, 1, 2, variance=variance)
    norm = NormalizationField.constant(np.eye(1), mesh.n_nodes, eps=eps)
    chaos = klpce.ChaosBasis(2, 2, n_terms=3)
    rep = (Representation.square(SquashFunction.apm(1, 0.5)) if kind == "square"
           else Representation.exponential())
    coeff = sgalerkin.FieldCoefficient(mesh, kl, rep, norm, chaos,
                                       klpce.identity_coeffs(3, 2))
    return mesh, coeff


class ScaledCoefficient:
    """``exp(s * y_1) * C(x)``: the solution is ``u_0(x) / kappa(y)``, a
    single separable term in (x, y) that does not depend on z."""

    def __init__(self, base, scale=0.3, n_param=1):
        self.base = np.asarray(base, dtype=np.float64)
        self.scale = scale
        self.n_germ, self.n_param = 1, n_param
        self.alpha = 1e-3 * np.linalg.eigvalsh(self.base).min()

    def sample(self, y, z):
        kappa = np.exp(self.scale * np.atleast_2d(y)[:, 0])
        return kappa[:, None, None, None] * self.base, np.ones(len(kappa))
