"""End-to-end acceptance criteria at their stated tolerances.

Each test records one PASS/FAIL line through :func:`acceptance_log.record`
before asserting, so the summary lists every criterion even when some fail.
"""

import math
import time

import numpy as np
import pytest

from acceptance_log import record
from helpers import desk_coefficient, random_stiefel, synthetic_kl
from oracles import expm_taylor
from spdfield import cli, identify, klpce, lowrank, matalg, stiefel
from spdfield import sgalerkin as sg
from spdfield.mesh import Mesh, observed_order
from spdfield.repclass import (NormalizationField, Representation, SquashFunction,
                               bound_chain, bounds, normalize_K)

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


def random_sym(rng, n, scale):
    a = rng.normal(size=(n, n)) * scale
    return 0.5 * (a + a.T)


# --- 1. matrix calculus -------------------------------------------------------

def test_matrix_calculus(rng):
    t0 = time.perf_counter()
    worst_rt, worst_oracle = 0.0, 0.0
    for n in (2, 3):
        g = np.stack([random_sym(rng, n, 1.0) for _ in range(500)])
        worst_rt = max(worst_rt, np.abs(matalg.sym_log(matalg.sym_exp(g)) - g).max())
        a = rng.normal(size=(500, n, n))
        k = a @ a.transpose(0, 2, 1) + 0.1 * np.eye(n)
        back = matalg.sym_exp(matalg.sym_log(k))
        worst_rt = max(worst_rt, (np.abs(back - k).max(axis=(1, 2))
                                  / np.abs(k).max(axis=(1, 2))).max())
        for gi in g[:100]:
            ref = expm_taylor(gi)
            err = np.linalg.norm(matalg.sym_exp(gi) - ref) / np.linalg.norm(ref)
            worst_oracle = max(worst_oracle, err)
    elapsed = time.perf_counter() - t0
    ok = worst_rt <= 1e-9 and worst_oracle <= 1e-10 and elapsed < 1.0
    record("1 matrix calculus", ok, f"round trip {worst_rt:.2e}, oracle {worst_oracle:.2e}, "
                                    f"{elapsed:.2f} s")
    assert ok


# --- 2 and 3. lower bound and bound chain -----------------------------------

N_MAT = 2


@pytest.fixture(scope="module")
def sweep():
    """Realizations over (x, xi, z) for both representation kinds.

    41 nodes x 300 (xi, z) pairs = 12300 points per kind.
    """
    rng = np.random.default_rng(11)
    mesh = Mesh.interval(40)
    kl, _ = synthetic_kl(mesh, N_MAT, 3)
    a = rng.normal(size=(mesh.n_nodes, N_MAT, N_MAT))
    norm = NormalizationField(a @ a.transpose(0, 2, 1) + np.eye(N_MAT), eps=0.1)
    chaos = klpce.ChaosBasis(3, 2)
    chart = stiefel.StiefelChart(klpce.identity_coeffs(chaos.size, kl.m))
    count = 300
    xi = rng.normal(size=(count, 3))
    z = 0.5 * rng.normal(size=(count, chart.nu))
    ys = np.stack([chart(zk) for zk in z])
    eta = np.einsum("qa,qam->qm", chaos.evaluate(xi), ys)
    g_vec = kl.realize(eta)
    g = matalg.vec_sym(g_vec, N_MAT)
    out = {}
    for kind in ("exponential", "square"):
        rep = (Representation.exponential() if kind == "exponential"
               else Representation.square(SquashFunction.apm(N_MAT, 0.6)))
        k0 = rep.forward(g)
        k = normalize_K(norm, k0)
        out[kind] = (rep, g, k0, k)
    return mesh, kl, norm, eta, g_vec, out


def test_lower_bound(sweep):
    mesh, _, norm, _, _, out = sweep
    floor = norm.k0 * norm.eps / (1 + norm.eps)
    lines, ok = [], True
    for kind, (_, _, _, k) in out.items():
        lam = matalg.eigvalsh(k)[..., 0]
        violations = int(np.sum(lam < floor - 1e-12))
        ok &= violations == 0 and lam.size >= 10_000
        lines.append(f"{kind}: {lam.size} points, {violations} violations, "
                     f"min margin {(lam - floor).min():.3e}")
    record("2 lower bound", ok, "; ".join(lines))
    assert ok


def test_bound_chain(sweep):
    _, kl, norm, eta, g_vec, out = sweep
    failed = []
    detail = ""
    for kind, (rep, g, k0, k) in out.items():
        for label, (lhs, rhs) in bound_chain(rep, norm, g, k0, k).items():
            slack = 1e-12 if label == "lower" else 1e-12 * np.abs(rhs)
            if not np.all(lhs <= rhs + slack):
                failed.append(f"{kind}:{label}")
        br = bounds(rep, norm, kl, eta, kl.pointwise_norm(g_vec).max(axis=1))
        k_sup = np.linalg.norm(k, axis=(-2, -1)).max(axis=1)
        if not np.all(k_sup <= br.beta * (1 + 1e-12)):
            failed.append(f"{kind}:K<=beta")
        if not np.all(br.beta <= br.gamma * (1 + 1e-12)):
            failed.append(f"{kind}:beta<=gamma")
        if kind == "square":
            mean = br.gamma.mean()
            stderr = br.gamma.std(ddof=1) / math.sqrt(len(br.gamma))
            if not mean <= br.gamma_bar + 3 * stderr:
                failed.append("square:E[gamma]<=gamma_bar")
            detail = f"E[gamma] {mean:.4g} vs gamma_bar {br.gamma_bar:.4g}"
    ok = not failed
    record("3 bound chain", ok, (f"violated: {failed}; " if failed else "all hold; ") + detail)
    assert ok


# --- 4. Stiefel maps ------------------------------------------------------------

def _reduced_time(n_rows, m, rng, repeat=7):
    chart = stiefel.StiefelChart(random_stiefel(rng, n_rows, m))
    z = 0.3 * rng.normal(size=chart.nu)
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(5):
            stiefel.map_reduced(chart.a, z)
        best = min(best, time.perf_counter() - t0)
    return best


def test_stiefel():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst_diff, worst_res, worst_origin = 0.0, 0.0, 0.0
    for _ in range(50):
        a = random_stiefel(rng, 40, 3)
        chart = stiefel.StiefelChart(a)
        z = rng.normal(size=chart.nu)
        yf, yr = chart.full(z), chart.reduced(z)
        worst_diff = max(worst_diff, np.abs(yf - yr).max())
        worst_res = max(worst_res, stiefel.manifold_residual(yf),
                        stiefel.manifold_residual(yr))
        zero = np.zeros(chart.nu)
        worst_origin = max(worst_origin, np.abs(chart.full(zero) - a).max(),
                           np.abs(chart.reduced(zero) - a).max())
    sizes = (250, 500, 1000, 2000, 4000)
    times = [_reduced_time(n, 3, rng) for n in sizes]
    growth = times[-1] / times[0]
    allowed = 2.0 * sizes[-1] / sizes[0]
    elapsed = time.perf_counter() - t0
    ok = (worst_diff <= 1e-9 and worst_res <= 1e-10 and worst_origin <= 1e-12
          and growth <= allowed and elapsed < 30.0)
    record("4 Stiefel", ok, f"full-reduced {worst_diff:.2e}, residual {worst_res:.2e}, "
                            f"origin {worst_origin:.2e}, cost x{growth:.1f} for N x16 "
                            f"(allowed {allowed:.0f}), {elapsed:.1f} s")
    assert ok


# --- 5. KL and chaos ----------------------------------------------------------

def test_kl_chaos():
    rng = np.random.default_rng(5)
    mesh = Mesh.interval(20)
    kl_true, cov = synthetic_kl(mesh, 2, 4, corr_length=0.3)
    count = 10_000
    chol = np.linalg.cholesky(cov.matrix + 1e-12 * np.eye(cov.size))

    def draw(k):
        g = rng.normal(size=(k, cov.size)) @ chol.T
        return klpce.RealizationSet(g.reshape(k, mesh.n_nodes, -1) + kl_true.mean, 2)

    # eigen-residuals of the KL computed from a sampled covariance
    train = draw(2000)
    mean, cov_hat = klpce.estimate_moments(train)
    kl = klpce.solve_kl(cov_hat, mesh.node_weights, 4, mean=mean)
    residual = klpce.kl_residuals(cov_hat, kl).max() / kl.sigma[0]

    # projected-eta covariance of independent realizations of the true field
    eta = klpce.project_eta(draw(count), kl_true)
    cov_err = np.abs(np.cov(eta.T) - np.eye(kl_true.m)).max()
    cov_tol = 5.0 / math.sqrt(count)

    # orthonormality of chaos coefficients: moment fit, identity and charted points
    chaos = klpce.ChaosBasis(2, 3)
    xi = rng.normal(size=(count, 2))
    eta_ng = np.column_stack([xi[:, 0] + 0.3 * (xi[:, 0] ** 2 - 1), xi[:, 1]])
    eta_ng = (eta_ng - eta_ng.mean(0)) / eta_ng.std(0)
    fitted = identify.fit_chaos_coeffs(eta_ng, chaos)
    chart = stiefel.StiefelChart(fitted)
    points = [fitted, klpce.identity_coeffs(chaos.size, 2)]
    points += [chart(rng.normal(size=chart.nu)) for _ in range(50)]

    # second-moment identity by exact Gauss-Hermite quadrature over the germ
    chart4 = stiefel.StiefelChart(klpce.identity_coeffs(chaos.size, kl_true.m))
    y = chart4(0.4 * rng.normal(size=chart4.nu))
    points.append(y)
    nodes, weights = klpce.tensor_gauss_hermite(2, 5)
    eta_q = chaos.evaluate(nodes) @ y
    g = matalg.vec_sym(kl_true.realize(eta_q), 2)
    lhs = weights @ (np.linalg.norm(g, axis=(-2, -1)) ** 2)
    g0 = matalg.vec_sym(kl_true.mean, 2)
    gi = matalg.vec_sym(kl_true.modes, 2)
    rhs = (np.linalg.norm(g0, axis=(-2, -1)) ** 2
           + np.einsum("i,ix->x", kl_true.sigma, np.linalg.norm(gi, axis=(-2, -1)) ** 2))
    identity_err = np.abs(lhs - rhs).max() / np.abs(rhs).max()

    ortho = max(stiefel.manifold_residual(p) for p in points)
    ok = (residual <= 1e-8 and ortho <= 1e-10 and cov_err <= cov_tol
          and identity_err <= 1e-8)
    record("5 KL/PCE", ok, f"residual {residual:.2e} sigma1, orthonormality {ortho:.2e}, "
                           f"cov {cov_err:.4f} (tol {cov_tol:.2f}), "
                           f"second moment {identity_err:.2e}")
    assert ok


# --- 6. forward solver ------------------------------------------------------------

def _poisson_error(n_el):
    # -((1 + x) u')' = 1 on (0, 1), u = ln(1 + x)/ln 2 - x
    mesh = Mesh.interval(n_el)
    c = (1.0 + mesh.centroids[:, 0])[:, None, None]
    u = sg.solve_det(mesh, c, sg.Load())
    x = mesh.nodes[:, 0]
    return mesh.h, np.abs(u - (np.log1p(x) / math.log(2.0) - x)).max()


def test_forward_solver():
    t0 = time.perf_counter()
    hs, errs = zip(*(_poisson_error(n) for n in (10, 20, 40, 80)))
    order = observed_order(hs, errs)
    consts = np.array(errs) / np.array(hs) ** 2
    const_ok = consts[1:].max() <= 1.05 * consts[0]

    z_scale = 0.3
    mesh, coeff = desk_coefficient("square")
    quad = sg.make_quadrature(2, coeff.n_param, points=4, z_scale=z_scale)
    errors, stability = [], 0.0
    ref = None
    for p in (1, 2, 3):
        prob = sg.StochasticProblem(mesh, coeff, sg.Load(), quad,
                                    sg.ProductBasis(2, coeff.n_param, p, z_scale=z_scale))
        if ref is None:
            ref = prob.reference_solutions()
            stability = prob.stability_check(ref).max()
        errors.append(sg.energy_error(prob, prob.solve(), ref)["C"])
    monotone = all(b <= a for a, b in zip(errors, errors[1:]))
    elapsed = time.perf_counter() - t0
    ok = order >= 1.9 and const_ok and stability <= 1.05 and monotone and elapsed < 300
    record("6 forward solver", ok,
           f"order {order:.3f}, C {consts.min():.4f}..{consts.max():.4f}, stability ratio "
           f"{stability:.3f}, energy errors p=1..3 {np.round(errors, 5).tolist()}, "
           f"{elapsed:.1f} s")
    assert ok


# --- 7. truncated spaces --------------------------------------------------------

def test_truncated_convergence():
    z_scale = 0.3
    mesh, coeff = desk_coefficient("exponential")
    quad = sg.make_quadrature(2, coeff.n_param, points=4, z_scale=z_scale)
    base = sg.StochasticProblem(mesh, coeff, sg.Load(), quad,
                                sg.ProductBasis(2, coeff.n_param, 0, z_scale=z_scale))
    ref = base.reference_solutions()
    taus = [float(np.quantile(base.gamma, q)) for q in (0.5, 0.8, 0.97)]
    errors = []
    for tau, p in zip(taus, (1, 2, 3)):
        prob = sg.StochasticProblem(mesh, coeff, sg.Load(), quad,
                                    sg.ProductBasis(2, coeff.n_param, p, z_scale=z_scale),
                                    tau=tau)
        errors.append(sg.energy_error(prob, prob.solve(), ref)["C"])
    ok = taus[0] < taus[1] < taus[2] and errors[0] > errors[1] > errors[2]
    record("7 truncated convergence", ok,
           f"tau {np.round(taus, 3).tolist()}, errors {np.round(errors, 5).tolist()}")
    assert ok


# --- 8. low-rank ----------------------------------------------------------------

def test_low_rank():
    t0 = time.perf_counter()
    # rank-one truth: coefficient exp(s y) C(x) gives u(x) / kappa(y)
    from helpers import ScaledCoefficient
    mesh = Mesh.interval(16)
    coeff = ScaledCoefficient((1.0 + mesh.centroids[:, 0] ** 2)[:, None, None])
    prob1 = sg.StochasticProblem(mesh, coeff, sg.Load(), sg.make_quadrature(1, 1, points=6),
                                 sg.ProductBasis(1, 1, 4))
    full1 = prob1.solve()
    one = lowrank.greedy_solve(prob1, 1)
    rank1_err = (np.abs(one.to_dense().coeffs - full1.coeffs).max()
                 / np.abs(full1.coeffs).max())

    # 1D instance with 99 x 100 = 9900 unknowns
    z_scale = 0.3
    mesh = Mesh.interval(100)
    kl, _ = synthetic_kl(mesh, 1, 1, variance=0.3)
    norm = NormalizationField.constant(np.eye(1), mesh.n_nodes, eps=0.1)
    chaos = klpce.ChaosBasis(2, 2, n_terms=3)
    rep = Representation.square(SquashFunction.apm(1, 0.5))
    coeff = sg.FieldCoefficient(mesh, kl, rep, norm, chaos, klpce.identity_coeffs(3, 1))
    quad = sg.make_quadrature(2, coeff.n_param, points=5, z_scale=z_scale)
    prob = sg.StochasticProblem(mesh, coeff, sg.Load(), quad,
                                sg.ProductBasis(2, coeff.n_param, 3, z_scale=z_scale))
    n_dof = len(mesh.interior) * prob.basis.size
    ref = prob.reference_solutions()
    e_full = sg.energy_error(prob, prob.solve(), ref)["C"]
    greedy = lowrank.greedy_solve(prob, 40, tol=0.0, reference=ref)
    state = greedy.info["state"]
    j = np.array(state.j_history)
    monotone = bool(np.all(np.diff(j) <= 1e-12 * np.abs(j[1:])))
    errs = np.array([e["C"] for e in state.error_history[1:]])
    within = np.nonzero(errs <= 1.01 * e_full)[0]
    reached = int(within[0]) + 1 if len(within) else None
    elapsed = time.perf_counter() - t0
    ok = (monotone and rank1_err <= 1e-8 and reached is not None and n_dof <= 20_000
          and elapsed < 600)
    record("8 low-rank", ok,
           f"J monotone {monotone}, rank-one error {rank1_err:.2e}, dim {n_dof}, "
           f"within 1% of full Galerkin at rank {reached} "
           f"(e_k/e_N {errs[-1] / e_full:.4f} at rank {len(errs)}), {elapsed:.1f} s")
    assert ok


# --- 9. identification ----------------------------------------------------------

W_TRUE = dict(mean=0.3, std=0.5, corr_length=0.2, smoothness=1.5)


def test_identification():
    t0 = time.perf_counter()
    mesh = Mesh.interval(40)
    norm = NormalizationField.constant(np.eye(1), mesh.n_nodes, eps=0.1)
    truth = identify.APMFamily("iso-lognormal-matern", mesh, norm, dict(W_TRUE),
                               free=("mean", "std"))
    parts = {}

    # (a) step 2 on noise-free data from 50 experiments
    grid = identify.ObservationSetup.point_values(mesh, np.linspace(0.1, 0.9, 9)[:, None])
    data = grid.observe(identify.solve_realizations(
        mesh, truth.sample(W_TRUE, truth.sampler(50, seed=99))))
    start = identify.APMFamily("iso-lognormal-matern", mesh, norm,
                               dict(W_TRUE, mean=0.0, std=0.3), free=("mean", "std"))
    fit = identify.fit_apm_ml(start, grid.with_data(data), n_model=400, seed=1)
    rel = {k: abs(fit.w[k] - W_TRUE[k]) / abs(W_TRUE[k]) for k in truth.free}
    parts["a"] = max(rel.values()) <= 0.10

    # (b) Gaussian particular case of step 5
    chaos = klpce.ChaosBasis(1, 3)
    chain = identify.build_oapm_chain(truth, W_TRUE, 1, chaos, count=2000, seed=3)
    delta = np.zeros((chaos.size, 1))
    delta[0, 0] = 1.0
    parts["b"] = bool(np.array_equal(chain.y0, delta))

    # (c) step 6 likelihood at the truth against random unit directions
    obs = identify.ObservationSetup.point_values(mesh, [[0.25], [0.5], [0.75]],
                                                 noise_std=1e-4)
    coeff, smap = identify.build_map(mesh, chain.kl, chain.rep, norm, chaos, chain.y0,
                                     degree=6, points=8, z_scale=0.3)
    setup = obs.with_data(identify.class_data(coeff, np.zeros(2), obs, 20000, seed=11))
    like = identify.MapLikelihood(smap, setup, n_model=1000)
    rng = np.random.default_rng(9)
    dirs = rng.normal(size=(20, coeff.n_param))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ll0 = like(np.zeros(coeff.n_param))
    ll_rand = np.array([like(d) for d in dirs])
    parts["c"] = bool(np.all(ll0 > ll_rand))

    # (d) step 7 posterior concentration
    prior_scale = 0.5
    post = identify.bayes_z(smap, coeff, setup, prior_scale=prior_scale, n_chains=3,
                            n_iter=2000, burn=1000, n_model=1000, seed=0)
    post_norm = float(np.linalg.norm(post.mean))
    parts["d"] = post_norm <= prior_scale / 10

    # (e) map against direct solves
    report = identify.audit(smap, coeff, count=10)
    parts["e"] = report.ok

    elapsed = time.perf_counter() - t0
    ok = all(parts.values()) and elapsed < 1800
    record("9 identification", ok,
           f"(a) w_opt {({k: round(v, 4) for k, v in fit.w.items() if k in truth.free})} "
           f"max rel err {max(rel.values()):.3f}; (b) delta {parts['b']}; "
           f"(c) ll(0) - max ll(random) {ll0 - ll_rand.max():.3g}; "
           f"(d) |E[Z]| {post_norm:.4f} (limit {prior_scale / 10}), R-hat "
           f"{np.round(post.rhat, 3).tolist()}; (e) audit max {report.errors.max():.3e} "
           f"<= {report.bound:.3e}: {report.ok}; {elapsed:.0f} s")
    assert ok


# --- 10. determinism ------------------------------------------------------------

CONFIG = """
[run]
seed = 3

[mesh]
elements = 16

[apm]
n_model = 60
maxiter = 60

[observe]
n_exp = 30

[kl]
count = 300

[map]
degree = 3
points = 5
z_scale = 0.3
validation = 10

[lowrank]
r_max = 4

[identify]
n_model = 100
iterations = 200
burn = 100
audit_count = 3
"""


def test_determinism(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(CONFIG)
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli.main(["all", "--config", str(cfg), "--out", str(out)])
        assert code == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
    same = outputs[0] == outputs[1] and len(outputs[0]) > 10
    differing = sorted(k for k in outputs[0] if outputs[0][k] != outputs[1].get(k))
    record("10 determinism", same, f"{len(outputs[0])} CSV files, differing: {differing}")
    assert same
