"""Batch command line: synthetic data, identification and forward solves.

Commands run in pipeline order and exchange artifacts through the output
directory::

    synth           exp_data.csv, truth_field.csv, truth.rset
    fit-apm         w_opt.csv, fit_trace.csv
    build-kl        kl.klb, y0.stfl, eta.csv, kl_spectrum.csv
    build-map       map.smap, map_info.csv
    identify-ml     z_ml.csv, y_ml.stfl, ml_trace.csv, audit.csv
    identify-bayes  map_post.smap, posterior_samples.csv, posterior_summary.csv,
                    audit_post.csv
    solve           solution_stats.csv, norms.csv, norm_chain.csv,
                    lowrank_history.csv
    report          report_*.csv

``manifest.ini`` records the resolved configuration, the seed, package
versions, per-stage checksums and headline results.  A stage whose inputs
and configuration are unchanged since its last run is skipped.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 invariant violation or numerical failure.
"""

import argparse
import configparser
import contextlib
import hashlib
import logging
import math
import os
import platform
import sys
import warnings
import zlib
from pathlib import Path

import numpy as np
import scipy

from . import __version__, config, fileio, identify, klpce, lowrank, sgalerkin
from .errors import ConfigError, DependencyError, InvariantViolation, SpdFieldError
from .kernels import BACKEND
from .mesh import Mesh
from .repclass import NormalizationField

log = logging.getLogger("spdfield.cli")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_INVARIANT = 0, 2, 3, 4
THREADS_ENV = "SPDFIELD_THREADS"
MANIFEST = "manifest.ini"


# --- shared setup -------------------------------------------------------------

def substream(seed, name):
    """Integer seed of the named substream of the master seed."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode("ascii")),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


class Context:
    """Objects every stage derives from the configuration."""

    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = Path(out)
        self.mesh = self._mesh()
        if cfg.get("field", "n") != self.mesh.dim:
            raise ConfigError(f"field.n = {cfg.get('field', 'n')} but the elliptic problem "
                              f"needs n equal to the mesh dimension {self.mesh.dim}")
        n = cfg.get("field", "n")
        self.norm = NormalizationField.constant(cfg.get("field", "lower") * np.eye(n),
                                                self.mesh.n_nodes, cfg.get("field", "eps"))
        self.load = self._load()
        obs = cfg["observe"]
        points = np.array(obs["points"], dtype=np.float64)
        if points.shape[1] != self.mesh.dim:
            raise ConfigError(f"observe.points have {points.shape[1]} coordinates, the mesh "
                              f"has dimension {self.mesh.dim}")
        self.setup = identify.ObservationSetup.point_values(self.mesh, points,
                                                            obs["noise_std"])
        chaos = cfg["chaos"]
        self.chaos = klpce.ChaosBasis(chaos["n_germ"], chaos["degree"], chaos["n_terms"])
        if self.chaos.size < cfg.get("kl", "m"):
            raise ConfigError("chaos has fewer functions than kl.m")

    def _mesh(self):
        m = self.cfg["mesh"]
        if m["kind"] == "interval":
            return Mesh.interval(m["elements"])
        if m["kind"] == "square":
            return Mesh.unit_square(m["elements"])
        try:
            return Mesh.from_text(m["path"])
        except OSError as exc:
            raise ConfigError(f"cannot read mesh {m['path']}: {exc}") from None

    def _load(self):
        spec = self.cfg["load"]
        if spec["kind"] == "constant":
            return sgalerkin.Load("constant", spec["value"][0])
        if spec["kind"] == "point":
            return sgalerkin.Load("point", np.array(spec["value"]), np.array(spec["points"]))
        try:
            vals = fileio.read_matrix_csv(spec["path"])
        except OSError as exc:
            raise ConfigError(f"cannot read nodal load {spec['path']}: {exc}") from None
        return sgalerkin.Load("nodal", vals[:, -1])

    def family(self, section="apm", w=None):
        apm = self.cfg["apm"]
        src = self.cfg[section]
        keys = identify._PARAMS[apm["family"]]
        params = {k: src[k] for k in keys} if w is None else dict(w)
        free = tuple(k for k in apm["free"] if k in keys)
        if len(free) != len(apm["free"]):
            bad = sorted(set(apm["free"]) - set(keys))
            raise ConfigError(f"apm.free names parameters {bad} unknown to {apm['family']}")
        return identify.APMFamily(apm["family"], self.mesh, self.norm, params, free)

    def seed(self, name):
        return substream(self.cfg.seed, name)

    def path(self, name):
        return self.out / name


# --- manifest -----------------------------------------------------------------

def _file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """INI record of a run directory; written with sorted keys."""

    def __init__(self, path):
        self.path = Path(path)
        self.data = configparser.ConfigParser(interpolation=None)
        self.data.optionxform = str
        if self.path.exists():
            self.data.read(self.path, encoding="utf-8")

    def section(self, name):
        if not self.data.has_section(name):
            self.data.add_section(name)
        return self.data[name]

    def set(self, section, key, value):
        self.section(section)[key] = str(value)

    def get(self, section, key, default=None):
        if self.data.has_section(section):
            return self.data[section].get(key, default)
        return default

    def record_config(self, cfg):
        for name in list(self.data.sections()):
            if name.startswith("config."):
                self.data.remove_section(name)
        for line_section, keys in config.SCHEMA.items():
            for key in keys:
                self.set(f"config.{line_section}", key,
                         config._show(cfg.get(line_section, key)))
        run = self.section("run")
        run["config_hash"] = cfg.digest()
        run["seed"] = str(cfg.seed)
        run["version.spdfield"] = __version__
        run["version.numpy"] = np.__version__
        run["version.scipy"] = scipy.__version__
        run["version.python"] = platform.python_version()
        run["backend"] = BACKEND
        run["likelihood.step6_noise"] = ("reuses the step-2 Gaussian noise model, "
                                         f"std {cfg.get('observe', 'noise_std')!r}")

    def save(self):
        ordered = configparser.ConfigParser(interpolation=None)
        ordered.optionxform = str
        for name in sorted(self.data.sections()):
            ordered.add_section(name)
            for key in sorted(self.data[name]):
                ordered[name][key] = self.data[name][key]
        text = []
        for name in ordered.sections():
            text.append(f"[{name}]")
            text.extend(f"{k} = {v}" for k, v in ordered[name].items())
            text.append("")
        fileio.atomic_write(self.path, "\n".join(text))


# --- stages -------------------------------------------------------------------

class Stage:
    def __init__(self, name, func, inputs, outputs, sections):
        self.name = name
        self.func = func
        self.inputs = inputs
        self.outputs = outputs
        self.sections = sections

    def checksum(self, ctx):
        h = hashlib.sha256()
        h.update(self.name.encode())
        h.update(str(ctx.cfg.seed).encode())
        h.update(ctx.cfg.section_digest(*self.sections).encode())
        for name in self.inputs:
            h.update(name.encode())
            h.update(_file_hash(ctx.path(name)).encode())
        return h.hexdigest()


PRODUCER = {}


def _require(ctx, stage):
    for name in stage.inputs:
        if not ctx.path(name).exists():
            raise DependencyError(f"{name} is missing in {ctx.out}; run "
                                  f"'{PRODUCER.get(name, '?')}' first")


def _w_from_csv(path):
    with open(path, encoding="utf-8") as fh:
        rows = [line.strip().split(",") for line in fh.readlines()[1:] if line.strip()]
    return {k: float(v) for k, v in rows}


def _oapm(ctx):
    w_opt = _w_from_csv(ctx.path("w_opt.csv"))
    family = ctx.family(w=w_opt)
    return family, w_opt


def _coefficient(ctx, base, vary_z=True):
    family, w_opt = _oapm(ctx)
    kl = fileio.load_kl(ctx.path("kl.klb"), ctx.mesh)
    return sgalerkin.FieldCoefficient(ctx.mesh, kl, family.representation(w_opt), ctx.norm,
                                      ctx.chaos, base, vary_z=vary_z)


def _data_setup(ctx):
    data = fileio.read_matrix_csv(ctx.path("exp_data.csv"))
    if data.shape[1] != ctx.setup.m_obs:
        raise ConfigError(f"exp_data.csv has {data.shape[1]} channels but observe.points "
                          f"defines {ctx.setup.m_obs}")
    return ctx.setup.with_data(data)


def stage_synth(ctx, man):
    """Synthetic experiments from the APM at the configured truth."""
    family = ctx.family("truth")
    n_exp = ctx.cfg.get("observe", "n_exp")
    k_real = identify.apm_sample(family, family.w, n_exp, ctx.seed("synth"))
    u = identify.solve_realizations(ctx.mesh, k_real.matrices(), ctx.load)
    data = ctx.setup.observe(u, np.random.default_rng(ctx.seed("synth-noise")))
    fileio.write_matrix_csv(ctx.path("exp_data.csv"), data, prefix="u")
    fileio.write_field_csv(ctx.path("truth_field.csv"), ctx.mesh, k_real.matrices()[0])
    fileio.save_realizations(ctx.path("truth.rset"), k_real)
    man.set("results", "synth.n_exp", n_exp)


def stage_fit(ctx, man):
    family = ctx.family()
    setup = _data_setup(ctx)
    apm = ctx.cfg["apm"]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = identify.fit_apm_ml(family, setup, n_model=apm["n_model"], method=apm["method"],
                                  seed=ctx.seed("fit-apm"), maxiter=apm["maxiter"],
                                  load=ctx.load)
    for w in caught:
        log.warning("fit-apm: %s", w.message)
    names = sorted(fit.w)
    fileio.write_csv(ctx.path("w_opt.csv"), ["name", "value"],
                     [[k, float(fit.w[k])] for k in names])
    fileio.write_csv(ctx.path("fit_trace.csv"), ["eval"] + list(family.free) + ["loglik"],
                     [[i] + [float(w[k]) for k in family.free] + [float(ll)]
                      for i, (w, ll) in enumerate(fit.trace)])
    for k in names:
        man.set("results", f"w_opt.{k}", repr(float(fit.w[k])))
    man.set("results", "w_opt.loglik", repr(fit.loglik))
    man.set("results", "w_opt.converged", fit.success)


def stage_kl(ctx, man):
    family, w_opt = _oapm(ctx)
    kl_cfg = ctx.cfg["kl"]
    chain = identify.build_oapm_chain(family, w_opt, kl_cfg["m"], ctx.chaos,
                                      count=kl_cfg["count"], seed=ctx.seed("build-kl"))
    fileio.save_kl(ctx.path("kl.klb"), chain.kl)
    fileio.save_stiefel(ctx.path("y0.stfl"), chain.y0)
    fileio.write_matrix_csv(ctx.path("eta.csv"), chain.eta, prefix="eta")
    spec = chain.kl.spectrum
    fileio.write_csv(ctx.path("kl_spectrum.csv"), ["mode", "eigenvalue"],
                     [[i + 1, float(v)] for i, v in enumerate(spec)])
    man.set("results", "kl.m", chain.kl.m)


def _build(ctx, base, seed_name):
    family, w_opt = _oapm(ctx)
    kl = fileio.load_kl(ctx.path("kl.klb"), ctx.mesh)
    mp = ctx.cfg["map"]
    return identify.build_map(ctx.mesh, kl, family.representation(w_opt), ctx.norm, ctx.chaos,
                              base, degree=mp["degree"], points=mp["points"],
                              z_scale=mp["z_scale"], load=ctx.load, degree_z=mp["degree_z"],
                              n_validation=mp["validation"], seed=ctx.seed(seed_name))


def _write_map_info(path, smap):
    rows = [["energy_error", smap.info["energy_error"]],
            ["recorded_error", smap.info["recorded_error"]],
            ["pcg_iterations", float(smap.info.get("iterations", math.nan))],
            ["basis_size", float(smap.basis.size)]]
    fileio.write_csv(path, ["quantity", "value"], rows)


def stage_map(ctx, man):
    y0 = fileio.load_stiefel(ctx.path("y0.stfl"))
    _, smap = _build(ctx, y0, "build-map")
    fileio.save_map(ctx.path("map.smap"), smap)
    _write_map_info(ctx.path("map_info.csv"), smap)
    man.set("results", "map.recorded_error", repr(smap.info["recorded_error"]))


def _write_audit(path, report):
    rows = [[i, float(e), float(report.bound)] for i, e in enumerate(report.errors)]
    fileio.write_csv(path, ["sample", "relative_error", "bound"], rows)


def _check_audit(report, name):
    if not report.ok:
        raise InvariantViolation(f"{name}: map error {report.errors.max():.3g} exceeds the "
                                 f"recorded bound {report.bound:.3g}")


def stage_ml(ctx, man):
    y0 = fileio.load_stiefel(ctx.path("y0.stfl"))
    coeff = _coefficient(ctx, y0)
    smap = fileio.load_map(ctx.path("map.smap"), ctx.mesh)
    _, rows = _read_rows(ctx.path("map_info.csv"))
    smap.info.update({r[0]: float(r[1]) for r in rows})
    setup = _data_setup(ctx)
    idc = ctx.cfg["identify"]
    res = identify.ml_z(smap, coeff, setup, n_model=idc["n_model"], seed=ctx.seed("ml"),
                        method=idc["method"], bandwidth_scale=idc["bandwidth_scale"])
    fileio.write_csv(ctx.path("z_ml.csv"), ["index", "z"],
                     [[i, float(v)] for i, v in enumerate(res.z)])
    fileio.save_stiefel(ctx.path("y_ml.stfl"), res.y)
    fileio.write_csv(ctx.path("ml_trace.csv"),
                     ["eval"] + [f"z{i}" for i in range(len(res.z))] + ["loglik"],
                     [[i] + [float(v) for v in z] + [float(ll)]
                      for i, (z, ll) in enumerate(res.trace)])
    smap.info["hull"] = _hull(ctx, coeff)
    report = identify.audit(smap, coeff, idc["audit_count"], ctx.seed("audit"), load=ctx.load)
    _write_audit(ctx.path("audit.csv"), report)
    man.set("results", "z_ml.norm", repr(float(np.linalg.norm(res.z))))
    man.set("results", "z_ml.loglik", repr(res.loglik))
    man.set("results", "audit.ok", report.ok)
    _check_audit(report, "identify-ml audit")


def _hull(ctx, coeff):
    mp = ctx.cfg["map"]
    quad = sgalerkin.make_quadrature(coeff.n_germ, coeff.n_param, points=mp["points"],
                                     z_scale=mp["z_scale"])
    return (np.hstack([quad.y.min(axis=0), quad.z.min(axis=0)]),
            np.hstack([quad.y.max(axis=0), quad.z.max(axis=0)]))


def stage_bayes(ctx, man):
    y_check = fileio.load_stiefel(ctx.path("y_ml.stfl"))
    coeff, smap = _build(ctx, y_check, "identify-bayes-map")
    fileio.save_map(ctx.path("map_post.smap"), smap)
    setup = _data_setup(ctx)
    idc = ctx.cfg["identify"]
    post = identify.bayes_z(smap, coeff, setup, prior_scale=idc["prior_scale"],
                            n_chains=idc["chains"], n_iter=idc["iterations"], burn=idc["burn"],
                            n_model=idc["n_model"], seed=ctx.seed("bayes"),
                            method=idc["method"], bandwidth_scale=idc["bandwidth_scale"])
    d = post.chains.shape[-1]
    rows = [[c, i] + [float(v) for v in post.chains[c, i]]
            for c in range(post.chains.shape[0]) for i in range(post.chains.shape[1])]
    fileio.write_csv(ctx.path("posterior_samples.csv"),
                     ["chain", "iteration"] + [f"z{k}" for k in range(d)], rows)
    samples = post.samples
    summary = [[k, float(samples[:, k].mean()), float(samples[:, k].std(ddof=1)),
                float(post.rhat[k])] for k in range(d)]
    fileio.write_csv(ctx.path("posterior_summary.csv"), ["index", "mean", "std", "rhat"],
                     summary)
    fileio.write_csv(ctx.path("posterior_chains.csv"), ["chain", "acceptance", "step"],
                     [[c, float(a), float(s)] for c, (a, s)
                      in enumerate(zip(post.acceptance, post.step))])
    if idc["restarts"] > 0:
        kl = identify.iterate_restart(coeff.kl, ctx.chaos, post, idc["restart_count"],
                                      idc["restarts"], ctx.seed("restart"))
        fileio.save_kl(ctx.path("kl_post.klb"), kl)
        fileio.write_csv(ctx.path("kl_post_spectrum.csv"), ["mode", "eigenvalue"],
                         [[i + 1, float(v)] for i, v in enumerate(kl.spectrum)])
    report = identify.audit(smap, coeff, idc["audit_count"], ctx.seed("audit-post"),
                            load=ctx.load)
    _write_audit(ctx.path("audit_post.csv"), report)
    man.set("results", "posterior.mean_norm", repr(float(np.linalg.norm(post.mean))))
    man.set("results", "posterior.max_rhat", repr(float(np.nanmax(post.rhat))))
    man.set("results", "audit_post.ok", report.ok)
    _check_audit(report, "identify-bayes audit")


def stage_solve(ctx, man):
    """Forward stochastic solve with the identified chaos coefficients."""
    name = "y_ml.stfl" if ctx.path("y_ml.stfl").exists() else "y0.stfl"
    y = fileio.load_stiefel(ctx.path(name))
    coeff = _coefficient(ctx, y, vary_z=False)
    mp = ctx.cfg["map"]
    quad = sgalerkin.make_quadrature(coeff.n_germ, 0, points=mp["points"])
    basis = sgalerkin.ProductBasis(coeff.n_germ, 0, mp["degree"])
    prob = sgalerkin.StochasticProblem(ctx.mesh, coeff, ctx.load, quad, basis)
    full = prob.solve()
    values = prob.map_values(full)
    w = quad.weights
    mean = w @ values
    std = np.sqrt(np.clip(w @ (values - mean) ** 2, 0.0, None))
    fileio.write_csv(ctx.path("solution_stats.csv"),
                     ["node"] + [f"x{k}" for k in range(ctx.mesh.dim)] + ["mean", "std"],
                     [[i] + [float(c) for c in ctx.mesh.nodes[i]] + [float(mean[i]),
                                                                     float(std[i])]
                      for i in range(ctx.mesh.n_nodes)])
    ref = prob.reference_solutions()
    err = prob.energy_norms(ref - values)
    norms = prob.energy_norms(values)
    fileio.write_csv(ctx.path("norms.csv"), ["norm", "solution", "error"],
                     [[k, norms[k], err[k]] for k in sorted(norms)])
    chain = prob.norm_chain(norms)
    fileio.write_csv(ctx.path("norm_chain.csv"), ["pair", "lhs", "rhs", "holds"],
                     [[i, float(a), float(b), int(a <= b * (1 + 1e-10))]
                      for i, (a, b) in enumerate(chain)])
    lr = ctx.cfg["lowrank"]
    if lr["enabled"]:
        gmap = lowrank.greedy_solve(prob, lr["r_max"], tol=lr["tol"],
                                    max_sweeps=lr["max_sweeps"], seed=ctx.seed("lowrank"),
                                    reference=values)
        st = gmap.info["state"]
        rows = [[k, float(st.j_history[k]), st.error_history[k]["X"],
                 st.error_history[k]["C"]] for k in range(len(st.j_history))]
        fileio.write_csv(ctx.path("lowrank_history.csv"),
                         ["rank", "J", "error_X", "error_C"], rows)
        man.set("results", "lowrank.rank", st.rank)
        man.set("results", "lowrank.stop", gmap.info["stop"])
    man.set("results", "solve.mean_max", repr(float(mean.max())))


REPORT_SECTIONS = (
    ("spectrum", ("kl_spectrum.csv",)),
    ("fit", ("w_opt.csv",)),
    ("errors", ("map_info.csv",)),
    ("norms", ("norms.csv", "norm_chain.csv")),
    ("lowrank", ("lowrank_history.csv",)),
    ("posterior", ("posterior_summary.csv",)),
)


def _read_rows(path):
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    return lines[0], lines[1:]


def write_report(out):
    """Summary tables of a run directory.

    Sections whose inputs are absent are listed as ``missing`` in
    ``report_index.csv`` and get no table.
    """
    out = Path(out)
    index = []
    for section, needs in REPORT_SECTIONS:
        present = all((out / n).exists() for n in needs)
        index.append([section, "present" if present else "missing", ";".join(needs)])
        if not present:
            continue
        target = out / f"report_{section}.csv"
        if section == "spectrum":
            _, rows = _read_rows(out / "kl_spectrum.csv")
            vals = np.array([float(r[1]) for r in rows])
            total = vals.sum() if len(vals) else 1.0
            fileio.write_csv(target, ["mode", "eigenvalue", "relative", "cumulative_fraction"],
                             [[i + 1, float(v), float(v / vals[0]), float(c / total)]
                              for i, (v, c) in enumerate(zip(vals, np.cumsum(vals)))])
        elif section == "norms":
            head, rows = _read_rows(out / "norms.csv")
            _, chain = _read_rows(out / "norm_chain.csv")
            table = [["norm", r[0], r[1]] for r in rows]
            table += [["ordering", f"pair{r[0]}", r[3]] for r in chain]
            fileio.write_csv(target, ["kind", "name", "value"], table)
        else:
            head, rows = _read_rows(out / needs[0])
            fileio.write_csv(target, head, rows)
    fileio.write_csv(out / "report_index.csv", ["section", "status", "sources"], index)
    return index


def stage_report(ctx, man):
    index = write_report(ctx.out)
    for section, status, _ in index:
        man.set("report", section, status)


STAGES = [
    Stage("synth", stage_synth, [], ["exp_data.csv", "truth_field.csv", "truth.rset"],
          ("mesh", "load", "field", "apm", "truth", "observe")),
    Stage("fit-apm", stage_fit, ["exp_data.csv"], ["w_opt.csv", "fit_trace.csv"],
          ("mesh", "load", "field", "apm", "observe")),
    Stage("build-kl", stage_kl, ["w_opt.csv"],
          ["kl.klb", "y0.stfl", "eta.csv", "kl_spectrum.csv"],
          ("mesh", "field", "apm", "kl", "chaos")),
    Stage("build-map", stage_map, ["w_opt.csv", "kl.klb", "y0.stfl"],
          ["map.smap", "map_info.csv"], ("mesh", "load", "field", "apm", "chaos", "map")),
    Stage("identify-ml", stage_ml, ["w_opt.csv", "kl.klb", "y0.stfl", "map.smap",
                                    "map_info.csv", "exp_data.csv"],
          ["z_ml.csv", "y_ml.stfl", "ml_trace.csv", "audit.csv"],
          ("mesh", "load", "field", "apm", "chaos", "map", "observe", "identify")),
    Stage("identify-bayes", stage_bayes, ["w_opt.csv", "kl.klb", "y_ml.stfl", "exp_data.csv"],
          ["map_post.smap", "posterior_samples.csv", "posterior_summary.csv",
           "posterior_chains.csv", "audit_post.csv"],
          ("mesh", "load", "field", "apm", "chaos", "map", "observe", "identify")),
    Stage("solve", stage_solve, ["w_opt.csv", "kl.klb", "y0.stfl"],
          ["solution_stats.csv", "norms.csv", "norm_chain.csv"],
          ("mesh", "load", "field", "apm", "chaos", "map", "lowrank")),
    Stage("report", stage_report, [], ["report_index.csv"], ()),
]
STAGE_NAMES = [s.name for s in STAGES]
for _stage in STAGES:
    for _name in _stage.outputs:
        PRODUCER[_name] = _stage.name
PRODUCER["kl_post.klb"] = "identify-bayes"


def run_stage(stage, ctx, man, force=False):
    """Run one stage unless its checksum and outputs are unchanged."""
    _require(ctx, stage)
    checksum = stage.checksum(ctx)
    key = f"stage.{stage.name}"
    if not force and stage.name != "report" and man.get(key, "checksum") == checksum:
        recorded = man.get(key, "outputs", "")
        hashes = dict(item.split(":") for item in recorded.split(";") if item)
        if hashes and all(ctx.path(n).exists() and _file_hash(ctx.path(n)) == h
                          for n, h in hashes.items()):
            log.info("%s: up to date, skipped", stage.name)
            return False
    log.info("%s: running", stage.name)
    stage.func(ctx, man)
    produced = [n for n in sorted(os.listdir(ctx.out))
                if n in stage.outputs or PRODUCER.get(n) == stage.name]
    man.set(key, "checksum", checksum)
    man.set(key, "outputs", ";".join(f"{n}:{_file_hash(ctx.path(n))}" for n in produced))
    man.save()
    return True


@contextlib.contextmanager
def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        yield
        return
    try:
        count = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("%s is set but threadpoolctl is not installed; ignoring", THREADS_ENV)
        yield
        return
    with threadpool_limits(limits=count):
        yield


def run(command, config_path=None, out="run", seed=None, force=False):
    """Run ``command`` (a stage name or ``all``) and return the exit code."""
    cfg = config.load(config_path) if config_path else config.defaults()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    Path(out).mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, out)
    man = Manifest(ctx.path(MANIFEST))
    if man.get("run", "config_hash") not in (None, cfg.digest()):
        log.info("configuration changed since the last run in %s", out)
    man.record_config(cfg)
    man.save()
    names = STAGE_NAMES if command == "all" else [command]
    with _thread_limit():
        for name in names:
            run_stage(STAGES[STAGE_NAMES.index(name)], ctx, man, force)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spdfield",
        description="Synthetic identification of lower-bounded matrix-valued random fields.")
    parser.add_argument("command", nargs="?", choices=STAGE_NAMES + ["all"],
                        help="stage to run (same as --stage)")
    parser.add_argument("--stage", choices=STAGE_NAMES + ["all"], help="stage to run")
    parser.add_argument("--config", help="configuration file (sectioned key = value)")
    parser.add_argument("--out", default="run", help="output directory (default: run)")
    parser.add_argument("--seed", type=int, help="master seed, overrides run.seed")
    parser.add_argument("--force", action="store_true", help="ignore checksum skips")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.stage or args.command
    if args.stage and args.command and args.stage != args.command:
        print(f"error: command {args.command!r} conflicts with --stage {args.stage!r}",
              file=sys.stderr)
        return EXIT_CONFIG
    if command is None:
        parser.print_usage(sys.stderr)
        print("error: give a command or --stage", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run(command, args.config, args.out, args.seed, args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except SpdFieldError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
