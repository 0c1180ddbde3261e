"""Expected-information-gain estimators.

Every estimator evaluates one term per outer sample and averages. Outer
sample ``n`` draws all its randomness from the substream
``rng.child(code, n)``, and the outer range is cut into fixed-size blocks that
may be farmed out to worker processes. Terms are concatenated in index order,
so the result does not depend on the number of workers.
"""

from __future__ import annotations

import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import LOG_2PI, DataSet, ExperimentSpec, ForwardModel, RngStream, gaussian_columns
from .errors import MapFailure, NoConvergence, NotPD, NotSPD
from .laplace import find_map, laplace_log_pdf, laplace_precision_batch, sample_laplace
from .smallnoise import PD_TOLERANCE, correction_batch, loglik_exact_batch, loglik_tilde_batch, updated_cov_factor

BLOCK = 128
MAP_RETRIES = 3
# log of the smallest positive double: below this a plain average of exp() underflows
_LOG_TINY = np.log(np.finfo(float).tiny)

# substream codes; the small-noise and nuisance-free DLMC share one on purpose
CODE_DLMC2, CODE_DLMC, CODE_DLMCIS, CODE_MCLA = 1, 2, 3, 4


@dataclass
class EigEstimate:
    value: float
    variance_of_mean: float
    n_outer: int
    n_inner: int | tuple | None
    diagnostics: dict
    wall_time: float
    method: str = ""
    terms: np.ndarray = field(default=None, repr=False)
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def std_error(self) -> float:
        return float(np.sqrt(self.variance_of_mean))


def default_workers() -> int:
    env = os.environ.get("OED_WORKERS")
    return max(1, int(env)) if env else 1


def _as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    raise TypeError("estimators need an RngStream (or an integer seed) so that outer samples can be keyed")


def _call(task):
    kernel, payload, stream, start, stop = task
    return kernel(payload, stream, start, stop)


def _run(kernel, payload, n_outer, stream, workers, method, n_inner):
    if n_outer < 1:
        raise ValueError("need at least one outer sample")
    t0 = time.perf_counter()
    tasks = [(kernel, payload, stream, s, min(s + BLOCK, n_outer)) for s in range(0, n_outer, BLOCK)]
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(tasks) == 1:
        results = [_call(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
            results = list(ex.map(_call, tasks))
    terms = np.concatenate([r[0] for r in results])
    diag = Counter(pd_failures=0, underflow_guards=0, map_failures=0)
    for r in results:
        diag.update(r[1])
    extras = {}
    for key in results[0][2]:
        extras[key] = np.concatenate([r[2][key] for r in results])
    n = terms.size
    var = float(np.var(terms, ddof=1)) / n if n > 1 else float("inf")
    return EigEstimate(float(np.mean(terms)), var, n, n_inner, dict(diag), time.perf_counter() - t0,
                       method, terms, extras)


def _inner_stats(logw):
    """Log of the inner mean and the relative variance of the weights."""
    m = logw.size
    top = logw.max()
    if not np.isfinite(top):
        return top, 0.0, True
    w = np.exp(logw - top)
    mean = w.mean()
    rel = float(np.var(w, ddof=1) / mean ** 2) if m > 1 else 0.0
    return top + np.log(mean), rel, bool(top < _LOG_TINY)


def _abort_not_pd(theta, lam, counts):
    counts["pd_failures"] += 1
    raise NotPD(theta, lam, dict(counts))


# ---------------------------------------------------------------- two inner loops

def _kernel_dlmc2(payload, stream, start, stop):
    model, spec, m1, m2 = payload
    counts = Counter()
    out = np.empty(stop - start)
    rel1 = np.empty(stop - start)
    rel2 = np.empty(stop - start)
    prior = spec.prior
    for k, n in enumerate(range(start, stop)):
        gen = stream.child(CODE_DLMC2, n).generator()
        theta = prior.sample(gen)
        phi = spec.sample_nuisance(gen)
        g = model.eval(theta, phi)
        ybar, scatter = DataSet(gaussian_columns(gen, g, spec.noise_chol, spec.n_exp)).whitened_stats(spec)
        phis1 = spec.sample_nuisance(gen, m1)
        l1 = loglik_exact_batch(model, np.broadcast_to(theta, (m1, theta.size)), phis1, ybar, scatter, spec)
        thetas2 = prior.sample(gen, m2)
        phis2 = spec.sample_nuisance(gen, m2)
        l2 = loglik_exact_batch(model, thetas2, phis2, ybar, scatter, spec)
        a, rel1[k], u1 = _inner_stats(l1)
        b, rel2[k], u2 = _inner_stats(l2)
        counts["underflow_guards"] += int(u1) + int(u2)
        out[k] = a - b
    return out, counts, {"inner_rel_var": rel2, "inner1_rel_var": rel1}


def dlmc_two_loops(model: ForwardModel, spec: ExperimentSpec, n_outer: int, n_inner1: int, n_inner2: int, rng,
                   workers=None) -> EigEstimate:
    """Double-loop estimator with the exact likelihood and two inner loops.

    The first inner loop marginalizes the nuisance at the outer parameter, the
    second marginalizes parameter and nuisance jointly. One data set per outer
    sample is shared by both. The nuisance draw is shared by all ``N_e``
    repetitions of that data set.
    """
    if min(n_outer, n_inner1, n_inner2) < 1:
        raise ValueError("sample sizes must be positive")
    return _run(_kernel_dlmc2, (model, spec, int(n_inner1), int(n_inner2)), int(n_outer), _as_stream(rng), workers,
                "dlmc2", (int(n_inner1), int(n_inner2)))


# ------------------------------------------------------------ small-noise DLMC

def _outer_draw(model, spec, gen, counts):
    """Outer parameter and a data set from the corrected likelihood."""
    theta = spec.prior.sample(gen)
    C, eig = correction_batch(model, theta[None, :], spec)
    if eig[0, 0] <= PD_TOLERANCE:
        _abort_not_pd(theta, eig[0, 0], counts)
    g = model.eval(theta, np.zeros(model.d_phi))
    cols = gaussian_columns(gen, g, updated_cov_factor(C[0], spec), spec.n_exp)
    ybar, scatter = DataSet(cols).whitened_stats(spec)
    return theta, g, ybar, scatter


def _kernel_dlmc(payload, stream, start, stop):
    model, spec, m, correction = payload
    counts = Counter()
    out = np.empty(stop - start)
    rel = np.empty(stop - start)
    for k, n in enumerate(range(start, stop)):
        gen = stream.child(CODE_DLMC, n).generator()
        theta, g, ybar, scatter = _outer_draw(model, spec, gen, counts)
        thetas = np.vstack([theta, spec.prior.sample(gen, m)])
        g_all = np.vstack([g, model.eval_batch(thetas[1:], np.zeros((m, model.d_phi)))])
        ll, lam = loglik_tilde_batch(model, thetas, ybar, scatter, spec, g=g_all, correction=correction)
        bad = np.flatnonzero(lam <= PD_TOLERANCE)
        if bad.size:
            _abort_not_pd(thetas[bad[0]], lam[bad[0]], counts)
        lmean, rel[k], under = _inner_stats(ll[1:])
        counts["underflow_guards"] += int(under)
        out[k] = ll[0] - lmean
    return out, counts, {"inner_rel_var": rel}


def dlmc_small_noise(model: ForwardModel, spec: ExperimentSpec, n_outer: int, n_inner: int, rng,
                     workers=None) -> EigEstimate:
    """Double-loop estimator on the corrected likelihood with prior inner samples."""
    if min(n_outer, n_inner) < 1:
        raise ValueError("sample sizes must be positive")
    return _run(_kernel_dlmc, (model, spec, int(n_inner), True), int(n_outer), _as_stream(rng), workers,
                "dlmc", int(n_inner))


def dlmc_nuisance_free(model: ForwardModel, spec: ExperimentSpec, n_outer: int, n_inner: int, rng,
                       workers=None) -> EigEstimate:
    """Same draws as :func:`dlmc_small_noise` but with the nuisance ignored in the likelihood."""
    if min(n_outer, n_inner) < 1:
        raise ValueError("sample sizes must be positive")
    return _run(_kernel_dlmc, (model, spec, int(n_inner), False), int(n_outer), _as_stream(rng), workers,
                "dlmc-nuisance-free", int(n_inner))


# --------------------------------------------------------------------- DLMCIS

def _map_with_retries(model, spec, stats, theta0, stream, n, counts):
    start = theta0
    for attempt in range(MAP_RETRIES + 1):
        try:
            return find_map(model, stats, spec, start)
        except (NoConvergence, NotPD, NotSPD):
            counts["map_failures"] += 1
            if attempt == MAP_RETRIES:
                break
            gen = stream.child(CODE_DLMCIS, n, 1, attempt).generator()
            start = spec.prior.project(theta0 + 0.1 * spec.prior.scale() * gen.standard_normal(theta0.size))
    raise MapFailure(f"MAP search failed {MAP_RETRIES + 1} times for outer sample {n}")


def _kernel_dlmcis(payload, stream, start, stop):
    model, spec, m = payload
    counts = Counter()
    out = np.empty(stop - start)
    rel = np.empty(stop - start)
    lw_var = np.empty(stop - start)
    for k, n in enumerate(range(start, stop)):
        gen = stream.child(CODE_DLMCIS, n).generator()
        theta, g, ybar, scatter = _outer_draw(model, spec, gen, counts)
        post = _map_with_retries(model, spec, (ybar, scatter), theta, stream, n, counts)
        inner = sample_laplace(post, gen, m)
        thetas = np.vstack([theta, inner])
        g_all = np.vstack([g, model.eval_batch(inner, np.zeros((m, model.d_phi)))])
        ll, lam = loglik_tilde_batch(model, thetas, ybar, scatter, spec, g=g_all)
        bad = np.flatnonzero(lam <= PD_TOLERANCE)
        if bad.size:
            _abort_not_pd(thetas[bad[0]], lam[bad[0]], counts)
        with np.errstate(divide="ignore"):
            logw = ll[1:] + np.atleast_1d(spec.prior.logpdf(inner)) - laplace_log_pdf(post, inner)
        finite = logw[np.isfinite(logw)]
        lw_var[k] = float(np.var(finite)) if finite.size > 1 else 0.0
        lmean, rel[k], under = _inner_stats(logw)
        counts["underflow_guards"] += int(under)
        out[k] = ll[0] - lmean
    return out, counts, {"inner_rel_var": rel, "inner_log_weight_var": lw_var}


def dlmcis(model: ForwardModel, spec: ExperimentSpec, n_outer: int, n_inner: int, rng, workers=None) -> EigEstimate:
    """Double-loop estimator with inner samples from the Laplace posterior of each outer data set.

    Each outer sample runs one MAP search started at its own parameter draw. A
    failed search is retried from up to three perturbed starts before the run
    is aborted with :class:`MapFailure`.
    """
    if min(n_outer, n_inner) < 1:
        raise ValueError("sample sizes must be positive")
    return _run(_kernel_dlmcis, (model, spec, int(n_inner)), int(n_outer), _as_stream(rng), workers,
                "dlmcis", int(n_inner))


# ----------------------------------------------------------------------- MCLA

def _kernel_mcla(payload, stream, start, stop):
    model, spec, use_map = payload
    counts = Counter()
    d = spec.d_theta
    if use_map:
        out = np.empty(stop - start)
        for k, n in enumerate(range(start, stop)):
            gen = stream.child(CODE_MCLA, n).generator()
            theta, _, ybar, scatter = _outer_draw(model, spec, gen, counts)
            post = _map_with_retries(model, spec, (ybar, scatter), theta, stream, n, counts)
            out[k] = (-0.5 * (d * LOG_2PI + post.log_det_cov) - 0.5 * d
                      - spec.prior.logpdf(post.map))
        return out, counts, {}
    thetas = np.stack([spec.prior.sample(stream.child(CODE_MCLA, n).generator()) for n in range(start, stop)])
    C, eig = correction_batch(model, thetas, spec)
    bad = np.flatnonzero(eig[:, 0] <= PD_TOLERANCE)
    if bad.size:
        counts["pd_failures"] += int(bad.size)
        raise NotPD(thetas[bad[0]], eig[bad[0], 0], dict(counts))
    prec = laplace_precision_batch(model, thetas, spec, C=C)
    sign, logdet = np.linalg.slogdet(prec)
    if np.any(sign <= 0):
        raise NotSPD("Laplace precision")
    out = 0.5 * logdet - 0.5 * d * LOG_2PI - 0.5 * d - np.atleast_1d(spec.prior.logpdf(thetas))
    return out, counts, {}


def mcla(model: ForwardModel, spec: ExperimentSpec, n_outer: int, rng, workers=None, use_map=False) -> EigEstimate:
    """Single-loop Laplace estimator.

    By default the posterior covariance for outer draw ``theta`` is the
    Gauss-Newton one evaluated at ``theta`` itself, standing in for the MAP of
    data generated there. ``use_map=True`` simulates that data and runs the MAP
    search instead, which is much slower and meant for validation.
    """
    if n_outer < 1:
        raise ValueError("n_outer must be positive")
    return _run(_kernel_mcla, (model, spec, bool(use_map)), int(n_outer), _as_stream(rng), workers,
                "mcla-map" if use_map else "mcla", None)


ESTIMATORS = {
    "dlmc": dlmc_small_noise,
    "dlmc-nuisance-free": dlmc_nuisance_free,
    "dlmcis": dlmcis,
    "mcla": mcla,
    "dlmc2": dlmc_two_loops,
}
