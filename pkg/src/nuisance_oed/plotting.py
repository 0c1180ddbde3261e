"""Static figures for the CLI reports, rendered off-screen to PNG."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(rows, path, c_alpha=1.96):
    ok = [r for r in rows if r["status"] == "ok"]
    fig, ax = plt.subplots(figsize=(6, 4))
    if ok and "design_2" in ok[0]:
        x1 = np.array([r["design_1"] for r in ok])
        x2 = np.array([r["design_2"] for r in ok])
        sc = ax.scatter(x1, x2, c=[r["eig"] for r in ok], s=180, marker="s", cmap="viridis")
        fig.colorbar(sc, ax=ax, label="EIG [nats]")
        ax.set_xlabel("electrode shift")
        ax.set_ylabel("electrode spacing")
    else:
        x = np.array([r["design_1"] for r in ok])
        y = np.array([r["eig"] for r in ok])
        err = c_alpha * np.array([r["std_err"] for r in ok])
        ax.errorbar(x, y, yerr=err, fmt="o-", ms=3, capsize=2, label="estimate")
        if ok and ok[0].get("analytic") not in (None, ""):
            ax.plot(x, [r["analytic"] for r in ok], "k--", label="closed form")
        ax.set_xlabel("design")
        ax.set_ylabel("EIG [nats]")
        ax.legend()
    return _finish(fig, path)


def plot_breakdown(rows, path, first_failures=None, c_alpha=1.96):
    fig, ax = plt.subplots(figsize=(6, 4))
    runs = sorted({r["run"] for r in rows})
    for run in runs:
        pts = [(r["nuisance_var"], r["eig"]) for r in rows if r["run"] == run and r["status"] == "ok"]
        if pts:
            x, y = zip(*pts)
            ax.plot(x, y, "-", lw=0.8, alpha=0.7)
    # approximate tolerance band: mean over runs +- c_alpha * spread across runs
    grid = sorted({r["nuisance_var"] for r in rows})
    band = []
    for v in grid:
        vals = [r["eig"] for r in rows if r["nuisance_var"] == v and r["status"] == "ok"]
        if len(vals) > 1:
            band.append((v, np.mean(vals), np.std(vals, ddof=1)))
    if band:
        x, m, s = map(np.array, zip(*band))
        ax.fill_between(x, m - c_alpha * s, m + c_alpha * s, color="0.8", alpha=0.6, lw=0)
    for v in set(first_failures or []):
        if v is not None:
            ax.axvline(v, color="r", ls=":", lw=1)
    ax.set_xscale("log")
    ax.set_xlabel("nuisance variance")
    ax.set_ylabel("EIG [nats]")
    return _finish(fig, path)


def plot_allocation(rows, path):
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 4))
    for method in sorted({r["method"] for r in rows}):
        sub = [r for r in rows if r["method"] == method and r["feasible"]]
        if not sub:
            continue
        tol = [r["tol"] for r in sub]
        a1.loglog(tol, [r["n_star"] for r in sub], "o-", ms=3, label=method)
        if sub[0]["m_star"] not in (None, ""):
            a2.loglog(tol, [r["m_star"] for r in sub], "o-", ms=3, label=method)
    a1.set_xlabel("tolerance")
    a1.set_ylabel("outer samples")
    a2.set_xlabel("tolerance")
    a2.set_ylabel("inner samples")
    a1.legend()
    a2.legend()
    return _finish(fig, path)


def plot_consistency(rows, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    tol = np.array([r["tol"] for r in rows], dtype=float)
    err = np.array([r["abs_error"] for r in rows], dtype=float)
    ax.loglog(tol, err, "o", ms=3, alpha=0.5)
    lim = np.array([tol.min(), tol.max()])
    ax.loglog(lim, lim, "k--", label="error = tolerance")
    ax.set_xlabel("tolerance")
    ax.set_ylabel("absolute error")
    ax.legend()
    return _finish(fig, path)
