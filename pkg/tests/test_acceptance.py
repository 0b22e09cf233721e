"""Acceptance gate: ten criteria at their stated tolerances.

Each test records one PASS/FAIL line; the lines are printed together at the
end of the pytest run (see ``conftest.py``).  ``python tests/test_acceptance.py``
runs the same checks without pytest's capture.
"""

import math
import time

import numpy as np
import pytest

from deuq.bayesopt import (
    Nsga2Config,
    acquisition_spec_from_training,
    bo_step,
    dominates,
    expected_improvement,
    hypervolume_2d,
    nsga2,
)
from deuq.calibration import ScalingGrid, apply_scaling, calibrate, closed_form_scale, fit_std_scaling
from deuq.data import InputSpace, make_dataset, noise_std, response_surface
from deuq.ensemble import Ensemble, EnsembleConfig, mixture, predict_batch, train_ensemble
from deuq.gpr import KernelParams, fit_fixed, gpr_predict, matern52_matrix
from deuq.metrics import dc_score, report
from deuq.nn import ProbNet, _forward_trace, backward, forward, nll_loss

RESULTS = []

# Trend runs: default architecture, shortened schedule (about 3 minutes per
# seed for 16 members on one core).  Smaller ensembles are the leading
# members of the 16, which is exactly what training them alone gives.
TREND_SEEDS = (0, 1, 2, 3, 4)
TREND_SIZES = (2, 4, 8, 16)
TREND_LEVELS = (7, 5, 5, 4, 7)
TREND_CONFIG = dict(epochs=300, batch_size=128, lr=3e-3, hidden=(64, 64, 64))


def record(number, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {name} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


# 1 -----------------------------------------------------------------------

def test_dc_decomposition():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    ordered = True
    for _ in range(1000):
        m = int(rng.integers(1, 17))
        mus = rng.normal(scale=2.0, size=m)
        s2 = rng.uniform(1e-3, 3.0, size=m)
        y = rng.normal(scale=2.0)
        d = mixture(mus[:, None], s2[:, None])
        member_dc = dc_score(mus, s2, y)
        ens_dc = dc_score(d.mu_hat[0], d.var_total[0], y)
        worst = max(worst, abs(ens_dc - (member_dc.mean() - 2.0 * np.var(mus))))
        ordered &= ens_dc <= member_dc.mean() + 1e-12
    secs = time.perf_counter() - t0
    record(1, "DC decomposition identity", worst < 1e-10 and ordered and secs < 1.0,
           f"max abs error {worst:.2e}, ensemble <= members: {ordered}, {secs:.2f} s")


# 2 -----------------------------------------------------------------------

def _fd_gradient(net, X, Y, h=1e-5):
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = nll_loss(*forward(net, X), Y)
            flat[i] = old - h
            down = nll_loss(*forward(net, X), Y)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return np.concatenate([g.ravel() for g in out])


def _near_kink(net, X, margin=1e-3):
    # central differences are not an oracle where a hidden unit sits on the kink
    _, pre = _forward_trace(net, X)
    return any(np.abs(z).min() < margin for z in pre[:-1])


def test_gradient_check():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    checked = redrawn = 0
    while checked < 200:
        hidden = tuple(int(h) for h in rng.integers(1, 9, size=rng.integers(0, 4)))
        n_in, n_out, n = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 9))
        net = ProbNet.init(n_in, n_out, hidden, seed=rng)
        X = rng.normal(size=(n, n_in))
        Y = rng.normal(size=(n, n_out))
        if _near_kink(net, X):
            redrawn += 1
            continue
        _, grads = backward(net, X, Y)
        g = np.concatenate([a.ravel() for a in grads])
        fd = _fd_gradient(net, X, Y)
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(g)))))
        checked += 1
    secs = time.perf_counter() - t0
    record(2, "NLL gradient vs central differences", worst < 1e-4 and secs < 30,
           f"max error {worst:.2e} over 200 instances ({redrawn} redrawn near a kink), {secs:.1f} s")


# 3 -----------------------------------------------------------------------

def test_calibration_oracle():
    rng = np.random.default_rng(3)
    grid = ScalingGrid()
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(50, 2000))
        mu = rng.normal(size=n)
        sigma = rng.uniform(0.05, 3.0, size=n)
        y = mu + rng.uniform(0.05, 1.3) * sigma * rng.normal(size=n)
        s_star = closed_form_scale(mu, sigma, y)[0]
        s = fit_std_scaling(mu, sigma, y, grid)[0]
        worst = max(worst, abs(math.log10(s) - math.log10(s_star)) / grid.log_step)
    secs = time.perf_counter() - t0
    record(3, "grid scale vs closed form", worst <= 1.0 and secs < 10,
           f"max distance {worst:.2f} grid steps, {secs:.2f} s")


# 4 -----------------------------------------------------------------------

def test_well_specified_model():
    # the synthetic task's own generative model, used as the predictor
    rng = np.random.default_rng(11)
    U = rng.uniform(-1.0, 1.0, size=(100_000, 5))
    mu = response_surface(U)
    sigma2 = noise_std(U, 0.02) ** 2
    Y = mu + np.sqrt(sigma2) * rng.normal(size=mu.shape)
    rep = report(mu, sigma2, Y)
    a, e = rep.auce.max(), rep.ence.max()
    record(4, "well-specified model metrics", a < 0.01 and e < 0.05,
           f"worst output AUCE {a:.4f}, ENCE {e:.4f}, N=100000")


# 5, 6, 10: trained ensembles ---------------------------------------------

@pytest.fixture(scope="module")
def trend_runs():
    runs = []
    for seed in TREND_SEEDS:
        ds = make_dataset(TREND_LEVELS, noise=0.02, seed=seed)
        X, Y = ds.part("train")
        Xv, Yv = ds.part("val")
        Xt, Yt = ds.part("test")
        cfg = EnsembleConfig(members=max(TREND_SIZES), seed=100 * seed, **TREND_CONFIG)
        t0 = time.perf_counter()
        big = train_ensemble(cfg, X, Y)
        rows = {}
        for m in TREND_SIZES:
            ens = big.subset(m)
            cal, rep = calibrate(ens, Xv, Yv)
            before = predict_batch(ens, Xt)
            after = predict_batch(cal, Xt)
            rows[m] = {
                "before": report(before.mu_hat, before.var_total, Yt).avg,
                "after": report(after.mu_hat, after.var_total, Yt).avg,
                "s": float(rep.scales.mean()),
                "ensemble": cal,
            }
        runs.append({"seed": seed, "rows": rows, "dataset": ds,
                     "seconds": time.perf_counter() - t0})
    return runs


def test_underconfidence_trend(trend_runs):
    ok_seeds = 0
    parts = []
    for run in trend_runs:
        a = [run["rows"][m]["before"]["AUCE"] for m in TREND_SIZES]
        ok_seeds += all(x <= y for x, y in zip(a, a[1:]))
        parts.append("/".join(f"{v:.3f}" for v in a))
    secs = sum(r["seconds"] for r in trend_runs)
    record(5, "AUCE non-decreasing in M", ok_seeds >= 4 and secs < 1800,
           f"{ok_seeds}/5 seeds, AUCE at M=2/4/8/16: {'; '.join(parts)}, {secs:.0f} s")


def test_calibration_efficacy(trend_runs):
    improved = True
    s_trend = True
    parts = []
    for run in trend_runs:
        rows = run["rows"]
        for m in (8, 16):
            b, a = rows[m]["before"], rows[m]["after"]
            improved &= a["AUCE"] < b["AUCE"] and a["ENCE"] < b["ENCE"]
        s = [rows[m]["s"] for m in TREND_SIZES]
        s_trend &= all(x >= y for x, y in zip(s, s[1:])) and s[0] > s[-1]
        parts.append("/".join(f"{v:.3f}" for v in s))
    record(6, "calibration improves M=8,16; mean s falls with M", improved and s_trend,
           f"AUCE and ENCE improved every seed: {improved}, mean s at M=2/4/8/16: {'; '.join(parts)}")


# 7 -----------------------------------------------------------------------

def _dense(X, y, Xq, p):
    K = matern52_matrix(X, X, p) + p.noise_var * np.eye(len(X))
    Kq = matern52_matrix(Xq, X, p)
    mean = Kq @ np.linalg.solve(K, y)
    var = p.signal_var - np.sum(Kq * np.linalg.solve(K, Kq.T).T, axis=1)
    return mean, var


def test_gpr_correctness():
    ds = make_dataset((4, 3, 3, 3, 4), noise=0.02, seed=0)
    X, Y = ds.part("train")
    p = KernelParams(1.0, 1.5, 1e-3)
    model = fit_fixed(X, Y[:, 0], p)
    Xq = np.random.default_rng(0).uniform(-1.5, 1.5, size=(3, 5))
    mu, var = gpr_predict(model, Xq, include_noise=False)
    m_or, v_or = _dense(X, Y[:, 0], Xq, p)
    err = max(np.abs(mu[:, 0] - m_or).max(), np.abs(var[:, 0] - v_or).max())

    exact = KernelParams(1.0, 1.5, 1e-12)
    v_train = gpr_predict(fit_fixed(X, Y[:, 0], exact), X, include_noise=False)[1]
    worst = float(v_train.max()) / exact.signal_var
    record(7, "GPR posterior vs dense solve", err < 1e-8 and worst < 1e-6,
           f"max deviation {err:.1e}, noise-free variance at training points {worst:.1e} x signal")


# 8 -----------------------------------------------------------------------

def test_ei_monte_carlo():
    # incumbents within three sigma of the mean, so the Monte Carlo estimate
    # is not identically zero
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        mu, sigma = rng.normal(), rng.uniform(0.1, 2.0)
        fb = mu + sigma * rng.uniform(-3.0, 3.0)
        draws = np.maximum(mu + sigma * rng.standard_normal(1_000_000) - fb, 0.0)
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        worst = max(worst, abs(expected_improvement(mu, sigma, fb) - draws.mean()) / se)
    record(8, "EI closed form vs Monte Carlo", worst < 3.0,
           f"max deviation {worst:.2f} standard errors over 50 cases")


# 9 -----------------------------------------------------------------------

def _zdt1(X):
    f1 = X[:, 0]
    g = 1.0 + 9.0 * X[:, 1:].mean(axis=1)
    return np.stack([f1, g * (1.0 - np.sqrt(f1 / g))], axis=1)


def test_nsga2_zdt1():
    ref = (1.1, 1.1)
    optimum = 0.1 + 2.0 / 3.0 + 0.1 * 1.1  # area under the true front up to ref
    t0 = time.perf_counter()
    res = nsga2(_zdt1, Nsga2Config(lower=(0.0,) * 30, upper=(1.0,) * 30, pop_size=100,
                                   generations=250, seed=0))
    secs = time.perf_counter() - t0
    hv = hypervolume_2d(res.F, ref)
    clean = not any(dominates(a, b) for a in res.F for b in res.F)
    record(9, "NSGA-II on ZDT1", abs(hv - optimum) < 0.05 and clean and secs < 120,
           f"HV {hv:.4f} vs {optimum:.4f}, {len(res)} points non-dominated: {clean}, {secs:.1f} s")


# 10 ----------------------------------------------------------------------

def test_bo_step_divergence(trend_runs):
    run = trend_runs[0]
    ds = run["dataset"]
    calibrated = run["rows"][max(TREND_SIZES)]["ensemble"]
    raw = apply_scaling(calibrated, 1.0)
    _, Y = ds.part("train")
    spec = acquisition_spec_from_training(Y, (0, 1))
    space = InputSpace()
    cfg = Nsga2Config(tuple(ds.standardize_x(np.asarray(space.lower))),
                      tuple(ds.standardize_x(np.asarray(space.upper))), seed=0)
    res = bo_step(raw, calibrated, spec, cfg)
    mx = res.max_ei()
    differ = mx["before"] != mx["after"]
    lower = all(a <= b for a, b in zip(mx["after"], mx["before"]))
    record(10, "BO step: calibrated max EI <= uncalibrated", differ and lower,
           "max EI before " + ", ".join(f"{v:.4f}" for v in mx["before"])
           + "; after " + ", ".join(f"{v:.4f}" for v in mx["after"]))


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
