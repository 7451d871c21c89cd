"""Acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL`` line (shown in the terminal summary,
or inline with ``-s``). The desk experiments behind criteria 6-8 share one
set of fits: 3 seeds x {strong, weak} x {full, p_nocoherent}.

Run alone with ``pytest tests/test_acceptance.py``.
"""
import math
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, random_tree
from oracles import crps_quad, interval_quad, kl_quad, random_cases

from hiercast.datasets import generate_synthetic, load_panel, parse_panel_csv, preprocess
from hiercast.experiments import DESK_CONFIG, desk_run, hfmv_curve, median
from hiercast.gaussian import (
    GaussianDist,
    GaussianForecastSet,
    aggregate_children,
    coherency_loss,
    crps_gaussian,
    interval_score,
    jsd_gaussian,
    kl_gaussian,
)
from hiercast.hierarchy import parse_hierarchy_csv
from hiercast.model import ModelConfig, build_correlation_set
from hiercast.refinement import Refinement, refine_all, refine_mean
from hiercast.state import ModelState, make_generator
from hiercast.training import batch_terms, fit, total_loss

SEEDS = (0, 1, 2)


def record(number: int, ok: bool, detail: str, seconds: float, limit: float | None = None) -> None:
    timing = f"{seconds:.1f}s" + (f" (limit {limit:.0f}s)" if limit else "")
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail} [{timing}]"
    ACCEPTANCE_LINES.append(line)
    print(line)


# ----------------------------------------------------------------------------
# 1-5: closed forms, identities, gradients, contracts, sampling law


def test_c01_gaussian_oracles():
    t0 = time.perf_counter()
    worst = dict(kl=0.0, jsd=0.0, crps=0.0, interval=0.0, identity=0.0)
    for m1, s1, m2, s2, y, L in random_cases(100, seed=1):
        p, q = GaussianDist(m1, s1), GaussianDist(m2, s2)
        kq, kr = kl_quad(m1, s1, m2, s2), kl_quad(m2, s2, m1, s1)
        worst["kl"] = max(worst["kl"], abs(kl_gaussian(p, q) - kq))
        worst["jsd"] = max(worst["jsd"], abs(jsd_gaussian(p, q) - 0.5 * (kq + kr)))
        worst["crps"] = max(worst["crps"], abs(crps_gaussian(p, y) - crps_quad(m1, s1, y)))
        worst["interval"] = max(worst["interval"], abs(interval_score(p, y, L) - interval_quad(m1, s1, y, L)))
        closed = 0.5 * (kl_gaussian(p, q) + kl_gaussian(q, p))
        worst["identity"] = max(worst["identity"], abs(jsd_gaussian(p, q) - closed))
    dt = time.perf_counter() - t0
    ok = all(worst[k] < 1e-5 for k in ("kl", "jsd", "crps", "interval")) and worst["identity"] < 1e-12 and dt < 30
    record(1, ok, "max |err| " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()), dt, 30)
    assert ok


def _coherent_forecasts(h, rng):
    mu, sigma = np.zeros(h.n_nodes), np.zeros(h.n_nodes)
    for i in reversed(h.topological_order()):
        if h.is_leaf(i):
            mu[i - 1], sigma[i - 1] = rng.normal(0, 2), rng.uniform(0.2, 2)
        else:
            kids = h.children[i]
            d = aggregate_children([GaussianDist(mu[j - 1], sigma[j - 1]) for j in kids], [h.weight(i, j) for j in kids])
            mu[i - 1], sigma[i - 1] = d.mu, d.sigma
    return mu, sigma


def test_c02_coherency_identity_and_minimum():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_identity, worst_min, min_increase, trees = 0.0, 0.0, math.inf, 0
    for _ in range(40):
        h = random_tree(rng, int(rng.integers(2, 51)))
        trees += 1
        mu, sigma = rng.normal(0, 2, h.n_nodes), rng.uniform(0.2, 2, h.n_nodes)
        loss = float(coherency_loss(h, GaussianForecastSet(mu, sigma)))
        direct = 0.0
        for i in h.internal_nodes:
            kids = h.children[i]
            agg = aggregate_children([GaussianDist(mu[j - 1], sigma[j - 1]) for j in kids], [h.weight(i, j) for j in kids])
            direct += 2 * jsd_gaussian(GaussianDist(mu[i - 1], sigma[i - 1]), agg) + 1
        worst_identity = max(worst_identity, abs(loss - direct) / max(1.0, abs(direct)))

        cm, cs = _coherent_forecasts(h, rng)
        base = float(coherency_loss(h, GaussianForecastSet(cm, cs)))
        n_int = len(h.internal_nodes)
        worst_min = max(worst_min, abs(base - n_int))
        for k in rng.choice(h.n_nodes, size=min(5, h.n_nodes), replace=False):
            for which in ("mu", "sigma"):
                m2, s2 = cm.copy(), cs.copy()
                (m2 if which == "mu" else s2)[k] += 1e-3 * rng.choice([-1.0, 1.0])
                min_increase = min(min_increase, float(coherency_loss(h, GaussianForecastSet(m2, s2))) - base)
    dt = time.perf_counter() - t0
    ok = worst_identity < 1e-10 and worst_min < 1e-10 and min_increase > 0 and dt < 10
    record(
        2, ok,
        f"{trees} trees: identity rel err {worst_identity:.1e}, |min - n_internal| {worst_min:.1e}, "
        f"smallest perturbation increase {min_increase:.1e}", dt, 10,
    )
    assert ok


def _fd_check(f, tensors, eps=1e-6, max_entries=12):
    """Relative error ||fd - analytic|| / ||analytic|| per tensor, worst case."""
    for t in tensors:
        t.grad = None
    f().backward()
    worst = 0.0
    with torch.no_grad():
        for t in tensors:
            flat, g = t.view(-1), t.grad.reshape(-1).clone()
            idx = np.linspace(0, flat.numel() - 1, min(max_entries, flat.numel())).astype(int)
            fd = torch.zeros(len(idx), dtype=torch.float64)
            for n, k in enumerate(idx):
                old = flat[k].item()
                flat[k] = old + eps
                up = f().item()
                flat[k] = old - eps
                dn = f().item()
                flat[k] = old
                fd[n] = (up - dn) / (2 * eps)
            an = g[idx]
            worst = max(worst, (fd - an).norm().item() / max(an.norm().item(), 1e-12))
    return worst


def test_c03_gradient_checks():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    rng = np.random.default_rng(3)
    h = random_tree(rng, 9)
    mu = torch.tensor(rng.normal(size=9), requires_grad=True)
    sigma = torch.tensor(rng.uniform(0.3, 2, size=9), requires_grad=True)
    e_coh = _fd_check(lambda: coherency_loss(h, GaussianForecastSet(mu, sigma)), [mu, sigma])

    ref = Refinement(5).double()
    with torch.no_grad():
        for p in ref.parameters():
            p.copy_(torch.randn(p.shape, dtype=torch.float64))
    mh = torch.tensor(rng.normal(size=5), requires_grad=True)
    sh = torch.tensor(rng.uniform(0.3, 2, size=5), requires_grad=True)
    wts = torch.tensor(rng.normal(size=10))

    def refined():
        out, _ = refine_all(GaussianForecastSet(mh, sh), ref)
        return (torch.cat([out.mu, out.sigma]) * wts).sum()

    e_ref = _fd_check(refined, [mh, sh, *ref.parameters()])

    # tiny end-to-end objective with frozen noise (generator reseeded per call)
    h3, panel = generate_synthetic(n_leaves=2, depth=2, T=40, seed=3)
    state = ModelState(ModelConfig(n_nodes=3, d_u=4, hidden=6), seed=3)
    from hiercast.datasets import make_windows

    w = make_windows(panel, 1, min_len=8, max_len=8)
    batch = w.batch(np.arange(0, w.n_windows, 5)[:6])
    state.refresh_reference(panel.filled_values()[:, -8:])

    def objective():
        l1, fc, _ = batch_terms(state, batch, make_generator(0, "fd"), refined=True)
        return total_loss(l1, coherency_loss(h3, fc).mean(), 1.0)

    e_e2e = _fd_check(objective, list(state.parameters()), max_entries=6)
    dt = time.perf_counter() - t0
    ok = e_coh < 1e-4 and e_ref < 1e-4 and e_e2e < 1e-3 and dt < 120
    record(3, ok, f"rel err coherency={e_coh:.1e}, refine_all={e_ref:.1e}, end-to-end={e_e2e:.1e}", dt, 120)
    assert ok


def test_c04_refinement_contracts():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    bounds_ok = True
    for trial in range(200):
        c = float(rng.uniform(0.5, 8))
        ref = Refinement(6, c).double()
        with torch.no_grad():
            for p in ref.parameters():
                p.copy_(torch.tensor(rng.normal(0, 2, size=p.shape)))
        sh = torch.tensor(rng.uniform(0.05, 3, size=6))
        mu, sigma, gamma = ref(torch.tensor(rng.normal(size=6)), sh)
        bounds_ok &= bool(((gamma > 0) & (gamma < 1)).all() and (sigma > 0).all() and (sigma < c * sh).all())

    ident = Refinement(4, c=2.0).double()
    with torch.no_grad():
        ident.w_hat.fill_(20.0)
        ident.w.copy_(torch.randn(4, 4, dtype=torch.float64))
    raw = GaussianForecastSet(torch.tensor(rng.normal(size=4)), torch.tensor(rng.uniform(0.1, 2, size=4)))
    out, _ = refine_all(raw, ident)
    ident_err = max((out.mu - raw.mu).abs().max().item(), (out.sigma - raw.sigma).abs().max().item())

    hand = Refinement(3).double()
    with torch.no_grad():
        hand.w.fill_(1.0)
    mu1 = refine_mean([1.0, 2.0, 3.0], 1, hand)[0].item()
    dt = time.perf_counter() - t0
    ok = bounds_ok and ident_err < 1e-6 and mu1 == 3.5
    record(4, ok, f"bounds hold in 200 random configs={bounds_ok}, identity err {ident_err:.1e}, hand example mu1={mu1}", dt)
    assert ok


def test_c05_sampling_law():
    t0 = time.perf_counter()
    trials, dists = 10_000, (0.0, 1.0, 2.0)
    reference = torch.zeros(3, 3, dtype=torch.float64)
    for j, d in enumerate(dists):
        reference[j, j] = d
    mask = build_correlation_set(torch.zeros(trials, 3, dtype=torch.float64), reference, 1.0, torch.Generator().manual_seed(5))
    freq = mask.mean(0).numpy()
    parts, ok = [], True
    for f, d in zip(freq, dists):
        p = math.exp(-(d**2))
        band = 3 * math.sqrt(p * (1 - p) / trials)
        ok &= abs(f - p) <= band
        parts.append(f"d={d:g}: {f:.4f} vs {p:.4f}±{band:.4f}")
    record(5, bool(ok), "; ".join(parts), time.perf_counter() - t0)
    assert ok


# ----------------------------------------------------------------------------
# 6-8: desk experiments


@pytest.fixture(scope="session")
def desk():
    t0 = time.perf_counter()
    runs = {
        (c, v, s): desk_run(c, s, v)
        for c in ("strong", "weak")
        for v in ("full", "p_nocoherent")
        for s in SEEDS
    }
    return runs, time.perf_counter() - t0


def test_c06_coherency_benefit(desk):
    runs, fit_seconds = desk
    weak = {v: [runs["weak", v, s].crps for s in SEEDS] for v in ("full", "p_nocoherent")}
    strong = {v: [runs["strong", v, s].coherency for s in SEEDS] for v in ("full", "p_nocoherent")}
    crps_ok = median(weak["full"]) <= median(weak["p_nocoherent"])
    l2_ok = all(a < b for a, b in zip(strong["full"], strong["p_nocoherent"]))
    ok = crps_ok and l2_ok and fit_seconds < 900
    record(
        6, ok,
        f"weak median CRPS full={median(weak['full']):.4f} vs p_nocoherent={median(weak['p_nocoherent']):.4f}; "
        f"strong L2 full={[round(x, 3) for x in strong['full']]} vs p_nocoherent={[round(x, 3) for x in strong['p_nocoherent']]}",
        fit_seconds, 900,
    )
    assert ok


def test_c07_gamma_ordering(desk):
    runs, _ = desk
    t0 = time.perf_counter()
    pairs = [(runs["strong", "full", s].gamma_mean, runs["weak", "full", s].gamma_mean) for s in SEEDS]
    wins = sum(a < b for a, b in pairs)
    ok = wins >= 2
    record(
        7, ok, f"strong<weak mean gamma in {wins}/3 seed pairs: "
        + ", ".join(f"{a:.3f} vs {b:.3f}" for a, b in pairs), time.perf_counter() - t0,
    )
    assert ok


def test_c08_missing_value_robustness(desk):
    runs, _ = desk
    t0 = time.perf_counter()
    ks = (0, 5, 10)
    curves = {v: [hfmv_curve(runs["strong", v, s], ks=ks) for s in SEEDS] for v in ("full", "p_nocoherent")}
    med = {v: [median(c[i].pct_degradation for c in curves[v]) for i in range(len(ks))] for v in curves}
    dt = time.perf_counter() - t0
    better = med["full"][-1] < med["p_nocoherent"][-1]
    monotone = all(all(a <= b for a, b in zip(m, m[1:])) for m in med.values())
    ok = better and monotone and dt < 900
    record(
        8, ok,
        "median % degradation at k=0,5,10: "
        + "; ".join(f"{v}={[round(x, 2) for x in m]}" for v, m in med.items()), dt, 900,
    )
    assert ok


# ----------------------------------------------------------------------------
# 9-10: determinism, round trips and the command line


def test_c09_determinism_and_round_trips(tmp_path):
    from hiercast.evaluation import default_halfwidth, evaluate_origins
    from hiercast.state import load_checkpoint, save_checkpoint

    t0 = time.perf_counter()
    cfg = DESK_CONFIG.with_(max_epochs=3, pretrain_epochs=2, seed=9)
    h, panel = generate_synthetic(n_leaves=4, depth=2, T=80, seed=9)
    checks = {}
    a, b = fit(panel, h, cfg), fit(panel, h, cfg)
    checks["history"] = a.history.to_csv() == b.history.to_csv()
    L = default_halfwidth(a.panel, 1, a.train_end)
    origins = range(a.train_end - 1, a.panel.T - 1)
    ra = evaluate_origins(a.state, a.panel, a.hierarchy, 1, origins, 50, 9, L)
    rb = evaluate_origins(b.state, b.panel, b.hierarchy, 1, origins, 50, 9, L)
    checks["metrics"] = ra.to_csv() == rb.to_csv()

    p1, p2 = tmp_path / "a.pt", tmp_path / "b.pt"
    save_checkpoint(p1, a.state, a.hierarchy, cfg.to_dict(), a.panel.offset, a.panel.scale, a.train_end, cfg.variant, cfg.preprocess)
    ck = load_checkpoint(p1)
    save_checkpoint(p2, ck.state, ck.hierarchy, ck.config, ck.offset, ck.scale, ck.train_end, ck.variant, ck.preprocess)
    checks["checkpoint"] = p1.read_bytes() == p2.read_bytes() and all(
        torch.equal(x, y) for x, y in zip(a.state.state_dict().values(), ck.state.state_dict().values())
    )
    h_text = h.to_csv()
    h2 = parse_hierarchy_csv(h_text)
    checks["hierarchy"] = h2 == h and h2.to_csv() == h_text
    keep = np.broadcast_to(np.arange(80) % 7 != 0, panel.values.shape)
    masked = panel.__class__(np.where(keep, panel.values, np.nan), keep, panel.node_names)
    p_text = masked.to_csv()
    p2_ = parse_panel_csv(p_text, h)
    checks["panel"] = p2_.to_csv() == p_text and np.array_equal(p2_.values[p2_.mask], masked.values[masked.mask])
    ok = all(checks.values())
    record(9, ok, ", ".join(f"{k}={'identical' if v else 'DIFFERENT'}" for k, v in checks.items()), time.perf_counter() - t0)
    assert ok


def test_c10_cli_contract(tmp_path):
    import csv
    import json

    from hiercast.cli import main
    from hiercast.config import dump_config

    t0 = time.perf_counter()
    run = lambda *argv: main([str(x) for x in argv])
    cfg = tmp_path / "config.yaml"
    dump_config(DESK_CONFIG.with_(max_epochs=3, pretrain_epochs=2), cfg)
    data = tmp_path / "data"
    codes = {}
    codes["synth"] = run("synth", "--leaves", 8, "--depth", 3, "--length", 200, "--consistency", "strong", "--seed", 0, "--out-dir", data)
    common = ["--panel", data / "panel.csv", "--hierarchy", data / "hierarchy.csv"]
    summaries = []
    for v in ("full", "p_nocoherent"):
        codes[f"train {v}"] = run("train", *common, "--config", cfg, "--variant", v, "--out-dir", tmp_path / v)
        codes[f"eval {v}"] = run("eval", "--checkpoint", tmp_path / v / "checkpoint.pt", *common, "--samples", 50, "--out-dir", tmp_path / v)
        summaries.append(tmp_path / v / "summary.json")
    codes["hfmv"] = run("hfmv", "--checkpoint", tmp_path / "full" / "checkpoint.pt", *common, "--k-grid", "0,2,5,10",
                        "--iterations", 2, "--samples", 30, "--out-dir", tmp_path / "hfmv")
    codes["report"] = run("report", "--runs", *summaries, "--out-dir", tmp_path / "report")
    expected = {k: 0 for k in codes}
    codes["usage: missing --config"] = run("train", *common, "--out-dir", tmp_path)
    codes["usage: empty --k-grid"] = run("hfmv", "--checkpoint", tmp_path / "full" / "checkpoint.pt", *common, "--k-grid", "", "--out-dir", tmp_path)
    codes["usage: empty --runs"] = run("report", "--runs", "--out-dir", tmp_path)
    codes["runtime: tau mismatch"] = run("eval", "--checkpoint", tmp_path / "full" / "checkpoint.pt", *common, "--tau", 3, "--out-dir", tmp_path)
    bad = tmp_path / "bad.json"
    s = json.loads(summaries[0].read_text())
    s["schema_version"] = 99
    bad.write_text(json.dumps(s))
    codes["runtime: schema mismatch"] = run("report", "--runs", summaries[0], bad, "--out-dir", tmp_path)
    expected.update({k: (2 if k.startswith("usage") else 1) for k in codes if ":" in k})

    def header(path):
        with open(path, newline="") as fh:
            return next(csv.reader(fh))

    schemas = {
        "history": header(tmp_path / "full" / "history.csv") == ["phase", "epoch", "l1", "l2", "total", "val_crps"],
        "metrics": header(tmp_path / "full" / "metrics.csv") == ["scope", "level_or_node", "crps", "interval_score"],
        "hfmv": header(tmp_path / "hfmv" / "hfmv.csv") == ["k", "crps", "pct_degradation"],
        "report": header(tmp_path / "report" / "report.csv")[:3] == ["variant", "dataset", "seed"],
    }
    bad_codes = {k: v for k, v in codes.items() if v != expected[k]}
    ok = not bad_codes and all(schemas.values())
    detail = f"{len(codes)} exit codes as expected" if not bad_codes else f"unexpected exit codes {bad_codes}"
    detail += f"; CSV schemas {'ok' if all(schemas.values()) else schemas}"
    record(10, ok, detail, time.perf_counter() - t0)
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
