"""Acceptance criteria 1-12, each recorded as one PASS/FAIL line in the summary."""

import dataclasses
import filecmp
import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from ifrx import adapt, arnoldi, influence, pipeline
from ifrx.arnoldi import RitzBasis, arnoldi_iterate, ihvp_apply, ritz_eigenpairs, start_vector
from ifrx.linkgen import LinkConfig, generate_dataset, per_sample_ber
from ifrx.oracles import ArrayData, LogisticModel, QuadraticModel
from ifrx.receiver import SmoothBERLoss, ToyRx, bit_signs

HERE = Path(__file__).parent


def _spd(rng, n, lo=0.1, hi=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.geomspace(lo, hi, n)) @ Q.T


def _logistic(n=200, P=20, seed=0, l2=0.05):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, P))
    w = rng.standard_normal(P)
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ w))).astype(float)
    train = ArrayData(X, y)
    test = ArrayData(rng.standard_normal((10, P)), (rng.random(10) < 0.5).astype(float))
    model = LogisticModel(P, l2=l2)
    theta = model.fit(train)
    res = arnoldi_iterate(lambda v: model.hvp("bce", theta, train, v), P, start_vector(P, seed))
    return model, theta, train, test, ritz_eigenpairs(res, P)


def _top(pipe):
    return pipe.targets()[0].eval_index


def _runs(pipe, strategy, target=None):
    ft = json.loads((pipe.dir / "finetune" / "finetune.json").read_text())
    return [r for r in ft["runs"] if r["strategy"] == strategy and (target is None or r["targets"] == [target])]


# ------------------------------------------------------------------- 1-5: oracles


def test_criterion_01_hvp(criterion):
    t0 = time.perf_counter()
    model = ToyRx()
    ds = generate_dataset(LinkConfig(), 0, 8)
    rng = np.random.default_rng(0)
    theta = model.init_params(1)
    eps = 1e-4
    errs = []
    for _ in range(10):
        v = rng.standard_normal(model.n_params)
        v /= np.linalg.norm(v)
        hv = model.hvp("bce", theta, ds, v)
        fd = (model.grad("bce", theta + eps * v, ds) - model.grad("bce", theta - eps * v, ds)) / (2 * eps)
        errs.append(np.linalg.norm(hv - fd) / np.linalg.norm(fd))
    A = _spd(rng, 12)
    q = QuadraticModel(A)
    data = ArrayData(rng.standard_normal((5, 12)), np.zeros(5))
    exact = max(np.abs(q.hvp("bce", rng.standard_normal(12), data, v) - A @ v).max() / np.abs(A @ v).max()
                for v in rng.standard_normal((10, 12)))
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 1e-3 and exact < 1e-10 and elapsed < 60
    criterion(1, ok, f"max FD rel err {max(errs):.2e}, quadratic err {exact:.1e}, {elapsed:.1f}s")


def test_criterion_02_arnoldi_exactness(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_val = worst_ihvp = 0.0
    for n in (8, 24, 48, 64):
        H = _spd(rng, n)
        res = arnoldi_iterate(lambda v: H @ v, n, start_vector(n, n))
        basis = ritz_eigenpairs(res, n)
        exact = np.sort(np.linalg.eigvalsh(H))[::-1]
        assert basis.k == n
        worst_val = max(worst_val, np.abs(np.sort(basis.eigenvalues)[::-1] - exact).max())
        for v in rng.standard_normal((5, n)):
            x = np.linalg.solve(H, v)
            worst_ihvp = max(worst_ihvp, np.linalg.norm(ihvp_apply(basis, v) - x) / np.linalg.norm(x))
    elapsed = time.perf_counter() - t0
    ok = worst_val < 1e-8 and worst_ihvp < 1e-6 and elapsed < 60
    criterion(2, ok, f"max Ritz err {worst_val:.1e}, max IHVP rel err {worst_ihvp:.1e}, {elapsed:.1f}s")


def test_criterion_03_influence_oracle(criterion):
    t0 = time.perf_counter()
    model, theta, train, test, basis = _logistic()
    H = model.hessian("bce", theta, train)
    Hi = np.linalg.inv(H)
    G = model.per_sample_grads("bce", theta, train)
    proj = influence.project_gradients(G, basis)
    s = np.einsum("ni,ij,nj->n", G, Hi, G)
    norm = np.linalg.norm(G @ Hi, axis=1)
    worst, rho = 0.0, 1.0
    for variant in influence.VARIANTS:
        loss_eval = "smooth-ber" if variant == "clif" else "bce"
        T = model.per_sample_grads(loss_eval, theta, test)
        classic = -(T @ Hi @ G.T)
        dense = {"classic": classic, "clif": classic, "theta_rel": classic / norm,
                 "ell_rel": classic / np.sqrt(s), "newfluence": classic / (1 + s)}[variant]
        got = influence.score_matrix(basis.project(T), proj, basis, variant)
        worst = max(worst, np.max(np.abs(got - dense) / np.abs(dense)))
        rho = min(rho, min(spearmanr(got[j], dense[j]).statistic for j in range(len(T))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and rho >= 0.99 and elapsed < 120
    criterion(3, ok, f"max rel err {worst:.1e} over 5 variants, min Spearman {rho:.4f}, {elapsed:.1f}s")


def test_criterion_04_leave_one_out_signs(criterion):
    t0 = time.perf_counter()
    model, theta, train, test, basis = _logistic(n=150, P=10, seed=3)
    n = len(train)
    G = model.per_sample_grads("bce", theta, train)
    T = model.per_sample_grads("bce", theta, test)
    proj = influence.project_gradients(G, basis)
    scores = influence.score_matrix(basis.project(T), proj, basis, "classic")
    base = model.per_sample_loss("bce", theta, test)
    agree = total = 0
    for i in range(n):
        keep = np.delete(np.arange(n), i)
        th = model.fit(train.subset(keep), params=theta)
        # removing sample i is upweighting by -1/n: the loss moves by about -I/n
        delta = model.per_sample_loss("bce", th, test) - base
        agree += int(np.sum(np.sign(scores[:, i]) == np.sign(-delta)))
        total += len(delta)
    frac = agree / total
    elapsed = time.perf_counter() - t0
    criterion(4, frac >= 0.9 and elapsed < 300, f"sign agreement {frac:.3f} over {total} pairs, {elapsed:.1f}s")


def test_criterion_05_scale_invariance(criterion):
    model, theta, train, test, basis = _logistic(seed=5)
    G = model.per_sample_grads("bce", theta, train)[:50]
    T = basis.project(model.per_sample_grads("bce", theta, test))
    ref = {v: influence.score_matrix(T, influence.project_gradients(G, basis), basis, v)
           for v in ("theta_rel", "ell_rel")}
    worst = 0.0
    for c in (1e-3, 0.37, 2.0, 1e3):
        proj = influence.project_gradients(c * G, basis)
        for v, r in ref.items():
            worst = max(worst, np.max(np.abs(influence.score_matrix(T, proj, basis, v) - r) / np.abs(r)))
    # a training gradient orthogonal to the basis span has s = 0 exactly
    t = model.grad("bce", theta, test.subset([0]))
    partial = basis.truncate(5)
    flat = influence.Projected(np.zeros((1, partial.k)), np.zeros(1), np.zeros(1))
    same = np.array_equal(influence.score_matrix(partial.project(t), flat, partial, "newfluence"),
                          influence.score_matrix(partial.project(t), flat, partial, "classic"))
    unit = RitzBasis([2.0], [np.eye(basis.n_params)[0]], 1)
    g0 = np.r_[0.0, np.ones(basis.n_params - 1)]
    eq = influence.influence_newfluence(t, g0, unit) == influence.influence_classic(t, g0, unit)
    ok = worst < 1e-10 and same and eq
    criterion(5, ok, f"max rel change under rescaling {worst:.1e}; newfluence == classic at s = 0: {same and eq}")


# ------------------------------------------------------------------- 6-10: trained receiver


@pytest.mark.slow
def test_criterion_06_receiver_sanity(acceptance_run, criterion):
    table = json.loads((acceptance_run.dir / "evaluate" / "eval_table.json").read_text())
    n_eval = len(table["instances"])
    high = [b for b in table["bins"] if b["snr_lo"] >= 5.0]
    beats_ls = [b["model"] < b["ls_lmmse"] for b in high]
    above_genie = [b["model"] >= b["genie_lmmse"] for b in table["bins"]]
    hist = json.loads((acceptance_run.dir / "train" / "history.json").read_text())
    ok = n_eval >= 5000 and all(beats_ls) and all(above_genie)
    criterion(6, ok, f"model < LS in {sum(beats_ls)}/{len(high)} bins at >= 5 dB, model >= genie in "
                     f"{sum(above_genie)}/{len(above_genie)} bins, {n_eval} eval samples, "
                     f"final train loss {hist['epoch_loss'][-1]:.4f}")


@pytest.mark.slow
def test_smooth_ber_tracks_hard_ber(acceptance_run):
    _, eval_set = acceptance_run.datasets()
    model, theta = acceptance_run.model()
    batch = eval_set.subset(np.arange(500))
    llr = model.forward_llr(theta, batch)
    smooth = SmoothBERLoss(50.0).value(llr, bit_signs(batch.bits)).mean()
    hard = per_sample_ber(llr, batch.bits).mean()
    assert abs(smooth - hard) < 0.01


@pytest.mark.slow
def test_criterion_07_beneficial_vs_random(acceptance_run, criterion):
    top = _top(acceptance_run)
    inf = _runs(acceptance_run, "influence", top)
    rnd = _runs(acceptance_run, "random", top)
    assert len(inf) == len(rnd) == 10
    ber_inf = np.mean([r["report"]["target_ber"][3][0] for r in inf])
    ber_rnd = np.mean([r["report"]["target_ber"][3][0] for r in rnd])
    r_gap = np.mean([r["report"]["r_gap"][0] for r in inf])
    before = inf[0]["report"]["target_ber"][0][0]
    ok = ber_inf <= ber_rnd and r_gap > 0
    criterion(7, ok, f"target {top}: BER {before:.4f} -> influence {ber_inf:.4f} vs random {ber_rnd:.4f} "
                     f"at step 3, mean R_gap {r_gap:.1f}%")


@pytest.mark.slow
def test_criterion_08_harmful_ascent(acceptance_run, criterion):
    top = _top(acceptance_run)
    runs = _runs(acceptance_run, "harmful", top)
    traj = np.array([[b[0] for b in r["report"]["target_ber"]] for r in runs])
    mean = traj.mean(axis=0)
    every = np.array([r["report"]["target_ber"] for r in _runs(acceptance_run, "harmful")]).mean(axis=(0, 2))
    ok = len(runs) == 10 and mean[3] > mean[0]
    criterion(8, ok, f"target {top}: mean BER by step {np.round(mean, 4).tolist()} "
                     f"(all targets: {every[0]:.4f} -> {every[3]:.4f})")


@pytest.mark.slow
def test_criterion_09_second_order_identity(acceptance_run, criterion):
    rng = np.random.default_rng(9)
    A = _spd(rng, 6, 0.5, 5.0)
    q = QuadraticModel(A)
    X = rng.standard_normal((30, 6))
    train = ArrayData(X, np.zeros(30))
    test = ArrayData(rng.standard_normal((1, 6)) * 2, np.zeros(1))
    theta = X.mean(axis=0)
    lam, V = np.linalg.eigh(A)
    basis = RitzBasis(lam[::-1], V[:, ::-1].T, 6)
    eta = 1e-3
    worst = 0.0
    for i in range(10):
        g = q.grad("bce", theta, train.subset([i]))
        pair = adapt.InfluencePair(0, i, influence.influence_classic(q.grad("bce", theta, test), g, basis),
                                   np.linalg.solve(A, g))
        cfg = adapt.FineTuneConfig(learning_rate=eta, steps=1, mode="second_order_aligned")
        _, rep = adapt.finetune_second_order(q, theta, [pair], basis, cfg, adapt.Tracker(q, test))
        measured = rep.target_loss[1][0] - rep.target_loss[0][0]
        worst = max(worst, abs(measured - rep.predicted_loss_change) / abs(rep.predicted_loss_change))

    top = _top(acceptance_run)
    runs = _runs(acceptance_run, "second_order", top)
    right = sum(np.sign(r["report"]["target_loss"][1][0] - r["report"]["target_loss"][0][0])
                == np.sign(r["report"]["predicted_loss_change"]) for r in runs)
    ok = worst < 0.05 and len(runs) == 10 and right >= 8
    criterion(9, ok, f"quadratic oracle max rel err {worst:.2e}; receiver target {top}: predicted sign in "
                     f"{right}/{len(runs)} seeds")


@pytest.mark.slow
def test_criterion_10_strategies_converge(acceptance_run, criterion):
    ctx = acceptance_run.finetune_context()
    top = _top(acceptance_run)
    steps = 15
    final = {}
    for selection in ("influence", "random"):
        final[selection] = np.array([
            ctx.first_order([top], "first_order_descent", selection, "beneficial", seed, steps)[0].target_ber[-1][0]
            for seed in acceptance_run.cfg.experiment.seeds])
    diff = abs(final["influence"].mean() - final["random"].mean())
    sigma = np.sqrt(0.5 * (final["influence"].var() + final["random"].var()))
    criterion(10, diff < sigma, f"target {top} step {steps}: influence {final['influence'].mean():.4f} vs random "
                                f"{final['random'].mean():.4f}, |diff| {diff:.4f} vs sigma {sigma:.4f}")


# ------------------------------------------------------------------- 11-12


def test_criterion_11_elbow(criterion):
    rng = np.random.default_rng(11)
    found = {}
    for k_star in (1, 2, 4, 6, 8, 10):
        head = np.linspace(10.0, 5.0, k_star)
        tail = 1e-3 * np.geomspace(1.0, 0.8, 40)
        lam = np.r_[head, tail]
        probes = rng.standard_normal((64, lam.size))
        found[k_star] = truncation = arnoldi.truncation_diagnostic(lam, probes)["elbow"]
    # the same spectrum embedded in parameter space through a basis
    P = 60
    Q, _ = np.linalg.qr(rng.standard_normal((P, P)))
    lam = np.r_[np.linspace(10.0, 5.0, 4), 1e-3 * np.geomspace(1.0, 0.8, 40)]
    basis = RitzBasis(lam, Q[:, : lam.size].T, lam.size)
    in_space = arnoldi.truncation_diagnostic(lam, rng.standard_normal((64, P)), basis)["elbow"]
    ok = all(k == v for k, v in found.items()) and in_space == 4
    criterion(11, ok, f"planted -> reported elbow {found}, parameter-space probes: 4 -> {in_space}")


@pytest.mark.slow
def test_criterion_12_smoke_determinism(tmp_path, criterion):
    cfg = pipeline.ExperimentConfig.load(HERE / "smoke.ini")
    times, dirs = [], []
    for name in ("a", "b"):
        t0 = time.perf_counter()
        d = pipeline.run(cfg, tmp_path / name)
        pipeline.emit_reports(d)
        times.append(time.perf_counter() - t0)
        dirs.append(d / "reports")
    names = sorted(p.name for p in dirs[0].iterdir())
    match, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], names, shallow=False)
    ok = not mismatch and not errors and len(match) == len(names) > 0 and max(times) < 600
    criterion(12, ok, f"{len(match)}/{len(names)} report files byte-identical, runs took "
                      f"{times[0]:.0f}s and {times[1]:.0f}s")
