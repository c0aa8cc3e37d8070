"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary. Run on its own with ``pytest tests/test_acceptance.py``.
"""

import json
import logging
import os
import subprocess
import sys
import time
import zlib
from contextlib import contextmanager

import numpy as np
import pytest

from reluconf.attacks import PgdConfig, objective_values, pgd, pgd_adversarial_sample, pgd_max_confidence
from reluconf.data import load_digit_benchmark
from reluconf.geometry import (INTERIOR_SLACK, local_affine_map, patterns, ray_stabilization,
                               region_halfspaces)
from reluconf.metrics import auroc, fpr_at_tpr_with_threshold, mmc, roc_curve, trapezoid_area
from reluconf.models import RbfNetwork, confidence, forward, mlp
from reluconf.noise import NoiseConfig, generate_noise_batch
from reluconf.probes import (alpha_scaling_search, rbf_uniform_radius, summarize_alpha,
                             verify_rbf_uniform_batch)
from reluconf.training import TrainConfig, train

from helpers import ACCEPTANCE, gradcheck, network_gradcheck, random_dense_net
from test_metrics import fpr_enumerate
from test_tensor import GRAD_CASES, N_CASES

log = logging.getLogger("acceptance")

BETA_MAX = 2.0 ** 40
N_TRAIN, N_TEST = 10000, 700
EPOCHS, LR_DROPS = 10, (5, 7, 9)


@contextmanager
def criterion(n, title):
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        ACCEPTANCE[n] = (False, title, f"{info['detail']} [{type(exc).__name__}: {str(exc).splitlines()[0][:200]}]")
        raise
    ACCEPTANCE[n] = (True, title, info["detail"])


# ---------------------------------------------------------------------------
# random dense nets shared by the geometry criteria
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def dense_nets():
    rng = np.random.default_rng(2024)
    nets = []
    for _ in range(20):
        depth = int(rng.integers(2, 5))
        widths = [int(w) for w in rng.integers(4, 65, size=depth)]
        d = int(rng.integers(2, 17))
        nets.append(random_dense_net(rng, d, widths, int(rng.integers(2, 11))))
    return nets


def test_01_affine_map_equivalence(dense_nets):
    with criterion(1, "local affine map reproduces forward") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        worst = 0.0
        for net in dense_nets:
            X = rng.normal(size=(100, net.input_dim)) * rng.uniform(0.1, 10)
            out = forward(net, X).data
            for x, f in zip(X, out):
                m = local_affine_map(net, x)
                worst = max(worst, float(np.max(np.abs(f - (m.V @ x + m.a)) / (1 + np.abs(f)))))
        elapsed = time.perf_counter() - t0
        info["detail"] = f"max rel err {worst:.2e} (< 1e-8), {elapsed:.2f}s (< 10s)"
        assert worst < 1e-8
        assert elapsed < 10


def _interior_and_exterior(region, anchor, rng, n):
    """Points on random chords from the anchor, split by where they land."""
    inside, outside = [], []
    scale = 1.0 + np.abs(anchor).max()
    while len(inside) < n or len(outside) < n:
        u = rng.normal(size=(4 * n, anchor.size))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        ext = np.array([region.ray_extent(anchor, v) for v in u])
        ext = np.minimum(ext, 10 * scale)
        t_in = rng.uniform(0, 1, len(u)) * ext
        t_out = ext * (1 + rng.uniform(0.01, 2, len(u))) + 1e-4
        pin = anchor + t_in[:, None] * u
        pout = anchor + t_out[:, None] * u
        inside.extend(pin[region.strictly_inside(pin)])
        outside.extend(pout[region.slacks(pout).min(axis=1) < -INTERIOR_SLACK])
    return np.array(inside[:n]), np.array(outside[:n])


def test_02_region_consistency(dense_nets):
    with criterion(2, "region membership matches activation pattern") as info:
        rng = np.random.default_rng(2)
        bad_in = bad_out = 0
        for net in dense_nets:
            anchor = rng.normal(size=net.input_dim)
            region = region_halfspaces(net, anchor)
            ref = patterns(net, anchor[None])[0]
            inside, outside = _interior_and_exterior(region, anchor, rng, 1000)
            bad_in += int(np.sum(np.any(patterns(net, inside) != ref, axis=1)))
            bad_out += int(np.sum(np.all(patterns(net, outside) == ref, axis=1)))
        info["detail"] = f"{bad_in} interior and {bad_out} exterior violations over {len(dense_nets)} nets"
        assert bad_in == 0 and bad_out == 0


def test_03_ray_stabilization(dense_nets):
    with criterion(3, "rays enter a final linear region") as info:
        rng = np.random.default_rng(3)
        failures, total = [], 0
        for i, net in enumerate(dense_nets):
            for j in range(200):
                u = rng.normal(size=net.input_dim)
                total += 1
                res = ray_stabilization(net, u, beta_max=BETA_MAX, n_sweep=32)
                if not res.stabilized:
                    failures.append((i, j))
                    log.warning("net %d ray %d did not stabilize within %g", i, j, BETA_MAX)
                    continue
                # independent re-check of the sweep
                betas = np.geomspace(res.alpha_star, BETA_MAX, 32)
                pats = patterns(net, betas[:, None] * u[None])
                if not (pats == pats[0]).all():
                    failures.append((i, j))
                    log.warning("net %d ray %d changes pattern after alpha*=%g", i, j, res.alpha_star)
        rate = len(failures) / total
        info["detail"] = f"{len(failures)}/{total} failures ({rate:.2%} < 1%) {failures[:10]}"
        assert rate < 0.01


# ---------------------------------------------------------------------------
# digit models shared by the training criteria
# ---------------------------------------------------------------------------


class DigitRun:
    def __init__(self):
        self.train_set, self.test_set, self.source = load_digit_benchmark(N_TRAIN, N_TEST, seed=0)
        self.models, self.logs, self.seconds = {}, {}, {}
        self.noise = generate_noise_batch(NoiseConfig(seed=777), self.train_set.images, 2000)

    def model(self, mode):
        if mode not in self.models:
            net = mlp((1, 28, 28), [256, 256], 10, np.random.default_rng(0))
            cfg = TrainConfig(mode=mode, epochs=EPOCHS, lr_drop_epochs=LR_DROPS, log_noise_samples=0,
                              pgd=PgdConfig(epsilon=0.3, iterations=40))
            t0 = time.perf_counter()
            net, tlog = train(net, self.train_set, self.test_set, cfg)
            self.seconds[mode] = time.perf_counter() - t0
            self.models[mode], self.logs[mode] = net, tlog
        return self.models[mode]

    def test_error(self, mode):
        return self.logs[mode].records[-1].test_err


@pytest.fixture(scope="session")
def digits():
    return DigitRun()


def _uniform_directions(n, seed):
    return np.random.default_rng(seed).uniform(size=(n, 784))


def _median_alpha(net, seed=4):
    dirs = _uniform_directions(1000, seed)
    results = [alpha_scaling_search(net, u, target_conf=0.999, direction_id=i) for i, u in enumerate(dirs)]
    return summarize_alpha(results)


@pytest.mark.slow
def test_04_plain_model_reaches_high_confidence_far_away(digits):
    with criterion(4, "plain MLP hits 99.9% confidence along uniform directions") as info:
        net = digits.model("plain")
        t0 = time.perf_counter()
        summary = _median_alpha(net)
        elapsed = digits.seconds["plain"] + time.perf_counter() - t0
        digits.plain_alpha = summary
        info["detail"] = (f"{digits.source}, test err {digits.test_error('plain'):.3%}, success "
                          f"{summary['success_rate']:.1%} (>= 95%), median alpha {summary['median_alpha']:.3g}, "
                          f"{elapsed:.0f}s (< 300s)")
        assert summary["success_rate"] >= 0.95
        assert elapsed < 300


@pytest.mark.slow
def test_05_acet_needs_larger_scale(digits):
    with criterion(5, "ACET median alpha at least twice plain") as info:
        plain = getattr(digits, "plain_alpha", None) or _median_alpha(digits.model("plain"))
        acet = _median_alpha(digits.model("acet"))
        info["detail"] = (f"median alpha plain {plain['median_alpha']:.3g}, ACET {acet['median_alpha']}, "
                          f"ACET success {acet['success_rate']:.1%}")
        assert acet["median_alpha"] is not None
        assert acet["median_alpha"] >= 2 * plain["median_alpha"]


def _rbf_query_points(rbf, r, rng, n):
    """Points whose nearest center sits at distance r (times 1 + 1e-9) or further."""
    C = rbf.centers
    c0 = C.mean(axis=0)
    u = rng.normal(size=(n, C.shape[1]))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    # largest root of |c0 + t u - c|^2 = r^2 over all centers
    w = c0[None, :, None] - C.T[None, :, :]  # (1, d, N)
    b = np.einsum("nd,kdm->nm", u, w)
    c = np.sum(w[0] ** 2, axis=0)[None] - r ** 2
    t = np.max(-b + np.sqrt(np.maximum(b ** 2 - c, 0.0)), axis=1)
    t = np.maximum(t, 0.0) * (1 + 1e-9) + rng.exponential(r + 1e-3, n) * (rng.uniform(size=n) < 0.5)
    return c0 + t[:, None] * u


def _softmax_direct(rbf, X):
    d2 = ((X[:, None, :] - rbf.centers[None]) ** 2).sum(axis=2)
    f = np.exp(-rbf.gamma * d2) @ rbf.coefficients.data.T
    e = np.exp(f - f.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True), np.sqrt(d2.min(axis=1))


def test_06_rbf_uniform_confidence_far_away():
    with criterion(6, "RBF confidences within eps of 1/K beyond the radius") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(6)
        violations = checked = lib_disagree = 0
        for _ in range(10000):
            K = int(rng.integers(2, 11))
            N = int(rng.integers(1, 51))
            d = int(rng.integers(1, 9))
            gamma = float(rng.uniform(0.1, 10))
            rbf = RbfNetwork(rng.normal(size=(N, d)) * rng.uniform(0.1, 3),
                             rng.normal(size=(K, N)) * 10 ** rng.uniform(-2, 2), gamma)
            for eps in (0.1, 0.01):
                r = rbf_uniform_radius(rbf, eps)
                X = _rbf_query_points(rbf, r, rng, 4)
                p, r_min = _softmax_direct(rbf, X)
                assert np.all(r_min >= r)
                _, applicable, within = verify_rbf_uniform_batch(rbf, X, eps)
                assert applicable.all()
                lib_disagree += int(np.sum(~within != np.any(np.abs(p - 1.0 / K) > eps, axis=1)))
                violations += int(np.sum(np.any(np.abs(p - 1.0 / K) > eps, axis=1)))
                checked += len(X)
        elapsed = time.perf_counter() - t0
        info["detail"] = (f"{violations} violations over {checked} points, {lib_disagree} disagreements "
                          f"with the library check, {elapsed:.1f}s (< 30s)")
        assert violations == 0 and lib_disagree == 0
        assert elapsed < 30


def test_07_gradients():
    with criterion(7, "central-difference gradient checks") as info:
        worst = {}
        for name, (op, make) in sorted(GRAD_CASES.items()):
            rng = np.random.default_rng(zlib.crc32(name.encode()))
            worst[name] = max(gradcheck(op, make(rng), rng) for _ in range(N_CASES))
        worst["3-layer network"] = network_gradcheck(np.random.default_rng(7), 50)
        name, err = max(worst.items(), key=lambda kv: kv[1])
        info["detail"] = f"{len(worst)} checks x {N_CASES} cases, worst {name} {err:.2e} (< 1e-4)"
        assert err < 1e-4


def _auroc_exhaustive(pos, neg):
    pos, neg = np.asarray(pos)[:, None], np.asarray(neg)[None, :]
    return float(np.mean((pos > neg) + 0.5 * (pos == neg)))


def test_08_metric_oracles():
    with criterion(8, "AUROC, ROC area and FPR against oracles") as info:
        rng = np.random.default_rng(8)
        worst_auc = worst_area = 0.0
        fpr_mismatch = 0
        for i in range(500):
            n, m = rng.integers(1, 201, size=2)
            if i % 2:
                pos, neg = rng.integers(0, 8, n) / 7, rng.integers(0, 8, m) / 7
            else:
                pos, neg = rng.beta(2, 1, n), rng.beta(1, 2, m)
            a = auroc(pos, neg)
            worst_auc = max(worst_auc, abs(a - _auroc_exhaustive(pos, neg)))
            worst_area = max(worst_area, abs(trapezoid_area(roc_curve(pos, neg)) - a))
            fpr_mismatch += fpr_at_tpr_with_threshold(pos, neg, 0.95) != fpr_enumerate(pos, neg, 0.95)
        info["detail"] = (f"auroc err {worst_auc:.1e}, area err {worst_area:.1e} (< 1e-12), "
                          f"{fpr_mismatch} FPR mismatches")
        assert worst_auc < 1e-12 and worst_area < 1e-12 and fpr_mismatch == 0


@pytest.mark.slow
def test_09_noise_confidence(digits):
    with criterion(9, "CEDA/ACET lower noise confidence at equal accuracy") as info:
        t0 = time.perf_counter()
        m = {}
        for mode in ("plain", "ceda", "acet"):
            m[mode] = mmc(confidence(digits.model(mode), digits.noise)[1])
        err = {mode: digits.test_error(mode) for mode in m}
        total = sum(digits.seconds.values()) + (time.perf_counter() - t0)
        gap = max(err["ceda"], err["acet"]) - err["plain"]
        info["detail"] = (f"noise MMC plain {m['plain']:.3f} (>= 0.30), CEDA {m['ceda']:.3f}, ACET {m['acet']:.3f} "
                          f"(<= 0.15); test err {err['plain']:.2%}/{err['ceda']:.2%}/{err['acet']:.2%}, "
                          f"gap {100 * gap:.2f}pp (<= 1.5); {total:.0f}s (<= 900s)")
        assert m["plain"] >= 0.30
        assert m["ceda"] <= 0.15 and m["acet"] <= 0.15
        assert gap <= 0.015
        assert total <= 900


@pytest.mark.slow
def test_10_adversarial_noise(digits):
    with criterion(10, "adversarial noise separates plain from ACET") as info:
        z = digits.noise[:500]
        cfg = PgdConfig(epsilon=0.3, iterations=200, seed=10)
        res = {}
        for mode in ("plain", "acet"):
            net = digits.model(mode)
            adv = pgd_max_confidence(net, z, cfg)
            res[mode] = confidence(net, adv)[1]
        in_conf = confidence(digits.model("acet"), digits.test_set.images)[1]
        a = auroc(in_conf, res["acet"])
        info["detail"] = (f"adv-noise MMC plain {mmc(res['plain']):.3f} (>= 0.90), ACET {mmc(res['acet']):.3f} "
                          f"(<= 0.50), ACET AUROC {a:.3f} (>= 0.90)")
        assert mmc(res["plain"]) >= 0.90
        assert mmc(res["acet"]) <= 0.50
        assert a >= 0.90


def test_11_pgd_contract():
    with criterion(11, "PGD stays in the ball and box and improves with iterations") as info:
        rng = np.random.default_rng(11)
        worst_step = 0.0
        box_ok = monotone_ok = True
        for seed in range(5):
            net = random_dense_net(rng, 30, [32, 32], 5)
            z = rng.uniform(size=(40, 30))
            eps = float(rng.uniform(0.05, 0.4))
            vals = []
            for it in (10, 40, 200):
                u, v = pgd(net, z, PgdConfig(epsilon=eps, step_size=eps / 8, iterations=it, restarts=2, seed=seed))
                worst_step = max(worst_step, float(np.max(np.abs(u - z)) - eps))
                box_ok &= bool(u.min() >= 0.0 and u.max() <= 1.0)
                np.testing.assert_allclose(v, objective_values(net, u), rtol=1e-12)
                vals.append(v)
            monotone_ok &= bool(np.all(vals[1] >= vals[0]) and np.all(vals[2] >= vals[1]))
        info["detail"] = f"max |u-z| - eps = {worst_step:.1e} (<= 0), box {box_ok}, non-decreasing {monotone_ok}"
        assert worst_step <= 0.0 and box_ok and monotone_ok


def _cli(args, cwd):
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "reluconf.cli", *args], cwd=cwd, env=env,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def test_12_cli_determinism(tmp_path):
    with criterion(12, "CLI outputs byte-identical across runs") as info:
        outputs = []
        for run in ("a", "b"):
            d = tmp_path / run
            d.mkdir()
            _cli(["train", "--mode", "acet", "--epochs", "3", "--hidden", "16,16", "--n-train", "300",
                  "--pgd-iterations", "5", "--seed", "12", "--out", "m.parn", "--log", "train.csv"], d)
            probe = _cli(["probe-alpha", "--model", "m.parn", "--directions", "300", "--seed", "5"], d)
            ev = _cli(["eval", "--model", "m.parn", "--noise-samples", "200", "--uniform-samples", "100",
                       "--adv-iterations", "10", "--seed", "6", "--out-dir", "ev"], d)
            files = {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}
            outputs.append((files, probe, ev))
        (fa, pa, ea), (fb, pb, eb) = outputs
        differing = sorted(k for k in fa if fa[k] != fb.get(k))
        info["detail"] = f"{len(fa)} files compared, differing: {differing or 'none'}"
        json.loads(pa)
        assert set(fa) == set(fb) and not differing
        assert pa == pb and ea == eb


@pytest.mark.slow
def test_adversarial_samples_hurt_plain_accuracy(digits):
    net = digits.model("plain")
    x, y = digits.test_set.images, digits.test_set.labels
    adv = pgd_adversarial_sample(net, x, y, PgdConfig(epsilon=0.3, iterations=80, seed=13))
    clean = np.mean(confidence(net, x)[2] == y)
    attacked = np.mean(confidence(net, adv)[2] == y)
    assert np.abs(adv - x).max() <= 0.3 + 1e-12
    assert clean - attacked >= 0.30
