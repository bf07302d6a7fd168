"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the verdict lines.
"""
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from fdpoison import attacks, datasets, nn
from fdpoison import protocol as P
from fdpoison.config import ExperimentConfig, Seeds
from fdpoison.metrics import ConvergenceSeries, misleading_report

from conftest import random_net

SEEDS = (0, 1, 2)
RATIOS = (0.1, 0.2, 0.3)


def verdict(n, ok, detail):
    print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {n}: {detail}"


# -- 1 ---------------------------------------------------------------------

def reference_fdla(c):
    n = len(c)
    I = [None] + sorted(range(n), key=lambda i: (-c[i], i))
    t = {I[1]: I[n]}
    for k in range(2, n + 1):
        t[I[k]] = I[k - 1]
    return [c[t[i]] for i in range(n)]


def test_criterion_1_fdla_oracle():
    rng = np.random.default_rng(101)
    cases = []
    for _ in range(10_000):
        n = int(rng.integers(1, 21))
        c = rng.random(n)
        if rng.random() < 0.3:  # force ties
            c = np.round(c * 3) / 3
        cases.append(c)
    start = time.perf_counter()
    outs = [attacks.fdla_transform(c) for c in cases]
    elapsed = time.perf_counter() - start
    bad = sum(o.tolist() != reference_fdla(c.tolist()) for c, o in zip(cases, outs))
    verdict(1, bad == 0 and elapsed < 5.0,
            f"{len(cases) - bad}/{len(cases)} exact matches, transform time {elapsed:.2f}s (< 5s)")


# -- 2 ---------------------------------------------------------------------

def test_criterion_2_argmax_displacement():
    rng = np.random.default_rng(202)
    bad = 0
    for _ in range(10_000):
        n = int(rng.integers(2, 21))
        c = rng.permutation(n) + rng.random(n) * 0.5  # distinct entries
        order = sorted(range(n), key=lambda i: -c[i])
        out = attacks.fdla_transform(c)
        bad += int(np.argmax(out)) != order[1] or int(np.argmin(out)) != order[0]
    verdict(2, bad == 0, f"{10_000 - bad}/10000 cases with argmax at rank 2 and argmin at rank 1")


# -- 3 ---------------------------------------------------------------------

def central_differences(net, f, h=1e-6):
    theta = net.flat_params()
    g = np.empty_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        g[i] = (f(net.with_flat_params(up)) - f(net.with_flat_params(down))) / (2 * h)
    return g


def test_criterion_3_gradients():
    rng = np.random.default_rng(303)
    worst, count, sizes = 0.0, 0, []
    start = time.perf_counter()
    while count < 100:
        depth = int(rng.integers(1, 4))
        widths = [int(rng.integers(2, 17))] + [int(rng.integers(2, 25)) for _ in range(depth - 1)]
        widths.append(int(rng.integers(2, 11)))
        net = random_net(rng, widths)
        if net.n_params > 1000:
            continue
        m = int(rng.integers(1, 9))
        x = rng.normal(size=(m, widths[0]))
        y = rng.integers(0, widths[-1], m)
        teach = rng.random((m, widths[-1]))
        mask = rng.random(m) > 0.2
        args = (x, y, teach, float(rng.uniform(0, 2)), float(rng.uniform(0.5, 4)), mask)
        _, grads = nn.gradients(net, *args)
        fd = central_differences(net, lambda n: nn.local_objective(n, *args).total)
        a = nn.flatten_grads(grads)
        err = np.linalg.norm(a - fd) / max(np.linalg.norm(a), np.linalg.norm(fd), 1e-12)
        worst = max(worst, err)
        sizes.append(net.n_params)
        count += 1
    elapsed = time.perf_counter() - start
    verdict(3, worst <= 1e-4 and elapsed < 30.0,
            f"{count} nets ({min(sizes)}-{max(sizes)} params), worst rel err {worst:.2e}, {elapsed:.1f}s")


# -- 4 ---------------------------------------------------------------------

def test_criterion_4_aggregation():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(200):
        K, n = int(rng.integers(1, 11)), int(rng.integers(2, 11))
        ups = []
        for cid in range(K):
            m = int(rng.integers(1, 15))
            ups.append(P.Knowledge.build(cid, np.arange(m), rng.integers(0, n, m),
                                         rng.dirichlet(np.ones(n), m), n))
        gk = P.aggregate_fd(ups)
        for c in range(n):
            means = [[sum(col) / len(col) for col in zip(*[v for v, y in zip(u.vectors, u.labels) if y == c])]
                     for u in ups if c in u.labels]
            if means:
                ref = [sum(col) / len(col) for col in zip(*means)]
                worst = max(worst, float(np.max(np.abs(gk.class_vectors[c] - ref))))
            else:
                assert not gk.present[c]
    mismatched = 0
    for _ in range(200):
        cache = P.KnowledgeCache()
        K, d, R = int(rng.integers(2, 6)), int(rng.integers(2, 9)), int(rng.integers(1, 8))
        for cid in range(K):
            m = int(rng.integers(1, 8))
            h = rng.normal(size=(m, d))
            h /= np.linalg.norm(h, axis=1, keepdims=True)
            cache.update(P.Knowledge.build(cid, np.arange(m), np.zeros(m, int),
                                           rng.dirichlet(np.ones(3), m), 3, hashes=h))
        q = rng.normal(size=d)
        q /= np.linalg.norm(q)
        owner = int(rng.integers(0, K))
        foreign = [(cid, h, v) for (cid, _), (h, v) in cache._store.items() if cid != owner]
        sims = [float(np.dot(h, q)) for _, h, _ in foreign]
        best = sorted(range(len(foreign)), key=lambda i: (-sims[i], i))[:R]
        want = np.mean([foreign[i][2] for i in best], axis=0)
        got_idx = cache.neighbors(q, owner, R)
        owners = cache._matrices()[0]
        positions = np.flatnonzero(owners != owner)
        same = set(np.searchsorted(positions, got_idx).tolist()) == set(best)
        mismatched += (not same) or not np.allclose(P.cache_fetch(cache, q, owner, R), want,
                                                    rtol=0, atol=1e-15)
    verdict(4, worst <= 1e-12 and mismatched == 0,
            f"fd_avg max deviation {worst:.1e} (<= 1e-12); cache top-R index sets {200 - mismatched}/200 exact")


# -- 5 ---------------------------------------------------------------------

def test_criterion_5_partition():
    labels = np.arange(800) % 10
    failures, runs = 0, 0
    for K in range(1, 201):
        for alpha in (0.1, 0.5, 1.0, 3.0, 1000.0):
            p = datasets.dirichlet_partition(labels, K, alpha, seed=K * 7 + runs)
            flat = np.concatenate(p.assignments)
            ok = flat.size == 800 and np.unique(flat).size == 800 and p.sizes().min() >= 1
            failures += not ok
            runs += 1
    ent = [np.mean([datasets.mean_client_entropy(datasets.dirichlet_partition(labels, 20, a, s), labels, 10)
                    for s in range(10)]) for a in (0.5, 1.0, 3.0)]
    ordered = ent[0] <= ent[1] <= ent[2]
    verdict(5, failures == 0 and ordered,
            f"{runs - failures}/{runs} partitions disjoint+exhaustive+nonempty; "
            f"entropy {ent[0]:.3f} <= {ent[1]:.3f} <= {ent[2]:.3f}")


# -- 6, 7, 8 share one batch of default-config runs --------------------------

def _cfg(seed, attack="none", ratio=0.0):
    return ExperimentConfig(attack=attack, poison_ratio=ratio,
                            seeds=Seeds(seed, seed, seed, seed)).validate()


@pytest.fixture(scope="module")
def runs():
    start = time.perf_counter()
    out = {}
    for s in SEEDS:
        out[(s, "none", 0.0)] = P.run_experiment(_cfg(s))
        for r in RATIOS:
            out[(s, "fdla", r)] = P.run_experiment(_cfg(s, "fdla", r))
        out[(s, "zero", 0.3)] = P.run_experiment(_cfg(s, "zero", 0.3))
    out["elapsed"] = time.perf_counter() - start
    return out


def test_criterion_6_degradation_trend(runs):
    acc = {k: v.final_mean_accuracy for k, v in runs.items() if k != "elapsed"}
    base = [acc[(s, "none", 0.0)] for s in SEEDS]
    drop = [acc[(s, "none", 0.0)] - acc[(s, "fdla", 0.3)] for s in SEEDS]
    ok_a = all(b >= 0.85 for b in base)
    ok_b = all(d >= 0.05 for d in drop)
    inversions = []
    for s in SEEDS:
        seq = [acc[(s, "none", 0.0)]] + [acc[(s, "fdla", r)] for r in RATIOS]
        inversions += [b - a for a, b in zip(seq, seq[1:]) if b > a]
    ok_c = len(inversions) <= 1 and all(i <= 0.01 for i in inversions)
    ok_t = runs["elapsed"] < 600
    table = "; ".join(
        f"seed {s}: " + " ".join(f"{acc[(s, 'fdla', r)]:.3f}" for r in RATIOS) for s in SEEDS)
    print(f"\n  no-poison {' '.join(f'{b:.3f}' for b in base)}; fdla 10/20/30% -> {table}")
    verdict("6a", ok_a, f"no-poisoning accuracy {min(base):.3f} minimum (>= 0.85)")
    verdict("6b", ok_b, f"30% FDLA drop {min(drop) * 100:.1f} points minimum (>= 5)")
    verdict("6c", ok_c, f"{len(inversions)} adjacent inversions over 3 seeds (<= 1, <= 1 point)")
    verdict("6", ok_t, f"15 runs in {runs['elapsed']:.0f}s (< 600s)")


def test_criterion_7_convergence_shape(runs):
    lines, ok = [], True
    for s in SEEDS:
        ref = ConvergenceSeries.from_reports(runs[(s, "none", 0.0)].reports).first_round_reaching(0.95)
        for kind in ("fdla", "zero"):
            r = ConvergenceSeries.from_reports(runs[(s, kind, 0.3)].reports).first_round_reaching(0.95)
            ok &= abs(r - ref) <= 15
            lines.append(f"s{s} {kind} {r} vs {ref}")
    verdict(7, ok, "95%-of-final rounds " + ", ".join(lines) + " (|diff| <= 15)")


def test_criterion_8_misleading(runs):
    details, ok = [], True
    for s in SEEDS:
        clean, dirty = runs[(s, "none", 0.0)], runs[(s, "fdla", 0.3)]
        target = datasets.nearest_centroid_pair(clean.world.train)[0]
        r0 = misleading_report([c.net for c in clean.world.clients], clean.world.test, target)
        r1 = misleading_report([c.net for c in dirty.world.clients], dirty.world.test, target)
        ok &= r1.ratio_top2 <= r0.ratio_top2
        details.append(f"s{s} class {target}: {r0.ratio_top2:.2f} -> {r1.ratio_top2:.2f}")
    # knowledge level: every poisoned upload row's argmax is the honest rank-2 class
    rows_checked, rows_bad = 0, 0
    for s in SEEDS:
        w = P.build_world(_cfg(s, "fdla", 0.3))
        for _ in range(2):
            P.run_round(w)
        for c in w.clients:
            honest = P.extract_knowledge(c)
            sent = P.upload(c, honest)
            if not c.malicious:
                rows_bad += sent.vectors.tobytes() != honest.vectors.tobytes()
                continue
            for h, v in zip(honest.vectors, sent.vectors):
                if np.unique(h).size != h.size:
                    continue
                rows_checked += 1
                rows_bad += int(np.argmax(v)) != int(np.argsort(-h, kind="stable")[1])
    verdict(8, ok and rows_bad == 0 and rows_checked > 0,
            "ratio_top2 " + ", ".join(details) + f"; knowledge-level rows {rows_checked - rows_bad}/{rows_checked}")


# -- 9 ---------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    out = tmp_path / "det"
    cmd = [sys.executable, "-m", "fdpoison", "run", "--attack", "fdla", "--poison-ratio", "0.2",
           "--rounds", "20", "--seed", "5", "--out", str(out)]
    snapshots = []
    for _ in range(2):
        if out.exists():
            shutil.rmtree(out)
        subprocess.run(cmd, check=True, capture_output=True)
        snapshots.append({p.name: p.read_bytes() for p in sorted(Path(out).iterdir())})
    same = snapshots[0] == snapshots[1]
    names = sorted(snapshots[0])
    verdict(9, same and names == ["misleading.csv", "result.json", "series.csv"],
            f"two executions, files {', '.join(names)} byte-identical: {same}")
