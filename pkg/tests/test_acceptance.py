"""Acceptance gate: one PASS/FAIL line per criterion.

The lines are printed as each check finishes and again in the pytest
terminal summary.
"""
import json
import math
import time

import numpy as np
import pytest

import oracles
from ctrn import experiments
from ctrn import model as md
from ctrn import tensor as tn
from ctrn.cli import main
from ctrn.cooccurrence import CooccurrenceModel, binarize, conditional_probs, count_stats, reweight
from ctrn.metrics import average_precision
from ctrn.model import CTRN, CtrnConfig
from ctrn.tensor import Tensor

RESULTS: dict[int, str] = {}
_RUNS: dict[str, dict] = {}


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def first_runs():
    if not _RUNS:
        for name, fn in (("overfit", experiments.overfit_run), ("ablation", experiments.ablation_run),
                         ("gclassifier", experiments.gclassifier_run)):
            start = time.time()
            _RUNS[name] = fn()
            _RUNS[name + "_seconds"] = time.time() - start
    return _RUNS


def test_criterion_1_gradient_integrity(tmp_path):
    out = tmp_path / "g.json"
    start = time.time()
    code = main(["gradcheck", "--T", "4", "--tol", "1e-4", "--out", str(out)])
    seconds = time.time() - start
    doc = json.loads(out.read_text())
    errs = doc["max_relative_error"]
    ok = code == 0 and max(errs.values()) < 1e-4 and seconds < 60 and len(errs) == 24
    report(1, ok, f"worst rel. error {max(errs.values()):.2e} over {len(errs)} parameters, {seconds:.1f}s")


def test_criterion_2_equation_oracles():
    worst = {}
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        X = rng.standard_normal((4, 3, 3))
        W1, W2, W3 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        A = rng.random((3, 3))
        w, b = rng.standard_normal((2, 3, 3)), rng.standard_normal(2)
        Ws, bs = rng.standard_normal((3, 1)), float(rng.standard_normal())
        P, Y = rng.random((3, 5, 3)), (rng.random((3, 5, 3)) < 0.4).astype(float)
        s, y = rng.random(12), (rng.random(12) < 0.4).astype(int)
        y[seed % 12] = 1
        checks = {
            "cgcn_attention_adjacency": np.abs(md.cgcn_attention_adjacency(Tensor(X), Tensor(W1), Tensor(W2)).data
                                               - oracles.attention(X, W1, W2)).max(),
            "cgcn_forward": np.abs(md.cgcn_forward(Tensor(X), Tensor(A), Tensor(W3)).data
                                   - oracles.cgcn(X, A, W3)).max(),
            "tcn_forward": np.abs(md.tcn_forward(Tensor(X), Tensor(w), Tensor(b), 3, 1).data
                                  - oracles.tcn(X, w, b, 1)).max(),
            "gclassifier_forward": np.abs(md.gclassifier_forward(Tensor(X), A, Tensor(Ws), Tensor([bs])).data
                                          - oracles.gclassifier(X, A, Ws, bs)).max(),
            "bce": abs(float(tn.bce(Tensor(P), Y).data) - oracles.bce(P, Y)),
            "average_precision": abs(average_precision(s, y) - oracles.average_precision(list(s), list(y))),
        }
        for k, v in checks.items():
            worst[k] = max(worst.get(k, 0.0), float(v))
    ok = all(v <= 1e-12 for v in worst.values())
    report(2, ok, "max abs. deviation over 20 instances: "
           + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))


def test_criterion_3_cooccurrence_exactness():
    hand = [np.array([[1, 1, 0], [1, 0, 0], [0, 1, 1]])]
    M, N = count_stats(hand)
    P = conditional_probs(M, N)
    A_bin = binarize(P, 0.05, N)
    A_S = reweight(A_bin, 0.2)
    hand_ok = (N.tolist() == [2, 2, 1] and M[0, 1] == 1 and M[1, 2] == 1 and M[0, 2] == 0
               and P[0, 1] == 0.5 and P[1, 0] == 0.5 and P[1, 2] == 0.5 and P[2, 1] == 1.0
               and A_bin.tolist() == [[1, 1, 0], [1, 1, 1], [0, 1, 1]]
               and A_S.tolist() == [[0.8, 0.2, 0.0], [0.1, 0.8, 0.1], [0.0, 0.2, 0.8]])
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(50):
        C = int(rng.integers(1, 7))
        vids = [(rng.random((int(rng.integers(1, 33)), C)) < rng.random()).astype(int)
                for _ in range(int(rng.integers(1, 11)))]
        ref = oracles.cooccurrence_counts(vids, C)
        M, N = count_stats(vids)
        Pr = np.array([[ref[i, j] / ref[i, i] if ref[i, i] else 0.0 for j in range(C)] for i in range(C)])
        if not (np.array_equal(M, ref) and np.array_equal(conditional_probs(M, N), Pr)):
            mismatches += 1
    report(3, hand_ok and mismatches == 0,
           f"hand example {'exact' if hand_ok else 'WRONG'}; {mismatches}/50 random datasets differ from oracle")


def test_criterion_4_structural_invariants():
    failures = []
    tiny = CtrnConfig(D1=16, D2=8, C=3, L=2, K=3)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = CTRN(tiny, seed=seed)
        h = m.rtm(rng.standard_normal((2, 7, 16)))
        for i in range(tiny.L):
            h = m.block(i, h)
            if h.shape != (2, 7, 3, 8):
                failures.append(f"shape seed {seed}")
        X = rng.standard_normal((6, 4, 5))
        W1, W2, W3 = (Tensor(rng.standard_normal(s)) for s in [(5, 2), (5, 2), (5, 5)])
        perm = rng.permutation(6)

        def layer(x):
            return md.cgcn_forward(Tensor(x), md.cgcn_attention_adjacency(Tensor(x), W1, W2), W3).data

        if not np.allclose(layer(X[perm]), layer(X)[perm], atol=1e-10):
            failures.append(f"time-equivariance seed {seed}")
        w, b = Tensor(rng.standard_normal((5, 5, 3))), Tensor(rng.standard_normal(5))
        cperm = rng.permutation(4)
        if not np.allclose(md.tcn_forward(Tensor(X[:, cperm]), w, b, 3, 1).data,
                           md.tcn_forward(Tensor(X), w, b, 3, 1).data[:, cperm], atol=1e-12):
            failures.append(f"class-equivariance seed {seed}")
        att = md.cgcn_attention_adjacency(Tensor(10 * X), W1, W2).data
        if np.abs(att.sum(axis=-1) - 1).max() > 1e-6:
            failures.append(f"attention rows seed {seed}")
        labels = [(rng.random((20, 5)) < 0.3).astype(int) for _ in range(3)]
        A_S = CooccurrenceModel.from_labels(labels, theta=float(rng.random()), p=0.2).A_S
        if np.abs(A_S.sum(axis=1) - 1).max() > 1e-12:
            failures.append(f"A_S rows seed {seed}")
        Xin = rng.standard_normal((2, 6, 16))
        if not np.array_equal(m.predict_logits(Xin), CTRN(tiny, seed=seed).predict_logits(Xin)) \
                or not np.array_equal(m.predict_logits(Xin), m.predict_logits(Xin)):
            failures.append(f"determinism seed {seed}")
    report(4, not failures, "6 invariants x 10 seeds" + (f"; failed: {failures}" if failures else ""))


def test_criterion_5_overfit_convergence():
    runs = first_runs()
    r, secs = runs["overfit"], runs["overfit_seconds"]
    report(5, r["train_map"] >= 0.90 and secs < 900,
           f"train per-frame mAP {r['train_map']:.4f} after {r['epochs']} epochs in {secs:.0f}s")


def test_criterion_6_relational_ablation():
    v = first_runs()["ablation"]["variants"]
    rtm, tcn, full = v["rtm"]["mean"], v["tcn"]["mean"], v["full"]["mean"]
    ok = rtm < tcn <= full and full - rtm >= 0.05
    report(6, ok, f"mean test mAP RTM-only {rtm:.4f} < RTM+TCN {tcn:.4f} <= full {full:.4f}; "
                  f"gain {full - rtm:+.4f}")


def test_criterion_7_gclassifier_benefit():
    v = first_runs()["gclassifier"]["variants"]
    g, ident = v["gclassifier"]["mean"], v["identity"]["mean"]
    report(7, g >= ident, f"co-occurring mAP with graph {g:.4f} vs identity {ident:.4f}")


def test_criterion_8_loss_sanity():
    target = 2.2 * math.log(2)
    loss = experiments.initial_loss()
    report(8, abs(loss - target) <= 0.1 * target,
           f"fresh first-batch loss {loss:.4f} vs {target:.4f} ({100 * (loss / target - 1):+.1f}%)")


def test_criterion_9_reproducibility():
    first = first_runs()
    second = {"overfit": experiments.overfit_run(), "ablation": experiments.ablation_run(),
              "gclassifier": experiments.gclassifier_run()}
    same = {k: json.dumps(first[k], sort_keys=True) == json.dumps(second[k], sort_keys=True)
            for k in second}
    report(9, all(same.values()), "identical logs and metrics: "
           + ", ".join(f"{k}={'yes' if v else 'NO'}" for k, v in same.items()))


@pytest.fixture(scope="module", autouse=True)
def _clear_runs():
    yield
    _RUNS.clear()
