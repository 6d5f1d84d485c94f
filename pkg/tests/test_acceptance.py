"""Acceptance criteria 1-9.

Criteria 6-8 share one session fixture that trains four head configurations
for three seeds each on the default synthetic dataset; expect roughly an hour
on one CPU core. Each test prints a single ``criterion N: PASS|FAIL`` line and
the full list is repeated in the pytest terminal summary.

Run on its own with ``pytest tests/test_acceptance.py -v``.
"""
import csv
import json
import math
import time
from statistics import median

import numpy as np
import pytest

from dtmpar.core import BatchNormState, Tensor, batchnorm, concat, conv2d, gap, gmp, grad_check, relu, sigmoid, take
from dtmpar.data.synthetic import SynthConfig, gen_synthetic
from dtmpar.harness.cli import main
from dtmpar.harness.config import TrainConfig
from dtmpar.harness.evaluate import evaluate, localization
from dtmpar.harness.train import train
from dtmpar.metrics import instance_metrics, label_based_mA
from dtmpar.model import DtmHead, FcBaseline, forward_dtm, forward_fc_baseline
from dtmpar.supervision import LossWeights, awk_loss, total_loss, wce_loss

SEEDS = (0, 1, 2)
RUNS = {
    "dtm_mixed+awk": dict(head_mode="dtm_mixed", awk=True),
    "dtm_mixed": dict(head_mode="dtm_mixed", awk=False),
    "dtm_gap": dict(head_mode="dtm_gap", awk=False),
    "fc_baseline": dict(head_mode="fc_baseline", awk=False),
}


# -- 1: FC layer and GAP template head agree ------------------------------------------------


def test_criterion_1_fc_equals_gap_templates(report_criterion):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n, c, h, w, J = (int(v) for v in rng.integers(1, 7, size=5))
        F = Tensor(rng.normal(size=(n, c, h, w)))
        head = DtmHead(c, list(range(J)), [], rng, use_bn=False)
        fc = FcBaseline(c, J, rng, use_bn=False)
        fc.W_fc.data[:] = head.templates_gap.data.reshape(J, c)
        diff = np.abs(forward_dtm(head, F).logits.data - forward_fc_baseline(fc, F).data).max()
        worst = max(worst, float(diff))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 10
    report_criterion(1, ok, f"max |FC - GAP template| = {worst:.2e} over 100 batches (< 1e-9), {elapsed:.2f}s (< 10s)")
    assert ok


# -- 2: finite-difference gradient checks ---------------------------------------------------


def _gradcheck_cases(rng):
    def t(*shape):
        return Tensor(rng.normal(size=shape))

    bn_s = BatchNormState(3, "spatial")
    bn_v = BatchNormState(4, "vector")
    bn_eval = BatchNormState(3, "spatial")
    bn_eval.running_mean[:] = rng.normal(size=3)
    bn_eval.running_var[:] = rng.uniform(0.5, 2, size=3)
    bn_eval.mode = "eval"
    y = rng.integers(0, 2, size=(4, 3))
    targets = [[sorted(rng.choice(6, size=int(rng.integers(0, 3)), replace=False).tolist()) for _ in range(3)] for _ in range(4)]
    weights = LossWeights(rng.uniform(0.1, 0.9, size=3), lam=0.9)
    mix_s, mix_v = t(2, 3, 2, 2), t(5, 4)

    return {
        "add": (lambda a, b: (a + b).sum(), [t(2, 3), t(2, 3)]),
        "add-broadcast": (lambda a, b: ((a + b) * (a + b)).sum(), [t(2, 3), t(3)]),
        "sub": (lambda a, b: ((a - b) * a).sum(), [t(3, 2), t(3, 2)]),
        "mul": (lambda a, b: (a * b).sum(), [t(2, 2, 3), t(2, 2, 3)]),
        "div": (lambda a, b: (a / (b * b + 1.0)).sum(), [t(3), t(3)]),
        "pow": (lambda a: ((a * a + 1.0) ** 1.5).sum(), [t(2, 3)]),
        "exp-log": (lambda a: ((a * 0.5).exp() + (a * a + 1.0).log()).sum(), [t(4)]),
        "mean-reshape-transpose": (lambda a: (a.reshape(3, 4).transpose(1, 0) * Tensor(np.arange(12.0).reshape(4, 3))).mean(), [t(2, 6)]),
        "matmul": (lambda a, b: ((a @ b) * (a @ b)).sum(), [t(3, 4), t(4, 2)]),
        "conv2d s1 p0": (lambda x, k: (conv2d(x, k) ** 2).sum(), [t(2, 3, 5, 4), t(2, 3, 3, 3)]),
        "conv2d s2 p1": (lambda x, k: (conv2d(x, k, stride=2, padding=1) ** 2).sum(), [t(2, 2, 5, 5), t(3, 2, 3, 3)]),
        "conv2d 1x1": (lambda x, k: (conv2d(x, k) ** 2).sum(), [t(2, 4, 3, 3), t(2, 4, 1, 1)]),
        "batchnorm spatial": (lambda x: (batchnorm(x, bn_s) * mix_s).sum(), [t(2, 3, 2, 2)]),
        "batchnorm affine": (lambda x, g, b: (batchnorm(x, bn_s) ** 2 * Tensor(np.arange(24.0).reshape(2, 3, 2, 2))).sum(),
                             [t(2, 3, 2, 2), bn_s.gamma, bn_s.beta]),
        "batchnorm vector": (lambda x: (batchnorm(x, bn_v) * mix_v).sum(), [t(5, 4)]),
        "batchnorm eval": (lambda x: (batchnorm(x, bn_eval) ** 2).sum(), [t(2, 3, 2, 2)]),
        "gap": (lambda x: (gap(x) ** 2).sum(), [t(2, 3, 3, 2)]),
        "gmp": (lambda x: (gmp(x)[0] ** 2).sum(), [t(2, 3, 3, 2)]),
        "relu": (lambda x: (relu(x) * x).sum(), [t(3, 4)]),
        "sigmoid": (lambda x: (sigmoid(x) * x).sum(), [t(3, 4)]),
        "concat": (lambda a, b: (concat([a, b], axis=1) ** 2 * Tensor(np.arange(10.0).reshape(2, 5))).sum(), [t(2, 2), t(2, 3)]),
        "take": (lambda x: (take(x, [2, 0, 2], axis=1) ** 2).sum(), [t(2, 3, 2)]),
        "wce loss": (lambda z: wce_loss(z, y, weights), [t(4, 3)]),
        "awk loss": (lambda hm: awk_loss(hm, y, targets), [t(4, 3, 2, 3)]),
        "total loss": (lambda hm, z: total_loss(awk_loss(hm, y, targets), wce_loss(z, y, weights), 0.7, 1.3), [t(4, 3, 2, 3), t(4, 3)]),
        "dtm head": (lambda F: (forward_dtm(DtmHead(4, [0], [1, 2], np.random.default_rng(0)), F).logits ** 2).sum(), [t(3, 4, 3, 2)]),
        "fc head": (lambda F: (forward_fc_baseline(FcBaseline(4, 3, np.random.default_rng(0)), F) ** 2).sum(), [t(3, 4, 3, 2)]),
    }


def test_criterion_2_gradients(report_criterion):
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    results = {}
    for name, (fn, inputs) in _gradcheck_cases(rng).items():
        results[name] = grad_check(fn, inputs, eps=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - start
    failed = [n for n, r in results.items() if not r.passed]
    worst_name = max(results, key=lambda n: results[n].worst)
    ok = not failed and elapsed < 60
    report_criterion(
        2, ok,
        f"{len(results)} ops/losses, worst rel err {results[worst_name].worst:.2e} ({worst_name}) < 1e-4, "
        f"{elapsed:.1f}s (< 60s)" + (f"; failed: {failed}" if failed else ""),
    )
    assert ok


# -- 3: max pooling routes gradient to a single cell -----------------------------------------------


def test_criterion_3_gmp_single_cell(report_criterion):
    rng = np.random.default_rng(303)
    planes = bad = 0
    while planes < 1000:
        n, c, h, w = (int(v) for v in rng.integers(1, 6, size=4))
        data = rng.normal(size=(n, c, h, w))
        if planes % 3 == 0:
            data = np.round(data)  # plenty of ties
        x = Tensor(data, requires_grad=True)
        pooled, idx = gmp(x)
        upstream = rng.uniform(0.5, 2.0, size=(n, c)) * rng.choice([-1, 1], size=(n, c))
        (pooled * Tensor(upstream)).sum().backward()
        g = x.grad.reshape(n, c, -1)
        for i in range(n):
            for j in range(c):
                nz = np.flatnonzero(g[i, j])
                first_max = int(np.flatnonzero(data[i, j].reshape(-1) == data[i, j].max())[0])
                if len(nz) != 1 or nz[0] != first_max or g[i, j, nz[0]] != upstream[i, j]:
                    bad += 1
                planes += 1
    ok = bad == 0
    report_criterion(3, ok, f"{planes} planes checked, {bad} with other than one nonzero gradient cell")
    assert ok


# -- 4: loss values ------------------------------------------------------------------------------


def test_criterion_4_loss_values(report_criterion):
    w = LossWeights(np.array([0.5]), lam=1.0)
    w_pos = float(w.class_weights(np.array([[1]]))[0, 0])
    w_neg = float(w.class_weights(np.array([[0]]))[0, 0])
    direct_w = math.exp((1 - 0.5) / 1.0**2)
    hm = Tensor(np.zeros((1, 1, 1, 1)))
    l_awk = awk_loss(hm, np.array([[1]]), [[[0]]]).item()
    direct_awk = -math.log(1 / (1 + math.exp(-0.0)))
    errs = [abs(w_pos - direct_w), abs(w_neg - math.exp(0.5)), abs(l_awk - direct_awk), abs(direct_awk - math.log(2))]
    ok = max(errs) < 1e-10
    report_criterion(4, ok, f"w+ = {w_pos:.12f}, w- = {w_neg:.12f} (exp 0.5), awk positive at 0 logit = {l_awk:.12f} (log 2); max err {max(errs):.1e}")
    assert ok


# -- 5: metrics against a loop oracle ----------------------------------------------------------


def _oracle(preds, labels):
    n, J = len(labels), len(labels[0])
    per = []
    for j in range(J):
        tp = sum(1 for i in range(n) if labels[i][j] and preds[i][j])
        tn = sum(1 for i in range(n) if not labels[i][j] and not preds[i][j])
        pos = sum(1 for i in range(n) if labels[i][j])
        neg = n - pos
        per.append(tn / neg if pos == 0 else tp / pos if neg == 0 else (tp / pos + tn / neg) / 2)
    accs, precs, recs = [], [], []
    for i in range(n):
        Y = {j for j in range(J) if labels[i][j]}
        P = {j for j in range(J) if preds[i][j]}
        if not Y and not P:
            accs.append(1.0), precs.append(1.0), recs.append(1.0)
            continue
        accs.append(len(Y & P) / len(Y | P))
        precs.append(len(Y & P) / len(P) if P else 0.0)
        recs.append(len(Y & P) / len(Y) if Y else 0.0)
    a, p, r = (math.fsum(v) / n for v in (accs, precs, recs))
    return math.fsum(per) / J, per, (a, p, r, 2 * p * r / (p + r) if p + r else 0.0)


def test_criterion_5_metrics_oracle(report_criterion):
    rng = np.random.default_rng(505)
    mismatches = 0
    for k in range(100):
        rate = rng.uniform(0.05, 0.95)
        labels = (rng.uniform(size=(50, 8)) < rate).astype(int)
        preds = (rng.uniform(size=(50, 8)) < rate).astype(int)
        if k % 10 == 0:
            labels[:, 0] = 1  # one-sided attribute
            preds[3] = labels[3] = 0  # empty sample
        mA, per = label_based_mA(preds, labels)
        o_mA, o_per, o_inst = _oracle(preds.tolist(), labels.tolist())
        if mA != o_mA or per.tolist() != o_per or instance_metrics(preds, labels) != o_inst:
            mismatches += 1
    ok = mismatches == 0
    report_criterion(5, ok, f"100 random 50x8 instances, {mismatches} differ from the loop oracle (exact comparison)")
    assert ok


# -- 6-8: training on the default synthetic dataset -------------------------------------------


@pytest.fixture(scope="session")
def trained():
    splits = gen_synthetic(SynthConfig())
    results = {}
    for name, overrides in RUNS.items():
        for seed in SEEDS:
            cfg = TrainConfig(seed=seed, **overrides)
            t0 = time.perf_counter()
            res = train(cfg, splits, threads=1)
            minutes = (time.perf_counter() - t0) / 60
            report = evaluate(res.model, splits["test"])
            loc = localization(res.model, splits["test"])
            results[name, seed] = {"mA": report.mA, "report": report, "loc": loc, "minutes": minutes, "history": res.history}
            print(f"{name} seed {seed}: test mA {report.mA:.4f}, localization {loc['rate']:.4f}, {minutes:.1f} min")
    return results


def _median(trained, name, key="mA"):
    return median(trained[name, s][key] for s in SEEDS)


@pytest.mark.slow
def test_criterion_6_end_to_end_learning(trained, report_criterion):
    mAs = [trained["dtm_mixed+awk", s]["mA"] for s in SEEDS]
    slowest = max(trained["dtm_mixed+awk", s]["minutes"] for s in SEEDS)
    ok = median(mAs) >= 0.95 and slowest <= 15
    report_criterion(6, ok, f"dtm_mixed+AWK test mA per seed {[round(m, 4) for m in mAs]}, median {median(mAs):.4f} (>= 0.95); "
                            f"slowest run {slowest:.1f} min (<= 15)")
    assert ok


@pytest.mark.slow
def test_criterion_7_awk_benefit_and_ordering(trained, report_criterion):
    awk, plain = _median(trained, "dtm_mixed+awk"), _median(trained, "dtm_mixed")
    gap_, fc = _median(trained, "dtm_gap"), _median(trained, "fc_baseline")
    ok = awk >= plain and gap_ > fc
    report_criterion(7, ok, f"median mA: AWK {awk:.4f} >= no-AWK {plain:.4f}: {awk >= plain}; "
                            f"DTM(GAP) {gap_:.4f} > FC+BN {fc:.4f}: {gap_ > fc}")
    assert ok


@pytest.mark.slow
def test_criterion_8_localization(trained, report_criterion):
    rates = [trained["dtm_mixed+awk", s]["loc"]["rate"] for s in SEEDS]
    without = [trained["dtm_mixed", s]["loc"]["rate"] for s in SEEDS]
    ok = median(rates) >= 0.90
    report_criterion(8, ok, f"argmax within 1 cell of a target: with AWK median {median(rates):.4f} (>= 0.90) "
                            f"per seed {[round(r, 4) for r in rates]}; without AWK median {median(without):.4f} (recorded)")
    assert ok


@pytest.mark.slow
def test_training_loss_decreases_over_first_epochs(trained):
    losses = np.array([[h.loss_total for h in trained["dtm_mixed+awk", s]["history"][:5]] for s in SEEDS])
    med = np.median(losses, axis=0)
    assert np.all(np.diff(med) < 0), med


# -- 9: determinism through the CLI ---------------------------------------------------------------


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path, report_criterion):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synth": {"n_train": 1000, "n_val": 200, "n_test": 200}, "epochs": 3}))
    logs = []
    for run in ("a", "b"):
        code = main(["train", "--config", str(cfg), "--seed", "7", "--threads", "1", "--out", str(tmp_path / run), "-q"])
        assert code == 0
        with (tmp_path / run / "train_log.csv").open() as fh:
            logs.append([{k: v for k, v in row.items() if k != "seconds"} for row in csv.DictReader(fh)])

    def sig10(v):
        return f"{float(v):.10g}"

    same = len(logs[0]) == len(logs[1]) == 3 and all(
        sig10(a[k]) == sig10(b[k]) for a, b in zip(*logs) for k in a
    )
    bitwise = logs[0] == logs[1]
    report_criterion(9, same, f"two --threads 1 runs, {len(logs[0])} epochs: losses equal to 10 significant digits: {same} "
                              f"(bitwise identical: {bitwise})")
    assert same


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
