"""Acceptance suite.

One test per criterion.  Each records a PASS/FAIL line (collected into the
terminal summary) before asserting, so a failing criterion still reports its
measured values.  The end-to-end criteria share one set of trainings.
"""

import builtins
import math
import shutil
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from trendmatch import network, ops
from trendmatch.checkpoint import load_checkpoint, save_checkpoint
from trendmatch.config import RunConfig
from trendmatch.distances import cosine_dist, euclid_dist, softmatch
from trendmatch.metrics import Confusion, accumulate, finalize, per_trend
from trendmatch.network import NetConfig, TrendNet
from trendmatch.ops import BatchNormStats
from trendmatch.optim import Adam
from trendmatch.supervision import background_loss, bce_map_loss, total_loss
from trendmatch.synthdata import SceneSpec, generate_many, read_dataset, stack_batch, write_dataset
from trendmatch.tensor import Tensor, no_grad
from trendmatch.train import ablate, evaluate, train, train_step
from trendmatch.trend import APPEAR, DISAPPEAR, TRANSFORM, UNCHANGED, decode_trend

from helpers import (away_from_zero, brute_counts, entrywise_ok, exact_metrics, grad_pairs, normwise_ok,
                     piecewise_grad_pairs, projected, separated, verdict)

TRAIN_MASTER, TEST_MASTER = 1000, 2000
E2E_SEEDS = (0, 1, 2)
E2E_EPOCHS = 20


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- 1. range ---------------------------------------------------------------------------

def test_criterion_01_softmatch_range():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    lo, hi, bad = 1.0, 0.0, 0
    for tau in (0.1, 1.0):
        for dtype in (np.float32, np.float64):
            p1 = rng.uniform(-50, 50, size=(10 ** 5, 3, 1, 1)).astype(dtype)
            p2 = rng.uniform(-50, 50, size=(10 ** 5, 3, 1, 1)).astype(dtype)
            d = softmatch(Tensor(p1), Tensor(p2), tau).numpy()
            bad += int(((d <= 0) | (d >= 1) | ~np.isfinite(d)).sum())
            lo, hi = min(lo, float(d.min())), max(hi, float(d.max()))
    elapsed = time.perf_counter() - start
    verdict(1, "softmatch strictly inside (0,1)", bad == 0 and elapsed < 5.0,
            f"4x10^5 pixels (tau 0.1/1, float32/64), {bad} outside, min {lo:.3g}, max {hi!r}, {elapsed:.2f}s")


# -- 2. scalar oracle -------------------------------------------------------------------

def textbook_softmatch(p1, p2, tau):
    """One pixel, plain Python floats."""
    m1, m2 = max(p1), max(p2)
    e1 = [math.exp((a - m1) / tau) for a in p1]
    e2 = [math.exp((b - m2) / tau) for b in p2]
    z1, z2 = sum(e1), sum(e2)
    return 1.0 - sum((a / z1) * (b / z2) for a, b in zip(e1, e2))


def test_criterion_02_softmatch_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        c = int(rng.integers(2, 7))
        tau = float(rng.choice([0.1, 0.5, 1.0, 2.0]))
        scale = float(rng.choice([0.1, 1.0, 5.0]))
        p1, p2 = rng.normal(0, scale, c), rng.normal(0, scale, c)
        got = float(softmatch(T(p1.reshape(1, c, 1, 1)), T(p2.reshape(1, c, 1, 1)), tau).numpy()[0, 0, 0])
        worst = max(worst, abs(got - textbook_softmatch(p1.tolist(), p2.tolist(), tau)))
    verdict(2, "vectorised vs scalar softmatch", worst < 1e-6, f"1000 pairs, max abs diff {worst:.2e}")


# -- 3. gradients -----------------------------------------------------------------------

CASES = 50


def _grad_cases(rng):
    """name -> callable(case) running one randomized finite-difference check."""

    def dist(fn, needs_tau):
        def run(_):
            tau = float(rng.choice([0.1, 0.5, 1.0, 2.0]))
            f1 = T(rng.normal(size=(2, 3, 2, 2)), True)
            f2 = T(rng.normal(size=(2, 3, 2, 2)), True)
            r = rng.normal(size=(2, 1, 2, 2))
            call = (lambda: fn(f1, f2, tau)) if needs_tau else (lambda: fn(f1, f2))
            return grad_pairs(lambda: projected(call().values, r), [f1, f2])
        return run

    def conv(_):
        k = int(rng.choice([1, 2, 3]))
        stride = int(rng.choice([1, 2]))
        pad = int(rng.integers(0, k))
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        x = T(rng.normal(size=(2, cin, 5, 6)), True)
        w = T(rng.normal(size=(cout, cin, k, k)), True)
        b = T(rng.normal(size=cout), True)
        shape = ops.conv2d(x, w, b, stride, pad).shape
        r = rng.normal(size=shape)
        return grad_pairs(lambda: projected(ops.conv2d(x, w, b, stride, pad), r), [x, w, b])

    def pool(_):
        x = T(separated(rng, (2, 2, 4, 6)), True)
        r = rng.normal(size=(2, 2, 2, 3))
        return grad_pairs(lambda: projected(ops.maxpool2(x), r), [x])

    def upsample(_):
        x = T(rng.normal(size=(2, 2, 3, 2)), True)
        r = rng.normal(size=(2, 2, 6, 4))
        return grad_pairs(lambda: projected(ops.upsample2(x), r), [x])

    def relu(_):
        x = T(away_from_zero(rng, (2, 3, 3, 3)), True)
        r = rng.normal(size=(2, 3, 3, 3))
        return grad_pairs(lambda: projected(ops.relu(x), r), [x])

    def concat(_):
        a = T(rng.normal(size=(2, 2, 3, 3)), True)
        c = T(rng.normal(size=(2, 1, 3, 3)), True)
        r = rng.normal(size=(2, 3, 3, 3))
        return grad_pairs(lambda: projected(ops.concat_channels(a, c), r), [a, c])

    def batchnorm(case):
        training = case % 2 == 0
        stats = BatchNormStats(3, dtype=np.float64)
        stats.mean[:] = rng.normal(size=3)
        stats.var[:] = rng.uniform(0.5, 2.0, size=3)
        x = T(rng.normal(size=(2, 3, 3, 3)), True)
        g = T(rng.uniform(0.5, 1.5, size=3), True)
        b = T(rng.normal(size=3), True)
        r = rng.normal(size=(2, 3, 3, 3))
        return grad_pairs(lambda: projected(ops.batchnorm(x, g, b, stats, training), r), [x, g, b])

    def softmax(_):
        tau = float(rng.choice([0.1, 0.5, 1.0, 2.0]))
        x = T(rng.normal(size=(2, 3, 2, 2)), True)
        r = rng.normal(size=(2, 3, 2, 2))
        return grad_pairs(lambda: projected(ops.softmax_tau(x, tau), r), [x])

    def bce(_):
        d = T(rng.uniform(0.05, 0.95, size=(2, 1, 3, 3)), True)
        y = (rng.random((2, 1, 3, 3)) < 0.5).astype(np.float64)
        return grad_pairs(lambda: bce_map_loss(d, y), [d])

    def background(_):
        tau = float(rng.choice([0.1, 0.5, 1.0]))
        f1 = T(rng.normal(size=(2, 3, 3, 3)), True)
        f2 = T(rng.normal(size=(2, 3, 3, 3)), True)
        y = (rng.random((2, 1, 3, 3)) < 0.4).astype(np.float64)
        return grad_pairs(lambda: background_loss((f1, f2), y, tau), [f1, f2])

    names = list(TrendNet(NetConfig(depth=2, base_channels=4, input_size=4)).params)

    def composed(case):
        tau = float(rng.choice([0.1, 0.5, 1.0]))
        # the BCE clamp is flat but passes a straight-through gradient, so only
        # clamp-free draws have a derivative to compare against
        for attempt in range(500):
            model = TrendNet(NetConfig(depth=2, base_channels=4, tau=tau, input_size=4), seed=1000 * case + attempt,
                             dtype=np.float64)
            t1 = T(rng.random((2, 3, 4, 4)), True)
            t2 = rng.random((2, 3, 4, 4))
            with no_grad():
                fi, fc = model.forward(t1, Tensor(t2), training=True)
                d = np.concatenate([softmatch(*fi, tau).numpy(), softmatch(*fc, tau).numpy()])
            if ((d > 1e-6) & (d < 1 - 1e-6)).all():
                break
        else:
            raise AssertionError(f"no clamp-free draw at tau={tau}")
        y = (rng.random((2, 1, 4, 4)) < 0.4).astype(np.float64)

        def build():
            fi, fc = model.forward(t1, Tensor(t2), training=True)
            return total_loss(fc, fi, y, tau=tau).loss

        picks = [model.params[k] for k in rng.choice(names, 3, replace=False)]
        return piecewise_grad_pairs(build, [t1] + picks, network, 2, rng)

    return {
        "softmatch": dist(softmatch, True), "cosine": dist(cosine_dist, False), "euclidean": dist(euclid_dist, False),
        "conv2d": conv, "maxpool2": pool, "upsample2": upsample, "relu": relu, "concat": concat,
        "batchnorm": batchnorm, "softmax": softmax, "bce": bce, "background": background, "composed loss": composed,
    }


def test_criterion_03_gradient_suite():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    failures, strict = {}, {}
    cases = _grad_cases(rng)
    for name, run in cases.items():
        for case in range(CASES):
            try:
                pairs = run(case)
            except AssertionError as exc:
                failures.setdefault(name, []).append(f"case {case}: {exc}")
                continue
            if not all(normwise_ok(a, n) for _, a, n in pairs):
                failures.setdefault(name, []).append(f"case {case}")
            if not all(entrywise_ok(a, n) for _, a, n in pairs):
                strict[name] = strict.get(name, 0) + 1
    elapsed = time.perf_counter() - start
    detail = (f"{len(cases)} ops x {CASES} cases, h=1e-3, per-tensor relative error <= 1e-3, {elapsed:.0f}s; "
              f"entrywise rtol also met in all but {sum(strict.values())} cases {strict or ''}")
    if failures:
        detail += "; failing " + ", ".join(f"{k} ({len(v)})" for k, v in failures.items())
    verdict(3, "analytic vs finite-difference gradients", not failures and elapsed < 120, detail)


# -- 4. decoding ------------------------------------------------------------------------

def _one_hot_logits(a1, a2):
    f1, f2 = np.zeros((1, 3, 1, 1)), np.zeros((1, 3, 1, 1))
    f1[0, a1] = f2[0, a2] = 1.0
    return T(f1), T(f2)


def test_criterion_04_decode():
    expected = {}
    for a1 in range(3):
        for a2 in range(3):
            expected[a1, a2] = UNCHANGED if a1 == a2 else APPEAR if a1 == 2 else DISAPPEAR if a2 == 2 else TRANSFORM
    got = {k: int(decode_trend(_one_hot_logits(*k), 2)[0, 0, 0]) for k in expected}
    exhaustive = got == expected and set(got.values()) == {UNCHANGED, APPEAR, DISAPPEAR, TRANSFORM}

    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(2, 4, 3, 16, 16))
    fwd, rev = decode_trend((T(a), T(b))), decode_trend((T(b), T(a)))
    swap = {APPEAR: DISAPPEAR, DISAPPEAR: APPEAR, UNCHANGED: UNCHANGED, TRANSFORM: TRANSFORM}
    symmetric = bool((np.vectorize(swap.get)(fwd) == rev).all())

    monotone = all((decode_trend((T(fn(a)), T(fn(b)))) == fwd).all()
                   for fn in (np.exp, np.tanh, lambda x: 2.5 * x - 4, lambda x: x ** 3, np.arctan))
    verdict(4, "trend decoding", exhaustive and symmetric and monotone,
            f"9 cases exhaustive={exhaustive}, swap symmetric={symmetric}, monotone invariant={monotone}")


# -- 5. metrics -------------------------------------------------------------------------

def test_criterion_05_metric_oracle():
    rng = np.random.default_rng(5)
    count_mismatch, worst = 0, 0.0
    for _ in range(100):
        shape = tuple(int(v) for v in rng.integers(4, 40, size=2))
        pred = rng.integers(0, 4, size=shape)
        truth = rng.integers(0, 4, size=shape)
        rows = {row.tag: row for row in per_trend(pred, truth)}
        binary = {"C": (pred > 0, truth > 0), "A": (pred == APPEAR, truth == APPEAR),
                  "D": (pred == DISAPPEAR, truth == DISAPPEAR), "T": (pred == TRANSFORM, truth == TRANSFORM)}
        p_bin = rng.random(shape) < rng.random()
        rows["bin"] = finalize(accumulate(Confusion(), p_bin, truth > 1))
        binary["bin"] = (p_bin, truth > 1)
        for tag, (p, t) in binary.items():
            counts = brute_counts(p, t)
            c = rows[tag].confusion
            count_mismatch += (c.tp, c.fp, c.tn, c.fn) != counts
            for got, want in zip((rows[tag].P, rows[tag].R, rows[tag].F, rows[tag].IoU, rows[tag].OA),
                                 exact_metrics(*counts)):
                worst = max(worst, abs(got - (0.0 if want is None else float(want))))
    verdict(5, "metrics vs brute-force counter", count_mismatch == 0 and worst <= 1e-12,
            f"100 map pairs x 5 rows, {count_mismatch} count mismatches, max ratio error {worst:.1e}")


# -- 6. overfit smoke -------------------------------------------------------------------

def test_criterion_06_overfit_smoke():
    pairs = generate_many(SceneSpec(size=32, max_shapes=3), 4, 4242)
    t1, t2, y = stack_batch(pairs)
    start = time.perf_counter()
    gcd, bg = [], []
    for seed in (0, 1, 2):
        cfg = RunConfig(seed=seed, epochs=200, augment=False)
        res = train(cfg, pairs, max_steps=200, log=lambda m: None)
        assert res.optimizer.t == 200
        with no_grad():
            fi, fc = res.model.forward(Tensor(t1), Tensor(t2), training=False)
            rep = total_loss(fc, fi, y, cfg.loss_weights, cfg.tau)
        gcd.append(rep.l_gcd)
        bg.append(rep.l_bg)
    elapsed = time.perf_counter() - start
    mg, mb = statistics.median(gcd), statistics.median(bg)
    verdict(6, "overfit smoke", mg < 0.05 and mb < 0.05 and elapsed < 300,
            f"median l_gcd {mg:.4f}, l_bg {mb:.4f} (seeds {[round(v, 4) for v in gcd]}), {elapsed:.0f}s")


# -- 7, 8, 10. end to end ---------------------------------------------------------------

class OpenSpy:
    """Records every path passed to ``open`` or ``Image.open``."""

    def __init__(self, monkeypatch):
        self.paths = []
        real_open, real_image_open = builtins.open, Image.open

        def spy_open(file, *a, **kw):
            self.paths.append(str(file))
            return real_open(file, *a, **kw)

        def spy_image_open(fp, *a, **kw):
            self.paths.append(str(getattr(fp, "name", fp)))
            return real_image_open(fp, *a, **kw)

        monkeypatch.setattr(builtins, "open", spy_open)
        monkeypatch.setattr(Image, "open", spy_image_open)

    def trend_reads(self):
        return [p for p in self.paths if "trend" in Path(p).parts]


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Criterion-7 protocol: 200 training pairs on disk without trend/, 50 labelled test pairs."""
    spec = SceneSpec()
    root = tmp_path_factory.mktemp("e2e")
    write_dataset(generate_many(spec, 200, TRAIN_MASTER), root / "train", spec, TRAIN_MASTER)
    shutil.rmtree(root / "train" / "trend")
    test_pairs = generate_many(spec, 50, TEST_MASTER)
    assert all(p.trend_label is not None for p in test_pairs)

    mp = pytest.MonkeyPatch()
    spy = OpenSpy(mp)
    start = time.perf_counter()
    try:
        train_pairs = read_dataset(root / "train", include_trend=False)
        runs = {}
        for seed in E2E_SEEDS:
            cfg = RunConfig(seed=seed, epochs=E2E_EPOCHS)
            res = train(cfg, train_pairs, out_dir=root / f"run{seed}", log=lambda m: None)
            runs[seed] = (cfg, res)
    finally:
        mp.undo()
    train_time = time.perf_counter() - start
    reports = {seed: evaluate(res.model, test_pairs, cfg) for seed, (cfg, res) in runs.items()}
    return {"root": root, "train_pairs": train_pairs, "test_pairs": test_pairs, "runs": runs, "reports": reports,
            "train_time": train_time, "elapsed": time.perf_counter() - start, "spy": spy}


def test_criterion_07_end_to_end(e2e):
    med = {tag: statistics.median(r.rows[tag].F for r in e2e["reports"].values())
           for tag in ("change_gcd", "A", "D", "T")}
    ok = med["change_gcd"] >= 0.90 and all(med[t] >= 0.70 for t in "ADT") and e2e["elapsed"] < 1800
    per_seed = "; ".join(f"seed {s}: " + " ".join(f"{t}={100 * r.rows[t].F:.1f}" for t in ("change_gcd", "A", "D", "T"))
                         for s, r in e2e["reports"].items())
    verdict(7, "weak supervision end to end", ok,
            f"median change F {med['change_gcd']:.4f}, A {med['A']:.4f}, D {med['D']:.4f}, T {med['T']:.4f} "
            f"({per_seed}), {e2e['elapsed']:.0f}s")


def test_criterion_08_ablation(e2e):
    cfg0, _ = e2e["runs"][0]
    report = ablate(cfg0, e2e["train_pairs"], e2e["test_pairs"], log=lambda m: None)
    table = report.table()
    complete = set(table) == {"softmatch", "cosine", "euclidean"} and all(
        set(row) == {"P", "R", "F", "IoU", "OA"} for row in table.values())
    # the softmatch arm repeats criterion 7's seed-0 run, so it must reproduce that row exactly
    reproduced = report.rows["softmatch"] == e2e["reports"][0].rows["change_gcd"]
    f = {m: report.rows[m].F for m in table}
    direction = f["softmatch"] >= max(f["cosine"], f["euclidean"]) - 0.02
    print(report.to_text())
    verdict(8, "distance ablation table", complete and reproduced,
            f"F softmatch {f['softmatch']:.4f}, cosine {f['cosine']:.4f}, euclidean {f['euclidean']:.4f}; "
            f"reproducible={reproduced}; softmatch >= max - 0.02: {direction} (reported, not gated)")


def test_criterion_09_checkpoint_round_trip(tmp_path):
    cfg = RunConfig(augment=False)
    model = TrendNet(cfg.net, seed=9)
    opt = Adam(model.parameters(), cfg.lr)
    t1, t2, y = stack_batch(generate_many(SceneSpec(), 4, 9))
    for _ in range(3):
        train_step(model, opt, t1, t2, y, cfg)
    save_checkpoint(tmp_path / "m.tcdw", model, opt, epoch=1)
    loaded, _ = load_checkpoint(tmp_path / "m.tcdw")
    a, b = model.infer(t1, t2), loaded.infer(t1, t2)
    same = all(u.data.tobytes() == v.data.tobytes() for u, v in zip(a[0] + a[1], b[0] + b[1]))
    verdict(9, "checkpoint round trip", same, "forward outputs bitwise identical" if same else "outputs differ")


def test_criterion_10_firewall(e2e):
    spy = e2e["spy"]
    reads = spy.trend_reads()
    trained = all(res.epoch == E2E_EPOCHS for _, res in e2e["runs"].values())
    absent = not (e2e["root"] / "train" / "trend").exists()
    verdict(10, "weak-supervision firewall", trained and absent and not reads and len(spy.paths) > 0,
            f"trend/ absent={absent}, {len(E2E_SEEDS)} trainings completed={trained}, "
            f"{len(spy.paths)} file opens observed, {len(reads)} touched trend labels")
