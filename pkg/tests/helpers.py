"""Independent oracles shared by the test modules."""

from fractions import Fraction

import numpy as np

from trendmatch.tensor import Tensor, get_tape, no_grad

RTOL = 1e-3
ATOL = 1e-6
H = 1e-3

ACCEPTANCE = []  # (criterion number, summary line), printed at the end of the run


def verdict(number, title, ok, detail):
    """Record one acceptance line, echo it, then fail the test if ``ok`` is false."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    assert ok, line


def numeric_grad(fn, arrays, h=H, max_entries=None, rng=None):
    """Central finite differences of scalar ``fn()`` w.r.t. each array in place.

    Returns ``[(flat_indices, values)]`` per array; with ``max_entries`` only a
    random subset of coordinates is probed.
    """
    out = []
    for a in arrays:
        flat = a.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        vals = np.empty(idx.size)
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = fn()
            flat[i] = old - h
            fm = fn()
            flat[i] = old
            vals[k] = (fp - fm) / (2 * h)
        out.append((idx, vals))
    return out


def scalar_of(build):
    """Evaluate ``build()`` (returning a scalar Tensor) without recording."""
    def fn():
        with no_grad():
            return float(build().data)
    return fn


def analytic_grads(build, tensors):
    for t in tensors:
        t.grad = None
    get_tape().clear()
    loss = build()
    loss.backward()
    return [t.grad for t in tensors]


def grad_pairs(build, tensors, h=H, max_entries=None, rng=None):
    """``[(label, analytic, numeric)]`` over the probed entries of each tensor."""
    grads = analytic_grads(build, tensors)
    num = numeric_grad(scalar_of(build), [t.data for t in tensors], h, max_entries, rng)
    out = []
    for t, g, (idx, nv) in zip(tensors, grads, num):
        assert g is not None, f"no gradient reached {t.name or t.shape}"
        out.append((t.name or str(t.shape), g.reshape(-1)[idx], nv))
    return out


def entrywise_ok(a, n):
    return bool(np.all(np.abs(a - n) <= ATOL + RTOL * np.abs(n)))


def normwise_ok(a, n):
    """||a - n|| <= rtol * max(||a||, ||n||) + atol, one verdict per tensor."""
    return bool(np.linalg.norm(a - n) <= RTOL * max(np.linalg.norm(a), np.linalg.norm(n)) + ATOL)


def assert_pairs_close(pairs):
    for label, a, n in pairs:
        np.testing.assert_allclose(a, n, rtol=RTOL, atol=ATOL, err_msg=f"gradient mismatch for {label}")


def assert_grad_close(build, tensors, h=H, max_entries=None, rng=None):
    """Compare tape gradients of ``build()`` with central differences."""
    assert_pairs_close(grad_pairs(build, tensors, h, max_entries, rng))


def projected(out, weights):
    """Scalar ``sum(out * weights)`` so non-scalar ops can be gradient-checked."""
    return (out * Tensor(weights, dtype=out.dtype)).sum()


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    """Six nested loops; no vectorisation."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                    out[bi, co, i, j] = acc
    return out


def separated(rng, shape, spacing=0.02, offset=0.0):
    """Random values whose pairwise gaps exceed ``spacing`` (no ties, no
    kinks within the finite-difference step)."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * spacing + offset + spacing / 2
    return rng.permutation(vals).reshape(shape)


def away_from_zero(rng, shape, margin=0.05, scale=1.0):
    x = rng.normal(0, scale, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def brute_counts(pred, truth):
    tp = fp = tn = fn = 0
    for p, t in zip(np.asarray(pred).reshape(-1), np.asarray(truth).reshape(-1)):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def exact_metrics(tp, fp, tn, fn):
    """Rational arithmetic; None marks a 0/0 ratio."""
    p = Fraction(tp, tp + fp) if tp + fp else None
    r = Fraction(tp, tp + fn) if tp + fn else None
    f = None if p is None or r is None or p + r == 0 else 2 * p * r / (p + r)
    iou = Fraction(tp, tp + fp + fn) if tp + fp + fn else None
    return p, r, f, iou, Fraction(tp + tn, tp + fp + tn + fn)


class FrozenKinks:
    """Pins ReLU sign patterns and max-pool winners inside ``module``.

    The first (recording) evaluation stores every pattern; later evaluations
    replay them, so the probed function is the smooth piece that contains the
    unperturbed point.  Its gradient there equals the true gradient, which
    makes central differences valid even when ``x +/- h`` would cross a kink.
    """

    def __init__(self, module):
        self.module = module
        self.saved = None
        self.cursor = None

    def __enter__(self):
        from trendmatch import ops
        from trendmatch.tensor import make_result
        self._orig = (self.module.relu, self.module.maxpool2)

        def relu(x):
            if self.cursor is None:
                return ops.relu(x)
            if self.recording:
                self.saved.append(x.data > 0)
                return ops.relu(x)
            mask = self.saved[self.cursor]
            self.cursor += 1
            return make_result(x.data * mask, (x,), lambda g: (g * mask,))

        def maxpool2(x):
            n, c, h, w = x.shape
            blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
            if self.cursor is None:
                return ops.maxpool2(x)
            if self.recording:
                self.saved.append(blocks.argmax(-1))
                return ops.maxpool2(x)
            win = self.saved[self.cursor]
            self.cursor += 1
            return make_result(np.take_along_axis(blocks, win[..., None], -1)[..., 0], (x,), None)

        self.module.relu, self.module.maxpool2 = relu, maxpool2
        return self

    def __exit__(self, *exc):
        self.module.relu, self.module.maxpool2 = self._orig

    def record(self, fn):
        self.saved, self.cursor, self.recording = [], 0, True
        try:
            return fn()
        finally:
            self.cursor = None

    def replay(self, fn):
        self.cursor, self.recording = 0, False
        try:
            return fn()
        finally:
            assert self.cursor == len(self.saved), "replay visited a different op sequence"
            self.cursor = None


def piecewise_grad_pairs(build, tensors, module, n_per_tensor, rng, h=H):
    """Central differences of the smooth piece through the current point.

    ReLU masks and pool winners of ``module`` are frozen at their values for
    the unperturbed parameters, then each sampled coordinate is probed.
    """
    grads = analytic_grads(build, tensors)
    fn = scalar_of(build)
    out = []
    with FrozenKinks(module) as fk:
        fk.record(fn)
        for t, g in zip(tensors, grads):
            flat = t.data.reshape(-1)
            idx = rng.choice(flat.size, min(n_per_tensor, flat.size), replace=False)
            num = np.empty(idx.size)
            for k, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                fp = fk.replay(fn)
                flat[i] = old - h
                fm = fk.replay(fn)
                flat[i] = old
                num[k] = (fp - fm) / (2 * h)
            out.append((t.name or str(t.shape), g.reshape(-1)[idx], num))
    return out


def assert_piecewise_grad_close(build, tensors, module, n_per_tensor, rng, h=H):
    assert_pairs_close(piecewise_grad_pairs(build, tensors, module, n_per_tensor, rng, h))
