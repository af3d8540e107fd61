"""Built-in oracle checks.

Each check compares the library against an independent reference (brute-force
loops, plain Lloyd iterations, SVD, finite differences) or verifies an
invariant on random inputs.  ``run_all`` is what ``cvseg selftest`` executes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .autograd import Tape, Tensor
from .cvlr import CvlrParams, code_consistency_loss, forward as cvlr_forward
from .factorization import factorize, vq_objective
from .gradcheck import check_gradients
from .losses import (
    IGNORE,
    ConfusionAccumulator,
    cls_loss,
    mask_consistency_loss,
    metrics,
    seg_loss,
)
from .mvmc import calibrate, refine, warp_targets
from .transforms import IDENTITY, GeomTransform

GRAD_TOL = 1e-4
GRAD_STEP = 1e-5
PERMUTATION_TOL = 1e-12
DISTRIBUTION_TOL = 1e-9
MONOTONE_TOL = 1e-9
RANK_RTOL = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# -- references -------------------------------------------------------------------

def lloyd_reference(X: np.ndarray, assign: np.ndarray, k: int, iterations: int) -> list:
    """Textbook Lloyd iterations from an initial assignment.

    X is (d, n).  Each iteration recomputes centroids as member means (an empty
    cluster keeps its previous centroid) and reassigns every point to the
    nearest centroid, ties to the lowest index.  Returns the assignment after
    every iteration.
    """
    d, n = X.shape
    centroids = np.zeros((d, k))
    history = []
    for _ in range(iterations):
        new = centroids.copy()
        for j in range(k):
            members = [X[:, i] for i in range(n) if assign[i] == j]
            if members:
                new[:, j] = np.mean(members, axis=0)
        centroids = new
        assign = np.array([
            min(range(k), key=lambda j: (float(np.sum((X[:, i] - centroids[:, j]) ** 2)), j))
            for i in range(n)
        ])
        history.append(assign)
    return history


def brute_force_rates(gt: np.ndarray, pred: np.ndarray, k: int) -> tuple:
    """Per-pixel counting of tp/fp/fn; classes with an empty denominator are skipped."""
    tp, fp, fn = [0] * k, [0] * k, [0] * k
    for g, p in zip(gt.reshape(-1).tolist(), pred.reshape(-1).tolist()):
        if g == IGNORE:
            continue
        if g == p:
            tp[g] += 1
        else:
            fp[p] += 1
            fn[g] += 1

    def mean_ratio(num, den):
        vals = np.array([n / d for n, d in zip(num, den) if d > 0], dtype=np.float64)
        return float(np.mean(vals)) if len(vals) else 0.0

    iou = mean_ratio(tp, [tp[c] + fp[c] + fn[c] for c in range(k)])
    fdr = mean_ratio(fp, [tp[c] + fp[c] for c in range(k)])
    fnr = mean_ratio(fn, [tp[c] + fn[c] for c in range(k)])
    return iou, fdr, fnr


def numeric_rank(m: np.ndarray, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s > rtol * s[0])) if s[0] > 0 else 0


def _random_codes(rng: np.random.Generator, k: int, n: int) -> np.ndarray:
    z = rng.normal(size=(k, n))
    e = np.exp(z - z.max(axis=0))
    return e / e.sum(axis=0)


def _initial_assignment(rng: np.random.Generator, k: int, n: int) -> np.ndarray:
    assign = rng.integers(0, k, size=n)
    assign[rng.permutation(n)[:k]] = np.arange(k)  # no cluster starts empty
    return assign


# -- checks ----------------------------------------------------------------------------

def check_kmeans_oracle(n_instances: int = 100, iterations: int = 5, d: int = 8, n: int = 30, k: int = 3,
                        seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n_instances):
        X = rng.normal(size=(d, n))
        assign0 = _initial_assignment(rng, k, n)
        expected = lloyd_reference(X, assign0, k, iterations)
        C0 = np.eye(k)[assign0].T
        state, _ = factorize([Tensor(X)], [Tensor(C0)], T=iterations, hard=True, keep_trace=True)
        got = [c[0].argmax(axis=0) for _, c in state.trace]
        mismatches += sum(not np.array_equal(e, g) for e, g in zip(expected, got))
    return CheckResult("kmeans-oracle", mismatches == 0,
                       f"{n_instances} instances x {iterations} iterations, {mismatches} assignment mismatches")


def check_low_rank(n_instances: int = 100, d: int = 16, k: int = 4, n_v: int = 50, T: int = 3,
                   seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0
    for _ in range(n_instances):
        X = [Tensor(rng.normal(size=(d, n_v))) for _ in range(2)]
        C = [Tensor(_random_codes(rng, k, n_v)) for _ in range(2)]
        _, recon = factorize(X, C, tau=float(rng.uniform(0.2, 2.0)), T=T)
        worst = max(worst, *(numeric_rank(r.data) for r in recon))
        worst = max(worst, numeric_rank(np.concatenate([r.data for r in recon], axis=1)))
    return CheckResult("low-rank-bound", worst <= k, f"max numeric rank {worst} (bound {k})")


def check_monotone(n_instances: int = 50, iterations: int = 8, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(n_instances):
        k = int(rng.integers(2, 5))
        d = int(rng.integers(k + 1, 10))
        n_views = int(rng.integers(1, 3))
        X = [Tensor(rng.normal(size=(d, int(rng.integers(k + 5, 40))))) for _ in range(n_views)]
        C = [Tensor(np.eye(k)[_initial_assignment(rng, k, x.shape[1])].T) for x in X]
        state, _ = factorize(X, C, T=iterations, hard=True, keep_trace=True)
        obj = [vq_objective(X, D, codes, squared=True) for D, codes in state.trace]
        worst = max(worst, max(b - a for a, b in zip(obj, obj[1:])))
    return CheckResult("vq-monotone", worst <= MONOTONE_TOL, f"largest increase {worst:.3e} (tol {MONOTONE_TOL})")


def _op_cases(rng: np.random.Generator) -> list:
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    # weights are drawn once: the functions must be deterministic
    w_t, w_s, w_c, w_st = r(4, 2, 3), r(4, 3), r(2, 5), r(2, 3)
    return [
        ("add", lambda a, b: F.add(a, b), [r(3, 4), r(4)]),
        ("sub", lambda a, b: F.sub(a, b), [r(3, 4), r(3, 1)]),
        ("mul", lambda a, b: F.mul(a, b), [r(3, 4), r(3, 4)]),
        ("div", lambda a, b: F.div(a, b), [r(3, 4), pos(3, 4)]),
        ("neg", F.neg, [r(5)]),
        ("power", lambda a: F.power(a, 3.0), [r(4, 3)]),
        ("exp", F.exp, [r(4, 3)]),
        ("log", F.log, [pos(4, 3)]),
        ("sqrt", F.sqrt, [pos(4, 3)]),
        ("abs", F.abs, [r(4, 3) + 0.1]),
        ("relu", F.relu, [r(4, 3) + 0.05]),
        ("sigmoid", F.sigmoid, [r(4, 3)]),
        ("log_sigmoid", F.log_sigmoid, [3 * r(4, 3)]),
        ("matmul", F.matmul, [r(5, 4), r(4, 6)]),
        ("matmul-batched", F.matmul, [r(2, 3, 4), r(4, 2)]),
        ("sum", lambda a: F.sum(a * a, axis=1), [r(3, 4)]),
        ("mean", lambda a: F.mean(a * a, axis=(0, 2)), [r(2, 3, 4)]),
        ("max", lambda a: F.max(a, axis=-1), [r(3, 5)]),
        ("reshape", lambda a: F.reshape(a, (6, 2)) * np.arange(12.0).reshape(6, 2), [r(3, 4)]),
        ("transpose", lambda a: F.transpose(a, (2, 0, 1)) * w_t, [r(2, 3, 4)]),
        ("swapaxes", lambda a: F.swapaxes(a, 0, 1) * w_s, [r(3, 4)]),
        ("flip", lambda a: F.flip(a, -1) * np.arange(4.0), [r(3, 4)]),
        ("getitem", lambda a: F.getitem(a, (slice(None), [0, 2, 2])), [r(3, 4)]),
        ("concat", lambda a, b: F.concat([a, b], axis=1) * w_c, [r(2, 3), r(2, 2)]),
        ("stack", lambda a, b: F.stack([a, b], axis=0) * w_st, [r(3), r(3)]),
        ("softmax", lambda a: F.softmax(a, axis=0, temperature=0.7) * np.arange(12.0).reshape(3, 4), [r(3, 4)]),
        ("log_softmax", lambda a: F.log_softmax(a, axis=1) * np.arange(12.0).reshape(3, 4), [r(3, 4)]),
        ("conv2d", lambda x, w, b: F.conv2d(x, w, b, 1, 1) ** 2, [r(2, 3, 5, 5), r(4, 3, 3, 3), r(4)]),
        ("conv2d-stride2", lambda x, w: F.conv2d(x, w, None, 2, 1) ** 2, [r(1, 2, 6, 6), r(3, 2, 3, 3)]),
        ("bilinear-up", lambda x: F.bilinear_resize(x, (7, 9)) ** 2, [r(2, 4, 5)]),
        ("bilinear-down", lambda x: F.bilinear_resize(x, (3, 2)) ** 2, [r(2, 6, 5)]),
    ]


def _loss_cases(rng: np.random.Generator) -> list:
    k, n = 3, 2
    geoms = [GeomTransform(0.5, False), GeomTransform(1.0, True)]
    targets = [rng.integers(0, k, size=(n, 4, 4)), rng.integers(0, k, size=(n, 8, 8))]
    targets[0][0, 0, :2] = IGNORE
    y = np.array([[1.0, 0.0], [1.0, 1.0]])
    logits = [rng.normal(size=(n, k, 4, 4)), rng.normal(size=(n, k, 8, 8))]
    codes = [rng.uniform(size=(n, k, 4, 4)), rng.uniform(size=(n, k, 8, 8))]
    return [
        ("seg_loss", lambda a, b: seg_loss([a, b], targets, np.array([1.0, 2.0])), logits),
        ("cls_loss", lambda a, b: cls_loss([a, b], y), logits),
        ("mask_consistency_loss", lambda a, b: mask_consistency_loss([a, b], geoms, y, np.array([True, False])),
         [lg + 0.3 for lg in logits]),
        ("code_consistency_loss", lambda a, b: code_consistency_loss([a, b], geoms), codes),
    ]


def _cvlr_case(rng: np.random.Generator, T: int):
    params = CvlrParams(np.random.default_rng(int(rng.integers(1 << 30))), d_model=4, k=3, d=6, aux_hidden=3)
    feats = [rng.normal(size=(1, 4, 3, 3)), rng.normal(size=(1, 4, 2, 2))]
    names = ["in_proj", "out_proj", "aux1.weight", "aux2.weight"]
    store = params.parameters()
    originals = {name: store[name] for name in names}
    mix = [rng.normal(size=(1, 4, 3, 3)), rng.normal(size=(1, 4, 2, 2))]

    def fn(f0, f1, w_in, w_out, a1, a2):
        params.in_proj, params.out_proj = w_in, w_out
        params.aux1.weight, params.aux2.weight = a1, a2
        out = cvlr_forward([f0, f1], params, tau=0.8, T=T)
        total = F.sum(out.refined[0] * mix[0]) + F.sum(out.refined[1] * mix[1])
        return total + F.sum(out.aux_logits[0] ** 2) + F.sum(out.codes[1] * out.codes[1])

    arrays = feats + [originals[name].data.copy() for name in names]
    return fn, arrays


def check_gradients_suite(seed: int = 3, h: float = GRAD_STEP, tol: float = GRAD_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    failures, worst = [], 0.0
    cases = _op_cases(rng) + _loss_cases(rng)
    cases += [(f"cvlr-forward-T{T}",) + _cvlr_case(rng, T) for T in (1, 3)]
    for name, fn, arrays in cases:
        err = check_gradients(fn, arrays, h)
        worst = max(worst, err)
        if not err < tol:
            failures.append(f"{name}={err:.2e}")
    detail = f"{len(cases)} cases, worst relative error {worst:.2e} (tol {tol:g})"
    if failures:
        detail += "; failing: " + ", ".join(failures)
    return CheckResult("gradients", not failures, detail)


def _mvmc_failures(rng: np.random.Generator) -> list:
    failures = []
    k, h, w = 4, 8, 10
    image = rng.uniform(size=(2, h, w, 3))
    logits = rng.normal(size=(2, k, h, w))

    # single view, identity, no refinement, gamma 0: plain argmax, nothing ignored
    pm = calibrate([logits], [IDENTITY], image, gamma=0.0, refine_cfg=None, tie_band=-1.0)
    if not (np.array_equal(pm.labels, logits.argmax(axis=1)) and not pm.ignore.any()):
        failures.append("single-view collapse")

    # identical views give the single-view result
    pm2 = calibrate([logits, logits], [IDENTITY, IDENTITY], image, gamma=0.0, refine_cfg=None, tie_band=-1.0)
    if not (np.array_equal(pm2.labels, pm.labels) and np.allclose(pm2.confidence, pm.confidence, atol=1e-15)):
        failures.append("identical views")

    # view A all class 0, view B all class 1 -> averaged confidence 0.5 < 0.9 everywhere
    big = 50.0
    a = np.full((1, 2, 4, 4), -big)
    a[:, 0] = big
    b = a[:, ::-1].copy()
    pm3 = calibrate([a, b], [IDENTITY, IDENTITY], np.zeros((1, 4, 4, 3)), gamma=0.9, refine_cfg=None)
    if not pm3.ignore.all():
        failures.append("conflicting one-hot views")

    # permutation invariance with real transforms and refinement
    geoms = [GeomTransform(0.5, False), GeomTransform(1.0, True), GeomTransform(0.75, True)]
    view_logits = [rng.normal(size=(2, k) + g.output_size((h * 2, w * 2))) for g in geoms]
    img2 = rng.uniform(size=(2, h * 2, w * 2, 3))
    base = calibrate(view_logits, geoms, img2, gamma=0.5)
    for perm in ([2, 0, 1], [1, 2, 0]):
        other = calibrate([view_logits[i] for i in perm], [geoms[i] for i in perm], img2, gamma=0.5)
        if np.abs(other.confidence - base.confidence).max() >= PERMUTATION_TOL or \
                not np.array_equal(other.labels, base.labels):
            failures.append(f"permutation {perm}")

    # stop-gradient: nothing is recorded while calibrating taped logits
    leaf = Tensor(rng.normal(size=(1, k, h, w)), requires_grad=True)
    with Tape() as tape:
        scaled = leaf * 2.0
        before = len(tape)
        out = calibrate([scaled], [IDENTITY], image[:1], gamma=0.5)
        after = len(tape)
    if after != before or isinstance(out.labels, Tensor) or isinstance(out.confidence, Tensor):
        failures.append("stop-gradient")

    # refine keeps distributions valid for any iteration count
    probs = F.softmax(Tensor(rng.normal(size=(2, k, h, w)) * 3), axis=1).data
    for it in (0, 1, 3, 10):
        r = refine(probs, image, iterations=it)
        if r.min() < 0 or np.abs(r.sum(axis=1) - 1).max() > DISTRIBUTION_TOL:
            failures.append(f"refine validity (iterations={it})")

    # quadrant labels under a half-size warp land in the matching quadrants
    quad = np.zeros((8, 8), dtype=np.int64)
    quad[:4, 4:], quad[4:, :4], quad[4:, 4:] = 1, 2, 3
    half = warp_targets(quad, [GeomTransform(0.5, False)])[0]
    expected = np.array([[0, 1], [2, 3]]).repeat(2, 0).repeat(2, 1)
    if not np.array_equal(half, expected):
        failures.append("quadrant warp")
    return failures


def check_mvmc_suite(seed: int = 4) -> CheckResult:
    failures = _mvmc_failures(np.random.default_rng(seed))
    return CheckResult("mvmc-degenerate-cases", not failures,
                       "all cases hold" if not failures else "failing: " + ", ".join(failures))


def check_metric_oracle(n_pairs: int = 1000, size: int = 8, k: int = 3, seed: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n_pairs):
        gt = rng.integers(0, k, size=(size, size))
        pred = rng.integers(0, k, size=(size, size))
        got = metrics(ConfusionAccumulator(k).update(gt, pred))
        if got != brute_force_rates(gt, pred, k):
            mismatches += 1
    return CheckResult("metric-oracle", mismatches == 0, f"{n_pairs} mask pairs, {mismatches} mismatches")


def check_code_consistency_example() -> CheckResult:
    a = np.zeros((1, 2, 3, 3))
    a[:, 0] = 1.0
    b = a[:, ::-1].copy()
    got = code_consistency_loss([Tensor(a), Tensor(b)], [IDENTITY, IDENTITY]).item()
    brute = np.mean([np.abs(x - y).sum(axis=1).mean() for x, y in ((a, b), (b, a))])
    return CheckResult("code-consistency-example", got == 2.0 == brute, f"loss {got}, brute force {brute}")


def check_cross_view_coupling(seed: int = 6) -> CheckResult:
    rng = np.random.default_rng(seed)
    params = CvlrParams(rng, d_model=6, k=3, d=8)
    params.out_proj.data = rng.normal(size=params.out_proj.shape)  # zero at init, which would hide the coupling
    f = [Tensor(rng.normal(size=(1, 6, 4, 4))), Tensor(rng.normal(size=(1, 6, 4, 4)))]
    g = [f[0], Tensor(f[1].data + rng.normal(size=f[1].shape))]
    shared = [np.abs(cvlr_forward(f, params, shared=True).refined[0].data
                     - cvlr_forward(g, params, shared=True).refined[0].data).max()]
    separate = np.abs(cvlr_forward(f, params, shared=False).refined[0].data
                      - cvlr_forward(g, params, shared=False).refined[0].data).max()
    ok = shared[0] > 0 and separate == 0.0
    return CheckResult("cross-view-coupling", ok,
                       f"shared-dictionary sensitivity {shared[0]:.3e}, separate-dictionary {separate:.1e}")


CHECKS: list[tuple[str, Callable[[bool], CheckResult]]] = [
    ("kmeans", lambda quick: check_kmeans_oracle(20 if quick else 100)),
    ("low-rank", lambda quick: check_low_rank(20 if quick else 100)),
    ("monotone", lambda quick: check_monotone(10 if quick else 50)),
    ("gradients", lambda quick: check_gradients_suite()),
    ("mvmc", lambda quick: check_mvmc_suite()),
    ("metrics", lambda quick: check_metric_oracle(200 if quick else 1000)),
    ("code-consistency", lambda quick: check_code_consistency_example()),
    ("coupling", lambda quick: check_cross_view_coupling()),
]


def run_all(quick: bool = False) -> list:
    results = []
    for _, check in CHECKS:
        start = time.perf_counter()
        res = check(quick)
        res.seconds = time.perf_counter() - start
        results.append(res)
    return results
