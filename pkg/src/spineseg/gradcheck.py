"""Central-difference verification of the analytic gradients.

The production network runs in float32; verification is meant to run on
float64 twins of the same ops ("check mode"), where central differences are
trustworthy to ~1e-8. The float32 path is still checked, with a larger step
and a looser bar.

Probe inputs for kinked ops (relu family, max pooling) are pushed away from
their kinks so the ±eps evaluations stay on one linear piece; a finite
difference across a kink says nothing about the analytic gradient.

Inside a full network the kinks cannot be dodged by construction: every
hidden pixel of every relu/leaky/max-pool carries one, and a ±eps step along
a random weight crosses some of them with fair probability. Crossing does
not shrink the error with eps (the slope jump is fixed), but it is easy to
detect: estimates at step eps and eps/2 disagree far beyond rounding. The
checker therefore refines the step for that coordinate until two scales
agree, which also escapes the kink (a kink at distance d from the base point
stops interfering once eps < d).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor


@dataclass
class CheckReport:
    name: str
    passed: bool
    max_rel_err: float
    worst_param: str = ""
    worst_index: int = -1
    n_checked: int = 0
    eps: float = 0.0
    tol: float = 0.0

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tol:.1e}, {self.n_checked} coords, eps {self.eps:.1e})")


def _defaults_for(dtype):
    # (eps, tol): float32 forward noise forces a bigger step and a looser bar
    if np.dtype(dtype) == np.float64:
        return 1e-3, 1e-6
    return 3e-2, 1e-3


def _hull_consistent(analytic, sides, tol):
    # A one-sided difference quotient is a convex blend of the slopes of the
    # piecewise segments it crosses, so the local slope at the base point
    # always lies between the forward and backward quotients (widened for
    # tol and their rounding floors). A side may testify only when its own
    # floor sits well under the signal, else deep-rung noise would bracket
    # anything. One readable side alone pins the slope to 10x tol (one-sided
    # quotients carry O(step) truncation that a bracket would have absorbed).
    good = [(est_s, noise_s) for est_s, noise_s in sides
            if noise_s <= 0.1 * max(abs(est_s), abs(analytic), 1e-300)]
    if not good:
        return False
    if len(good) == 1:
        est_s, noise_s = good[0]
        return (abs(est_s - analytic)
                <= 10.0 * tol * max(abs(est_s), abs(analytic)) + noise_s)
    lo = min(est_s for est_s, _ in good)
    hi = max(est_s for est_s, _ in good)
    pad = (tol * max(abs(analytic), abs(lo), abs(hi))
           + sum(noise_s for _, noise_s in good))
    return lo - pad <= analytic <= hi + pad


def finite_diff_check(fn, params, eps=None, tol=None, max_coords=25,
                      rng=None, name="check", shrink=10, noise_factor=64.0):
    """Compare analytic gradients of fn against central differences.

    fn builds the computation from the given parameter Tensors and returns a
    scalar Tensor. It must be deterministic: we evaluate it twice at the
    base point and demand bitwise-equal results. Up to max_coords
    coordinates per parameter are perturbed (all of them when the parameter
    is small).

    Each coordinate walks a step ladder eps, eps/2, eps/4, ... looking for
    clean rungs: ones whose forward and backward one-sided quotients agree
    with each other to within their own rounding floors. Side agreement
    certifies that no kink sits inside the step, but one clean rung is not
    yet trustworthy -- even-order truncation cancels out of the side gap,
    and a kink blend on one side can coincide with the other side's value.
    Three consecutive clean rungs with agreeing central estimates span a
    4x range of scales, across which truncation (which quarters per rung)
    and kink blends (which double per rung) cannot both hold still, so the
    estimate there is converged. The verdict is taken at the first such
    run and is final: the analytic value must match the estimate within
    tol (or within the rung's rounding floor, for coordinates whose
    gradient genuinely drowns in quotient noise). Taking the verdict at
    the shallowest settled run matters, because the floor under a
    difference quotient grows like 1/step -- were deeper rungs allowed to
    absolve, any fixed discrepancy (a stray factor, say) would eventually
    duck under a floor that had grown past it.

    A rung whose sides disagree is straddling a kink or strong curvature:
    its central estimate blends the one-sided slopes and proves nothing
    either way, so the ladder descends. Kinks and curvature both fade as
    the step shrinks (a kink at distance d stops interfering once the step
    is below d), so clean rungs eventually appear for every coordinate
    whose terrain the ladder can resolve.

    Coordinates where no clean rung is reachable (a kink pinned closer to
    the base point than any usable step) get one honest escape: each
    one-sided quotient is a convex blend of genuine segment slopes on its
    side, so the true local slope must lie inside the span of the two
    sides -- slightly widened for tol and noise -- at every rung where the
    sides are readable above their own floors. The analytic value is
    accepted if it falls in that bracket at any such rung. A stray factor,
    dropped term, or wrong sign lands outside it.

    noise_factor scales the rounding floor under the difference quotient:
    roughly the number of same-sign roundings a forward value accumulates.
    64 is generous for a single primitive; a full network needs more (see
    model_end_to_end_check).
    """
    params = list(params)
    if eps is None or tol is None:
        d_eps, d_tol = _defaults_for(params[0].data.dtype)
        eps = d_eps if eps is None else eps
        tol = d_tol if tol is None else tol
    rng = rng or np.random.default_rng(0)

    base = fn()
    again = fn()
    if not np.array_equal(base.data, again.data):
        raise RuntimeError(
            f"{name}: fn is not deterministic (re-evaluation changed the value)")

    for p in params:
        if not p.data.flags["C_CONTIGUOUS"]:
            p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)

    # Central differencing divides the forward rounding noise by 2*eps, so a
    # coordinate whose true gradient is small drowns in it. The comparison
    # therefore carries an absolute floor scaled from machine epsilon and the
    # loss magnitude; genuinely wrong backward math (dropped terms, wrong
    # signs, stray factors) sits orders of magnitude above that floor.
    mach = float(np.finfo(params[0].data.dtype).eps)
    f0 = float(base.data.reshape(-1)[0])

    worst = 0.0
    worst_param, worst_index = "", -1
    n_checked = 0
    all_ok = True
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)  # view: perturbations hit p.data
        grad = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        n = flat.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            # always include the strongest-gradient coordinate: it carries
            # the most quotient signal above the rounding floor, and a
            # systematic bug in a backward shows on it first; the rest of
            # the budget is spent at random
            top = int(np.argmax(np.abs(grad)))
            rest = [int(c) for c in rng.choice(n, size=max_coords,
                                               replace=False) if c != top]
            coords = np.array([top] + rest[:max_coords - 1])
        for i in coords:
            keep = flat[i]

            def measure(e):
                flat[i] = keep + e
                h_plus = float(flat[i]) - float(keep)  # realized step
                f_plus = float(fn().data.reshape(-1)[0])
                flat[i] = keep - e
                h_minus = float(keep) - float(flat[i])
                f_minus = float(fn().data.reshape(-1)[0])
                flat[i] = keep
                span = h_plus + h_minus
                est = (f_plus - f_minus) / span
                floor = (noise_factor * mach
                         * max(abs(f_plus), abs(f_minus)) / span)
                sides = (((f_plus - f0) / h_plus,
                          noise_factor * mach * max(abs(f_plus), abs(f0))
                          / h_plus),
                         ((f0 - f_minus) / h_minus,
                          noise_factor * mach * max(abs(f_minus), abs(f0))
                          / h_minus))
                return est, floor, sides

            analytic = float(grad[i])
            e = eps
            rel = np.inf
            ok = None
            hull_ok = False
            prev_est = prev_noise = None
            settle_run = 0
            for _ in range(shrink + 1):
                est, noise, sides = measure(e)
                (est_f, noise_f), (est_b, noise_b) = sides
                plain = max(abs(est), abs(analytic), 1e-300)
                # sides agreeing within their own floors mark a clean rung:
                # no kink inside the step. Clean alone is not a verdict --
                # even-order truncation cancels out of the side gap, and a
                # kink blend on one side can coincide with the other -- but
                # three clean rungs in a row with agreeing estimates span a
                # 4x range of scales, across which truncation (quartering
                # per rung) and kink blends (doubling per rung) cannot both
                # hold still. The verdict is taken at the first such run
                # and is final: taking it at the shallowest rung matters,
                # because the rounding floor grows like 1/step, and deeper
                # rungs would eventually absolve any fixed discrepancy (a
                # stray factor, say) once the floor grew past it.
                gap = abs(est_f - est_b)
                clean = gap <= (2.0 * (noise_f + noise_b)
                                + tol * max(abs(est_f), abs(est_b),
                                            abs(analytic)))
                agreed = (clean and prev_est is not None
                          and abs(est - prev_est) <= (tol * max(plain,
                                                                abs(prev_est))
                                                      + noise + prev_noise))
                settle_run = settle_run + 1 if agreed else 0
                if settle_run >= 2:
                    floor = max(tol * plain, 4.0 * noise)
                    rel = abs(est - analytic) / max(plain, floor / tol)
                    ok = rel <= tol
                    break
                prev_est = est if clean else None
                prev_noise = noise
                # a rung whose sides disagree straddles a kink or strong
                # curvature: its central estimate blends the one-sided
                # slopes and proves nothing either way; the true slope
                # must at least lie inside the sides' span
                if not hull_ok:
                    hull_ok = _hull_consistent(analytic, sides, tol)
                rel = min(rel, abs(est - analytic) / max(plain, noise / tol))
                # stop before the step drowns in the float's own resolution
                if e / 2.0 < 8.0 * mach * max(1.0, abs(float(keep))):
                    break
                e /= 2.0
            if ok is None:
                # no settled kink-free step was reachable: accept only when
                # the one-sided evidence brackets the analytic value
                ok = hull_ok
                if hull_ok:
                    rel = 0.0
            n_checked += 1
            all_ok = all_ok and ok
            if rel > worst:
                worst = rel
                worst_param = p.name or f"param{k}"
                worst_index = int(i)
    return CheckReport(name=name, passed=all_ok, max_rel_err=worst,
                       worst_param=worst_param, worst_index=worst_index,
                       n_checked=n_checked, eps=eps, tol=tol)


# ---------------------------------------------------------------------------
# ready-made probes for every primitive (shared by tests and the CLI)


def _randn(rng, shape, dtype, scale=1.0):
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype))


def _randn_off_kink(rng, shape, dtype, margin=0.25):
    """Normal draws shifted away from zero so ±eps never crosses a relu kink."""
    x = rng.standard_normal(shape)
    x = np.where(x >= 0, x + margin, x - margin)
    return Tensor(x.astype(dtype))


def _separated(rng, shape, dtype):
    """Distinct values with pairwise gaps >= 0.1: max-pool argmaxes cannot
    flip under a small perturbation."""
    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(np.float64) * 0.1 - 0.05 * n
    return Tensor(vals.reshape(shape).astype(dtype))


def _probe(shape, dtype, salt):
    # fixed random weights so summed losses have O(1) sign-varied gradients
    r = np.random.default_rng([salt, *map(int, shape)])
    return Tensor(r.standard_normal(shape).astype(dtype))


def primitive_checks(dtype=np.float64, seed=0):
    """CheckReports for each differentiable primitive on three random shapes."""
    rng = np.random.default_rng(seed)
    reports = []

    def run(name, fn, params):
        reports.append(finite_diff_check(fn, params, rng=rng, name=name))

    def dot_probe(y, salt):
        return T.tsum(T.mul(y, _probe(y.data.shape, y.data.dtype, salt)))

    for si, (n, ci, co, hw) in enumerate([(1, 2, 3, 6), (2, 3, 2, 8), (1, 1, 1, 4)]):
        x = _randn(rng, (n, ci, hw, hw), dtype)
        w = _randn(rng, (co, ci, 3, 3), dtype, 0.5)
        b = _randn(rng, (co,), dtype)
        run(f"conv2d#{si}",
            lambda x=x, w=w, b=b: dot_probe(T.conv2d(x, w, b, 1, 1), 1), [x, w, b])

        wt = _randn(rng, (ci, co, 2, 2), dtype, 0.5)
        bt = _randn(rng, (co,), dtype)
        run(f"conv_transpose2d#{si}",
            lambda x=x, w=wt, b=bt: dot_probe(T.conv_transpose2d(x, w, b, 2), 2),
            [x, wt, bt])

        xp = _separated(rng, (n, ci, hw, hw), dtype)
        run(f"maxpool2x2#{si}",
            lambda x=xp: dot_probe(T.maxpool2x2(x)[0], 3), [xp])

        g = _randn(rng, (ci,), dtype)
        be = _randn(rng, (ci,), dtype)
        st = {"mean": np.zeros(ci, dtype), "var": np.ones(ci, dtype)}
        # dict(st) per call: buffer updates stay local, so fn is deterministic
        run(f"batchnorm2d-train#{si}",
            lambda x=x, g=g, be=be, st=st: dot_probe(
                T.batchnorm2d(x, g, be, dict(st), "train"), 4), [x, g, be])
        st2 = {"mean": rng.standard_normal(ci).astype(dtype),
               "var": (rng.random(ci) + 0.5).astype(dtype)}
        run(f"batchnorm2d-eval#{si}",
            lambda x=x, g=g, be=be, st=st2: dot_probe(
                T.batchnorm2d(x, g, be, st, "eval"), 5), [x, g, be])

        xk = _randn_off_kink(rng, (n, ci, hw, hw), dtype)
        for j, kind in enumerate(("relu", "leaky_relu", "sigmoid")):
            run(f"activation-{kind}#{si}",
                lambda x=xk, k=kind, j=j: dot_probe(T.activation(x, k), 6 + j), [xk])

        run(f"global_avg_pool#{si}",
            lambda x=x: dot_probe(T.global_avg_pool(x), 9), [x])

        y = _randn(rng, (n, ci, hw, hw), dtype)
        run(f"add#{si}", lambda x=x, y=y: dot_probe(T.add(x, y), 10), [x, y])
        run(f"mul#{si}", lambda x=x, y=y: T.tsum(T.mul(x, y)), [x, y])

        s = Tensor((rng.random((n, ci, 1, 1)) + 0.2).astype(dtype))
        run(f"scale_channels#{si}",
            lambda x=x, s=s: dot_probe(T.scale_channels(x, s), 11), [x, s])
        m = Tensor((rng.random((n, 1, hw, hw)) + 0.2).astype(dtype))
        run(f"scale_spatial#{si}",
            lambda x=x, m=m: dot_probe(T.scale_spatial(x, m), 12), [x, m])

        run(f"concat_channels#{si}",
            lambda x=x, y=y: dot_probe(T.concat_channels([x, y]), 13), [x, y])

        run(f"bilinear_upsample#{si}",
            lambda x=x: dot_probe(T.bilinear_upsample(x, 2), 14), [x])

    return reports


def block_checks(dtype=np.float64, seed=0):
    """CheckReports for every composite block on small tensors.

    BatchNorm centers its output right on the leaky-relu kink, so these
    lean on the step ladder rather than hand-placed probes; the rounding
    floor uses a factor between the primitive and full-model settings.
    """
    from . import blocks as B

    rng = np.random.default_rng(seed)
    reports = []
    nf = 256.0

    def run(name, fn, params):
        reports.append(finite_diff_check(fn, params, rng=rng, name=name,
                                         tol=1e-3, noise_factor=nf))

    def dot_probe(y, salt):
        return T.tsum(T.mul(y, _probe(y.data.shape, y.data.dtype, salt)))

    x4 = _randn(rng, (1, 4, 8, 8), dtype)
    x6 = _randn(rng, (1, 6, 8, 8), dtype)

    cu = B.ConvUnit(rng, 4, 5, 3, dtype)
    for mode in ("train", "eval"):
        run(f"convunit-{mode}", lambda m=mode: dot_probe(cu(x4, m), 21),
            [x4] + [p for _, p in cu.named_params()])

    pc = B.PlainConv(rng, 4, 3, 3, dtype)
    run("plainconv", lambda: dot_probe(pc(x4), 22),
        [x4] + [p for _, p in pc.named_params()])

    up = B.UpConv(rng, 4, 2, dtype)
    run("upconv", lambda: dot_probe(up(x4), 23),
        [x4] + [p for _, p in up.named_params()])

    inc = B.InceptionR(rng, 4, 6, dtype)   # projected residual
    run("inception-proj", lambda: dot_probe(inc(x4, "train"), 24),
        [x4] + [p for _, p in inc.named_params()])
    inc2 = B.InceptionR(rng, 6, 6, dtype)  # plain residual
    run("inception-plain", lambda: dot_probe(inc2(x6, "train"), 25),
        [x6] + [p for _, p in inc2.named_params()])

    pb = B.PlainBlock(rng, 4, 5, dtype)
    run("plainblock", lambda: dot_probe(pb(x4, "train"), 26),
        [x4] + [p for _, p in pb.named_params()])

    r2 = B.R2Jump(rng, 4, 3, dtype)
    run("r2jump", lambda: dot_probe(r2(x4), 27),
        [x4] + [p for _, p in r2.named_params()])

    d4 = _randn(rng, (1, 4, 8, 8), dtype)
    run("fuse-add", lambda: dot_probe(T.add(x4, d4), 28), [x4, d4])
    run("fuse-concat", lambda: dot_probe(B.fuse_skip(x4, d4, "concat"), 29),
        [x4, d4])

    sc = B.SCSELite(rng, 4, dtype)
    run("scse", lambda: dot_probe(sc(x4), 30),
        [x4] + [p for _, p in sc.named_params()])
    return reports


def model_end_to_end_check(dtype=np.float64, seed=0, coords_total=50, cfg=None,
                           eps=None, tol=None):
    """Gradient-check the full two-stage network plus loss on a 16x16 input.

    Dropout is set to zero so the forward pass is deterministic; batch-norm
    runs in train mode (buffer updates do not feed back into the value).
    Samples roughly coords_total coordinates spread over all parameters.

    The bar is wider than for single primitives (1e-4 in float64, 1e-2 in
    float32): the sampled coordinates sit wherever they sit relative to the
    network's kinks, and hundreds of chained reductions raise the rounding
    floor under the difference quotient. The noise factor is raised for the
    same reason: measured wobble of the quotient across step sizes on this
    model is near 1e3 times machine epsilon (vs ~10 for one primitive), so
    the floor uses 2048 to keep a margin without blunting the check --
    a stray factor of two in some backward still lands orders of magnitude
    above it.
    """
    from .losses import total_loss
    from .network import ModelConfig, build_model

    if tol is None:
        tol = 1e-4 if np.dtype(dtype) == np.float64 else 1e-2
    rng = np.random.default_rng(seed)
    if cfg is None:
        cfg = ModelConfig(input_size=16, dropout_rate=0.0, seed=seed)
    model = build_model(cfg, dtype=dtype)
    x = Tensor(rng.standard_normal((1, 1, cfg.input_size, cfg.input_size))
               .astype(dtype))
    target = Tensor((rng.random((1, 1, cfg.input_size, cfg.input_size)) > 0.5)
                    .astype(dtype))

    def fn():
        coarse, fine = model.forward(x, mode="train")
        return total_loss(coarse, fine, target)

    params = model.parameters()
    # spread the budget, one coordinate per picked parameter: the ten
    # strongest-gradient parameters are always in (that is where the
    # quotient signal clears the floor by the widest margin, so a bug in
    # any backward they route through cannot hide under float32 noise),
    # and the rest go at random
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    with Tape() as tape:
        tape.backward(fn())
    strength = np.array([float(np.max(np.abs(p.grad))) for p in params])
    k = min(10, len(params), coords_total)
    picked = list(np.argsort(-strength)[:k])
    pool = np.array([i for i in range(len(params)) if i not in set(picked)])
    if coords_total > k and pool.size:
        extra = rng.choice(pool.size, size=min(coords_total - k, pool.size),
                           replace=False)
        picked += [int(pool[j]) for j in extra]
    subset = [params[i] for i in picked]
    return finite_diff_check(fn, subset, max_coords=1, rng=rng,
                             name="model-end-to-end", eps=eps, tol=tol,
                             noise_factor=2048.0)
