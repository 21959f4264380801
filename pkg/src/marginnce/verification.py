"""Independent oracles for the analytic gradient paths.

Oracles only call the forward loss (and geometry); they never reuse the
closed-form gradient code they are meant to check.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .loss import BatchAngles, MarginParams, logits, loss, loss_from_logits, probabilities

FD_STEP = 1e-6
FD_RTOL = 1e-6
FD_ATOL = 1e-9


@dataclass(frozen=True)
class CheckReport:
    name: str
    max_abs_err: float
    max_rel_err: float
    cases: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tolerance)


def compare(analytic, reference, rtol, atol=0.0):
    """(max abs err, max rel err); rel err uses the floor atol / rtol.

    With this floor, rel err < rtol is the same as
    |a - r| < max(rtol * |r|, atol).
    """
    a = np.asarray(analytic, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    err = np.abs(a - r)
    floor = atol / rtol if atol > 0 else 0.0
    scale = np.maximum(np.abs(r), floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(err == 0, 0.0, err / scale)
    if err.size == 0:
        return 0.0, 0.0
    return float(err.max()), float(rel.max())


def _check_step(batch, step):
    if not 1e-8 <= step <= 1e-4:
        raise ValueError(f"finite-difference step {step:g} outside [1e-8, 1e-4]")
    theta = batch.angles[batch.mask]
    if np.any(theta < 2 * step) or np.any(theta > math.pi - 2 * step):
        raise ValueError("angles must stay at least 2*step away from 0 and pi")


def finite_diff_grad(batch: BatchAngles, params: MarginParams, step: float = FD_STEP,
                     weights=None, dtype=np.longdouble) -> np.ndarray:
    """Central differences of the per-anchor loss with respect to each angle.

    Each row i is perturbed entry by entry; every perturbed row goes through
    the full forward loss.  With ``weights`` the logits are rebuilt as
    sg(delta) + w * (delta - sg(delta)) with sg and w frozen at the
    unperturbed point, which is what a stop-gradient scheme differentiates.

    ``dtype`` sets the working precision of the forward evaluations; extended
    precision keeps rounding noise well below the step's truncation error.
    """
    _check_step(batch, step)
    n_rows, n_cols = batch.shape
    angles = batch.angles.astype(dtype)
    targets = batch.targets.astype(dtype)
    h = dtype(step)
    eye = np.eye(n_cols, dtype=dtype)
    out = np.zeros(batch.shape)
    center = None
    if weights is not None:
        center = logits(BatchAngles(angles, targets, batch.mask), params)
        weights = np.asarray(weights, dtype=dtype)
    for i in range(n_rows):
        rows = np.concatenate([angles[i] + h * eye, angles[i] - h * eye])
        t = np.broadcast_to(targets[i], rows.shape)
        m = np.broadcast_to(batch.mask[i], rows.shape)
        stacked = BatchAngles(rows, t, m)
        if weights is None:
            vals = loss(stacked, params)
        else:
            delta = logits(stacked, params)
            scaled = center[i] + weights[i] * (delta - center[i])
            vals = loss_from_logits(scaled, t, params.beta, m)
        out[i] = (vals[:n_cols] - vals[n_cols:]) / (2 * h)
    return np.where(batch.mask, out, 0.0)


def mc_feasibility_check(theta_pos: float, batch_size: int, tau: float,
                         trials: int = 100_000, seed: int = 0, chunk: int = 4096):
    """Empirical (min, max) of q~ for the positive over random negatives.

    Negative angles are drawn uniformly on [0, pi].
    """
    if trials < 10_000:
        raise ValueError("need at least 1e4 trials")
    rng = np.random.default_rng(seed)
    lo, hi = math.inf, -math.inf
    pos_logit = math.cos(theta_pos) / tau
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        neg = np.cos(rng.uniform(0.0, math.pi, size=(n, batch_size - 1))) / tau
        row = np.concatenate([np.full((n, 1), pos_logit), neg], axis=1)
        q = probabilities(row)[:, 0]
        lo = min(lo, float(q.min()))
        hi = max(hi, float(q.max()))
        done += n
    return lo, hi


def random_batch(rng, size, lo=0.05, hi=math.pi - 0.05, diagonal=False):
    """Random angles with one positive per row.

    The positive is a random column, or the diagonal (view-a x view-b
    layout, every column a candidate) when ``diagonal``.
    """
    angles = rng.uniform(lo, hi, size=(size, size))
    positives = np.arange(size) if diagonal else rng.integers(0, size, size=size)
    return BatchAngles.one_hot(angles, positives)


def random_params(rng, beta=None):
    return MarginParams(
        m1=float(rng.uniform(0.0, 0.6)),
        m2=float(rng.uniform(0.0, 1.0)),
        tau=float(rng.choice([0.1, 0.25, 0.5, 1.0])),
        beta=float(rng.choice([0.0, 0.5, 1.0])) if beta is None else beta,
    )


def report_table(reports) -> str:
    head = f"{'check':<32} {'max_abs_err':>12} {'max_rel_err':>12} {'tol':>9} {'cases':>7}  result"
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(
            f"{r.name:<32} {r.max_abs_err:>12.3e} {r.max_rel_err:>12.3e} "
            f"{r.tolerance:>9.1e} {r.cases:>7d}  {'PASS' if r.passed else 'FAIL'}")
    n_fail = sum(not r.passed for r in reports)
    lines.append(f"{len(reports) - n_fail}/{len(reports)} checks passed")
    return "\n".join(lines) + "\n"


def report_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "max_abs_err", "max_rel_err", "cases", "passed"])
    for r in reports:
        w.writerow([r.name, f"{r.max_abs_err:.9g}", f"{r.max_rel_err:.9g}", r.cases, int(r.passed)])
    return buf.getvalue()


def _angle_grad_check(rng, n=200):
    worst_abs = worst_rel = 0.0
    h = 1e-6
    for _ in range(n):
        d = int(rng.integers(2, 8))
        u = geometry.normalize(rng.normal(size=d))
        v = geometry.normalize(rng.normal(size=d))
        theta = geometry.angle(u, v)
        if not 0.01 < theta < math.pi - 0.01:
            continue
        g = geometry.angle_grad_wrt_embedding(u, v)
        t = rng.normal(size=d)
        t -= np.dot(t, u) * u
        t /= np.linalg.norm(t)
        # move along the great circle through u in direction t
        fd = (geometry.angle(u * math.cos(h) + t * math.sin(h), v)
              - geometry.angle(u * math.cos(h) - t * math.sin(h), v)) / (2 * h)
        a, r = compare(np.dot(g, t), fd, 1e-5, 1e-9)
        worst_abs, worst_rel = max(worst_abs, a), max(worst_rel, r)
    return CheckReport("geometry_angle_grad", worst_abs, worst_rel, n, 1e-5)


def run_all_checks(seed: int = 0):
    """Run every registered check with a fixed seed; returns CheckReports."""
    from . import gradients, schemes, simulator

    rng = np.random.default_rng(seed)
    reports = [_angle_grad_check(rng)]

    def accumulate(name, pairs, rtol, atol=0.0):
        worst_abs = worst_rel = 0.0
        for a, r in pairs:
            ea, er = compare(a, r, rtol, atol)
            worst_abs, worst_rel = max(worst_abs, ea), max(worst_rel, er)
        reports.append(CheckReport(name, worst_abs, worst_rel, len(pairs), rtol))

    sizes = (2, 4, 16, 64)

    def fd_pairs(n, make_params):
        pairs = []
        for k in range(n):
            b = random_batch(rng, sizes[k % len(sizes)])
            params = make_params()
            pairs.append((gradients.grad_theta(b, params).grad, finite_diff_grad(b, params)))
        return pairs

    accumulate("fd_plain", fd_pairs(40, lambda: MarginParams(tau=0.25)), FD_RTOL, FD_ATOL)
    accumulate("fd_margins", fd_pairs(40, lambda: random_params(rng, beta=1.0)), FD_RTOL, FD_ATOL)
    accumulate("fd_beta_general", fd_pairs(40, lambda: random_params(rng)), FD_RTOL, FD_ATOL)

    pairs = []
    for k in range(40):
        b = random_batch(rng, sizes[k % len(sizes)])
        for m1, m2 in ((0.1, 0.4), (0.5, 0.7), (0.2, 0.0)):
            params = MarginParams(m1=m1, m2=m2, tau=0.25, beta=float(rng.choice([0.5, 1.0])))
            prob, sin = gradients.margin_multipliers(b, params)
            plain = gradients.grad_theta(b, params.without_margins()).grad
            pairs.append((plain * prob * sin, gradients.grad_theta(b, params).grad))
    accumulate("decomposition_eq", pairs, 1e-10, 1e-12)

    pairs = []
    for _ in range(200):
        theta = float(rng.uniform(0.05, math.pi - 0.05))
        negs = rng.uniform(0.05, math.pi - 0.05, size=int(rng.integers(1, 64)))
        params = MarginParams(m1=float(rng.uniform(0, 0.6)), m2=float(rng.uniform(0, 1)), tau=0.25)
        row0 = np.concatenate([[math.cos(theta)], np.cos(negs)]) / params.tau
        shifted = row0.copy()
        shifted[0] = (math.cos(theta + params.m1) - params.m2) / params.tau
        q0, q1 = probabilities(row0), probabilities(shifted)
        dec = gradients.multiplier_decomposition(theta, float(q0[0]), params)
        pairs.append((dec.prob_term, (1 - q1[0]) / (1 - q0[0])))
        pairs.append((np.full(negs.size, dec.neg_prob_term), q1[1:] / q0[1:]))
    accumulate("prob_term_symmetry", pairs, 1e-12)

    pairs = []
    for k in range(50):
        b = random_batch(rng, sizes[k % len(sizes)])
        for m2 in (0.0, 0.4, 0.7, 5.0):
            params = MarginParams(m1=float(rng.uniform(0, 0.6)), m2=m2, tau=0.25)
            pairs.append((gradients.subtractive_closed_form_grad(b, params).grad,
                          gradients.grad_theta(b, params).grad))
    accumulate("subtractive_closed_form", pairs, 1e-10, 1e-12)

    pairs = []
    for k in range(50):
        b = random_batch(rng, sizes[k % len(sizes)], diagonal=True)
        params = MarginParams(m1=float(rng.uniform(0, 0.6)), m2=50.0, tau=0.25)
        pos = b.positive_index()
        rows = np.arange(b.shape[0])
        g = gradients.grad_theta(b, params).grad[rows, pos]
        lim = np.array([gradients.m2_limit_grad(t, params) for t in b.angles[rows, pos]])
        pairs.append((g, lim))
    accumulate("m2_limit", pairs, 1e-8, 1e-8)

    def scheme_fd(name, make_config, beta=None):
        pairs = []
        for k in range(20):
            b = random_batch(rng, sizes[k % len(sizes)])
            params = random_params(rng, beta=beta)
            cfg = make_config()
            w = schemes.scheme_weights(b, params, cfg)
            pairs.append((schemes.modified_grad(b, params, cfg).grad,
                          finite_diff_grad(b, params, weights=w)))
        accumulate(name, pairs, FD_RTOL, FD_ATOL)

    scheme_fd("fd_pos_emphasis", lambda: schemes.SchemeConfig("pos_emphasis", s=float(rng.uniform(1, 40))))
    scheme_fd("fd_curvature", lambda: schemes.SchemeConfig(
        "curvature", s=float(rng.uniform(1, 40)), c=float(rng.choice([1 / 3, 0.5, 0.7, 1, 1.5, 2.5, 5]))))
    scheme_fd("fd_attenuation_I", lambda: schemes.SchemeConfig("attenuation_I", alpha=float(rng.uniform(0, 0.95))), beta=1.0)
    scheme_fd("fd_attenuation_II", lambda: schemes.SchemeConfig("attenuation_II", alpha=float(rng.uniform(0, 0.95))), beta=1.0)

    pairs = []
    for k in range(30):
        b = random_batch(rng, sizes[k % len(sizes)])
        for m2 in (0.2, 0.4, 1.0):
            cfg = schemes.SchemeConfig("attenuation_I", alpha=schemes.alpha_from_m2(m2, 0.25))
            pairs.append((schemes.modified_grad(b, MarginParams(tau=0.25), cfg).grad,
                          gradients.grad_theta(b, MarginParams(m2=m2, tau=0.25)).grad))
    accumulate("attenuation_I_equals_m2", pairs, 1e-10, 1e-12)

    pairs = []
    configs = [schemes.SchemeConfig("none"), schemes.SchemeConfig("pos_emphasis", s=20.0),
               schemes.SchemeConfig("curvature", s=20.0, c=0.7),
               schemes.SchemeConfig("attenuation_I", alpha=0.5),
               schemes.SchemeConfig("attenuation_II", alpha=0.9)]
    for k in range(20):
        b = random_batch(rng, sizes[k % len(sizes)])
        params = random_params(rng, beta=1.0)
        delta = logits(b, params)
        plain = loss_from_logits(delta, b.targets, params.beta, b.mask)
        for cfg in configs:
            w = schemes.scheme_weights(b, params, cfg)
            scaled = schemes.stop_gradient_logits(delta, w)
            pairs.append((loss_from_logits(scaled, b.targets, params.beta, b.mask), plain))
    accumulate("forward_invariance", pairs, 1e-15, 1e-15)

    mismatches = 0
    cases = 0
    for k in range(20):
        b = random_batch(rng, sizes[k % len(sizes)])
        params = random_params(rng, beta=1.0)
        s = float(rng.uniform(1, 40))
        g = lambda cfg: schemes.modified_grad(b, params, cfg).grad
        none = g(schemes.SchemeConfig("none"))
        checks = [
            (g(schemes.SchemeConfig("curvature", s=s, c=math.inf)), g(schemes.SchemeConfig("pos_emphasis", s=s))),
            (g(schemes.SchemeConfig("pos_emphasis", s=1.0)), none),
            (g(schemes.SchemeConfig("attenuation_I", alpha=0.0)), none),
            (g(schemes.SchemeConfig("attenuation_II", alpha=0.0)), none),
        ]
        for a, r in checks:
            cases += 1
            mismatches += int(not np.array_equal(a, r))
    reports.append(CheckReport("reduction_chain_bitwise", float(mismatches), float(mismatches), cases, 0.5))

    pairs = []
    for m1 in (0.2, 0.5):
        thr = gradients.sign_reversal_threshold(m1)
        for theta, expect_flip in ((thr + 0.5 * (math.pi - thr), True), (thr - 0.3, False)):
            b = BatchAngles.one_hot([[theta, 1.0], [1.0, theta]], [0, 1])
            with_m = gradients.grad_theta(b, MarginParams(m1=m1, tau=0.25)).grad[0, 0]
            without = gradients.grad_theta(b, MarginParams(tau=0.25)).grad[0, 0]
            flipped = np.sign(with_m) != np.sign(without)
            pairs.append((float(flipped), float(expect_flip)))
    accumulate("sign_reversal", pairs, 0.5)

    worst = 0.0
    feas_cases = 0
    for theta, size in ((math.pi / 2, 256), (1.0, 16), (2.5, 2)):
        low, high = gradients.feasible_qtilde_range(theta, size, 0.25)
        lo, hi = mc_feasibility_check(theta, size, 0.25, trials=20_000, seed=seed)
        feas_cases += 1
        # > 0 means an empirical sample escaped the analytic interval
        worst = max(worst, (low - lo) / low, (hi - high) / high)
    reports.append(CheckReport("feasible_qtilde_mc", max(worst, 0.0), max(worst, 0.0), feas_cases, 1e-12))

    reports.append(simulator.gradient_path_check(seed))
    return reports
