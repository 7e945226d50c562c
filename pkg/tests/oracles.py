"""Slow reference implementations used only by the tests."""

import numpy as np

from tandem_rl.metrics import TrialClass


def boundaries(scores):
    """-inf, midpoints of consecutive unique scores, +inf."""
    u = sorted(set(float(s) for s in scores))
    return [-np.inf] + [a + (b - a) / 2.0 for a, b in zip(u[:-1], u[1:])] + [np.inf]


def rates_at(scores, labels, t):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    return sum(s < t for s in pos) / len(pos), sum(s >= t for s in neg) / len(neg)


def eer_sweep(scores, labels):
    """EER by walking every boundary and applying the documented tie-breaks."""
    best = None
    for t in boundaries(scores):
        pm, pf = rates_at(scores, labels, t)
        key = (abs(pm - pf), pm + pf)
        if best is None or key < best[0]:
            best = (key, (pm + pf) / 2.0, t)
    return best[1], best[2]


def min_norm_tdcf_sweep(asv, cm, classes, cost):
    """Exhaustive CM-threshold sweep, counting decisions at every boundary.

    Returns ``(value, cm_threshold, asv_threshold)``; the value is NaN when
    the accept-all CM has zero cost.
    """
    asv = np.asarray(asv, dtype=float)
    cm = np.asarray(cm, dtype=float)
    classes = np.asarray(classes)
    tar = classes == TrialClass.TARGET
    non = classes == TrialClass.NONTARGET
    spf = classes == TrialClass.SPOOF
    bona = tar | non
    _, asv_thr = eer_sweep(list(asv[bona]), list(tar[bona].astype(int)))
    n_tar, n_non, n_spf = tar.sum(), non.sum(), spf.sum()
    asv_miss = np.count_nonzero(asv[tar] < asv_thr) / n_tar
    asv_fa = np.count_nonzero(asv[non] >= asv_thr) / n_non
    asv_fa_spf = np.count_nonzero(asv[spf] >= asv_thr) / n_spf
    results = []
    for t in boundaries(cm):
        cm_miss_tar = np.count_nonzero(cm[tar] < t) / n_tar
        cm_miss_non = np.count_nonzero(cm[non] < t) / n_non
        cm_fa_spf = np.count_nonzero(cm[spf] >= t) / n_spf
        p_a = (1.0 - cm_miss_tar) * asv_miss
        p_b = (1.0 - cm_miss_non) * asv_fa
        p_c = cm_fa_spf * asv_fa_spf
        p_d = cm_miss_tar
        c = (cost.c_miss * cost.rho_tar * (p_a + p_d) + cost.c_fa * cost.rho_non * p_b
             + cost.c_fa_spoof * cost.rho_spoof * p_c)
        results.append((c, t))
    normalizer = results[0][0]
    if normalizer <= 0:
        return float("nan"), None, asv_thr
    best = results[0]
    for c, t in results[1:]:
        if c < best[0]:
            best = (c, t)
    return best[0] / normalizer, best[1], asv_thr


def random_trial_set(rng, max_trials=200, ties=False):
    """Random scores for a trial set that contains every class."""
    n = int(rng.integers(3, max_trials + 1))
    classes = np.concatenate([[0, 1, 2], rng.integers(0, 3, size=n - 3)])
    rng.shuffle(classes)
    shift_asv = np.where(classes == 0, 1.5, np.where(classes == 2, 1.0, 0.0))
    shift_cm = np.where(classes == 2, -1.5, 0.0)
    asv = rng.normal(size=n) + shift_asv
    cm = rng.normal(size=n) + shift_cm
    if ties:
        asv, cm = np.round(asv, 1), np.round(cm, 1)
    return asv, cm, classes


def extended_logit(spec, params, a, b):
    """Logit in 80-bit extended precision, independent of the package code."""
    k = spec.n_encoder_layers
    ws, bs = params[0::2], params[1::2]

    def encode(x):
        for w, bias in zip(ws[:k], bs[:k]):
            x = np.maximum(x @ w + bias, 0)
        return x

    h = np.concatenate((encode(a), encode(b)))
    for j, (w, bias) in enumerate(zip(ws[k:], bs[k:])):
        h = h @ w + bias
        if j < len(ws) - k - 1:
            h = np.maximum(h, 0)
    return h[0]


def extended_log_prob(logit, action):
    z = logit if action == 1 else -logit
    return -np.log1p(np.exp(-z)) if z > 0 else z - np.log1p(np.exp(z))


def finite_difference(net, a, b, loss, step=1e-6):
    """Central differences of ``loss(logit)`` evaluated in extended precision."""
    ext = [p.astype(np.longdouble) for p in net.params]
    a, b = a.astype(np.longdouble), b.astype(np.longdouble)
    h = np.longdouble(step)
    out = []
    for i, p in enumerate(ext):
        g = np.zeros(p.shape)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in ext]
            minus = [q.copy() for q in ext]
            plus[i][idx] += h
            minus[i][idx] -= h
            f_plus = loss(extended_logit(net.spec, plus, a, b))
            f_minus = loss(extended_logit(net.spec, minus, a, b))
            g[idx] = float((f_plus - f_minus) / (2 * h))
        out.append(g)
    return out
