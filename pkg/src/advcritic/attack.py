"""Targeted and untargeted l2 attacks.

The confidence-targeted attack repeatedly takes the l2-minimal step that
would lift log p_target(x) to log C under a first-order model of the
log-likelihood. In differentiable mode the whole unrolled loop is a graph, so
a loss on the adversarial example can be backpropagated into the classifier
weights (second-order terms included). The discrete "keep going while
p < C" switch is routed through a sigmoid straight-through surrogate.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from advcritic import autodiff as ad

GRAD_TOL = 1e-12
# aim slightly past log C: log p is concave along each step, so exact steps
# approach C from below and would otherwise never satisfy p >= C
LOG_MARGIN = 1e-9


class AttackError(Exception):
    pass


class DegenerateGradientError(AttackError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    confidence: float = 0.9
    max_iter: int = 500
    step: str = "adaptive"  # or "fixed"
    step_norm: float = 0.1  # l2 length of a "fixed" step
    clip: float = None  # per-iteration l2 clip on the step
    bounds: tuple = (0.0, 1.0)  # None disables domain projection
    temperature: float = 10.0
    differentiable: bool = False
    surrogate: bool = True  # False: the stopping switch carries no gradient
    grad_tol: float = GRAD_TOL
    margin: float = LOG_MARGIN

    def __post_init__(self):
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.step not in ("adaptive", "fixed"):
            raise ValueError(f"unknown step policy {self.step!r}")
        if self.step == "fixed" and self.step_norm <= 0:
            raise ValueError("fixed step needs step_norm > 0")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.bounds is not None and not self.bounds[0] < self.bounds[1]:
            raise ValueError("bounds must satisfy lo < hi")


# training-time attack: 5 differentiable iterations, no per-step clip
TRAIN_ATTACK = AttackConfig(max_iter=5, clip=None, differentiable=True)
# evaluation attack: 500 iterations, steps clipped to l2 0.1, projected to [0, 1]
EVAL_ATTACK = AttackConfig(max_iter=500, clip=0.1, differentiable=False)

PRESETS = {"train": TRAIN_ATTACK, "eval": EVAL_ATTACK}


@dataclass
class AttackResult:
    x_adv: np.ndarray
    r: np.ndarray
    iterations: np.ndarray
    success: np.ndarray
    confidence: np.ndarray  # final p_target(x_adv), or p_pred for DeepFool
    target: np.ndarray
    node: object = None  # differentiable x_adv (an autodiff Node) when requested
    trace: list = field(default_factory=list)


def _rows(v, like):
    """Reshape a per-example vector to broadcast against a batch ``like``."""
    return v.reshape((v.shape[0],) + (1,) * (like.ndim - 1))


def _norms(a):
    return np.sqrt(np.sum(a.reshape(a.shape[0], -1) ** 2, axis=1))


def target_log_prob_and_grad(model, x, target):
    """log p_target(x) and its input gradient, per example."""
    xn = ad.parameter(x)
    lp = ad.pick(model.log_probs(xn), target)
    g = ad.grad(ad.sum(lp), xn, create_graph=False)
    return lp.value, g.value


def logits_and_jacobian(model, x):
    """Logits (B, k) and their input Jacobian (B, k, *x.shape[1:])."""
    x = np.asarray(x, dtype=ad.DTYPE)
    b, k = x.shape[0], model.k
    rep = ad.parameter(np.repeat(x, k, axis=0))
    z = model.logits(rep)
    sel = ad.pick(z, np.tile(np.arange(k), b))
    jac = ad.grad(ad.sum(sel), rep, create_graph=False).value
    logits = z.value[::k]
    return logits, jac.reshape((b, k) + x.shape[1:])


def project_and_clip(r, x, clip_l2=None, bounds=(0.0, 1.0)):
    """Rescale each row of ``r`` to l2 norm <= clip_l2, then keep x + r in bounds."""
    r = np.asarray(r, dtype=ad.DTYPE)
    if r.shape != np.shape(x):
        raise ValueError(f"shape mismatch {r.shape} vs {np.shape(x)}")
    if clip_l2 is not None:
        n = _norms(r)
        scale = np.where(n > clip_l2, clip_l2 / np.where(n > 0, n, 1.0), 1.0)
        r = r * _rows(scale, r)
    if bounds is not None:
        r = np.clip(x + r, bounds[0], bounds[1]) - x
    return r


def minimal_step(x, target, confidence, model, grad_tol=GRAD_TOL, margin=0.0):
    """l2-minimal step reaching log C under the linearised log-likelihood.

    r = (log C - log p_k(x)) / ||g||^2 * g with g = grad_x log p_k(x).
    Rows already at or above the confidence get r = 0.
    """
    x = np.asarray(x, dtype=ad.DTYPE)
    target = np.broadcast_to(np.asarray(target, dtype=np.int64), (x.shape[0],))
    conf = np.broadcast_to(np.asarray(confidence, dtype=ad.DTYPE), (x.shape[0],))
    lp, g = target_log_prob_and_grad(model, x, target)
    active = np.exp(lp) < conf
    g2 = np.sum(g.reshape(len(g), -1) ** 2, axis=1)
    if np.any(active & (np.sqrt(g2) < grad_tol)):
        raise DegenerateGradientError("vanishing log-likelihood gradient")
    coef = np.where(active, (np.log(conf) + margin - lp) / np.where(active, g2, 1.0), 0.0)
    return g * _rows(coef, g)


def high_confidence_attack(x, target, cfg, model, confidence=None, record_trace=False,
                           masks=None):
    """Push each row of ``x`` until p_target >= C or ``cfg.max_iter`` steps.

    ``confidence`` overrides ``cfg.confidence`` and may be per-example.
    With ``cfg.differentiable`` the result carries ``node``, the adversarial
    batch as a graph node; ``x`` may then itself be a node. ``masks``
    (max_iter x B, differentiable mode only) replaces the stopping switch
    with fixed 0/1 values.
    """
    x_val = x.value if isinstance(x, ad.Node) else np.asarray(x, dtype=ad.DTYPE)
    b = x_val.shape[0]
    target = np.broadcast_to(np.asarray(target, dtype=np.int64), (b,)).copy()
    conf = cfg.confidence if confidence is None else confidence
    conf = np.broadcast_to(np.asarray(conf, dtype=ad.DTYPE), (b,)).copy()
    if np.any(conf <= 0) or np.any(conf >= 1):
        raise ValueError("confidence must lie in (0, 1)")
    if cfg.differentiable:
        return _attack_graph(x, target, conf, cfg, model, masks)
    if masks is not None:
        raise ValueError("masks only apply to the differentiable attack")
    return _attack_loop(x_val, target, conf, cfg, model, record_trace)


def _step(lp, g, conf, cfg):
    g2 = np.sum(g.reshape(len(g), -1) ** 2, axis=1)
    if np.any(np.sqrt(g2) < cfg.grad_tol):
        raise DegenerateGradientError("vanishing log-likelihood gradient")
    if cfg.step == "adaptive":
        r = g * _rows((np.log(conf) + cfg.margin - lp) / g2, g)
    else:
        r = g * _rows(cfg.step_norm / np.sqrt(g2), g)
    return r


def _attack_loop(x, target, conf, cfg, model, record_trace):
    xhat = x.copy()
    iters = np.zeros(len(x), dtype=np.int64)
    active = np.ones(len(x), dtype=bool)
    trace = []
    lp = np.empty(len(x))
    for it in range(cfg.max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        lp_a, g_a = target_log_prob_and_grad(model, xhat[idx], target[idx])
        lp[idx] = lp_a
        still = np.exp(lp_a) < conf[idx]
        active[idx[~still]] = False
        if it == cfg.max_iter:
            break
        idx, lp_a, g_a = idx[still], lp_a[still], g_a[still]
        if idx.size == 0:
            break
        r = _step(lp_a, g_a, conf[idx], cfg)
        before = xhat[idx]
        r = project_and_clip(r, before, cfg.clip, cfg.bounds)
        xhat[idx] = before + r
        if cfg.bounds is not None:
            # exact bounds even when x + r rounds past them
            xhat[idx] = np.clip(xhat[idx], cfg.bounds[0], cfg.bounds[1])
        iters[idx] += 1
        if record_trace:
            total = _norms(xhat[idx] - x[idx])
            for j, i in enumerate(idx):
                trace.append(
                    {
                        "iteration": it + 1,
                        "index": int(i),
                        "confidence": float(np.exp(lp_a[j])),
                        "step_norm": float(_norms(r[j : j + 1])[0]),
                        "cumulative_norm": float(total[j]),
                        "x": xhat[i].copy(),
                    }
                )
    x_adv, r = _finalize(x, xhat, cfg.bounds)
    p = np.exp(model.predict_log_probs(x_adv)[np.arange(len(x)), target])
    return AttackResult(
        x_adv=x_adv,
        r=r,
        iterations=iters,
        success=p >= conf,
        confidence=p,
        target=target,
        trace=trace,
    )


def _finalize(x, xhat, bounds):
    """Return (x_adv, r) with x_adv == clip(x + r) holding bit-exactly."""
    r = xhat - x
    x_adv = x + r
    if bounds is not None:
        x_adv = np.clip(x_adv, bounds[0], bounds[1])
    return x_adv, r


def _attack_graph(x, target, conf, cfg, model, masks):
    x0 = x if isinstance(x, ad.Node) else ad.constant(x)
    xhat = x0 if x0.requires_grad else ad.parameter(x0.value)
    b = x0.shape[0]
    log_conf = ad.constant(np.log(conf) + cfg.margin)
    active = ad.constant(np.ones(b))
    iters = np.zeros(b, dtype=np.int64)
    tol2 = cfg.grad_tol**2
    for it in range(cfg.max_iter):
        lp = ad.pick(model.log_probs(xhat), target)
        if masks is not None:
            ind = ad.constant(masks[it])
        elif cfg.surrogate:
            ind = ad.straight_through_indicator(ad.exp(lp), conf, cfg.temperature)
        else:
            ind = ad.less(ad.exp(lp), conf)
        active = active * ind
        on = active.value > 0
        if not on.any():
            break
        g = ad.grad(ad.sum(lp), xhat, create_graph=True)
        g2 = ad.sq_l2norm(g)
        if np.any(on & (g2.value < tol2)):
            raise DegenerateGradientError("vanishing log-likelihood gradient")
        g2 = ad.clamp(g2, lo=tol2)
        if cfg.step == "adaptive":
            coef = (log_conf - lp) / g2
        else:
            coef = cfg.step_norm / ad.power(g2, 0.5)
        coef = coef * active
        r = g * ad.reshape(coef, (b,) + (1,) * (g.ndim - 1))
        if cfg.clip is not None:
            n = ad.l2norm(r)
            shrink = cfg.clip / ad.clamp(n, lo=cfg.clip)
            r = r * ad.reshape(shrink, (b,) + (1,) * (g.ndim - 1))
        xhat = xhat + r
        if cfg.bounds is not None:
            xhat = ad.clamp(xhat, cfg.bounds[0], cfg.bounds[1])
        iters += on
    x_adv, r = _finalize(x0.value, xhat.value, cfg.bounds)
    p = np.exp(model.predict_log_probs(x_adv)[np.arange(b), target])
    return AttackResult(
        x_adv=x_adv,
        r=r,
        iterations=iters,
        success=p >= conf,
        confidence=p,
        target=target,
        node=xhat,
    )


def closest_boundary_targets(model, x, label):
    """Class j != label minimising |z_label - z_j| / ||grad(z_label - z_j)||.

    Logit differences equal log-probability differences, so this is the
    linearised distance to each pairwise decision boundary. Ties go to the
    lower class index; rows where every candidate gradient vanishes fall back
    to the most probable other class.
    """
    x = np.asarray(x, dtype=ad.DTYPE)
    label = np.broadcast_to(np.asarray(label, dtype=np.int64), (x.shape[0],))
    logits, jac = logits_and_jacobian(model, x)
    dist, _, _ = _boundary_distances(logits, jac, label)
    targets = np.argmin(dist, axis=1)
    dead = ~np.isfinite(dist).any(axis=1)
    if dead.any():
        masked = logits.copy()
        masked[np.arange(len(x)), label] = -np.inf
        targets[dead] = np.argmax(masked[dead], axis=1)
    return targets


def _boundary_distances(logits, jac, label):
    b, k = logits.shape
    rows = np.arange(b)
    f = logits - logits[rows, label][:, None]
    w = jac - jac[rows, label][:, None]
    wn = np.sqrt(np.sum(w.reshape(b, k, -1) ** 2, axis=2))
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(wn >= GRAD_TOL, np.abs(f) / wn, np.inf)
    dist[rows, label] = np.inf
    return dist, f, w


def deepfool(x, model, max_iter=50, overshoot=0.02, clip=None, bounds=(0.0, 1.0),
             record_trace=False):
    """Untargeted DeepFool: step to the nearest linearised boundary until the label flips.

    Each raw step is (|f_l| / ||w_l||^2) w_l for the closest class l, l2-clipped
    to ``clip``; with ``bounds``, coordinates pinned at a bound and pushed
    outward are left out of w_l. The steps accumulate in r_tot and the iterate is
    x + (1 + overshoot) r_tot, projected into ``bounds``.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    x = np.asarray(x, dtype=ad.DTYPE)
    b = x.shape[0]
    orig = model.predict(x)
    xhat = x.copy()
    r_tot = np.zeros_like(x)
    active = np.ones(b, dtype=bool)
    iters = np.zeros(b, dtype=np.int64)
    closest = np.full(b, -1, dtype=np.int64)
    trace = []
    for it in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        logits, jac = logits_and_jacobian(model, xhat[idx])
        flipped = np.argmax(logits, axis=1) != orig[idx]
        active[idx[flipped]] = False
        idx, logits, jac = idx[~flipped], logits[~flipped], jac[~flipped]
        if idx.size == 0:
            break
        dist, f, w = _boundary_distances(logits, jac, orig[idx])
        ok = np.isfinite(dist).any(axis=1)
        active[idx[~ok]] = False
        idx, dist, f, w = idx[ok], dist[ok], f[ok], w[ok]
        if idx.size == 0:
            break
        l = np.argmin(dist, axis=1)
        rows = np.arange(idx.size)
        wl = w[rows, l]
        if bounds is not None:
            # coordinates pinned at a bound cannot move along w; drop them
            cur = xhat[idx]
            pinned = ((cur <= bounds[0]) & (wl < 0)) | ((cur >= bounds[1]) & (wl > 0))
            free = np.where(pinned, 0.0, wl)
            has_free = np.any(free.reshape(idx.size, -1) != 0, axis=1)
            wl = np.where(_rows(has_free, wl), free, wl)
        coef = np.abs(f[rows, l]) / np.sum(wl.reshape(idx.size, -1) ** 2, axis=1)
        r = project_and_clip(wl * _rows(coef, wl), xhat[idx], clip, None)
        r_tot[idx] += r
        xhat[idx] = x[idx] + (1.0 + overshoot) * r_tot[idx]
        if bounds is not None:
            xhat[idx] = np.clip(xhat[idx], bounds[0], bounds[1])
        closest[idx] = l
        iters[idx] += 1
        if record_trace:
            total = _norms(xhat[idx] - x[idx])
            for j, i in enumerate(idx):
                trace.append(
                    {
                        "iteration": it + 1,
                        "index": int(i),
                        "confidence": float("nan"),
                        "step_norm": float(_norms(r[j : j + 1])[0]),
                        "cumulative_norm": float(total[j]),
                        "x": xhat[i].copy(),
                        "closest": int(l[j]),
                    }
                )
    x_adv, r = _finalize(x, xhat, bounds)
    probs = model.predict_probs(x_adv)
    pred = np.argmax(probs, axis=1)
    return AttackResult(
        x_adv=x_adv,
        r=r,
        iterations=iters,
        success=pred != orig,
        confidence=probs[np.arange(b), pred],
        target=np.where(pred != orig, pred, closest),
        trace=trace,
    )


def fgsm(x, label, eps, model, bounds=(0.0, 1.0)):
    """One signed-gradient step of size ``eps`` on the NLL of ``label``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    x = np.asarray(x, dtype=ad.DTYPE)
    if eps == 0:
        return x.copy()
    label = np.broadcast_to(np.asarray(label, dtype=np.int64), (x.shape[0],))
    xn = ad.parameter(x)
    loss = -ad.sum(ad.pick(model.log_probs(xn), label))
    g = ad.grad(loss, xn, create_graph=False).value
    out = x + eps * np.sign(g)
    if bounds is not None:
        out = np.clip(out, bounds[0], bounds[1])
    return out


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})


def write_trace_csv(trace, path):
    """Per-iteration trace: iteration, index, confidence, step_norm, cumulative_norm."""
    cols = ["iteration", "index", "confidence", "step_norm", "cumulative_norm"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in trace:
            w.writerow([row["iteration"], row["index"]] + [repr(row[c]) for c in cols[2:]])
