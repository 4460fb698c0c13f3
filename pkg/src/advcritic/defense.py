"""Joint classifier/critic training, plus the reference and FGSM baselines."""

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from advcritic import attack as atk
from advcritic import autodiff as ad
from advcritic import nn
from advcritic.critic import CriticBatch, critic_objective
from advcritic.data import batches
from advcritic.evaluate import test_error

log = logging.getLogger(__name__)

DEFENSES = ("ours", "none", "at")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    defense: str = "ours"
    architecture: str = "mlp"
    hidden: tuple = (1200, 1200, 1200)
    lam: float = 0.5
    lam_rec: float = 1e-2
    lam_grad: float = 10.0
    at_weight: float = 1.0
    epsilon: float = 0.1
    lr_classifier: float = 5e-4
    lr_critic: float = 1e-3
    beta1: float = 0.5
    halve_every: int = 40
    batch_size: int = 100
    epochs: int = 100
    pretrain_epochs: int = 1
    critic_hidden: tuple = (1200, 1200)
    critic_slope: float = 0.2
    critic_input_noise: float = 0.3
    critic_hidden_noise: float = 0.5
    attack_iters: int = 5
    temperature: float = 10.0
    straight_through: bool = True  # False: the stopping switch carries no gradient
    tracker_decay: float = 0.01
    confidence_floor: float = 0.55
    cycle_fraction: float = 0.5
    target_rule: str = "closest"  # or "uniform" (masked uniform over other classes)
    seed: int = 0

    def __post_init__(self):
        if self.defense not in DEFENSES:
            raise ValueError(f"unknown defense {self.defense!r}")
        if min(self.lam, self.lam_rec, self.lam_grad, self.at_weight, self.epsilon) < 0:
            raise ValueError("loss weights and epsilon must be non-negative")
        if self.lr_classifier <= 0 or self.lr_critic <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.pretrain_epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 1, pretrain_epochs >= 0, batch_size >= 1")
        if self.target_rule not in ("closest", "uniform"):
            raise ValueError(f"unknown target rule {self.target_rule!r}")
        if not 0 < self.cycle_fraction <= 1:
            raise ValueError("cycle_fraction must lie in (0, 1]")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "critic_hidden", tuple(self.critic_hidden))

    @property
    def total_epochs(self):
        return self.pretrain_epochs + self.epochs

    def attack_config(self):
        return replace(
            atk.TRAIN_ATTACK,
            max_iter=self.attack_iters,
            temperature=self.temperature,
            surrogate=self.straight_through,
        )

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d


class ConfidenceTracker:
    """Per-class running mean of the classifier's confidence on natural data."""

    LO, HI = 1e-6, 1.0 - 1e-6

    def __init__(self, values, decay=0.01):
        self.values = np.clip(np.asarray(values, dtype=np.float64), self.LO, self.HI)
        self.decay = float(decay)

    def update(self, probs_true, labels):
        """c_k <- (1 - a) c_k + a * mean(p_y over batch members of class k)."""
        labels = np.asarray(labels)
        for k in np.unique(labels):
            batch_mean = float(np.mean(probs_true[labels == k]))
            self.values[k] = (1 - self.decay) * self.values[k] + self.decay * batch_mean
        np.clip(self.values, self.LO, self.HI, out=self.values)
        return self

    def confidence(self, classes, floor=0.0):
        return np.clip(np.maximum(self.values[classes], floor), self.LO, self.HI)


def select_target(x, y, model, rule="closest", rng=None):
    """Attack target per example; never the source label."""
    y = np.asarray(y, dtype=np.int64)
    if rule == "uniform":
        shift = rng.integers(1, model.k, size=len(y))
        return (y + shift) % model.k
    return atk.closest_boundary_targets(model, x, y)


def classifier_loss(model, critic, x, y, targets, conf, cfg, rng, adv=None):
    """NLL + lam * E[-log D_target(A(x))] + lam_rec * E||A(A(x, t), y) - x||.

    ``conf`` is a pair (forward, backward) of per-example attack confidences.
    ``adv`` may carry an already built differentiable attack on ``x``.
    Returns (total, parts, adv); ``adv`` is None when both robustness weights
    are zero, in which case total is exactly the NLL node.
    """
    fwd_conf, back_conf = conf
    nll = nn.nll_loss(model.log_probs(x), y)
    parts = {"nll": nll}
    if cfg.lam == 0 and cfg.lam_rec == 0:
        return nll, parts, None
    acfg = cfg.attack_config()
    if adv is None:
        adv = atk.high_confidence_attack(x, targets, acfg, model, confidence=fwd_conf)
    total = nll
    if cfg.lam > 0:
        fool = -ad.mean(ad.log_sigmoid(critic.head_logit(adv.node, targets, True, rng)))
        parts["fool"] = fool
        total = total + cfg.lam * fool
    if cfg.lam_rec > 0:
        cycle = cycle_loss(model, adv.node, x, y, back_conf, acfg, rng, cfg.cycle_fraction)
        parts["cycle"] = cycle
        total = total + cfg.lam_rec * cycle
    return total, parts, adv


def cycle_loss(model, x_adv, x, y, back_conf, acfg, rng, fraction=1.0):
    """Mean ||A(x_adv, y) - x||_2 over a random ``fraction`` of the batch."""
    b = x_adv.shape[0]
    if fraction < 1.0:
        m = max(1, int(round(fraction * b)))
        rows = np.sort(rng.choice(b, size=m, replace=False))
        x_adv = ad.take_rows(x_adv, rows)
        x, y, back_conf = x[rows], y[rows], back_conf[rows]
    back = atk.high_confidence_attack(x_adv, y, acfg, model, confidence=back_conf)
    return ad.mean(ad.l2norm(back.node - x))


def cycle_residual(model, x, y, tracker, cfg):
    """Mean ||A(A(x, t), y) - x||_2 with the training attack and tracked confidences, no graph."""
    acfg = replace(cfg.attack_config(), differentiable=False)
    targets = select_target(x, y, model, "closest")
    fwd = atk.high_confidence_attack(
        x, targets, acfg, model, confidence=tracker.confidence(targets, cfg.confidence_floor)
    )
    back = atk.high_confidence_attack(
        fwd.x_adv, y, acfg, model, confidence=tracker.confidence(y, cfg.confidence_floor)
    )
    diff = (back.x_adv - x).reshape(len(x), -1)
    return float(np.mean(np.linalg.norm(diff, axis=1)))


@dataclass
class TrainResult:
    classifier: nn.Classifier
    critic: nn.Critic = None
    log: list = field(default_factory=list)
    tracker: ConfidenceTracker = None


def _streams(seed):
    """Independent generators: init, shuffle, critic noise, cycle subsets, critic init."""
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(5)]


def _init_seed(rng):
    return int(rng.integers(0, 2**31 - 1))


def classifier_spec(cfg, input_shape, k):
    return nn.ClassifierSpec(cfg.architecture, tuple(input_shape), k, cfg.hidden)


def critic_spec(cfg, input_shape, k):
    return nn.CriticSpec(
        tuple(input_shape),
        k,
        cfg.critic_hidden,
        cfg.critic_slope,
        cfg.critic_input_noise,
        cfg.critic_hidden_noise,
    )


def _class_confidence(model, dataset, batch_size=500):
    total = np.zeros(dataset.k)
    count = np.zeros(dataset.k)
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        p = model.predict_probs(dataset.images[sl])
        y = dataset.labels[sl]
        np.add.at(total, y, p[np.arange(len(y)), y])
        np.add.at(count, y, 1)
    return np.where(count > 0, total / np.maximum(count, 1), 0.5)


def _lr(base, epoch, halve_every):
    return base * 0.5 ** (epoch // halve_every) if halve_every else base


def _record(epoch, phase, sums, n_batches, lr, test_err, tracker, started):
    rec = {"epoch": epoch, "phase": phase}
    for key in ("nll", "critic_loss", "penalty", "fool_loss", "cycle_loss"):
        rec[key] = sums[key] / n_batches if key in sums else None
    rec["test_error"] = test_err
    rec["mean_confidence"] = None if tracker is None else tracker.values.tolist()
    rec["lr"] = lr
    rec["seconds"] = round(time.perf_counter() - started, 3)
    return rec


def train(cfg, dataset, test_set=None, on_epoch=None, probe=None):
    """Train per ``cfg.defense``: "ours" (adversary critic), "none" or "at".

    Every defense runs ``cfg.total_epochs`` epochs; for "ours" the first
    ``pretrain_epochs`` are plain NLL and seed the confidence tracker. The
    log holds one record per epoch. With ``probe = (x, y)`` the "ours"
    records also carry ``probe_cycle``, the cycle residual on that batch.
    """
    if cfg.defense == "at":
        return train_adversarial_baseline(cfg, dataset, test_set, on_epoch)
    input_shape = dataset.images.shape[1:]
    r_init, r_shuffle, r_noise, r_cycle, r_critic = _streams(cfg.seed)
    model = nn.build_classifier(classifier_spec(cfg, input_shape, dataset.k), _init_seed(r_init))
    opt_f = nn.Adam(model.params, lr=cfg.lr_classifier, beta1=cfg.beta1)
    ours = cfg.defense == "ours"
    robust = ours and (cfg.lam > 0 or cfg.lam_rec > 0)
    critic = opt_d = None
    if robust:
        critic = nn.build_critic(critic_spec(cfg, input_shape, dataset.k), _init_seed(r_critic))
        opt_d = nn.Adam(critic.params, lr=cfg.lr_critic, beta1=cfg.beta1)
    tracker = None
    history = []
    for epoch in range(cfg.total_epochs):
        started = time.perf_counter()
        pretrain = not ours or epoch < cfg.pretrain_epochs
        phase = "pretrain" if ours and pretrain else ("train" if ours else "reference")
        if ours and not pretrain and tracker is None:
            tracker = ConfidenceTracker(_class_confidence(model, dataset), cfg.tracker_decay)
        opt_f.lr = _lr(cfg.lr_classifier, epoch, cfg.halve_every)
        if opt_d is not None:
            opt_d.lr = _lr(cfg.lr_critic, epoch, cfg.halve_every)
        sums = {}
        n_batches = 0
        for step, idx in enumerate(batches(len(dataset), cfg.batch_size, r_shuffle)):
            x, y = dataset.images[idx], dataset.labels[idx]
            try:
                if pretrain or tracker is None:
                    loss = nn.nll_loss(model.log_probs(x), y)
                    opt_f.minimize(loss)
                    parts = {"nll": loss.item()}
                else:
                    parts = _defense_step(
                        model, critic, opt_f, opt_d, tracker, x, y, cfg, r_noise, r_cycle
                    )
            except (ad.NonFiniteError, atk.DegenerateGradientError) as exc:
                snapshot = {"epoch": epoch, "batch": step, "error": str(exc), "history": history}
                raise TrainingDivergedError(f"training diverged: {exc}", snapshot) from exc
            for key, val in parts.items():
                sums[key] = sums.get(key, 0.0) + val
            n_batches += 1
        err = test_error(model, test_set) if test_set is not None else None
        rec = _record(epoch, phase, sums, n_batches, opt_f.lr, err, tracker, started)
        if probe is not None and robust and tracker is not None:
            rec["probe_cycle"] = cycle_residual(model, probe[0], probe[1], tracker, cfg)
        history.append(rec)
        log.info("epoch %d %s", epoch, rec)
        if on_epoch is not None:
            on_epoch(rec, model)
    return TrainResult(model, critic, history, tracker)


def _defense_step(model, critic, opt_f, opt_d, tracker, x, y, cfg, r_noise, r_cycle):
    probs = model.predict_probs(x)
    tracker.update(probs[np.arange(len(y)), y], y)
    if cfg.lam == 0 and cfg.lam_rec == 0:
        loss = nn.nll_loss(model.log_probs(x), y)
        opt_f.minimize(loss)
        return {"nll": loss.item()}
    targets = select_target(x, y, model, cfg.target_rule, r_cycle)
    fwd_conf = tracker.confidence(targets, cfg.confidence_floor)
    back_conf = tracker.confidence(y, cfg.confidence_floor)
    adv = atk.high_confidence_attack(
        x, targets, cfg.attack_config(), model, confidence=fwd_conf
    )
    # critic step on the detached adversarial batch, then the classifier step
    batch = CriticBatch(x, y, adv.x_adv, targets, y)
    d_total, d_loss, penalty = critic_objective(critic, batch, cfg.lam_grad, True, r_noise)
    opt_d.minimize(d_total)
    total, parts, _ = classifier_loss(
        model, critic, x, y, targets, (fwd_conf, back_conf), cfg, r_noise, adv=adv
    )
    opt_f.minimize(total)
    out = {
        "nll": parts["nll"].item(),
        "critic_loss": d_loss.item(),
        "penalty": penalty.item(),
    }
    if "fool" in parts:
        out["fool_loss"] = parts["fool"].item()
    if "cycle" in parts:
        out["cycle_loss"] = parts["cycle"].item()
    return out


def train_adversarial_baseline(cfg, dataset, test_set=None, on_epoch=None):
    """Minimise NLL(x, y) + w * NLL(x + r, y), r = FGSM(eps) on current weights, detached."""
    input_shape = dataset.images.shape[1:]
    r_init, r_shuffle, *_ = _streams(cfg.seed)
    model = nn.build_classifier(classifier_spec(cfg, input_shape, dataset.k), _init_seed(r_init))
    opt = nn.Adam(model.params, lr=cfg.lr_classifier, beta1=cfg.beta1)
    history = []
    for epoch in range(cfg.total_epochs):
        started = time.perf_counter()
        opt.lr = _lr(cfg.lr_classifier, epoch, cfg.halve_every)
        sums = {"nll": 0.0, "fool_loss": 0.0}
        n_batches = 0
        for step, idx in enumerate(batches(len(dataset), cfg.batch_size, r_shuffle)):
            x, y = dataset.images[idx], dataset.labels[idx]
            try:
                x_adv = atk.fgsm(x, y, cfg.epsilon, model)
                clean = nn.nll_loss(model.log_probs(x), y)
                adv = nn.nll_loss(model.log_probs(x_adv), y)
                opt.minimize(clean + cfg.at_weight * adv)
            except ad.NonFiniteError as exc:
                snapshot = {"epoch": epoch, "batch": step, "error": str(exc), "history": history}
                raise TrainingDivergedError(f"training diverged: {exc}", snapshot) from exc
            sums["nll"] += clean.item()
            sums["fool_loss"] += adv.item()
            n_batches += 1
        err = test_error(model, test_set) if test_set is not None else None
        rec = _record(epoch, "at", sums, n_batches, opt.lr, err, None, started)
        rec["adv_nll"] = rec.pop("fool_loss")
        history.append(rec)
        log.info("epoch %d %s", epoch, rec)
        if on_epoch is not None:
            on_epoch(rec, model)
    return TrainResult(model, None, history, None)
