"""Adversary-critic objective and gradient-norm penalty."""

from dataclasses import dataclass

import numpy as np

from advcritic import autodiff as ad


class EmptyBatchError(ValueError):
    pass


@dataclass
class CriticBatch:
    """Natural pairs (x, y) and adversarial pairs (x_adv, y_adv).

    ``y_src`` holds the original labels of the adversarial examples; each must
    differ from its attack target.
    """

    x: np.ndarray
    y: np.ndarray
    x_adv: np.ndarray
    y_adv: np.ndarray
    y_src: np.ndarray = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.y_adv = np.asarray(self.y_adv, dtype=np.int64)
        if self.y_src is not None:
            self.y_src = np.asarray(self.y_src, dtype=np.int64)
            if np.any(self.y_src == self.y_adv):
                raise ValueError("adversarial target equals source label")


def _class_weights(labels):
    """1 / (number of batch members sharing each label)."""
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    return 1.0 / counts[inverse]


def critic_loss(critic, batch, training=False, rng=None):
    """Sum over heads k of -E[log D_k(natural k)] - E[log(1 - D_k(adv -> k))].

    Expectations are batch means within each class; heads with no members
    on one side contribute only the other side. Inputs are taken as plain
    arrays, so no gradient reaches the classifier or the attack.
    """
    if len(batch.y) == 0 or len(batch.y_adv) == 0:
        raise EmptyBatchError("critic loss needs natural and adversarial examples")
    x_nat = np.asarray(batch.x.value if isinstance(batch.x, ad.Node) else batch.x)
    x_adv = np.asarray(batch.x_adv.value if isinstance(batch.x_adv, ad.Node) else batch.x_adv)
    nat = critic.head_logit(x_nat, batch.y, training, rng)
    adv = critic.head_logit(x_adv, batch.y_adv, training, rng)
    real = ad.sum(ad.log_sigmoid(nat) * _class_weights(batch.y))
    fake = ad.sum(ad.log_sigmoid(-adv) * _class_weights(batch.y_adv))
    return -(real + fake)


def gradient_penalty(critic, points, labels, training=False, rng=None):
    """Mean over the batch of ||grad_x D_label(x)||^2 (pushed toward zero)."""
    x = ad.parameter(np.asarray(points.value if isinstance(points, ad.Node) else points))
    score = ad.sigmoid(critic.head_logit(x, labels, training, rng))
    g = ad.grad(ad.sum(score), x, create_graph=True)
    return ad.mean(ad.sq_l2norm(g))


def critic_objective(critic, batch, lam_grad, training=True, rng=None):
    """Critic loss plus the penalty taken separately at natural and adversarial points.

    Returns (total, loss, penalty) nodes.
    """
    loss = critic_loss(critic, batch, training, rng)
    if lam_grad == 0:
        return loss, loss, ad.constant(0.0)
    penalty = gradient_penalty(critic, batch.x, batch.y, training, rng) + gradient_penalty(
        critic, batch.x_adv, batch.y_adv, training, rng
    )
    return loss + lam_grad * penalty, loss, penalty
