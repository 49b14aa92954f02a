"""Loss terms, phased introduction and gradient-norm weight balancing.

Phase 1 (epochs 0..10) optimizes the segmentation loss alone. Phase 2 adds
sparsity, size-consistency and edge-gated adversarial feedback, each scaled
by a dynamic weight 1 / (||grad L_i|| + eps).
"""

import math
from dataclasses import dataclass, field

import torch

from errors import ConfigError, DivergenceError

# =========================
# CONFIG
# =========================

PROB_CLAMP = 1e-7
DICE_SMOOTH = 1e-6
DEFAULT_ALPHA = 0.1
DEFAULT_GAMMA = 1.0
DEFAULT_EPS = 1e-8
EMA_MOMENTUM = 0.9
PHASE1_LAST_EPOCH = 10

# Phase-2 composite terms, in the order their weights are reported
PHASE2_TERMS = ("seg", "sparsity", "adv", "size")

_warned = set()


def _warn_once(key, message):
    if key not in _warned:
        _warned.add(key)
        print(f"⚠️  {message}")


@dataclass
class LossConfig:
    alpha: float = DEFAULT_ALPHA
    gamma: float = DEFAULT_GAMMA
    eps: float = DEFAULT_EPS
    dice_smooth: float = DICE_SMOOTH
    prob_clamp: float = PROB_CLAMP
    ema_momentum: float = EMA_MOMENTUM
    phase1_last_epoch: int = PHASE1_LAST_EPOCH
    dynamic_seg_weight: bool = True
    differentiable_edges: bool = False

    def validate(self):
        if self.alpha < 0 or self.gamma < 0:
            raise ConfigError("alpha and gamma must be non-negative")
        if not self.eps > 0 or not self.dice_smooth > 0:
            raise ConfigError("eps and dice_smooth must be positive")
        if not 0 < self.prob_clamp < 0.5:
            raise ConfigError("prob_clamp must lie in (0, 0.5)")
        if not 0 <= self.ema_momentum < 1:
            raise ConfigError("ema_momentum must lie in [0, 1)")
        if self.phase1_last_epoch < -1:
            raise ConfigError("phase1_last_epoch must be >= -1")
        return self


def _clamp(p, clamp, name):
    if bool((p < clamp).any()) or bool((p > 1 - clamp).any()):
        _warn_once(f"clamp:{name}", f"{name}: probabilities clamped to [{clamp}, 1 - {clamp}]")
    return p.clamp(clamp, 1 - clamp)


# =========================
# GAN TERMS
# =========================


def disc_loss(real_scores, fake_scores, clamp=PROB_CLAMP):
    """-E[log D(x)] - E[log(1 - D(G(z)))] over patch maps."""
    real = _clamp(real_scores, clamp, "disc_loss real")
    fake = _clamp(fake_scores, clamp, "disc_loss fake")
    return -torch.log(real).mean() - torch.log(1 - fake).mean()


def gen_loss(fake_scores, clamp=PROB_CLAMP):
    fake = _clamp(fake_scores, clamp, "gen_loss")
    return -torch.log(fake).mean()


# =========================
# SEGMENTATION TERMS
# =========================


def ce_loss(probs, targets, channel_dim=None, clamp=PROB_CLAMP):
    """Binary cross-entropy averaged over pixels.

    With `channel_dim`, the per-class binary terms are summed over that axis
    before averaging, which is how the softmax output is scored.
    """
    p = _clamp(probs, clamp, "ce_loss")
    terms = -(targets * torch.log(p) + (1 - targets) * torch.log(1 - p))
    if channel_dim is not None:
        terms = terms.sum(dim=channel_dim)
    return terms.mean()


def dice_loss(soft_mask, target_mask, smooth=DICE_SMOOTH):
    intersection = (soft_mask * target_mask).sum()
    return 1 - (2 * intersection + smooth) / (soft_mask.sum() + target_mask.sum() + smooth)


def seg_loss(probs, onehot, smooth=DICE_SMOOTH, clamp=PROB_CLAMP):
    """(cross-entropy, Dice) for softmax output; Dice is the mean over tumor classes."""
    ce = ce_loss(probs, onehot, channel_dim=1, clamp=clamp)
    dices = [dice_loss(probs[:, c], onehot[:, c], smooth) for c in range(1, probs.shape[1])]
    return ce, torch.stack(dices).mean()


def sparsity_loss(mask, alpha=DEFAULT_ALPHA):
    """alpha * ||M||_1, normalized by pixel count."""
    return alpha * mask.abs().mean()


def size_loss(mask, s_label, gamma=DEFAULT_GAMMA):
    """gamma * |sum(M) - S_label| / S_label, averaged over batch items with S_label > 0."""
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    s_label = torch.as_tensor(s_label, dtype=mask.dtype, device=mask.device).reshape(-1)
    sizes = mask.flatten(1).sum(dim=1)
    valid = s_label > 0
    if not bool(valid.any()):
        return mask.sum() * 0
    relative = (sizes[valid] - s_label[valid]).abs() / s_label[valid]
    return gamma * relative.mean()


def adv_feedback_loss(abnormal_scores, edge, clamp=PROB_CLAMP):
    """Edge-weighted mean of -log(1 - a) over patches.

    `abnormal_scores` is the patch abnormality map of the reconstruction
    (1 - D, D being the probability of real normal tissue). Patches with zero
    edge weight contribute nothing.
    """
    weights = torch.as_tensor(edge, dtype=abnormal_scores.dtype, device=abnormal_scores.device)
    total = weights.sum()
    if not bool(total > 0):
        _warn_once("adv:empty", "adversarial feedback: edge map is empty, no boundary signal")
        return abnormal_scores.sum() * 0
    a = _clamp(abnormal_scores, clamp, "adv_feedback_loss")
    return (weights * -torch.log(1 - a)).sum() / total


# =========================
# BALANCING
# =========================


def dynamic_weights(grad_norms, eps=DEFAULT_EPS, normalize=True):
    """lambda_i = 1 / (||grad L_i|| + eps), rescaled to sum to the number of active terms.

    A term with zero gradient norm is inactive (e.g. adversarial feedback on
    an empty edge map): it gets weight 0 and stays out of the rescaling.
    """
    raw = {name: 1.0 / (float(norm) + eps) if float(norm) > 0 else 0.0
           for name, norm in grad_norms.items()}
    active = [name for name, value in raw.items() if value > 0]
    if not normalize or not active:
        return raw
    scale = len(active) / sum(raw[name] for name in active)
    return {name: value * scale for name, value in raw.items()}


def phase_for_epoch(epoch, phase1_last_epoch=PHASE1_LAST_EPOCH):
    return 1 if epoch <= phase1_last_epoch else 2


class GradNormTracker:
    """EMA of each term's gradient norm w.r.t. a fixed parameter subset."""

    def __init__(self, params, momentum=EMA_MOMENTUM):
        self.params = [p for p in params if p.requires_grad]
        self.momentum = momentum
        self.ema = {}

    def measure(self, loss):
        if not loss.requires_grad:
            return 0.0
        grads = torch.autograd.grad(loss, self.params, retain_graph=True, allow_unused=True)
        squared = sum(float((g.detach() ** 2).sum()) for g in grads if g is not None)
        return math.sqrt(squared)

    def update(self, terms):
        for name, loss in terms.items():
            norm = self.measure(loss)
            previous = self.ema.get(name)
            self.ema[name] = norm if previous is None else (
                self.momentum * previous + (1 - self.momentum) * norm)
        return dict(self.ema)


@dataclass
class LossLedger:
    """Per-step loss values, gradient-norm estimates and weights."""

    phase: int = 1
    alpha: float = DEFAULT_ALPHA
    gamma: float = DEFAULT_GAMMA
    eps: float = DEFAULT_EPS
    values: dict = field(default_factory=dict)
    grad_norms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict, repr=False)

    def record(self, name, tensor):
        self.tensors[name] = tensor
        self.values[name] = float(tensor.detach())
        if not math.isfinite(self.values[name]):
            raise DivergenceError(f"{name} is not finite ({self.values[name]})")
        return tensor

    def phase2_terms(self):
        return {
            "seg": self.tensors["L_ce"] + self.tensors["L_dice"],
            "sparsity": self.tensors["L_sparsity"],
            "adv": self.tensors["L_adv"],
            "size": self.tensors["L_size"],
        }

    def to_record(self):
        return {
            "phase": self.phase,
            "losses": dict(self.values),
            "grad_norms": dict(self.grad_norms),
            "weights": dict(self.weights),
        }


def total_loss(ledger, epoch, config, weights=None):
    """Combine the recorded terms for this epoch's phase.

    Returns (total, weights_used). Phase 1 is L_ce + L_dice with the
    auxiliary weights pinned to 0. Phase 2 uses `weights` when given,
    otherwise dynamic weights from `ledger.grad_norms`.
    """
    ledger.phase = phase_for_epoch(epoch, config.phase1_last_epoch)
    if ledger.phase == 1:
        used = {"seg": 1.0, "sparsity": 0.0, "adv": 0.0, "size": 0.0}
        total = ledger.tensors["L_ce"] + ledger.tensors["L_dice"]
    else:
        if weights is None:
            if config.dynamic_seg_weight:
                weights = dynamic_weights(
                    {k: ledger.grad_norms[k] for k in PHASE2_TERMS}, config.eps)
            else:
                aux = [k for k in PHASE2_TERMS if k != "seg"]
                weights = {"seg": 1.0, **dynamic_weights(
                    {k: ledger.grad_norms[k] for k in aux}, config.eps)}
        used = {k: float(weights[k]) for k in PHASE2_TERMS}
        terms = ledger.phase2_terms()
        total = sum(used[k] * terms[k] for k in PHASE2_TERMS)

    ledger.weights = used
    if not math.isfinite(float(total.detach())):
        raise DivergenceError(f"total loss is not finite at epoch {epoch}")
    return total, used
