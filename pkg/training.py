"""GAN inpainting pretraining, phased segmentation training and the threshold sweep."""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

import nets
from edge_ops import dump_edge_maps, edge_attention_batch
from errors import ConfigError, DataError, DivergenceError, PipelineError
from losses import (
    GradNormTracker,
    LossLedger,
    adv_feedback_loss,
    disc_loss,
    gen_loss,
    phase_for_epoch,
    seg_loss,
    size_loss,
    sparsity_loss,
    total_loss,
)
from volume_io import decode_labels, fit_to_shape, full_plan, to_tanh_range, to_training_slices

# =========================
# CONFIG
# =========================

PRETRAIN_LOG = "pretrain_gan_log.jsonl"
TRAIN_SEG_LOG = "train_seg_log.jsonl"
GENERATOR_CHECKPOINT = "generator.pt"
DISCRIMINATOR_CHECKPOINT = "discriminator.pt"
SEGMENTER_CHECKPOINT = "segmenter.pt"

ORIENTATIONS = ("normality", "abnormality")

# tanh-normalized background sits at exactly -1
BRAIN_TOLERANCE = 1e-6


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    alpha0: float = 6e-5
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    lr_power: float = 0.75

    def validate(self):
        if self.kind != "adam":
            raise ConfigError(f"only the adam optimizer is supported, got {self.kind!r}")
        if not self.alpha0 > 0:
            raise ConfigError("alpha0 must be positive")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not self.lr_power > 0:
            raise ConfigError("lr_power must be positive")
        return self


@dataclass
class PretrainConfig:
    occlusion_fraction: tuple = (0.1, 0.4)
    d_update_period: int = 5
    early_stop_patience: int = 5
    recon_weight: float = 1.0
    fill_value: float = 0.0
    validation_fraction: float = 0.1

    def validate(self):
        lo, hi = self.occlusion_fraction
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"occlusion_fraction must satisfy 0 < lo <= hi <= 1, got {self.occlusion_fraction}")
        if self.d_update_period < 1:
            raise ConfigError("d_update_period must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.recon_weight < 0:
            raise ConfigError("recon_weight must be non-negative")
        if not -1 <= self.fill_value <= 1:
            raise ConfigError("fill_value must lie in [-1, 1]")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        return self


@dataclass
class TrainSegConfig:
    fill_value: float = 0.0
    validation_fraction: float = 0.1

    def validate(self):
        if not -1 <= self.fill_value <= 1:
            raise ConfigError("fill_value must lie in [-1, 1]")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        return self


@dataclass
class SweepConfig:
    thresholds: tuple = (0.1, 0.2, 0.3, 0.4)
    orientation: str = "normality"
    gated: bool = False

    def validate(self):
        thresholds = list(self.thresholds)
        if not thresholds or not all(0 < t < 1 for t in thresholds):
            raise ConfigError(f"thresholds must lie in (0, 1), got {self.thresholds}")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ConfigError("thresholds must be strictly increasing")
        if self.orientation not in ORIENTATIONS:
            raise ConfigError(f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}")
        return self


# =========================
# HELPERS
# =========================


def configure_determinism(seed, deterministic=True):
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def lr_schedule(alpha0, epoch, total_epochs, power=0.75):
    """Polynomial decay alpha0 * (1 - epoch / total_epochs) ** power."""
    if not 0 <= epoch <= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    return alpha0 * (1.0 - epoch / total_epochs) ** power


def _make_optimizer(params, config):
    return torch.optim.Adam(params, lr=config.alpha0, betas=tuple(config.betas),
                            weight_decay=config.weight_decay)


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _batches(n, batch_size, generator=None):
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def occlude(images, mask, fill=0.0):
    """images * (1 - mask) + fill * mask; `fill` may be a scalar or a tensor."""
    if mask.dim() == images.dim() - 1:
        mask = mask.unsqueeze(1)
    return images * (1 - mask) + fill * mask


def random_occlusion_masks(images, fraction_range=(0.1, 0.4), generator=None):
    """One random rectangle per image covering a fraction of its brain bounding box."""
    batch, _, height, width = images.shape
    brain = (images > -1 + BRAIN_TOLERANCE).any(dim=1)
    masks = torch.zeros((batch, height, width), dtype=images.dtype)
    lo, hi = fraction_range
    draws = torch.rand((batch, 4), generator=generator, dtype=torch.float64)

    for i in range(batch):
        rows = torch.nonzero(brain[i].any(dim=1)).flatten()
        cols = torch.nonzero(brain[i].any(dim=0)).flatten()
        if rows.numel() == 0:
            r0, r1, c0, c1 = 0, height - 1, 0, width - 1
        else:
            r0, r1, c0, c1 = int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])
        box_h, box_w = r1 - r0 + 1, c1 - c0 + 1

        fraction = lo + (hi - lo) * float(draws[i, 0])
        aspect = 0.5 + float(draws[i, 1])
        occ_h = min(box_h, max(1, round(box_h * math.sqrt(fraction) * aspect)))
        occ_w = min(box_w, max(1, round(box_h * box_w * fraction / occ_h)))
        top = r0 + int(float(draws[i, 2]) * (box_h - occ_h + 1))
        left = c0 + int(float(draws[i, 3]) * (box_w - occ_w + 1))
        masks[i, top:top + occ_h, left:left + occ_w] = 1
    return masks


class EarlyStopping:
    """Stop once the monitored value fails to improve for `patience` epochs."""

    def __init__(self, patience=5, min_delta=0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0
        self.stopped_epoch = None

    def update(self, value, epoch=None):
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.stopped_epoch = epoch
            return True
        return False


class RunLog:
    """Line-delimited JSON log; one record per line."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w")

    def write(self, kind, **fields):
        self._file.write(json.dumps({"kind": kind, **fields}, sort_keys=True) + "\n")
        self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path, kind=None):
    with open(path) as f:
        records = [json.loads(line) for line in f if line.strip()]
    return [r for r in records if kind is None or r.get("kind") == kind]


def _tensor(array, dtype):
    return torch.as_tensor(np.asarray(array), dtype=dtype)


# =========================
# GAN PRETRAINING
# =========================


@dataclass
class PretrainResult:
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    gen_steps: int = 0
    disc_steps: int = 0
    history: list = field(default_factory=list)
    stopped_epoch: int = None


def reconstruction_error(generator, images, fraction_range, fill_value, seed, batch_size=16):
    """Mean absolute error inside fixed, seeded occlusions; 0 for an empty set."""
    if len(images) == 0:
        return 0.0
    mask_rng = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0.0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = images[start:start + batch_size]
            masks = random_occlusion_masks(x, fraction_range, mask_rng)
            recon = nets.gen_forward(generator, occlude(x, masks, fill_value))
            weight = masks.unsqueeze(1).expand_as(x)
            total += float((weight * (recon - x).abs()).sum())
            count += float(weight.sum())
    return total / max(count, 1.0)


def pretrain_gan(images, pretrain_cfg, opt_cfg, gen_cfg, disc_cfg, run_dir=None,
                 val_images=None, seed=0, dtype=torch.float32, progress=True):
    """Train the inpainting generator and patch discriminator on normal slices.

    `images` are [N, 4, H, W] in [-1, 1]. The generator takes a step on every
    batch; the discriminator once every `d_update_period` generator steps.
    """
    pretrain_cfg.validate()
    opt_cfg.validate()
    if len(images) == 0:
        raise DataError("pretrain-gan: empty dataset")

    train = _tensor(images, dtype)
    val = _tensor(val_images, dtype) if val_images is not None and len(val_images) else None
    if val is None:
        print("⚠️  pretrain-gan: no validation slices, monitoring training reconstruction")
        val = train

    generator = nets.build(gen_cfg, seed=seed).to(dtype)
    discriminator = nets.build(disc_cfg, seed=seed + 1).to(dtype)
    opt_g = _make_optimizer(generator.parameters(), opt_cfg)
    opt_d = _make_optimizer(discriminator.parameters(), opt_cfg)

    batch_rng = torch.Generator().manual_seed(seed)
    mask_rng = torch.Generator().manual_seed(seed + 2)
    stopper = EarlyStopping(pretrain_cfg.early_stop_patience)
    result = PretrainResult(generator, discriminator)
    log = RunLog(Path(run_dir) / PRETRAIN_LOG) if run_dir else None

    if log:
        log.write("header", seed=seed, gen_config=_config_dict(gen_cfg),
                  disc_config=_config_dict(disc_cfg), pretrain=_config_dict(pretrain_cfg),
                  optimizer=_config_dict(opt_cfg), n_train=len(train), n_val=len(val))

    try:
        for epoch in tqdm(range(opt_cfg.epochs), desc="pretrain-gan", disable=not progress):
            lr = lr_schedule(opt_cfg.alpha0, epoch, opt_cfg.epochs, opt_cfg.lr_power)
            _set_lr(opt_g, lr)
            _set_lr(opt_d, lr)
            generator.train()
            discriminator.train()

            for index in _batches(len(train), opt_cfg.batch_size, batch_rng):
                x = train[index]
                masks = random_occlusion_masks(x, pretrain_cfg.occlusion_fraction, mask_rng)
                recon = nets.gen_forward(generator, occlude(x, masks, pretrain_cfg.fill_value))
                composite = occlude(x, masks, recon)

                ledger = LossLedger()
                l_g = ledger.record("L_G_gan", gen_loss(nets.disc_forward(discriminator, composite)))
                weight = masks.unsqueeze(1).expand_as(x)
                l1 = ledger.record("L_recon", (weight * (recon - x).abs()).sum() / weight.sum().clamp_min(1.0))
                opt_g.zero_grad()
                (l_g + pretrain_cfg.recon_weight * l1).backward()
                opt_g.step()
                result.gen_steps += 1

                if result.gen_steps % pretrain_cfg.d_update_period == 0:
                    real = nets.disc_forward(discriminator, x)
                    fake = nets.disc_forward(discriminator, composite.detach())
                    l_d = ledger.record("L_D_gan", disc_loss(real, fake))
                    opt_d.zero_grad()
                    l_d.backward()
                    opt_d.step()
                    result.disc_steps += 1

                if log:
                    log.write("step", step=result.gen_steps, epoch=epoch, lr=lr,
                              disc_steps=result.disc_steps, losses=dict(ledger.values))

            generator.eval()
            val_l1 = reconstruction_error(generator, val, pretrain_cfg.occlusion_fraction,
                                          pretrain_cfg.fill_value, seed + 3, opt_cfg.batch_size)
            if not math.isfinite(val_l1):
                raise DivergenceError(f"pretrain-gan: validation reconstruction is not finite at epoch {epoch}")
            result.history.append({"epoch": epoch, "lr": lr, "val_recon_l1": val_l1})
            if log:
                log.write("epoch", epoch=epoch, lr=lr, val_recon_l1=val_l1,
                          gen_steps=result.gen_steps, disc_steps=result.disc_steps)
            tqdm.write(f"🔁 pretrain-gan epoch {epoch}: lr={lr:.3e} val_recon_l1={val_l1:.4f}")

            if stopper.update(val_l1, epoch):
                result.stopped_epoch = epoch
                print(f"⏹️  early stop at epoch {epoch} (no improvement for {stopper.patience} epochs)")
                break
    finally:
        if log:
            log.close()

    generator.eval()
    discriminator.eval()
    if run_dir:
        state = {"gen_steps": result.gen_steps, "disc_steps": result.disc_steps,
                 "stopped_epoch": result.stopped_epoch, "seed": seed}
        nets.save_checkpoint(Path(run_dir) / GENERATOR_CHECKPOINT, generator, "generator", state)
        nets.save_checkpoint(Path(run_dir) / DISCRIMINATOR_CHECKPOINT, discriminator, "discriminator", state)
        print(f"💾 checkpoints written to {run_dir}")
    return result


def _config_dict(config):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}


# =========================
# SEGMENTATION TRAINING
# =========================


@dataclass
class TrainSegResult:
    segmenter: torch.nn.Module
    history: list = field(default_factory=list)
    generator_digest: str = ""
    discriminator_digest: str = ""


def whole_tumor_dice(segmenter, images, classes, batch_size=16, smooth=1e-6):
    """Soft whole-tumor Dice over the full set; None for an empty set."""
    if len(images) == 0:
        return None
    inter, pred_sum, true_sum = 0.0, 0.0, 0.0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            soft = nets.whole_tumor(nets.seg_forward(segmenter, images[start:start + batch_size]))
            truth = (classes[start:start + batch_size] > 0).to(soft.dtype)
            inter += float((soft * truth).sum())
            pred_sum += float(soft.sum())
            true_sum += float(truth.sum())
    return (2 * inter + smooth) / (pred_sum + true_sum + smooth)


def _freeze(net):
    net.eval()
    net.requires_grad_(False)
    return net


def train_seg(images, classes, generator, discriminator, loss_cfg, opt_cfg, unet_cfg,
              seg_cfg=None, val_images=None, val_classes=None, run_dir=None, seed=0,
              dtype=torch.float32, dump_edges=None, progress=True):
    """Phased segmenter training with frozen generator/discriminator feedback.

    Per step: segment, occlude the predicted whole tumor, inpaint it, score
    the composite with the discriminator, gate the abnormality map with the
    mask's edge attention, and update the segmenter on the phase's loss.
    """
    loss_cfg.validate()
    opt_cfg.validate()
    seg_cfg = (seg_cfg or TrainSegConfig()).validate()
    if len(images) == 0:
        raise DataError("train-seg: empty dataset")
    if len(images) != len(classes):
        raise DataError(f"train-seg: {len(images)} images but {len(classes)} label maps")
    if tuple(images.shape[1:2]) != (unet_cfg.in_channels,):
        raise DataError(f"train-seg: images have {images.shape[1]} channels, "
                        f"segmenter expects {unet_cfg.in_channels}")

    generator = _freeze(generator.to(dtype))
    discriminator = _freeze(discriminator.to(dtype))
    gen_digest = nets.parameter_digest(generator)
    disc_digest = nets.parameter_digest(discriminator)

    x_all = _tensor(images, dtype)
    y_all = _tensor(classes, torch.int64)
    have_val = val_images is not None and len(val_images) > 0
    x_val = _tensor(val_images, dtype) if have_val else None
    y_val = _tensor(val_classes, torch.int64) if have_val else None
    if not have_val:
        print("⚠️  train-seg: no validation slices, val_dice is not tracked")

    segmenter = nets.build(unet_cfg, seed=seed).to(dtype)
    optimizer = _make_optimizer(segmenter.parameters(), opt_cfg)
    tracker = GradNormTracker(segmenter.head.parameters(), loss_cfg.ema_momentum)
    batch_rng = torch.Generator().manual_seed(seed)
    result = TrainSegResult(segmenter, generator_digest=gen_digest, discriminator_digest=disc_digest)
    log = RunLog(Path(run_dir) / TRAIN_SEG_LOG) if run_dir else None

    if log:
        log.write("header", seed=seed, alpha=loss_cfg.alpha, gamma=loss_cfg.gamma,
                  eps=loss_cfg.eps, dice_smooth=loss_cfg.dice_smooth,
                  phase1_last_epoch=loss_cfg.phase1_last_epoch,
                  dynamic_seg_weight=loss_cfg.dynamic_seg_weight,
                  sparsity_normalization="mean over pixels",
                  optimizer=_config_dict(opt_cfg), unet=_config_dict(unet_cfg),
                  n_train=len(x_all), n_val=len(x_val) if have_val else 0)

    step = 0
    try:
        for epoch in tqdm(range(opt_cfg.epochs), desc="train-seg", disable=not progress):
            lr = lr_schedule(opt_cfg.alpha0, epoch, opt_cfg.epochs, opt_cfg.lr_power)
            _set_lr(optimizer, lr)
            phase = phase_for_epoch(epoch, loss_cfg.phase1_last_epoch)
            segmenter.train()
            sums, n_batches, weights = {}, 0, {}

            for index in _batches(len(x_all), opt_cfg.batch_size, batch_rng):
                x, y = x_all[index], y_all[index]
                ledger = _seg_step_losses(segmenter, generator, discriminator, x, y,
                                          loss_cfg, seg_cfg, phase, tracker)
                total, weights = total_loss(ledger, epoch, loss_cfg)
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                step += 1
                n_batches += 1
                for name, value in ledger.values.items():
                    sums[name] = sums.get(name, 0.0) + value
                if log:
                    log.write("step", step=step, epoch=epoch, lr=lr, total=float(total.detach()),
                              **ledger.to_record())

            segmenter.eval()
            val_dice = whole_tumor_dice(segmenter, x_val, y_val, opt_cfg.batch_size,
                                        loss_cfg.dice_smooth) if have_val else None
            record = {"epoch": epoch, "lr": lr, "phase": phase, "val_dice": val_dice,
                      "losses": {k: v / n_batches for k, v in sums.items()}, "weights": weights}
            result.history.append(record)
            if log:
                log.write("epoch", **record)
            dice_text = f"{val_dice:.4f}" if val_dice is not None else "n/a"
            tqdm.write(f"🔁 train-seg epoch {epoch} (phase {phase}): lr={lr:.3e} val_dice={dice_text}")
    finally:
        if log:
            log.close()

    if nets.parameter_digest(generator) != gen_digest or nets.parameter_digest(discriminator) != disc_digest:
        raise PipelineError("train-seg: frozen generator/discriminator parameters changed")

    if dump_edges:
        with torch.no_grad():
            masks = nets.whole_tumor(nets.seg_forward(segmenter, x_all[:8])).cpu().numpy()
        dump_edge_maps(masks, dump_edges)
        print(f"🖼️  edge maps written to {dump_edges}")

    if run_dir:
        nets.save_checkpoint(Path(run_dir) / SEGMENTER_CHECKPOINT, segmenter, "segmenter",
                             {"epochs": opt_cfg.epochs, "steps": step, "seed": seed})
        print(f"💾 segmenter written to {run_dir}")
    return result


def _seg_step_losses(segmenter, generator, discriminator, x, y, loss_cfg, seg_cfg, phase, tracker):
    probs = nets.seg_forward(segmenter, x)
    onehot = F.one_hot(y, probs.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)
    ce, dice = seg_loss(probs, onehot, loss_cfg.dice_smooth, loss_cfg.prob_clamp)

    ledger = LossLedger(phase=phase, alpha=loss_cfg.alpha, gamma=loss_cfg.gamma, eps=loss_cfg.eps)
    ledger.record("L_ce", ce)
    ledger.record("L_dice", dice)
    if phase == 1:
        return ledger

    mask = nets.whole_tumor(probs)
    ledger.record("L_sparsity", sparsity_loss(mask, loss_cfg.alpha))
    ledger.record("L_size", size_loss(mask, (y > 0).flatten(1).sum(dim=1), loss_cfg.gamma))

    recon = nets.gen_forward(generator, occlude(x, mask, seg_cfg.fill_value))
    composite = occlude(x, mask, recon)
    abnormal = 1 - nets.disc_forward(discriminator, composite)
    edge = edge_attention_batch(mask, differentiable=loss_cfg.differentiable_edges)
    ledger.record("L_adv", adv_feedback_loss(abnormal, edge, loss_cfg.prob_clamp))

    ledger.grad_norms = tracker.update(ledger.phase2_terms())
    return ledger


# =========================
# INFERENCE AND SWEEP
# =========================


def predict_labels(segmenter, images, batch_size=16):
    """Argmax class maps decoded back to BraTS labels, [N, H, W] uint8."""
    segmenter.eval()
    dtype = next(segmenter.parameters()).dtype
    x = _tensor(images, dtype)
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            probs = nets.seg_forward(segmenter, x[start:start + batch_size])
            out.append(probs.argmax(dim=1).cpu().numpy())
    if not out:
        return np.zeros((0,) + tuple(images.shape[-2:]), dtype=np.uint8)
    return decode_labels(np.concatenate(out))


def sweep_scores(discriminator, images, segmenter=None, gated=False, batch_size=16):
    """Per-slice abnormality score: max over patches of 1 - D(x).

    With `gated`, the abnormality map is multiplied by the segmenter's edge
    attention map (scaled to a maximum of 1 per slice) before the max.
    """
    if gated and segmenter is None:
        raise ConfigError("gated sweep needs a trained segmenter")
    discriminator.eval()
    dtype = next(discriminator.parameters()).dtype
    x = _tensor(images, dtype)
    scores = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            batch = x[start:start + batch_size]
            abnormal = 1 - nets.disc_forward(discriminator, batch)
            if gated:
                edge = edge_attention_batch(nets.whole_tumor(nets.seg_forward(segmenter, batch)))
                peak = edge.flatten(1).max(dim=1).values.clamp_min(1e-12)
                abnormal = abnormal * edge / peak[:, None, None]
            scores.append(abnormal.flatten(1).max(dim=1).values.double().cpu().numpy())
    return np.concatenate(scores) if scores else np.zeros(0)


def flag_slices(scores, threshold, orientation="normality"):
    """Abnormal flags: normality (1 - score) < t, or score >= t."""
    scores = np.asarray(scores, dtype=np.float64)
    if orientation == "normality":
        return (1.0 - scores) < threshold
    if orientation == "abnormality":
        return scores >= threshold
    raise ConfigError(f"orientation must be one of {ORIENTATIONS}, got {orientation!r}")


def sweep_table(scores, is_tumor, config):
    """Rows of {threshold, accuracy, sensitivity, TP, FN, FP, TN}."""
    config.validate()
    is_tumor = np.asarray(is_tumor, dtype=bool)
    if len(is_tumor) == 0:
        raise DataError("sweep: empty dataset")
    rows = []
    for threshold in config.thresholds:
        flagged = flag_slices(scores, threshold, config.orientation)
        tp = int(np.sum(flagged & is_tumor))
        fn = int(np.sum(~flagged & is_tumor))
        fp = int(np.sum(flagged & ~is_tumor))
        tn = int(np.sum(~flagged & ~is_tumor))
        rows.append({
            "threshold": float(threshold),
            "accuracy": (tp + tn) / len(is_tumor),
            "sensitivity": tp / (tp + fn) if tp + fn else None,
            "TP": tp,
            "FN": fn,
            "FP": fp,
            "TN": tn,
        })
    return rows


def threshold_sweep(discriminator, images, is_tumor, config, segmenter=None, batch_size=16):
    config.validate()
    if len(images) == 0:
        raise DataError("sweep: empty dataset")
    scores = sweep_scores(discriminator, images, segmenter, config.gated, batch_size)
    return sweep_table(scores, is_tumor, config), scores


def predict_volume(segmenter, volume, slice_size, batch_size=16):
    """Label volume [S, H, W] predicted slice by slice inside the brain bbox."""
    labels = np.zeros(volume.shape, dtype=np.uint8)
    plan = full_plan(volume)
    if not plan.kept_slices:
        return labels
    r0, r1, c0, c1 = plan.bbox
    crops = [fit_to_shape(image, slice_size) for image, _ in to_training_slices(volume, plan)]
    predicted = predict_labels(segmenter, to_tanh_range(np.stack(crops)), batch_size)
    for z, classes in zip(plan.kept_slices, predicted):
        labels[z, r0:r1 + 1, c0:c1 + 1] = fit_to_shape(classes, (r1 - r0 + 1, c1 - c0 + 1))
    return labels
