"""Training orchestration: the three stages, finetuning, few-shot evaluation,
and the FPS-baseline comparison.

Every source of randomness is a named per-epoch stream derived from the
master seed, so a fixed seed reproduces per-epoch loss logs bit for bit and
resuming from a checkpoint continues exactly where the saved run would have.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import checkpoint as ckpt
from . import config as cfgmod
from . import geometry, kernels, nn, sampler
from . import rng as rngmod
from .autodiff import Tensor
from .optim import AdamW, CosineWarmupSchedule


class PipelineError(RuntimeError):
    pass


@dataclass
class StagePlan:
    """What one training stage runs: schedule, loss recipe, freeze set."""

    stage: str  # "1" | "2" | "3" | "finetune"
    epochs: int
    batch_size: int
    schedule: CosineWarmupSchedule
    loss_recipe: dict = field(default_factory=dict)
    freeze: tuple[str, ...] = ()


@dataclass
class FewShotTask:
    way: int
    shot: int
    query_per_class: int = 20
    episode_seed: int = 0

    def __post_init__(self):
        if self.way < 1 or self.shot < 1 or self.query_per_class < 1:
            raise ValueError("few-shot task sizes must be positive")


STAGE_ORDER = {"1": 1, "2": 2, "3": 3, "finetune": 4}
_CKPT_NAMES = {1: "stage1.ckpt", 2: "stage2.ckpt", 3: "stage3.ckpt", 4: "finetune.ckpt"}


class DCSModels(nn.Module):
    """All learnable components, initialized from named streams of one seed."""

    def __init__(self, cfg: cfgmod.RunConfig, seed: int, init_prefix: str = "init"):
        s, b = cfg.sampler, cfg.backbone
        self.sphere_encoder = sampler.SphereEncoder(
            rngmod.stream(seed, f"{init_prefix}/sphere_encoder"), s.latent_width, s.encoder_knn)
        self.sphere_decoder = sampler.SphereDecoder(
            rngmod.stream(seed, f"{init_prefix}/sphere_decoder"), s.latent_width, s.decoder_width)
        self.composition = sampler.CompositionNet(
            rngmod.stream(seed, f"{init_prefix}/composition"), s.group_count, s.dcs_depth, s.hidden_width)
        self.autoencoder = bb.MaskedPointAutoencoder(
            rngmod.stream(seed, f"{init_prefix}/autoencoder"), b, s.points_per_group)
        self.classifier = None

    def add_classifier(self, seed: int, num_classes: int, init_prefix: str = "init"):
        self.classifier = bb.CloudClassifier(
            rngmod.stream(seed, f"{init_prefix}/classifier"), self.autoencoder, num_classes)
        return self.classifier


def param_hash(module: nn.Module) -> str:
    """SHA-256 over the concatenated raw bytes of all parameters, in name order."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def plan_for_stage(stage: str, cfg: cfgmod.RunConfig) -> StagePlan:
    section = {"1": cfg.stage1, "2": cfg.stage2, "3": cfg.stage3, "finetune": cfg.finetune}[stage]
    sched = CosineWarmupSchedule(section.learning_rate, section.warmup_epochs,
                                 section.epochs, section.min_lr)
    recipe = {"weight_decay": section.weight_decay}
    freeze: tuple[str, ...] = ()
    if stage == "1":
        recipe["lambda_emd"] = cfg.sampler.lambda_emd
        freeze = ("composition", "autoencoder")
    elif stage == "2":
        freeze = ("sphere_encoder", "sphere_decoder", "autoencoder")
    elif stage == "3":
        recipe.update(global_loss_mode=cfg.stage3.global_loss_mode,
                      global_weight=cfg.stage3.global_weight,
                      local_weight=cfg.stage3.local_weight)
        freeze = ("sphere_encoder", "sphere_decoder")
    else:
        freeze = ("sphere_encoder", "sphere_decoder")
    return StagePlan(stage=stage, epochs=section.epochs, batch_size=section.batch_size,
                     schedule=sched, loss_recipe=recipe, freeze=freeze)


def _apply_freeze(models: DCSModels, plan: StagePlan):
    models.unfreeze()
    for name in plan.freeze:
        sub = getattr(models, name, None)
        if isinstance(sub, nn.Module):
            sub.freeze()


def _trainable(models: DCSModels) -> list[nn.Parameter]:
    return [p for _, p in models.named_parameters() if p.trainable]


def save_models(path: str, models: DCSModels, stage: int, epoch: int,
                optimizer: AdamW | None = None, extra: dict | None = None):
    """Persist model + training state; snaps live parameters to the on-disk
    float32 grid so that continuing in-process equals resuming from the file."""
    ckpt.snap_module(models)
    state = {"stage": stage, "epoch": epoch}
    if optimizer is not None:
        state["optimizer"] = optimizer.state_dict()
        state["param_names"] = [name for name, p in models.named_parameters() if p.trainable]
    if extra:
        state.update(extra)
    ckpt.write_checkpoint(path, models.state_dict(), state)


def load_models(path: str, models: DCSModels, expected_stage: int) -> dict:
    if not os.path.exists(path):
        raise PipelineError(
            f"missing checkpoint {path}: stage {expected_stage} must run before the next stage")
    blocks, state = ckpt.read_checkpoint(path)
    got = int(state.get("stage", -1))
    if got != expected_stage:
        raise PipelineError(f"{path}: expected a stage-{expected_stage} checkpoint, found stage {got}")
    models.load_state_dict(blocks)
    return state


def _restore_optimizer(optimizer: AdamW, models: DCSModels, state: dict, path: str):
    names = [name for name, p in models.named_parameters() if p.trainable]
    if state.get("param_names") != names:
        raise PipelineError(f"{path}: optimizer state does not match the current freeze set")
    optimizer.load_state_dict(state["optimizer"])


class _LossLog:
    """Per-epoch comma-separated loss log; floats written via repr for
    bitwise-comparable determinism checks."""

    def __init__(self, path: str, columns: list[str], append: bool):
        self.path = path
        mode = "a" if append and os.path.exists(path) else "w"
        self.fh = open(path, mode)
        if mode == "w":
            self.fh.write(",".join(columns) + "\n")

    def row(self, epoch: int, *values: float):
        self.fh.write(",".join([str(epoch)] + [repr(float(v)) for v in values]) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def write_run_record(out_dir: str, command: str, cfg: cfgmod.RunConfig, seed: int, extra: dict | None = None):
    """Reproducibility record: full config, seed, package version, outcome."""
    try:
        from importlib.metadata import version
        ver = version("dcsnet")
    except Exception:
        ver = "unknown"
    record = {"command": command, "seed": seed, "version": ver,
              "config": cfgmod.dump_config(cfg)}
    if extra:
        record.update(extra)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{command}_record.json"), "w") as fh:
        json.dump(record, fh, indent=2)


def _cloud_points(clouds) -> list[np.ndarray]:
    return [c.points for c in clouds]


def _check_dataset(clouds):
    if not clouds:
        raise PipelineError("dataset is empty")
    sizes = {len(c) for c in clouds}
    if len(sizes) != 1:
        raise PipelineError(f"clouds must share one point count, got {sorted(sizes)}")
    return sizes.pop()


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# Stage 1: canonical sphere mapping (encoder/decoder reconstruction)
# ---------------------------------------------------------------------------

def _stage1_batch_loss(batch, points, decoded: Tensor, lam: float,
                       duals: dict[int, np.ndarray]) -> Tensor:
    """Sum over the batch of stage1_loss (l2 Chamfer + lambda * EMD).

    The nearest-neighbour and matching indices for every cloud are resolved
    outside the graph first, so the whole batch needs only a few tensor ops
    (per-cloud graphs dominate step time otherwise). Equal-size clouds let
    the per-cloud means collapse into sums over the flattened batch.
    """
    b, n, _ = decoded.shape
    dec_np = decoded.data
    offsets = np.arange(b, dtype=np.intp)[:, None] * n
    near_dec = np.empty((b, n), dtype=np.intp)   # target point -> nearest decoded
    near_tgt = np.empty((b, n), dtype=np.intp)   # decoded point -> nearest target
    matched = np.empty((b, n), dtype=np.intp)    # EMD assignment
    tgt = np.empty((b, n, 3))
    for bi, i in enumerate(batch):
        tgt[bi] = points[i]
        d = kernels.pairwise_sqdist(tgt[bi], dec_np[bi])
        near_dec[bi] = d.argmin(axis=1)
        near_tgt[bi] = d.argmin(axis=0)
        if lam != 0.0:
            assignment, _, v = kernels.hungarian(np.sqrt(d), duals.get(i))
            duals[i] = v
            matched[bi] = assignment

    dec_flat = decoded.reshape((b * n, 3))
    tgt_flat = Tensor(tgt.reshape(b * n, 3))
    diff_a = tgt_flat - ad.gather(dec_flat, (near_dec + offsets).ravel(), axis=0)
    diff_b = dec_flat - Tensor(tgt.reshape(b * n, 3)[(near_tgt + offsets).ravel()])
    loss = ((diff_a * diff_a).sum() + (diff_b * diff_b).sum()) / float(n)
    if lam != 0.0:
        mdiff = tgt_flat - ad.gather(dec_flat, (matched + offsets).ravel(), axis=0)
        loss = loss + lam * ad.sqrt((mdiff * mdiff).sum(axis=1)).sum()
    return loss


def run_stage1(clouds, cfg: cfgmod.RunConfig, seed: int, out_dir: str,
               resume: bool = False, models: DCSModels | None = None) -> str:
    n_points = _check_dataset(clouds)
    os.makedirs(out_dir, exist_ok=True)
    plan = plan_for_stage("1", cfg)
    models = models or DCSModels(cfg, seed)
    _apply_freeze(models, plan)
    optimizer = AdamW(_trainable(models), weight_decay=plan.loss_recipe["weight_decay"])
    path = os.path.join(out_dir, _CKPT_NAMES[1])

    start = 0
    if resume:
        state = load_models(path, models, expected_stage=1)
        _apply_freeze(models, plan)
        _restore_optimizer(optimizer, models, state, path)
        start = int(state["epoch"])
    log = _LossLog(os.path.join(out_dir, "stage1_log.csv"), ["epoch", "lr", "loss"], append=resume)

    sphere = geometry.sphere_samples(n_points, method=cfg.sampler.sphere_method)
    points = _cloud_points(clouds)
    lam = plan.loss_recipe["lambda_emd"]
    duals: dict[int, np.ndarray] = {}  # per-cloud warm start for the EMD matching
    # the encoder's kNN graph depends only on the fixed cloud coordinates
    nbr = [models.sphere_encoder._neighbor_indices(p) for p in points]
    models.train()
    for epoch in range(start + 1, plan.epochs + 1):
        lr = plan.schedule.lr_at(epoch)
        optimizer.lr = lr
        order = rngmod.stream(seed, f"stage1/shuffle/{epoch}").permutation(len(points))
        total, count = 0.0, 0
        for batch in _batches(order, plan.batch_size):
            latents = models.sphere_encoder(np.stack([points[i] for i in batch]),
                                            neighbor_idx=np.stack([nbr[i] for i in batch]))
            decoded = models.sphere_decoder(latents, sphere)
            loss = _stage1_batch_loss(batch, points, decoded, lam, duals) / len(batch)
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step()
            total += float(loss.data) * len(batch)
            count += len(batch)
        log.row(epoch, lr, total / count)
        save_models(path, models, stage=1, epoch=epoch, optimizer=optimizer)
    log.close()
    if start >= plan.epochs:  # nothing left to do, but the artifact must exist
        save_models(path, models, stage=1, epoch=plan.epochs, optimizer=optimizer)
    return path


# ---------------------------------------------------------------------------
# Stage 2: composition learning on the canonical sphere
# ---------------------------------------------------------------------------

def _decode_clouds(models: DCSModels, points: list[np.ndarray], sphere: np.ndarray,
                   chunk: int = 16) -> list[np.ndarray]:
    """Decoded sphere images of each cloud; constants when encoder/decoder are frozen."""
    models.eval()
    out = []
    for lo in range(0, len(points), chunk):
        stacked = np.stack(points[lo:lo + chunk])
        decoded = models.sphere_decoder(models.sphere_encoder(stacked), sphere).data
        out.extend(decoded[c] for c in range(len(stacked)))
    models.train()
    return out


def run_stage2(clouds, cfg: cfgmod.RunConfig, seed: int, out_dir: str,
               resume: bool = False, models: DCSModels | None = None) -> str:
    n_points = _check_dataset(clouds)
    os.makedirs(out_dir, exist_ok=True)
    plan = plan_for_stage("2", cfg)
    models = models or DCSModels(cfg, seed)
    state1 = load_models(os.path.join(out_dir, _CKPT_NAMES[1]), models, expected_stage=1)
    del state1
    _apply_freeze(models, plan)
    optimizer = AdamW(_trainable(models), weight_decay=plan.loss_recipe["weight_decay"])
    path = os.path.join(out_dir, _CKPT_NAMES[2])

    start = 0
    if resume:
        state = load_models(path, models, expected_stage=2)
        _apply_freeze(models, plan)
        _restore_optimizer(optimizer, models, state, path)
        start = int(state["epoch"])
    log = _LossLog(os.path.join(out_dir, "stage2_log.csv"), ["epoch", "lr", "loss"], append=resume)

    frozen_before = param_hash(models.sphere_encoder) + param_hash(models.sphere_decoder)
    sphere = geometry.sphere_samples(n_points, method=cfg.sampler.sphere_method)
    points = _cloud_points(clouds)
    decoded = _decode_clouds(models, points, sphere)
    sphere_t = Tensor(sphere)
    models.train()
    for epoch in range(start + 1, plan.epochs + 1):
        lr = plan.schedule.lr_at(epoch)
        optimizer.lr = lr
        order = rngmod.stream(seed, f"stage2/shuffle/{epoch}").permutation(len(points))
        total, count = 0.0, 0
        for batch in _batches(order, plan.batch_size):
            # the composition input (canonical sphere) is identical for every
            # cloud, so Q is computed once per optimizer step
            q = models.composition(sphere_t)
            loss = None
            for i in batch:
                wrapped = sampler.SphereSamples(sphere, decoded=Tensor(decoded[i]))
                li = sampler.stage2_loss(points[i], wrapped, q,
                                         normalize_columns=cfg.sampler.column_normalize)
                loss = li if loss is None else loss + li
            loss = loss / len(batch)
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step()
            total += float(loss.data) * len(batch)
            count += len(batch)
        log.row(epoch, lr, total / count)
        save_models(path, models, stage=2, epoch=epoch, optimizer=optimizer)
    log.close()

    if param_hash(models.sphere_encoder) + param_hash(models.sphere_decoder) != frozen_before:
        raise PipelineError("stage 2 mutated frozen encoder/decoder parameters")
    models.eval()
    q_final = models.composition(sphere_t).data
    sampler.export_probability_map(os.path.join(out_dir, "stage2_heatmap.csv"), sphere, q_final)
    if start >= plan.epochs:
        save_models(path, models, stage=2, epoch=plan.epochs, optimizer=optimizer)
    return path


def stage2_centers(models: DCSModels, points: np.ndarray, sphere: np.ndarray) -> np.ndarray:
    """Composition points of one cloud: column-normalized Qᵀ · decoded sphere."""
    models.eval()
    dec = models.sphere_decoder(models.sphere_encoder(points), sphere)
    q = models.composition(Tensor(sphere))
    centers = geometry.weighted_centers(dec, q)
    models.train()
    return centers.data


# ---------------------------------------------------------------------------
# Stage 3: joint DCS + masked-autoencoder pretraining
# ---------------------------------------------------------------------------

def run_stage3(clouds, cfg: cfgmod.RunConfig, seed: int, out_dir: str,
               resume: bool = False, models: DCSModels | None = None) -> str:
    _check_dataset(clouds)
    os.makedirs(out_dir, exist_ok=True)
    plan = plan_for_stage("3", cfg)
    scfg = cfg.sampler
    models = models or DCSModels(cfg, seed)
    load_models(os.path.join(out_dir, _CKPT_NAMES[2]), models, expected_stage=2)
    _apply_freeze(models, plan)
    optimizer = AdamW(_trainable(models), weight_decay=plan.loss_recipe["weight_decay"])
    path = os.path.join(out_dir, _CKPT_NAMES[3])

    start = 0
    if resume:
        state = load_models(path, models, expected_stage=3)
        _apply_freeze(models, plan)
        _restore_optimizer(optimizer, models, state, path)
        start = int(state["epoch"])
    log = _LossLog(os.path.join(out_dir, "stage3_log.csv"),
                   ["epoch", "lr", "local_loss", "global_loss"], append=resume)

    points = _cloud_points(clouds)
    mode = plan.loss_recipe["global_loss_mode"]
    w_local, w_global = plan.loss_recipe["local_weight"], plan.loss_recipe["global_weight"]
    models.train()
    for epoch in range(start + 1, plan.epochs + 1):
        lr = plan.schedule.lr_at(epoch)
        optimizer.lr = lr
        tau = scfg.gumbel_temperature * scfg.temperature_anneal ** (epoch - 1)
        order = rngmod.stream(seed, f"stage3/shuffle/{epoch}").permutation(len(points))
        gumbel_rng = rngmod.stream(seed, f"stage3/gumbel/{epoch}")
        mask_rng = rngmod.stream(seed, f"stage3/mask/{epoch}")
        sums = np.zeros(2)
        count = 0
        for batch in _batches(order, plan.batch_size):
            local_sum, global_sum = None, None
            centers_list, cloud_list = [], []
            for i in batch:
                sample = sampler.dcs_sample(points[i], models.composition, scfg,
                                            rng=gumbel_rng, temperature=tau)
                pred, masked = models.autoencoder.encode_decode(sample.patches, sample.centers, mask_rng)
                target = sample.patches.data[masked]
                li = bb.local_recon_loss(pred, target)
                local_sum = li if local_sum is None else local_sum + li
                if mode == "mmd":
                    centers_list.append(sample.centers)
                    cloud_list.append(points[i])
                else:
                    gi = sampler.global_recon_loss(sample.centers, points[i], mode=mode)
                    global_sum = gi if global_sum is None else global_sum + gi
                if scfg.uniform_prior_weight > 0.0:
                    pen = scfg.uniform_prior_weight * sampler.uniform_prior_penalty(sample.prob_map)
                    global_sum = pen if global_sum is None else global_sum + pen
            local = local_sum / len(batch)
            if mode == "mmd":
                # MMD is a set-level distance, so it applies per batch, not per cloud
                batch_mmd = geometry.mmd(centers_list, cloud_list, metric="cd")
                global_ = batch_mmd if global_sum is None else batch_mmd + global_sum / len(batch)
            else:
                global_ = global_sum / len(batch)
            loss = w_local * local + w_global * global_
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step()
            sums += (float(local.data) * len(batch), float(global_.data) * len(batch))
            count += len(batch)
        log.row(epoch, lr, sums[0] / count, sums[1] / count)
        save_models(path, models, stage=3, epoch=epoch, optimizer=optimizer)
    log.close()
    if start >= plan.epochs:
        save_models(path, models, stage=3, epoch=plan.epochs, optimizer=optimizer)
    return path


# ---------------------------------------------------------------------------
# Finetuning with the stop-gradient toggle
# ---------------------------------------------------------------------------

def deterministic_sample(points: np.ndarray, models: DCSModels,
                         scfg: sampler.SamplerConfig) -> sampler.DCSSample:
    """Noise-free DCS pass (plain softmax weights) used outside pretraining."""
    pts_t = Tensor(np.asarray(points, dtype=np.float64))
    q = models.composition(pts_t)
    centers = geometry.weighted_centers(pts_t, q, normalize_columns=scfg.column_normalize)
    patches, idx = geometry.knn_group(pts_t, centers, scfg.points_per_group)
    return sampler.DCSSample(centers=centers, prob_map=q, patches=patches, patch_indices=idx)


def _split_holdout(clouds, seed: int, fraction: float, train_per_class: int = 0):
    """Stratified train/holdout split; deterministic given the seed."""
    labels = np.array([c.label for c in clouds])
    if labels.min() == labels.max():
        raise PipelineError("finetune needs at least two classes")
    split_rng = rngmod.stream(seed, "finetune/split")
    train_idx, hold_idx = [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[split_rng.permutation(len(members))]
        n_hold = max(1, int(round(fraction * len(members))))
        hold_idx.extend(members[:n_hold])
        rest = members[n_hold:]
        if train_per_class > 0:
            rest = rest[:train_per_class]
        train_idx.extend(rest)
    return sorted(train_idx), sorted(hold_idx)


def _classify_batch(models: DCSModels, points_list, scfg, dropout_rng=None) -> Tensor:
    rows = []
    for pts in points_list:
        sample = deterministic_sample(pts, models, scfg)
        logits = models.classifier(sample.patches, sample.centers, rng=dropout_rng)
        rows.append(logits.reshape((1, -1)))
    return ad.concat(rows, axis=0)


def evaluate_accuracy(models: DCSModels, clouds, scfg) -> float:
    models.eval()
    correct = 0
    for c in clouds:
        logits = _classify_batch(models, [c.points], scfg)
        correct += int(np.argmax(logits.data[0]) == c.label)
    return correct / len(clouds)


def finetune(clouds, cfg: cfgmod.RunConfig, seed: int, out_dir: str,
             stop_gradient: bool = True, from_scratch: bool = False,
             models: DCSModels | None = None) -> tuple[str, float, dict]:
    """Train the classifier from the stage-3 checkpoint (or from scratch).

    Returns (checkpoint path, held-out accuracy, report dict with the
    sampler parameter hashes before/after training).
    """
    _check_dataset(clouds)
    os.makedirs(out_dir, exist_ok=True)
    plan = plan_for_stage("finetune", cfg)
    scfg = cfg.sampler
    num_classes = len({c.label for c in clouds})
    if from_scratch:
        models = DCSModels(cfg, seed, init_prefix="scratch")
    else:
        models = models or DCSModels(cfg, seed)
        load_models(os.path.join(out_dir, _CKPT_NAMES[3]), models, expected_stage=3)
    models.add_classifier(seed, num_classes,
                          init_prefix="scratch" if from_scratch else "init")
    _apply_freeze(models, plan)
    # the classification path never uses the reconstruction side of the MAE
    for block in models.autoencoder.decoder:
        block.freeze()
    models.autoencoder.mask_token.trainable = False
    models.autoencoder.head.freeze()
    if stop_gradient:
        models.composition.freeze()
    optimizer = AdamW(_trainable(models), weight_decay=plan.loss_recipe["weight_decay"])

    tag = "scratch" if from_scratch else "finetune"
    log = _LossLog(os.path.join(out_dir, f"{tag}_log.csv"), ["epoch", "lr", "loss"], append=False)
    train_idx, hold_idx = _split_holdout(clouds, seed, cfg.finetune.holdout_fraction,
                                         cfg.finetune.train_per_class)
    train = [clouds[i] for i in train_idx]
    holdout = [clouds[i] for i in hold_idx]

    hash_before = param_hash(models.composition)
    for epoch in range(1, plan.epochs + 1):
        lr = plan.schedule.lr_at(epoch)
        optimizer.lr = lr
        models.train()
        if stop_gradient:
            models.composition.eval()  # frozen: keep BN statistics fixed too
        order = rngmod.stream(seed, f"{tag}/shuffle/{epoch}").permutation(len(train))
        dropout_rng = rngmod.stream(seed, f"{tag}/dropout/{epoch}")
        total, count = 0.0, 0
        for batch in _batches(order, plan.batch_size):
            logits = _classify_batch(models, [train[i].points for i in batch], scfg, dropout_rng)
            loss = nn.cross_entropy(logits, np.array([train[i].label for i in batch]))
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step()
            total += float(loss.data) * len(batch)
            count += len(batch)
        log.row(epoch, lr, total / count)
    log.close()

    hash_after = param_hash(models.composition)
    if stop_gradient and hash_after != hash_before:
        raise PipelineError("stop-gradient was set but sampler parameters changed")
    accuracy = evaluate_accuracy(models, holdout, scfg)
    path = os.path.join(out_dir, f"{tag}.ckpt")
    save_models(path, models, stage=4, epoch=plan.epochs, optimizer=optimizer,
                extra={"accuracy": accuracy, "stop_gradient": stop_gradient,
                       "sampler_hash_before": hash_before, "sampler_hash_after": hash_after})
    report = {"accuracy": accuracy, "stop_gradient": stop_gradient,
              "from_scratch": from_scratch, "train_size": len(train), "holdout_size": len(holdout),
              "sampler_hash_before": hash_before, "sampler_hash_after": hash_after,
              "sampler_changed": hash_after != hash_before}
    return path, accuracy, report


# ---------------------------------------------------------------------------
# Few-shot evaluation
# ---------------------------------------------------------------------------

def pooled_feature(models: DCSModels, points: np.ndarray, scfg) -> np.ndarray:
    """Mean-pooled encoder tokens of one cloud (eval mode, noise-free DCS)."""
    sample = deterministic_sample(points, models, scfg)
    tokens = models.autoencoder.encode_tokens(sample.patches, sample.centers)
    return tokens.data.mean(axis=0)


def few_shot_eval(clouds, cfg: cfgmod.RunConfig, seed: int, out_dir: str,
                  task: FewShotTask | None = None,
                  models: DCSModels | None = None) -> tuple[float, float, list[float]]:
    """W-way S-shot episodes: head-only training on frozen pooled features.

    Returns (mean accuracy, standard deviation, per-episode accuracies).
    """
    _check_dataset(clouds)
    fs = cfg.fewshot
    task = task or FewShotTask(way=fs.way, shot=fs.shot, query_per_class=fs.query_per_class,
                               episode_seed=seed)
    scfg = cfg.sampler
    models = models or DCSModels(cfg, seed)
    load_models(os.path.join(out_dir, _CKPT_NAMES[3]), models, expected_stage=3)
    models.eval()

    labels = np.array([c.label for c in clouds])
    classes = np.unique(labels)
    if len(classes) < task.way:
        raise PipelineError(f"few-shot needs {task.way} classes, dataset has {len(classes)}")
    need = task.shot + task.query_per_class
    for cls in classes:
        if (labels == cls).sum() < need:
            raise PipelineError(f"class {cls} has fewer than {need} samples for the episode protocol")

    feature_cache: dict[int, np.ndarray] = {}

    def feat(i: int) -> np.ndarray:
        if i not in feature_cache:
            feature_cache[i] = pooled_feature(models, clouds[i].points, scfg)
        return feature_cache[i]

    accuracies = []
    for episode in range(fs.episodes):
        ep_rng = rngmod.stream(task.episode_seed, f"fewshot/episode/{episode}")
        chosen = np.sort(ep_rng.choice(classes, size=task.way, replace=False))
        support, query, s_labels, q_labels = [], [], [], []
        for way_label, cls in enumerate(chosen):
            members = np.flatnonzero(labels == cls)
            picked = members[ep_rng.permutation(len(members))[:need]]
            support.extend(picked[:task.shot])
            query.extend(picked[task.shot:])
            s_labels.extend([way_label] * task.shot)
            q_labels.extend([way_label] * task.query_per_class)

        xs = Tensor(np.stack([feat(i) for i in support]))
        head = nn.Linear(xs.shape[1], task.way, rngmod.stream(task.episode_seed, f"fewshot/head/{episode}"))
        opt = AdamW(head.parameters(), lr=fs.head_lr)
        ys = np.array(s_labels)
        for _ in range(fs.head_epochs):
            loss = nn.cross_entropy(head(xs), ys)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        xq = Tensor(np.stack([feat(i) for i in query]))
        pred = head(xq).data.argmax(axis=1)
        accuracies.append(float((pred == np.array(q_labels)).mean()))
    mean = float(np.mean(accuracies))
    std = float(np.std(accuracies))
    return mean, std, accuracies


# ---------------------------------------------------------------------------
# FPS-baseline comparison
# ---------------------------------------------------------------------------

def baseline_compare(clouds, cfg: cfgmod.RunConfig, seed: int, out_dir: str,
                     models: DCSModels | None = None,
                     report_path: str | None = None) -> list[dict]:
    """Per-cloud center-set Chamfer distance for FPS, DCS, and random subsets."""
    _check_dataset(clouds)
    scfg = cfg.sampler
    models = models or DCSModels(cfg, seed)
    load_models(os.path.join(out_dir, _CKPT_NAMES[3]), models, expected_stage=3)
    models.eval()
    g = scfg.group_count
    rows = []
    for i, cloud in enumerate(clouds):
        pts = cloud.points
        fps_centers = pts[geometry.fps(pts, g)]
        dcs_centers = deterministic_sample(pts, models, scfg).centers.data
        rand_rng = rngmod.stream(seed, f"compare/random/{i}")
        rand_centers = pts[rand_rng.choice(len(pts), size=g, replace=False)]
        rows.append({
            "cloud": cloud.id or str(i),
            "fps_cd": float(geometry.chamfer(fps_centers, pts, form="l2").data),
            "dcs_cd": float(geometry.chamfer(dcs_centers, pts, form="l2").data),
            "random_cd": float(geometry.chamfer(rand_centers, pts, form="l2").data),
        })
    report_path = report_path or os.path.join(out_dir, "baseline_compare.csv")
    with open(report_path, "w") as fh:
        fh.write("cloud,fps_cd,dcs_cd,random_cd\n")
        for r in rows:
            fh.write(f"{r['cloud']},{r['fps_cd']!r},{r['dcs_cd']!r},{r['random_cd']!r}\n")
        for key in ("fps_cd", "dcs_cd", "random_cd"):
            fh.write(f"# mean {key} {np.mean([r[key] for r in rows])!r}\n")
    return rows
