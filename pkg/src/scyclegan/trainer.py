"""Training loop: three-phase freeze/unfreeze optimization of the six
networks, Adam with linear learning-rate decay, segmentor pre-training,
deterministic JSONL logging, and bit-exact checkpointing.

One training step:

1. Freeze discriminators and segmentors, update both generators on the
   composite objective (adversarial + cycle + weighted segmentation terms).
2. Unfreeze the discriminators and update each on its adversarial loss with
   fresh scores on detached fakes.
3. Freeze generators and discriminators, update both segmentors (by default
   on real images with their own labels).

Training is a pure function of (dataset bytes, config) on a fixed platform:
sampling is counter-based, initialization is seeded, and no other
randomness is consumed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import data, losses, networks
from .errors import (
    CheckpointError,
    ConfigError,
    IOFailure,
    NumericError,
    UsageError,
)

ADAM_BETA1 = 0.5
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_VERSION = 1
NET_NAMES = ("gen_ct2us", "gen_us2ct", "disc_ct", "disc_us", "seg_ct", "seg_us")

SEG_UPDATE_SOURCES = ("real_only", "real_and_fake")


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 2e-4
    decay_start_epoch: int = 100
    batch_size: int = 1
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    gan_mode: str = "non_saturating"
    dice: losses.DiceParams = field(default_factory=losses.DiceParams)
    seed: int = 0
    canvas: tuple[int, int] | None = None
    num_classes: int = data.NUM_CLASSES
    segmentor_update_source: str = "real_only"
    checkpoint_every: int = 0  # 0 = final checkpoint only
    precision: str = "single"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not (1 <= self.decay_start_epoch <= self.epochs):
            raise ConfigError(
                f"decay_start_epoch must lie in [1, epochs], got {self.decay_start_epoch}"
            )
        if self.batch_size != 1:
            raise ConfigError("batch size is fixed at 1")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.gan_mode not in losses.GAN_MODES:
            raise ConfigError(f"gan_mode must be one of {losses.GAN_MODES}")
        if self.segmentor_update_source not in SEG_UPDATE_SOURCES:
            raise ConfigError(
                f"segmentor_update_source must be one of {SEG_UPDATE_SOURCES}"
            )
        if self.num_classes < 2:
            raise ConfigError("need at least two classes (background + one organ)")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        networks.torch_dtype(self.precision)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr": self.lr,
            "decay_start_epoch": self.decay_start_epoch,
            "batch_size": self.batch_size,
            "lambda_cycle": self.weights.lambda_cycle,
            "lambda_seg": self.weights.lambda_seg,
            "gan_mode": self.gan_mode,
            "dice_epsilon": self.dice.epsilon,
            "seed": self.seed,
            "canvas": None if self.canvas is None else list(self.canvas),
            "num_classes": self.num_classes,
            "segmentor_update_source": self.segmentor_update_source,
            "checkpoint_every": self.checkpoint_every,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            epochs=d["epochs"],
            lr=d["lr"],
            decay_start_epoch=d["decay_start_epoch"],
            batch_size=d["batch_size"],
            weights=losses.LossWeights(d["lambda_cycle"], d["lambda_seg"]),
            gan_mode=d["gan_mode"],
            dice=losses.DiceParams(d["dice_epsilon"]),
            seed=d["seed"],
            canvas=None if d.get("canvas") is None else tuple(d["canvas"]),
            num_classes=d["num_classes"],
            segmentor_update_source=d["segmentor_update_source"],
            checkpoint_every=d["checkpoint_every"],
            precision=d["precision"],
        )


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant until decay_start_epoch, then linear toward 0 at epochs + 1."""
    if not (1 <= epoch <= cfg.epochs):
        raise UsageError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    if epoch <= cfg.decay_start_epoch:
        return cfg.lr
    remaining = cfg.epochs - cfg.decay_start_epoch + 1
    return cfg.lr * (1.0 - (epoch - cfg.decay_start_epoch) / remaining)


# ---------------------------------------------------------------------------
# Network bundle


@dataclass
class Networks:
    gen_ct2us: networks.NetworkHandle
    gen_us2ct: networks.NetworkHandle
    disc_ct: networks.NetworkHandle
    disc_us: networks.NetworkHandle
    seg_ct: networks.NetworkHandle
    seg_us: networks.NetworkHandle

    def named(self):
        return [(name, getattr(self, name)) for name in NET_NAMES]

    def all(self):
        return [getattr(self, name) for name in NET_NAMES]


def build_networks(
    cfg: TrainConfig,
    generator_cfg: networks.GeneratorConfig | None = None,
    segmentor_cfg: networks.SegmentorConfig | None = None,
    discriminator_cfg: networks.DiscriminatorConfig | None = None,
) -> Networks:
    """Six networks with per-network seeds derived from cfg.seed."""
    g_cfg = generator_cfg or networks.generator_config_for_classes(cfg.num_classes)
    s_cfg = segmentor_cfg or networks.SegmentorConfig(num_classes=cfg.num_classes)
    d_cfg = discriminator_cfg or networks.DiscriminatorConfig()
    if g_cfg.in_channels != 3 + cfg.num_classes:
        raise ConfigError(
            f"generator expects {g_cfg.in_channels} input channels but config has "
            f"{cfg.num_classes} classes (needs {3 + cfg.num_classes})"
        )
    kinds = {
        "gen_ct2us": (networks.GENERATOR, g_cfg),
        "gen_us2ct": (networks.GENERATOR, g_cfg),
        "disc_ct": (networks.DISCRIMINATOR, d_cfg),
        "disc_us": (networks.DISCRIMINATOR, d_cfg),
        "seg_ct": (networks.SEGMENTOR, s_cfg),
        "seg_us": (networks.SEGMENTOR, s_cfg),
    }
    built = {}
    for i, name in enumerate(NET_NAMES):
        kind, ncfg = kinds[name]
        built[name] = networks.build_network(
            kind, ncfg, data.derive_seed(cfg.seed, 100 + i), cfg.precision
        )
    return Networks(**built)


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """First/second moment vectors plus the shared step counter for one network."""

    def __init__(self, net: networks.NetworkHandle):
        self.t = 0
        self.m = [torch.zeros_like(p) for p in net.params]
        self.v = [torch.zeros_like(p) for p in net.params]


def adam_step(net: networks.NetworkHandle, state: AdamState, lr: float) -> None:
    """One update: m,v <- EMA(grad, grad^2); p -= lr * m_hat / (sqrt(v_hat) + eps).

    Frozen networks are left untouched, state included.
    """
    if net.mode == "frozen":
        return
    state.t += 1
    t = state.t
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    with torch.no_grad():
        for p, m, v in zip(net.params, state.m, state.v):
            g = p.grad
            if g is None:
                continue
            m.mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
            v.mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
            denom = (v / bc2).sqrt_().add_(ADAM_EPS)
            p.addcdiv_(m / bc1, denom, value=-lr)


def init_optimizers(nets: Networks) -> dict[str, AdamState]:
    return {name: AdamState(net) for name, net in nets.named()}


# ---------------------------------------------------------------------------
# Sample preparation


def sample_to_tensors(sample: data.Sample, num_classes: int, precision: str) -> dict:
    """Normalized image, one-hot planes, and integer mask as torch tensors."""
    dtype = networks.torch_dtype(precision)
    img = data.normalize(sample.image)  # (H, W, 3) in [-1, 1]
    img_t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype)
    img_t = img_t.unsqueeze(0).contiguous(memory_format=torch.channels_last)
    planes = data.one_hot(sample.mask, num_classes, dtype=np.float64)
    oh = torch.from_numpy(planes).to(dtype).unsqueeze(0)
    oh = oh.contiguous(memory_format=torch.channels_last)
    mask_t = torch.from_numpy(sample.mask.astype(np.int64))
    return {"image": img_t, "onehot": oh, "mask": mask_t, "id": sample.id}


# ---------------------------------------------------------------------------
# Forward pass and training step


@dataclass
class ForwardBundle:
    fake_us: torch.Tensor
    rec_ct: torch.Tensor
    fake_ct: torch.Tensor
    rec_us: torch.Tensor
    score_fake_us: torch.Tensor
    score_fake_ct: torch.Tensor
    seg_fake_us: torch.Tensor  # S_US prediction on fake US (scored vs CT label)
    seg_fake_ct: torch.Tensor  # S_CT prediction on fake CT (scored vs US label)


def forward_pass(nets: Networks, ct: dict, us: dict) -> ForwardBundle:
    """All six networks wired as in the translation cycle: CT->US->CT and
    US->CT->US, conditioning each generator on the source mask."""
    fake_us = networks.generator_forward(nets.gen_ct2us, ct["image"], ct["onehot"])
    rec_ct = networks.generator_forward(nets.gen_us2ct, fake_us, ct["onehot"])
    fake_ct = networks.generator_forward(nets.gen_us2ct, us["image"], us["onehot"])
    rec_us = networks.generator_forward(nets.gen_ct2us, fake_ct, us["onehot"])
    return ForwardBundle(
        fake_us=fake_us,
        rec_ct=rec_ct,
        fake_ct=fake_ct,
        rec_us=rec_us,
        score_fake_us=networks.discriminator_forward(nets.disc_us, fake_us),
        score_fake_ct=networks.discriminator_forward(nets.disc_ct, fake_ct),
        seg_fake_us=networks.segmentor_forward(nets.seg_us, fake_us),
        seg_fake_ct=networks.segmentor_forward(nets.seg_ct, fake_ct),
    )


_LOG_FIELDS = (
    "epoch",
    "step",
    "loss_G_total",
    "loss_adv_ct2us",
    "loss_adv_us2ct",
    "loss_cycle",
    "loss_seg_ct",
    "loss_seg_us",
    "loss_D_us",
    "loss_D_ct",
    "loss_S_us",
    "loss_S_ct",
    "lr",
)


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    loss_G_total: float
    loss_adv_ct2us: float
    loss_adv_us2ct: float
    loss_cycle: float
    loss_seg_ct: float
    loss_seg_us: float
    loss_D_us: float
    loss_D_ct: float
    loss_S_us: float
    loss_S_ct: float
    lr: float

    def to_json_line(self) -> str:
        d = dataclasses.asdict(self)
        return json.dumps({k: d[k] for k in _LOG_FIELDS})

    @classmethod
    def from_json_line(cls, line: str) -> "TrainLogRecord":
        return cls(**json.loads(line))


def _scalar(x: torch.Tensor, name: str, record: dict) -> float:
    v = float(x.detach())
    record[name] = v
    if not math.isfinite(v):
        raise NumericError(f"non-finite {name} at partial record {record}")
    return v


def training_step(
    nets: Networks,
    opts: dict[str, AdamState],
    ct: dict,
    us: dict,
    cfg: TrainConfig,
    lr: float,
    epoch: int = 0,
    step: int = 0,
    phase_hook=None,
    drop_seg_terms: bool = False,
) -> TrainLogRecord:
    """One three-phase optimization step on a CT/US sample pair.

    ``drop_seg_terms`` removes the segmentation terms from the generator
    graph entirely (reference path for the lambda_seg = 0 ablation check).
    """
    rec: dict = {"epoch": epoch, "step": step, "lr": lr}

    # Phase 1: generators only.
    for net in (nets.disc_ct, nets.disc_us, nets.seg_ct, nets.seg_us):
        networks.set_mode(net, "frozen")
    for net in (nets.gen_ct2us, nets.gen_us2ct):
        networks.set_mode(net, "trainable")
        net.zero_grad()

    if drop_seg_terms:
        fake_us = networks.generator_forward(nets.gen_ct2us, ct["image"], ct["onehot"])
        rec_ct = networks.generator_forward(nets.gen_us2ct, fake_us, ct["onehot"])
        fake_ct = networks.generator_forward(nets.gen_us2ct, us["image"], us["onehot"])
        rec_us = networks.generator_forward(nets.gen_ct2us, fake_ct, us["onehot"])
        adv_ct2us = losses.adversarial_g_loss(
            networks.discriminator_forward(nets.disc_us, fake_us), cfg.gan_mode
        )
        adv_us2ct = losses.adversarial_g_loss(
            networks.discriminator_forward(nets.disc_ct, fake_ct), cfg.gan_mode
        )
        cyc = losses.cycle_loss(ct["image"], rec_ct, us["image"], rec_us)
        seg_ct_term = torch.zeros((), dtype=adv_ct2us.dtype)
        seg_us_term = torch.zeros((), dtype=adv_ct2us.dtype)
        total = adv_ct2us + adv_us2ct + cfg.weights.lambda_cycle * cyc
    else:
        bundle = forward_pass(nets, ct, us)
        fake_us, fake_ct = bundle.fake_us, bundle.fake_ct
        adv_ct2us = losses.adversarial_g_loss(bundle.score_fake_us, cfg.gan_mode)
        adv_us2ct = losses.adversarial_g_loss(bundle.score_fake_ct, cfg.gan_mode)
        cyc = losses.cycle_loss(ct["image"], bundle.rec_ct, us["image"], bundle.rec_us)
        seg_us_term = losses.seg_loss(bundle.seg_fake_us, ct["mask"], cfg.dice)
        seg_ct_term = losses.seg_loss(bundle.seg_fake_ct, us["mask"], cfg.dice)
        total = losses.generator_total(
            adv_ct2us, adv_us2ct, cyc, seg_ct_term, seg_us_term, cfg.weights
        )

    _scalar(adv_ct2us, "loss_adv_ct2us", rec)
    _scalar(adv_us2ct, "loss_adv_us2ct", rec)
    _scalar(cyc, "loss_cycle", rec)
    _scalar(seg_ct_term, "loss_seg_ct", rec)
    _scalar(seg_us_term, "loss_seg_us", rec)
    _scalar(total, "loss_G_total", rec)
    total.backward()
    adam_step(nets.gen_ct2us, opts["gen_ct2us"], lr)
    adam_step(nets.gen_us2ct, opts["gen_us2ct"], lr)
    fake_us = fake_us.detach()
    fake_ct = fake_ct.detach()
    if phase_hook:
        phase_hook("generators")

    # Phase 2: discriminators on fresh scores over detached fakes.
    for net in (nets.gen_ct2us, nets.gen_us2ct, nets.seg_ct, nets.seg_us):
        networks.set_mode(net, "frozen")
    for name, disc, real, fake in (
        ("loss_D_us", nets.disc_us, us["image"], fake_us),
        ("loss_D_ct", nets.disc_ct, ct["image"], fake_ct),
    ):
        networks.set_mode(disc, "trainable")
        disc.zero_grad()
        d_loss = losses.adversarial_d_loss(
            networks.discriminator_forward(disc, real),
            networks.discriminator_forward(disc, fake),
            cfg.gan_mode,
        )
        _scalar(d_loss, name, rec)
        d_loss.backward()
        adam_step(disc, opts["disc_us" if disc is nets.disc_us else "disc_ct"], lr)
    if phase_hook:
        phase_hook("discriminators")

    # Phase 3: segmentors (real images with their own labels by default).
    for net in (nets.gen_ct2us, nets.gen_us2ct, nets.disc_ct, nets.disc_us):
        networks.set_mode(net, "frozen")
    for name, seg, own, cross_fake, cross_mask in (
        ("loss_S_ct", nets.seg_ct, ct, fake_ct, us["mask"]),
        ("loss_S_us", nets.seg_us, us, fake_us, ct["mask"]),
    ):
        networks.set_mode(seg, "trainable")
        seg.zero_grad()
        s_loss = losses.seg_loss(
            networks.segmentor_forward(seg, own["image"]), own["mask"], cfg.dice
        )
        if cfg.segmentor_update_source == "real_and_fake":
            s_loss = s_loss + losses.seg_loss(
                networks.segmentor_forward(seg, cross_fake), cross_mask, cfg.dice
            )
        _scalar(s_loss, name, rec)
        s_loss.backward()
        adam_step(seg, opts["seg_ct" if seg is nets.seg_ct else "seg_us"], lr)
    if phase_hook:
        phase_hook("segmentors")

    for net in nets.all():
        networks.set_mode(net, "trainable")
        net.zero_grad()
    return TrainLogRecord(**{k: rec[k] for k in _LOG_FIELDS})


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class CheckpointBundle:
    nets: Networks
    opts: dict[str, AdamState]
    epoch: int
    config: TrainConfig
    content_hash: str = ""


def _optim_arrays(net: networks.NetworkHandle, state: AdamState) -> dict[str, np.ndarray]:
    arrays = {"step": np.array([state.t], dtype=np.int64)}
    for i, (name, m, v) in enumerate(zip(net.names, state.m, state.v)):
        arrays[f"{i:03d}:m:{name}"] = m.detach().contiguous().numpy().copy()
        arrays[f"{i:03d}:v:{name}"] = v.detach().contiguous().numpy().copy()
    return arrays


def _load_optim_arrays(net: networks.NetworkHandle, state: AdamState, arrays) -> None:
    state.t = int(arrays["step"][0])
    with torch.no_grad():
        for i, (name, m, v) in enumerate(zip(net.names, state.m, state.v)):
            m.copy_(torch.from_numpy(np.ascontiguousarray(arrays[f"{i:03d}:m:{name}"])).to(m.dtype))
            v.copy_(torch.from_numpy(np.ascontiguousarray(arrays[f"{i:03d}:v:{name}"])).to(v.dtype))


def _hash_files(paths: list[str]) -> str:
    h = hashlib.sha256()
    for path in sorted(paths):
        h.update(os.path.basename(path).encode())
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def save_checkpoint(bundle: CheckpointBundle, out_dir: str) -> str:
    """Write the six weight containers, optimizer states, and a manifest with
    a content hash. Returns the recorded hash."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        weight_paths = []
        for name, net in bundle.nets.named():
            path = os.path.join(out_dir, f"{name}.npz")
            np.savez(path, **networks.state_arrays(net))
            weight_paths.append(path)
            opath = os.path.join(out_dir, f"optim_{name}.npz")
            np.savez(opath, **_optim_arrays(net, bundle.opts[name]))
            weight_paths.append(opath)
        content_hash = _hash_files(weight_paths)
        manifest = {
            "version": CHECKPOINT_VERSION,
            "epoch": bundle.epoch,
            "train_config": bundle.config.to_dict(),
            "networks": {
                name: dict(
                    networks.config_to_dict(net.kind, net.config),
                    seed=net.seed,
                    precision=net.precision,
                )
                for name, net in bundle.nets.named()
            },
            "content_hash": content_hash,
        }
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint to {out_dir}: {exc}") from exc
    bundle.content_hash = content_hash
    return content_hash


def load_checkpoint(ckpt_dir: str, expected_classes: int | None = None) -> CheckpointBundle:
    """Rebuild networks and optimizer states; rejects hash mismatches."""
    manifest_path = os.path.join(ckpt_dir, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint manifest {manifest_path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest {manifest_path}: {exc}") from exc

    paths = []
    for name in NET_NAMES:
        for fname in (f"{name}.npz", f"optim_{name}.npz"):
            path = os.path.join(ckpt_dir, fname)
            if not os.path.isfile(path):
                raise CheckpointError(f"checkpoint file {fname} missing from {ckpt_dir}")
            paths.append(path)
    actual = _hash_files(paths)
    if actual != manifest.get("content_hash"):
        raise CheckpointError(
            f"checkpoint content hash mismatch in {ckpt_dir}: files hash to {actual[:12]}..., "
            f"manifest says {str(manifest.get('content_hash'))[:12]}..."
        )

    config = TrainConfig.from_dict(manifest["train_config"])
    if expected_classes is not None and config.num_classes != expected_classes:
        raise ConfigError(
            f"checkpoint was trained with {config.num_classes} classes, expected {expected_classes}"
        )
    built = {}
    opts = {}
    for name in NET_NAMES:
        spec = manifest["networks"][name]
        kind, ncfg = networks.config_from_dict(spec)
        net = networks.build_network(kind, ncfg, spec["seed"], spec["precision"])
        with np.load(os.path.join(ckpt_dir, f"{name}.npz")) as npz:
            networks.load_state_arrays(net, {k: npz[k] for k in npz.files})
        state = AdamState(net)
        with np.load(os.path.join(ckpt_dir, f"optim_{name}.npz")) as npz:
            _load_optim_arrays(net, state, {k: npz[k] for k in npz.files})
        built[name] = net
        opts[name] = state
    return CheckpointBundle(
        nets=Networks(**built),
        opts=opts,
        epoch=int(manifest["epoch"]),
        config=config,
        content_hash=actual,
    )


# ---------------------------------------------------------------------------
# Full training and segmentor pre-training


@dataclass
class TrainResult:
    checkpoint_dir: str
    log_path: str
    bundle: CheckpointBundle


class _SampleCache:
    def __init__(self, dataset: data.Dataset, num_classes: int, precision: str):
        self.dataset = dataset
        self.num_classes = num_classes
        self.precision = precision
        self._cache: dict[tuple[str, str], dict] = {}

    def get(self, sample: data.Sample) -> dict:
        key = (sample.domain, sample.id)
        if key not in self._cache:
            self._cache[key] = sample_to_tensors(sample, self.num_classes, self.precision)
        return self._cache[key]


def _check_dataset_config(dataset: data.Dataset, cfg: TrainConfig) -> None:
    if dataset.manifest.classes != cfg.num_classes:
        raise ConfigError(
            f"dataset has {dataset.manifest.classes} classes, config expects {cfg.num_classes}"
        )
    if cfg.canvas is not None and tuple(cfg.canvas) != tuple(dataset.manifest.canvas):
        raise ConfigError(
            f"config canvas {cfg.canvas} != dataset canvas {dataset.manifest.canvas}"
        )


def train(
    dataset: data.Dataset,
    cfg: TrainConfig,
    out_dir: str,
    nets: Networks | None = None,
    resume_from: str | None = None,
    progress=None,
) -> TrainResult:
    """Run the full schedule; write one JSONL record per step and checkpoints
    at cfg.checkpoint_every (plus a final one). Resuming from a checkpoint
    continues bit-identically on the same platform."""
    _check_dataset_config(dataset, cfg)
    start_epoch = 1
    if resume_from is not None:
        bundle = load_checkpoint(resume_from, expected_classes=cfg.num_classes)
        ours = {k: v for k, v in cfg.to_dict().items() if k != "checkpoint_every"}
        theirs = {k: v for k, v in bundle.config.to_dict().items() if k != "checkpoint_every"}
        if ours != theirs:
            raise ConfigError("resume config differs from the checkpoint's training config")
        nets, opts = bundle.nets, bundle.opts
        start_epoch = bundle.epoch + 1
    else:
        nets = nets or build_networks(cfg)
        opts = init_optimizers(nets)

    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create output directory {out_dir}: {exc}") from exc
    log_path = os.path.join(out_dir, "train_log.jsonl")
    steps_per_epoch = max(dataset.n_ct, dataset.n_us)
    cache = _SampleCache(dataset, cfg.num_classes, cfg.precision)
    bundle = CheckpointBundle(nets=nets, opts=opts, epoch=start_epoch - 1, config=cfg)
    ckpt_root = os.path.join(out_dir, "checkpoints")

    try:
        log_fh = open(log_path, "w", encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot open log file {log_path}: {exc}") from exc
    with log_fh:
        for epoch in range(start_epoch, cfg.epochs + 1):
            lr = lr_at(epoch, cfg)
            for step in range(steps_per_epoch):
                ct_s, us_s = data.sample_unpaired_batch(dataset, epoch, step, cfg.seed)
                record = training_step(
                    nets, opts, cache.get(ct_s), cache.get(us_s), cfg, lr, epoch, step
                )
                log_fh.write(record.to_json_line() + "\n")
            log_fh.flush()
            bundle.epoch = epoch
            if progress:
                progress(epoch, record)
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(bundle, os.path.join(ckpt_root, f"epoch_{epoch:04d}"))
    final_dir = os.path.join(ckpt_root, "final")
    save_checkpoint(bundle, final_dir)
    return TrainResult(checkpoint_dir=final_dir, log_path=log_path, bundle=bundle)


def pretrain_segmentors(
    dataset: data.Dataset,
    cfg: TrainConfig,
    epochs: int,
    nets: Networks | None = None,
    holdout_fraction: float = 0.2,
    progress=None,
) -> tuple[networks.NetworkHandle, networks.NetworkHandle, dict]:
    """Supervised pre-training of both segmentors on their own domains.

    Returns the two trained segmentors plus held-out per-class hard Dice
    (micro-averaged over the held-out pixels).
    """
    _check_dataset_config(dataset, cfg)
    if not (0.0 <= holdout_fraction < 1.0):
        raise UsageError(f"holdout_fraction must be in [0, 1), got {holdout_fraction}")
    nets = nets or build_networks(cfg)
    cache = _SampleCache(dataset, cfg.num_classes, cfg.precision)
    metrics: dict = {}
    for dom_idx, (domain, seg, opt_name) in enumerate(
        [(data.CT, nets.seg_ct, "seg_ct"), (data.US, nets.seg_us, "seg_us")]
    ):
        n = dataset.count(domain)
        perm = np.random.default_rng(
            np.random.SeedSequence([cfg.seed & 0xFFFFFFFFFFFFFFFF, 7, dom_idx])
        ).permutation(n)
        n_hold = int(round(holdout_fraction * n)) if holdout_fraction > 0 else 0
        n_hold = min(n_hold, n - 1)
        train_idx = perm[: n - n_hold]
        hold_idx = perm[n - n_hold :]
        networks.set_mode(seg, "trainable")
        state = AdamState(seg)
        for epoch in range(1, epochs + 1):
            order = np.random.default_rng(
                np.random.SeedSequence([cfg.seed & 0xFFFFFFFFFFFFFFFF, 8, dom_idx, epoch])
            ).permutation(len(train_idx))
            for j in order:
                tensors = cache.get(dataset.read_sample(domain, int(train_idx[j])))
                seg.zero_grad()
                loss = losses.seg_loss(
                    networks.segmentor_forward(seg, tensors["image"]), tensors["mask"], cfg.dice
                )
                if not math.isfinite(float(loss.detach())):
                    raise NumericError(f"non-finite pre-training loss in domain {domain}")
                loss.backward()
                adam_step(seg, state, cfg.lr)
            if progress:
                progress(domain, epoch, float(loss.detach()))
        seg.zero_grad()
        # Held-out evaluation (falls back to the training set when nothing is held out).
        eval_idx = hold_idx if len(hold_idx) else train_idx
        inter = np.zeros(cfg.num_classes, dtype=np.int64)
        n_pred = np.zeros(cfg.num_classes, dtype=np.int64)
        n_true = np.zeros(cfg.num_classes, dtype=np.int64)
        with torch.no_grad():
            for i in eval_idx:
                sample = dataset.read_sample(domain, int(i))
                tensors = cache.get(sample)
                pred = networks.segmentor_forward(seg, tensors["image"])[0]
                pred_mask = pred.argmax(dim=0).numpy()
                a, b, c = losses.hard_dice_counts(pred_mask, sample.mask, cfg.num_classes)
                inter += a
                n_pred += b
                n_true += c
        per_class = losses.hard_dice_from_counts(inter, n_pred, n_true)
        metrics[domain] = {
            "per_class_dice": [float(x) for x in per_class],
            "mean_foreground_dice": float(per_class[1:].mean()),
            "n_holdout": int(len(eval_idx)),
        }
    return nets.seg_ct, nets.seg_us, metrics
