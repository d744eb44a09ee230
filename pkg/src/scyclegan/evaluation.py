"""Inference and the semantic-consistency metric.

The metric quantifies whether translation preserves anatomy: translate an
image, segment the translation with the target-domain segmentor, and compare
the predicted mask with the source label via hard Dice (2|A&B| / (|A|+|B|),
classes absent from both sides scoring 1). Scores pool pixels across samples
per class (micro-average).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import data, losses, networks, trainer
from .errors import DataError, IOFailure

DIRECTIONS = ("ct2us", "us2ct")

REPORT_KEYS = ("per_class_dice", "mean_foreground_dice", "n_samples", "checkpoint_hash", "config")


@dataclass
class MetricsReport:
    per_class_dice: list[float]
    mean_foreground_dice: float
    n_samples: int
    checkpoint_hash: str
    config: dict

    def __post_init__(self):
        if any(not (0.0 <= c <= 1.0) for c in self.per_class_dice):
            raise DataError("Dice coefficients must lie in [0, 1]")


def _resolve(checkpoint) -> trainer.CheckpointBundle:
    if isinstance(checkpoint, trainer.CheckpointBundle):
        return checkpoint
    return trainer.load_checkpoint(checkpoint)


def _direction_parts(bundle: trainer.CheckpointBundle, direction: str):
    if direction == "ct2us":
        return data.CT, bundle.nets.gen_ct2us, bundle.nets.seg_us
    if direction == "us2ct":
        return data.US, bundle.nets.gen_us2ct, bundle.nets.seg_ct
    raise DataError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def _translate_one(gen, sample: data.Sample, num_classes: int, precision: str, allow_unlabeled: bool) -> np.ndarray:
    mask = sample.mask
    if mask is None:
        if not allow_unlabeled:
            raise DataError(
                f"sample {sample.id} has no mask; generators are mask-conditioned "
                "(pass allow_unlabeled to substitute an all-background mask)"
            )
        mask = np.zeros(sample.image.shape[:2], dtype=np.uint8)
    tensors = trainer.sample_to_tensors(
        data.Sample(domain=sample.domain, id=sample.id, image=sample.image, mask=mask),
        num_classes,
        precision,
    )
    with torch.no_grad():
        out = networks.generator_forward(gen, tensors["image"], tensors["onehot"])
    arr = out[0].detach().numpy().transpose(1, 2, 0)
    return data.denormalize(arr)


def translate(checkpoint, direction: str, samples, allow_unlabeled: bool = False) -> list[np.ndarray]:
    """Apply the direction's generator to each sample; byte images out,
    order preserved."""
    bundle = _resolve(checkpoint)
    _, gen, _ = _direction_parts(bundle, direction)
    num_classes = bundle.config.num_classes
    return [
        _translate_one(gen, s, num_classes, bundle.config.precision, allow_unlabeled)
        for s in samples
    ]


def write_translations(out_dir: str, direction: str, ids, images) -> list[str]:
    """Write translated images to <out>/fake_<direction>/<id>.png."""
    dest = os.path.join(out_dir, f"fake_{direction}")
    try:
        os.makedirs(dest, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {dest}: {exc}") from exc
    paths = []
    for sample_id, img in zip(ids, images):
        path = os.path.join(dest, f"{sample_id}.png")
        data.save_image(img, path)
        paths.append(path)
    return paths


def semantic_consistency(checkpoint, dataset: data.Dataset, direction: str) -> MetricsReport:
    """Per-class Dice between source masks and segmentor predictions on the
    translated images, pooled over the whole source domain."""
    bundle = _resolve(checkpoint)
    source_domain, gen, seg = _direction_parts(bundle, direction)
    if dataset.count(source_domain) == 0:
        raise DataError(f"dataset has no {source_domain} samples to evaluate")
    if dataset.manifest.classes != bundle.config.num_classes:
        raise DataError(
            f"dataset classes {dataset.manifest.classes} != checkpoint classes "
            f"{bundle.config.num_classes}"
        )
    C = bundle.config.num_classes
    inter = np.zeros(C, dtype=np.int64)
    n_pred = np.zeros(C, dtype=np.int64)
    n_true = np.zeros(C, dtype=np.int64)
    n_samples = 0
    with torch.no_grad():
        for sample in dataset.samples(source_domain):
            tensors = trainer.sample_to_tensors(sample, C, bundle.config.precision)
            fake = networks.generator_forward(gen, tensors["image"], tensors["onehot"])
            pred_mask = networks.segmentor_forward(seg, fake)[0].argmax(dim=0).numpy()
            a, b, c = losses.hard_dice_counts(pred_mask, sample.mask, C)
            inter += a
            n_pred += b
            n_true += c
            n_samples += 1
    per_class = losses.hard_dice_from_counts(inter, n_pred, n_true)
    return MetricsReport(
        per_class_dice=[float(x) for x in per_class],
        mean_foreground_dice=float(per_class[1:].mean()),
        n_samples=n_samples,
        checkpoint_hash=bundle.content_hash,
        config=bundle.config.to_dict(),
    )


def export_report(report: MetricsReport, path: str) -> None:
    """JSON report with a fixed key set and stable key order."""
    payload = {
        "per_class_dice": report.per_class_dice,
        "mean_foreground_dice": report.mean_foreground_dice,
        "n_samples": report.n_samples,
        "checkpoint_hash": report.checkpoint_hash,
        "config": report.config,
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(payload, indent=2) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write report {path}: {exc}") from exc


def load_report(path: str) -> MetricsReport:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"missing report file {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable report {path}: {exc}") from exc
    if set(d.keys()) != set(REPORT_KEYS):
        raise DataError(f"report keys {sorted(d)} != expected {sorted(REPORT_KEYS)}")
    return MetricsReport(**d)
