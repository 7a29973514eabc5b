"""Training, fine-tuning, augmentation, and evaluation."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import ConfusionMatrix, compute_report
from .model import CheckpointIncompatibleError, init_finetune


class OptimizerError(Exception):
    pass


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {}  # name -> (m, v)

    def step(self, named_params):
        """Bias-corrected update of every trainable parameter."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in named_params:
            if not p.trainable:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise OptimizerError(f"non-finite gradient for {name!r}")
            if name not in self.state:
                self.state[name] = (np.zeros_like(p.data),
                                    np.zeros_like(p.data))
            m, v = self.state[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    crop_ratio: float = 0.7
    resolution: tuple = (64, 64)  # (H, W), divisible by 16

    def __post_init__(self):
        for p in (self.hflip_prob, self.vflip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("flip probabilities must lie in [0,1]")
        if not 0.0 < self.crop_ratio <= 1.0:
            raise ValueError("crop_ratio must lie in (0,1]")


def _resize(image, mask, resolution):
    h, w = resolution
    if image.shape[:2] != (h, w):
        image = np.asarray(Image.fromarray(image).resize((w, h),
                                                         Image.BILINEAR))
    if mask.shape != (h, w):
        mask = np.asarray(Image.fromarray(mask).resize((w, h),
                                                       Image.NEAREST))
    return image, mask


def augment(image, mask, rng, cfg):
    """hflip -> vflip -> random crop -> resize back; same geometry for both."""
    if image.shape[:2] != mask.shape:
        raise ValueError("image/mask size mismatch")
    if rng.random() < cfg.hflip_prob:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if rng.random() < cfg.vflip_prob:
        image, mask = image[::-1], mask[::-1]
    h, w = mask.shape
    ch = max(1, round(h * cfg.crop_ratio))
    cw = max(1, round(w * cfg.crop_ratio))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    image = np.ascontiguousarray(image[y0:y0 + ch, x0:x0 + cw])
    mask = np.ascontiguousarray(mask[y0:y0 + ch, x0:x0 + cw])
    return _resize(image, mask, cfg.resolution)


class DocDataset:
    """Directory of img_%06d.png / mask_%06d.png pairs."""

    def __init__(self, root):
        if not os.path.isdir(root):
            raise FileNotFoundError(f"dataset directory {root!r} not found")
        self.root = root
        self.indices = sorted(
            int(f[4:10]) for f in os.listdir(root)
            if f.startswith("img_") and f.endswith(".png"))

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        idx = self.indices[i]
        img = np.asarray(Image.open(
            os.path.join(self.root, f"img_{idx:06d}.png")).convert("RGB"))
        mask = np.asarray(Image.open(
            os.path.join(self.root, f"mask_{idx:06d}.png")))
        return img, mask


def _to_batch(images, masks):
    x = np.stack(images).astype(np.float64).transpose(0, 3, 1, 2) / 255.0
    y = np.stack(masks).astype(np.int64)
    return Tensor(x), y


def write_log(rows, path, fields=("step", "loss", "acc")):
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(fields))
        wr.writeheader()
        for row in rows:
            wr.writerow({k: row[k] for k in fields})


def _run_batch(model, optimizer, images, masks):
    x, y = _to_batch(images, masks)
    model.zero_grad()
    with Tape() as tape:
        logits = model(x)
        loss = ad.cross_entropy_loss(logits, y)
        tape.backward(loss)
    optimizer.step(list(model.named_parameters()))
    acc = float((logits.data.argmax(axis=1) == y).mean())
    return loss.item(), acc


def train(model, dataset_dir, epochs, batch_size=8, lr=1e-3, seed=0,
          augment_cfg=None, use_augment=True, log_path=None, optimizer=None):
    """Epoch-based training; deterministic given the seed.

    Pass the returned optimizer back in to continue a run without
    resetting the Adam moments.
    """
    ds = DocDataset(dataset_dir)
    if len(ds) == 0:
        raise ValueError(f"dataset {dataset_dir!r} is empty")
    h, w = (augment_cfg.resolution if augment_cfg
            else ds[0][1].shape)
    if h % 16 or w % 16:
        raise ValueError(f"train resolution {h}x{w} must be divisible by 16")
    if augment_cfg is None:
        augment_cfg = AugmentConfig(resolution=(h, w))
    rng = np.random.default_rng(seed)
    if optimizer is None:
        optimizer = Adam(lr=lr)
    model.train(True)
    rows = []
    step = 0
    for epoch in range(epochs):
        perm = rng.permutation(len(ds))
        for start in range(0, len(ds), batch_size):
            chunk = perm[start:start + batch_size]
            images, masks = [], []
            for i in chunk:
                img, mask = ds[int(i)]
                if use_augment:
                    img, mask = augment(img, mask, rng, augment_cfg)
                else:
                    img, mask = _resize(img, mask, augment_cfg.resolution)
                images.append(img)
                masks.append(mask)
            loss, acc = _run_batch(model, optimizer, images, masks)
            step += 1
            rows.append({"step": step, "epoch": epoch, "loss": loss,
                         "acc": acc})
    if log_path:
        write_log(rows, log_path)
    return optimizer, rows


def _step_loop(model, ds, steps, batch_size, lr, rng, augment_cfg,
               use_augment, collect_select=False):
    optimizer = Adam(lr=lr)
    model.train(True)
    rows = []
    for step in range(1, steps + 1):
        chunk = rng.choice(len(ds), size=min(batch_size, len(ds)),
                           replace=False)
        images, masks = [], []
        for i in chunk:
            img, mask = ds[int(i)]
            if use_augment:
                img, mask = augment(img, mask, rng, augment_cfg)
            else:
                img, mask = _resize(img, mask, augment_cfg.resolution)
            images.append(img)
            masks.append(mask)
        loss, acc = _run_batch(model, optimizer, images, masks)
        row = {"step": step, "loss": loss, "acc": acc}
        if collect_select:
            row.update({f"select_t_{k}": v
                        for k, v in model.mean_select_t().items()})
        rows.append(row)
    return optimizer, rows


def finetune_with_dsm(pretrained_path, dataset_dir, steps, batch_size=8,
                      lr=1e-4, seed=0, use_augment=True, log_path=None):
    """Arm the dynamic-select mechanism on a pretrained model and train it.

    Only the trainable paths, selectors, neck, decoder, and classifier see
    optimizer updates; the frozen paths stay bit-identical.
    """
    pretrained, _ = load_checkpoint(pretrained_path)
    if pretrained.config.dsm_enabled:
        raise CheckpointIncompatibleError(
            "checkpoint was saved from a dsm_enabled=True model; "
            "fine-tuning expects a single-path pretrained checkpoint")
    model = init_finetune(pretrained, seed=seed)
    ds = DocDataset(dataset_dir)
    if len(ds) == 0:
        raise ValueError(f"dataset {dataset_dir!r} is empty")
    h, w = ds[0][1].shape
    rng = np.random.default_rng(seed)
    acfg = AugmentConfig(resolution=(h, w))
    optimizer, rows = _step_loop(model, ds, steps, batch_size, lr, rng, acfg,
                                 use_augment, collect_select=True)
    if log_path and rows:
        write_log(rows, log_path, fields=list(rows[0].keys()))
    return model, optimizer, rows


def finetune_plain(pretrained_path, dataset_dir, steps, batch_size=8,
                   lr=1e-4, seed=0, use_augment=True, log_path=None):
    """Baseline fine-tune: same protocol, every parameter trainable."""
    model, _ = load_checkpoint(pretrained_path)
    ds = DocDataset(dataset_dir)
    if len(ds) == 0:
        raise ValueError(f"dataset {dataset_dir!r} is empty")
    h, w = ds[0][1].shape
    rng = np.random.default_rng(seed)
    acfg = AugmentConfig(resolution=(h, w))
    optimizer, rows = _step_loop(model, ds, steps, batch_size, lr, rng, acfg,
                                 use_augment)
    if log_path and rows:
        write_log(rows, log_path)
    return model, optimizer, rows


def predict_mask(model, image):
    """Argmax class map for one uint8 HxWx3 image of any size."""
    h, w = image.shape[:2]
    ph = (16 - h % 16) % 16
    pw = (16 - w % 16) % 16
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    x = Tensor(padded.astype(np.float64).transpose(2, 0, 1)[None] / 255.0)
    model.train(False)
    logits = model(x)
    return logits.data[0, :, :h, :w].argmax(axis=0).astype(np.uint8)


def evaluate(model, dataset_dir, num_classes=4, class_remap=None):
    """Streamed per-pixel evaluation; padding never enters the scoring."""
    ds = DocDataset(dataset_dir)
    if len(ds) == 0:
        raise ValueError(f"dataset {dataset_dir!r} is empty")
    cm = ConfusionMatrix(num_classes)
    for i in range(len(ds)):
        img, mask = ds[i]
        pred = predict_mask(model, img)
        truth = mask.astype(np.int64)
        pred = pred.astype(np.int64)
        if class_remap is not None:
            remap = np.asarray(class_remap, dtype=np.int64)
            truth = remap[truth]
            pred = remap[pred]
        cm.update(truth, pred)
    return compute_report(cm), cm


# folds text into background for 3-class benchmarks
REMAP_3CLASS = (0, 1, 0, 3)
