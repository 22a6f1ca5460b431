"""Training loop, optimizer, augmentation and two-phase distillation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import numerics as nx
from .groundtruth import THETA_S, WordAnnotation, load_annotations, render_ground_truth
from .imageio import read_image, resize_bilinear
from .losses import LAMBDA, TEMPERATURE, combined_loss, distill_loss, distill_targets
from .netgraph import INPUT_MULTIPLE, NetworkSpec, Widths, build_network, forward, preprocess, save_checkpoint

log = logging.getLogger(__name__)

__all__ = [
    "Sample",
    "AugmentConfig",
    "TrainConfig",
    "TrainReport",
    "Adam",
    "augment",
    "resize_pad",
    "load_dataset",
    "split_dataset",
    "make_batch",
    "evaluate_loss",
    "train",
    "distill_train",
]


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    words: list[WordAnnotation]
    name: str = ""


@dataclass
class AugmentConfig:
    rotate: float = 0.0  # max |angle| in degrees; 0 disables
    blur: float = 0.0  # max Gaussian sigma; 0 disables
    saturation: float = 0.0  # factor drawn from [1 - s, 1 + s]
    gray: float = 0.0  # probability of converting to gray
    brightness: float = 0.0  # factor drawn from [1 - b, 1 + b]

    @classmethod
    def default(cls) -> "AugmentConfig":
        return cls(rotate=10.0, blur=0.8, saturation=0.4, gray=0.15, brightness=0.25)


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 4
    lr: float = 0.01
    halve_every: int = 1  # lr(e) = lr / 2 ** (e // halve_every)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    literal_momentum: bool = False  # use beta1 = 0.01
    patience: int = 2
    seed: int = 0
    input_size: int = 128
    lam: float = LAMBDA
    theta_s: float = THETA_S
    temperature: float = TEMPERATURE
    val_fraction: float = 0.1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    restore_best: bool = True
    clip_norm: float | None = None  # global gradient-norm clip
    epoch_fraction: float = 1.0  # share of the shuffled training set visited per epoch
    weight_decay: float = 0.0  # decoupled decay on conv weights

    def lr_at(self, epoch: int) -> float:
        return self.lr / 2 ** (epoch // self.halve_every)

    @property
    def adam_beta1(self) -> float:
        return 0.01 if self.literal_momentum else self.beta1

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown training option(s): {sorted(unknown)}")
        if isinstance(d.get("augment"), dict):
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    checkpoint: str | None = None
    phases: dict[str, "TrainReport"] = field(default_factory=dict)
    wall_time: float = 0.0  # seconds; kept out of to_json so reports are reproducible

    def to_json(self) -> dict:
        d = {
            "epochs": self.epochs,
            "steps": self.steps,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "checkpoint": self.checkpoint,
        }
        if self.phases:
            d["phases"] = {k: v.to_json() for k, v in self.phases.items()}
        return d


class Adam:
    def __init__(self, params: Sequence[nx.Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        # decoupled decay shrinks conv weights only, never biases
        self.decay = [weight_decay if (p.name or "").endswith("weight") else 0.0 for p in self.params]
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v, wd in zip(self.params, grads, self.m, self.v, self.decay):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if wd:
                upd = upd + wd * p.data
            p.data -= (lr * upd).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# data


def load_dataset(path) -> list[Sample]:
    """Read a generated dataset directory (``manifest.json``) or a single annotation file."""
    path = Path(path)
    if path.is_dir():
        manifest = json.loads((path / "manifest.json").read_text())
        entries = [path / it["annotation"] for it in manifest["items"]]
    else:
        entries = [path]
    out = []
    for ann in entries:
        image, words = load_annotations(ann)
        out.append(Sample(read_image(ann.parent / image), words, ann.stem))
    return out


def split_dataset(samples: Sequence[Sample], fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    order = np.random.default_rng([seed, 7]).permutation(len(samples))
    n_val = int(round(fraction * len(samples)))
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [samples[i] for i in train], [samples[i] for i in val]


def resize_pad(img: np.ndarray, words: list[WordAnnotation], size: int) -> tuple[np.ndarray, list[WordAnnotation]]:
    """Aspect-preserving resize into a size x size canvas, padded bottom/right with zeros."""
    h, w = img.shape[:2]
    s = size / max(h, w)
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    out = np.zeros((size, size, 3), dtype=np.uint8)
    out[:nh, :nw] = img if (nh, nw) == (h, w) else resize_bilinear(img, nh, nw)
    sx, sy = nw / w, nh / h
    scale = np.array([sx, sy])
    return out, [wd.transformed(lambda q: q * scale) for wd in words]


def _rotate(img: np.ndarray, words: list[WordAnnotation], angle: float):
    h, w = img.shape[:2]
    t = math.radians(angle)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    c = np.array([w / 2.0, h / 2.0])
    # output pixel centre p maps back to rot^T (p - c) + c; scipy works in (row, col) index space
    inv_xy = rot.T
    m = inv_xy[::-1, ::-1]
    centre_rc = np.array([h / 2.0, w / 2.0]) - 0.5
    offset = centre_rc - m @ centre_rc
    out = np.stack(
        [ndimage.affine_transform(img[..., k].astype(np.float64), m, offset, order=1, mode="constant", cval=0.0) for k in range(3)],
        axis=-1,
    )
    img = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return img, [wd.transformed(lambda q: (q - c) @ rot.T + c) for wd in words]


def augment(img: np.ndarray, words: list[WordAnnotation], seed, cfg: AugmentConfig | None = None, size: int = 128):
    """Resize+pad to ``size`` then apply the enabled distortions.

    Geometric ops move the annotation quads with the pixels; photometric
    ops leave annotations untouched.
    """
    cfg = cfg or AugmentConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    img, words = resize_pad(img, words, size)
    if cfg.rotate:
        img, words = _rotate(img, words, float(rng.uniform(-cfg.rotate, cfg.rotate)))
    a = img.astype(np.float64)
    touched = False
    if cfg.blur:
        sigma = float(rng.uniform(0, cfg.blur))
        if sigma > 0.05:
            a = ndimage.gaussian_filter(a, (sigma, sigma, 0))
            touched = True
    if cfg.saturation:
        g = (0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2])[..., None]
        a = g + rng.uniform(1 - cfg.saturation, 1 + cfg.saturation) * (a - g)
        touched = True
    if cfg.brightness:
        a = a * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        touched = True
    if cfg.gray and rng.random() < cfg.gray:
        a = np.repeat((0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2])[..., None], 3, axis=-1)
        touched = True
    if touched:
        img = np.clip(np.rint(a), 0, 255).astype(np.uint8)
    return img, words


def make_batch(samples: Sequence[Sample], cfg: TrainConfig, rngs=None):
    """Images tensor plus region/affinity and one-hot script targets."""
    imgs, locs, scripts = [], [], []
    for k, s in enumerate(samples):
        if rngs is None:
            img, words = resize_pad(s.image, s.words, cfg.input_size)
        else:
            img, words = augment(s.image, s.words, rngs[k], cfg.augment, cfg.input_size)
        gt = render_ground_truth(words, cfg.input_size, cfg.input_size, cfg.theta_s)
        imgs.append(img)
        locs.append(np.stack([gt.region, gt.affinity]))
        scripts.append(gt.script)
    return preprocess(imgs), np.stack(locs), np.stack(scripts), imgs


def evaluate_loss(net: NetworkSpec, samples: Sequence[Sample], cfg: TrainConfig) -> dict[str, float]:
    """Mean loss parts over ``samples`` without augmentation."""
    sums = {"tl": 0.0, "sd": 0.0, "combined": 0.0}
    n = 0
    for i in range(0, len(samples), cfg.batch_size):
        chunk = samples[i : i + cfg.batch_size]
        x, loc, script, _ = make_batch(chunk, cfg)
        out = forward(net, x, "train")
        lv = combined_loss(out.loc, loc.astype(net.dtype), out.script, script.astype(net.dtype), cfg.lam)
        for k in sums:
            sums[k] += lv.parts[k] * len(chunk)
        n += len(chunk)
    return {k: v / max(n, 1) for k, v in sums.items()}


def _dump_diagnostics(path: Path | None, images, exc: Exception, step: dict) -> None:
    if path is None:
        return
    path.mkdir(parents=True, exist_ok=True)
    np.savez(path / "nan_batch.npz", images=np.stack(images))
    (path / "nan_report.json").write_text(json.dumps({"error": str(exc), **step}, indent=1, sort_keys=True) + "\n")


def _run(
    net: NetworkSpec,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    cfg: TrainConfig,
    loss_fn: Callable,
    checkpoint_dir: Path | None,
    metrics: Callable[[NetworkSpec], dict] | None,
    tag: str,
) -> TrainReport:
    t0 = time.perf_counter()
    params = net.parameters()
    opt = Adam(params, cfg.adam_beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    report = TrainReport()
    best, best_state, bad = math.inf, None, 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        order = order[: max(1, math.ceil(cfg.epoch_fraction * len(order)))]
        sums = {"tl": 0.0, "sd": 0.0, "combined": 0.0}
        for bstart in range(0, len(order), cfg.batch_size):
            idx = order[bstart : bstart + cfg.batch_size]
            rngs = [np.random.default_rng([cfg.seed, epoch, int(i)]) for i in idx]
            x, loc, script, imgs = make_batch([train_set[i] for i in idx], cfg, rngs)
            step = {"phase": tag, "epoch": epoch, "step": len(report.steps)}
            try:
                with nx.GradTape() as tape:
                    lv = loss_fn(net, x, loc.astype(net.dtype), script.astype(net.dtype))
                grads = tape.backward(lv.value, params)
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
                if not math.isfinite(norm):
                    raise nx.NumericError("non-finite gradient")
                if cfg.clip_norm and norm > cfg.clip_norm:
                    grads = [g * (cfg.clip_norm / norm) for g in grads]
            except nx.NumericError as exc:
                _dump_diagnostics(checkpoint_dir, imgs, exc, step)
                raise nx.NumericError(f"{tag} epoch {epoch} step {step['step']}: {exc}") from exc
            opt.step(grads, lr)
            report.steps.append({**step, "source": lv.source, **{k: round(v, 10) for k, v in lv.parts.items()}})
            for k in sums:
                sums[k] += lv.parts[k] * len(idx)
        entry = {"epoch": epoch, "lr": lr, "train": {k: v / len(order) for k, v in sums.items()}}
        if val_set:
            entry["val"] = evaluate_loss(net, val_set, cfg)
        if metrics is not None:
            entry["metrics"] = metrics(net)
        report.epochs.append(entry)
        if checkpoint_dir is not None:
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(net, checkpoint_dir / f"{tag}_epoch{epoch:03d}.tlcs")
        score = entry["val"]["combined"] if val_set else entry["train"]["combined"]
        log.info("%s epoch %d lr %.3g train %.5f val %.5f", tag, epoch, lr, entry["train"]["combined"], score)
        if score < best:
            best, bad, report.best_epoch = score, 0, epoch
            best_state = [p.data.copy() for p in params]
        else:
            bad += 1
            if bad >= cfg.patience:
                report.stopped_early = True
                break
    if cfg.restore_best and best_state is not None:
        for p, d in zip(params, best_state):
            p.data[...] = d
    if checkpoint_dir is not None:
        final = checkpoint_dir / f"{tag}_best.tlcs"
        save_checkpoint(net, final)
        report.checkpoint = str(final)
    report.wall_time = time.perf_counter() - t0
    return report


def _gt_loss(lam):
    def fn(net, x, loc, script):
        out = forward(net, x, "train")
        return combined_loss(out.loc, loc, out.script, script, lam)

    return fn


def train(
    net: NetworkSpec,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    val_set: Sequence[Sample] | None = None,
    checkpoint_dir=None,
    metrics: Callable[[NetworkSpec], dict] | None = None,
) -> TrainReport:
    """Fit ``net`` in place on ground-truth targets; returns the report.

    Without an explicit ``val_set`` a ``cfg.val_fraction`` split of
    ``dataset`` (fixed by ``cfg.seed``) is held out for early stopping.
    """
    if not dataset:
        raise ValueError("training set is empty")
    if cfg.input_size % INPUT_MULTIPLE:
        raise ValueError(f"input size {cfg.input_size} is not a multiple of {INPUT_MULTIPLE}")
    if not 0 < cfg.epoch_fraction <= 1:
        raise ValueError(f"epoch_fraction must lie in (0, 1], got {cfg.epoch_fraction}")
    if val_set is None:
        dataset, val_set = split_dataset(dataset, cfg.val_fraction, cfg.seed)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    return _run(net, dataset, val_set, cfg, _gt_loss(cfg.lam), ckpt, metrics, "train")


def distill_train(
    teacher: NetworkSpec,
    student: NetworkSpec | Widths | str,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    phase1_epochs: int | None = None,
    phase2_epochs: int | None = None,
    val_set: Sequence[Sample] | None = None,
    checkpoint_dir=None,
    metrics: Callable[[NetworkSpec], dict] | None = None,
) -> tuple[NetworkSpec, TrainReport]:
    """Phase 1 fits the student to the teacher's soft outputs, phase 2 fine-tunes on ground truth."""
    if not isinstance(student, NetworkSpec):
        student = build_network(student, seed=cfg.seed)
    if cfg.input_size % INPUT_MULTIPLE:
        raise ValueError(f"input size {cfg.input_size} is not a multiple of {INPUT_MULTIPLE}")
    probe = preprocess(np.zeros((cfg.input_size, cfg.input_size, 3), np.uint8))
    t_out, s_out = forward(teacher, probe), forward(student, probe)
    if t_out.script.shape != s_out.script.shape or t_out.loc.shape != s_out.loc.shape:
        raise ValueError(
            f"teacher outputs {t_out.script.shape}/{t_out.loc.shape} do not match student "
            f"{s_out.script.shape}/{s_out.loc.shape} at input size {cfg.input_size}"
        )
    if val_set is None:
        dataset, val_set = split_dataset(dataset, cfg.val_fraction, cfg.seed)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None

    def soft_loss(net, x, loc, script):
        t = forward(teacher, x, "train")
        targets = distill_targets(t.loc.data, t.script.data, cfg.temperature)
        out = forward(net, x, "train")
        return distill_loss(out.loc, out.script, targets, cfg.lam)

    c1 = dataclasses.replace(cfg, epochs=phase1_epochs if phase1_epochs is not None else cfg.epochs)
    c2 = dataclasses.replace(cfg, epochs=phase2_epochs if phase2_epochs is not None else cfg.epochs)
    t0 = time.perf_counter()
    # phase 1 has no ground-truth validation signal by design: it runs its full length
    r1 = _run(student, dataset, [], dataclasses.replace(c1, patience=max(c1.patience, c1.epochs + 1)), soft_loss, ckpt, None, "distill")
    r2 = _run(student, dataset, val_set, c2, _gt_loss(cfg.lam), ckpt, metrics, "finetune")
    report = TrainReport(
        epochs=r2.epochs, steps=r1.steps + r2.steps, best_epoch=r2.best_epoch,
        stopped_early=r2.stopped_early, checkpoint=r2.checkpoint, phases={"distill": r1, "finetune": r2},
    )
    report.wall_time = time.perf_counter() - t0
    return student, report
