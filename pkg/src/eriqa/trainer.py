"""Two-stage training: distortion classification, then quality regression."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .metrics import DegenerateCorrelation, ScoreTable, srocc
from .model import TinyBackbone, images_to_batch
from .shapes import shape_dataset
from .tensor import Tape

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_period: int = 10
    seed: int = 0
    loss_report: str = "sum"  # logged loss; updates always use the batch mean
    patch_size: int = 224
    flip: bool = True
    backbone_trainable: bool = True
    target_scale: float = 100.0  # pseudo-MOS units per model output unit
    eval_batch: int = 64

    @classmethod
    def defaults(cls, stage):
        if stage == "pretrain":
            return cls()
        if stage == "finetune":
            return cls(stage="finetune", epochs=100, batch_size=8, lr=1e-5, lr_decay=1.0, lr_period=1)
        raise ValueError(f"unknown stage {stage!r}")

    @classmethod
    def from_dict(cls, d):
        base = cls.defaults(d.get("stage", "pretrain"))
        return replace(base, **d)

    def lr_at(self, epoch):
        return self.lr * self.lr_decay ** (epoch // self.lr_period)


# ---------------------------------------------------------------------------
# Splits and pairing


@dataclass
class SplitPlan:
    repeats: list  # [(train ids, test ids), ...]
    ratio: float = 0.8
    n_repeats: int = 10
    seed: int = 0

    def to_json(self):
        return json.dumps({"ratio": self.ratio, "n_repeats": self.n_repeats, "seed": self.seed,
                           "repeats": [{"train": list(tr), "test": list(te)} for tr, te in self.repeats]},
                          indent=1) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        reps = [(tuple(r["train"]), tuple(r["test"])) for r in d["repeats"]]
        return cls(reps, d["ratio"], d["n_repeats"], d["seed"])


def make_splits(manifest, ratio=0.8, n_repeats=10, seed=0):
    """Partition pristine ids (not samples) into train/test, ``n_repeats`` times."""
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    ids = manifest.pristine_ids if hasattr(manifest, "pristine_ids") else sorted(set(manifest))
    if len(ids) < 5:
        raise ValueError(f"need at least 5 pristine ids, got {len(ids)}")
    rng = np.random.default_rng(seed)
    n_train = min(len(ids) - 1, max(1, int(round(ratio * len(ids)))))
    reps = []
    for _ in range(n_repeats):
        perm = rng.permutation(len(ids))
        train = tuple(sorted(ids[i] for i in perm[:n_train]))
        test = tuple(sorted(ids[i] for i in perm[n_train:]))
        reps.append((train, test))
    return SplitPlan(reps, ratio, n_repeats, seed)


def pair_external_reference(pristine_id, pool, rng):
    """Uniform draw of a pristine id from ``pool`` other than ``pristine_id``."""
    choices = [p for p in pool if p != pristine_id]
    if not choices:
        raise ValueError(f"reference pool {sorted(pool)} offers nothing besides the sample's own pristine {pristine_id}")
    return choices[int(rng.integers(len(choices)))]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update, in place.  Rejects the whole step on a non-finite gradient."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state are misaligned")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient("non-finite gradient; step rejected")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Data handling


class ImageBank:
    """All corpus images decoded once, keyed by manifest path."""

    def __init__(self, manifest):
        self.manifest = manifest
        self.images = {s.path: manifest.load(s) for s in manifest.samples}
        self.pristine = {s.pristine_id: self.images[s.path] for s in manifest.samples if s.level == 0}

    def samples(self, ids):
        ids = set(ids)
        return [s for s in self.manifest.samples if s.pristine_id in ids]


def _crop_flip(img, patch, rng, flip):
    h, w, _ = img.shape
    ph, pw = min(patch, h), min(patch, w)
    y = int(rng.integers(h - ph + 1))
    x = int(rng.integers(w - pw + 1))
    out = img[y:y + ph, x:x + pw]
    if flip and rng.random() < 0.5:
        out = out[:, ::-1]
    return out


def _batches(n, size):
    return [(i, min(n, i + size)) for i in range(0, n, size)]


@dataclass
class TrainResult:
    best_state: list  # parameter arrays at the best held-out metric
    best_metric: float
    history: list = field(default_factory=list)  # dicts: epoch, lr, loss, metric, train_acc
    pairs: list = field(default_factory=list)  # (sample pristine id, reference pristine id)

    def history_csv(self):
        lines = ["epoch,lr,loss,metric"]
        for h in self.history:
            lines.append(f"{h['epoch']},{h['lr']:.6f},{h['loss']:.6f},{h['metric']:.6f}")
        return "\n".join(lines) + "\n"


def _snapshot(params):
    return [p.data.copy() for p in params]


def restore(params, state):
    for p, arr in zip(params, state):
        p.data = arr.copy()


def eval_references(samples, pool, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    return [pair_external_reference(s.pristine_id, pool, rng) for s in samples]


def _stack_pair(bank, samples, refs, dtype):
    d = images_to_batch([bank.images[s.path] for s in samples], dtype)
    r = images_to_batch([bank.pristine[p] for p in refs], dtype)
    return d, r


def predict_logits(model, bank, samples, pool, seed=0, batch=64):
    refs = eval_references(samples, pool, seed)
    out = []
    for a, b in _batches(len(samples), batch):
        d, r = _stack_pair(bank, samples[a:b], refs[a:b], model.dtype)
        out.append(model.forward_pretrain(d, r).data)
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def predict_scores(model, bank, samples, pool, seed=0, batch=64, scale=100.0):
    refs = eval_references(samples, pool, seed)
    out = []
    for a, b in _batches(len(samples), batch):
        d, r = _stack_pair(bank, samples[a:b], refs[a:b], model.dtype)
        out.append(model.forward_score(d, r).data.astype(np.float64) * scale)
    return np.concatenate(out) if out else np.zeros(0)


def score_table(model, bank, samples, pool, seed=0, scale=100.0, batch=64):
    yhat = predict_scores(model, bank, samples, pool, seed, batch, scale)
    table = ScoreTable()
    for s, p in zip(samples, yhat):
        table.append(s.path, s.pristine_id, s.kind, s.level, s.pseudo_mos, float(p))
    return table


def _run(model, bank, split, cfg, params, step_loss, evaluate, on_epoch=None):
    train_ids, test_ids = split
    for side, ids in (("train", train_ids), ("test", test_ids)):
        if len(set(ids)) < 2:
            raise ValueError(f"{side} side holds {len(set(ids))} pristine id(s); reference pairing needs two")
    train = bank.samples(train_ids)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
    state = AdamState.for_params(params)
    best_state, best = _snapshot(params), -math.inf
    result = TrainResult(best_state, best)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(train))
        refs = [pair_external_reference(train[i].pristine_id, train_ids, rng) for i in order]
        result.pairs.extend((train[i].pristine_id, r) for i, r in zip(order, refs))
        losses, extra = [], []
        for a, b in _batches(len(order), cfg.batch_size):
            batch = [train[i] for i in order[a:b]]
            d_imgs = [_crop_flip(bank.images[s.path], cfg.patch_size, rng, cfg.flip) for s in batch]
            r_imgs = [_crop_flip(bank.pristine[r], cfg.patch_size, rng, cfg.flip) for r in refs[a:b]]
            d = images_to_batch(d_imgs, model.dtype)
            r = images_to_batch(r_imgs, model.dtype)
            for p in params:
                p.zero_grad()
            with Tape() as tape:
                loss, report, info = step_loss(d, r, batch)
            tape.backward(loss)
            adam_step(params, [p.grad for p in params], state, lr)
            losses.append(report)
            extra.append(info)
        metric = evaluate()
        entry = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)), "metric": metric}
        if extra and extra[0] is not None:
            entry["train_acc"] = float(np.sum(extra) / len(order))
        result.history.append(entry)
        log.info("epoch %d lr %.2e loss %.4f metric %.4f", epoch, lr, entry["loss"], metric)
        # ties go to the later, longer-trained state
        if metric >= best:
            best = metric
            result.best_state, result.best_metric = _snapshot(params), metric
        if on_epoch is not None:
            on_epoch(entry)
    if cfg.epochs == 0:
        result.best_metric = evaluate()
    return result


def pretrain(model, bank, split, cfg, on_epoch=None):
    """Distortion-classification pre-training; returns a :class:`TrainResult`.

    The logged loss is the batch-sum cross-entropy (or its mean when
    ``cfg.loss_report == 'mean'``); the gradient step always uses the mean.
    The best state by held-out accuracy is restored into ``model``.
    """
    labels = [s.class_label for s in bank.manifest.samples]
    if labels and max(labels) >= model.n_classes:
        raise ValueError(f"class label {max(labels)} >= model class count {model.n_classes}")
    params = model.parameters(include_backbone=False)
    test = bank.samples(split[1])

    def step_loss(d, r, batch):
        y = np.array([s.class_label for s in batch])
        logits = model.forward_pretrain(d, r)
        loss = T.cross_entropy(logits, y, reduction="mean")
        n = len(batch)
        report = loss.item() * (n if cfg.loss_report == "sum" else 1)
        correct = int((logits.data.argmax(axis=1) == y).sum())
        return loss, report, correct

    def evaluate():
        if not test:
            return float("nan")
        logits = predict_logits(model, bank, test, split[1], cfg.seed, cfg.eval_batch)
        return float(np.mean(logits.argmax(axis=1) == np.array([s.class_label for s in test])))

    result = _run(model, bank, split, cfg, params, step_loss, evaluate, on_epoch)
    restore(params, result.best_state)
    return result


def finetune(model, bank, split, cfg, on_epoch=None):
    """Quality regression against pseudo-MOS (scaled by ``cfg.target_scale``).

    The held-out metric is SROCC over the distorted test samples; the best
    state is restored into ``model``.
    """
    if model.backbone is None:
        raise ValueError("fine-tuning needs a semantic backbone attached")
    for s in bank.manifest.samples:
        if not math.isfinite(s.pseudo_mos):
            raise ValueError(f"sample {s.path} has no pseudo_mos")
    params = model.parameters(include_backbone=cfg.backbone_trainable)
    test = [s for s in bank.samples(split[1]) if s.level > 0]
    scale = cfg.target_scale

    def step_loss(d, r, batch):
        y = np.array([s.pseudo_mos / scale for s in batch])
        loss = T.mse(model.forward_score(d, r), y)
        return loss, loss.item(), None

    def evaluate():
        if len(test) < 2:
            return float("nan")
        yhat = predict_scores(model, bank, test, split[1], cfg.seed, cfg.eval_batch, scale)
        try:
            return srocc([s.pseudo_mos for s in test], yhat)
        except DegenerateCorrelation:
            return 0.0

    result = _run(model, bank, split, cfg, params, step_loss, evaluate, on_epoch)
    restore(params, result.best_state)
    return result


def batch_sum_loss(model, d, r, labels):
    """Cross-entropy summed over the mini-batch, as logged during pre-training."""
    return T.cross_entropy(model.forward_pretrain(d, r), labels, reduction="sum").item()


# ---------------------------------------------------------------------------
# Semantic backbone


def pretrain_backbone(seed=0, n_train=2000, n_test=500, epochs=4, batch_size=32, lr=2e-3, size=64,
                      dtype=np.float32):
    """Train the tiny backbone on the procedural shape task; returns (backbone, test accuracy)."""
    bb = TinyBackbone.init(np.random.default_rng(np.random.SeedSequence([seed, 0xBB])), dtype)
    xs, ys = shape_dataset(n_train, seed * 2 + 1, size)
    xt, yt = shape_dataset(n_test, seed * 2 + 2, size)
    params = bb.params()
    params = [p for _, p in params]
    state = AdamState.for_params(params)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n_train)
        for a, b in _batches(n_train, batch_size):
            idx = order[a:b]
            for p in params:
                p.zero_grad()
            with Tape() as tape:
                loss = T.cross_entropy(bb.classify(images_to_batch(list(xs[idx]), dtype)), ys[idx], "mean")
            tape.backward(loss)
            adam_step(params, [p.grad for p in params], state, lr)
    correct = 0
    for a, b in _batches(n_test, 100):
        logits = bb.classify(images_to_batch(list(xt[a:b]), dtype)).data
        correct += int((logits.argmax(axis=1) == yt[a:b]).sum())
    return bb, correct / n_test

