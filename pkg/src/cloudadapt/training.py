"""Adapter-only optimization: loss, AdamW, warmup + poly schedule, and the train loop."""

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, NumericAbort
from .metrics import ConfusionMatrix, summarize


def lr_at(t, cfg):
    """Learning rate for iteration ``t``: linear warmup, then polynomial decay to ``eta_min``."""
    if not 0 <= t <= cfg.max_iters:
        raise ContractError(f"lr_at: iteration {t} outside [0, {cfg.max_iters}]")
    w = cfg.warmup_iters
    if t < w:
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * (t / w)
    progress = (t - w) / (cfg.max_iters - w)
    return cfg.eta_min + (cfg.base_lr - cfg.eta_min) * (1.0 - progress) ** cfg.poly_power


def cross_entropy_loss(logits, target, ignore=None):
    """Mean per-pixel ``-log softmax(logits)[target]`` over scored pixels."""
    if logits.ndim != 4:
        raise DataError(f"logits must be N,C,H,W, got {logits.shape}")
    target = np.asarray(target)
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise DataError(f"target shape {target.shape} does not match logits {logits.shape}")
    scored = np.ones(target.shape, bool) if ignore is None else target != ignore
    count = int(scored.sum())
    if count == 0:
        raise DataError("cross_entropy_loss: no scored pixels")
    tgt = np.where(scored, target, 0).astype(np.int64)
    if tgt.min() < 0 or tgt.max() >= c:
        raise DataError(f"target labels must lie in [0, {c}) or equal the ignore label")

    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, tgt[:, None], axis=1)[:, 0]
    value = -(picked * scored).sum(dtype=np.float64) / count
    weight = (scored / count).astype(x.dtype)[:, None]

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, tgt[:, None], np.take_along_axis(grad, tgt[:, None], axis=1) - 1, axis=1)
        return (grad * weight * g,)

    return T.custom_op(np.asarray(value, dtype=x.dtype), (logits,), bw)


def decays(name, p):
    """Weight decay applies to matrix-shaped weights only."""
    return p.ndim >= 2


def new_adam_state(params):
    return {
        "step": 0,
        "m": {n: np.zeros_like(p.data) for n, p in params},
        "v": {n: np.zeros_like(p.data) for n, p in params},
    }


def adamw_step(params, grads, state, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place AdamW update over ``params`` (a list of ``(name, Parameter)``).

    Decay is decoupled (``p -= lr * wd * p``) and skipped for vectors. ``grads``
    maps name to gradient array.
    """
    for name, p in params:
        if grads.get(name) is None:
            raise ContractError(f"adamw_step: parameter {name!r} has no gradient")
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params:
        g = grads[name].astype(p.data.dtype, copy=False)
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        data = p.data
        if wd and decays(name, p):
            data = data - (lr * wd) * data
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (data - lr * update).astype(p.data.dtype, copy=False)


class AdamW:
    """Stateful wrapper around :func:`adamw_step` for a model's trainable parameters."""

    def __init__(self, named_params, weight_decay=0.05, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = new_adam_state(self.params)

    def step(self, lr):
        grads = {n: p.grad for n, p in self.params}
        adamw_step(self.params, grads, self.state, lr, self.weight_decay, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


LOG_FIELDS = ("iter", "lr", "loss", "val_miou")


@dataclass
class TrainLog:
    """Rows of ``(iter, lr, loss, val_miou)``; missing entries are None."""

    rows: list = field(default_factory=list)

    def append(self, it, lr, loss=None, val_miou=None):
        self.rows.append((int(it), float(lr), None if loss is None else float(loss),
                          None if val_miou is None else float(val_miou)))

    def __len__(self):
        return len(self.rows)

    def validations(self):
        return [(r[0], r[3]) for r in self.rows if r[3] is not None]

    def losses(self):
        return [(r[0], r[2]) for r in self.rows if r[2] is not None]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in self.rows:
            w.writerow(["" if v is None else repr(v) for v in row])
        return buf.getvalue()

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text):
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != LOG_FIELDS:
            raise DataError(f"train log header must be {','.join(LOG_FIELDS)}, got {header}")
        log = cls()
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataError(f"train log line {lineno}: expected 4 fields, got {len(row)}")
            try:
                it = int(row[0])
                vals = [None if s == "" else float(s) for s in row[1:]]
            except ValueError as exc:
                raise DataError(f"train log line {lineno}: {exc}") from None
            log.rows.append((it, vals[0], vals[1], vals[2]))
        return log

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls.from_csv(fh.read())


def eval_threads():
    raw = os.environ.get("ADAPTER_SEG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def confusion(model, images, masks, num_classes, batch_size=4, ignore=None, threads=None):
    """Confusion matrix of ``model.predict`` over a dataset, optionally across threads."""
    if len(images) == 0:
        raise DataError("cannot evaluate an empty dataset")
    threads = eval_threads() if threads is None else max(1, int(threads))
    starts = list(range(0, len(images), batch_size))

    def run(s):
        cm = ConfusionMatrix(num_classes, ignore)
        pred = model.predict(images[s:s + batch_size])
        return cm.accumulate(pred, masks[s:s + batch_size])

    if threads == 1:
        parts = [run(s) for s in starts]
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    total = ConfusionMatrix(num_classes, ignore)
    for cm in parts:
        total = total.merge(cm)
    return total


def evaluate(model, dataset, num_classes, batch_size=4, ignore=None, threads=None):
    return summarize(confusion(model, dataset.images, dataset.masks, num_classes, batch_size, ignore, threads))


class BatchStream:
    """Epoch-wise shuffled sample indices from one seeded generator."""

    def __init__(self, n, batch_size, seed):
        if n < 1:
            raise DataError("training set is empty")
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 4])
        self.order = np.zeros(0, np.int64)
        self.cursor = 0

    def next(self):
        out = []
        while len(out) < self.batch_size:
            if self.cursor >= len(self.order):
                self.order = self.rng.permutation(self.n)
                self.cursor = 0
            take = min(self.batch_size - len(out), len(self.order) - self.cursor)
            out.extend(self.order[self.cursor:self.cursor + take].tolist())
            self.cursor += take
        return np.asarray(out, np.int64)

    def get_state(self):
        return {"bit_generator": self.rng.bit_generator.state, "order": self.order.tolist(), "cursor": self.cursor}

    def set_state(self, state):
        self.rng.bit_generator.state = state["bit_generator"]
        self.order = np.asarray(state["order"], np.int64)
        self.cursor = int(state["cursor"])


@dataclass
class TrainState:
    """Everything a resumed run needs besides the model parameters."""

    iteration: int
    optimizer: AdamW
    stream: BatchStream
    log: TrainLog
    best_miou: float = -math.inf


def train(model, train_set, val_set, cfg, out_dir=None, exp_cfg=None, resume=None, stop_at=None, progress=None):
    """Train the model's trainable parameters; returns ``(TrainLog, TrainState)``.

    Validation runs at iteration 0 (if any training happens), every
    ``val_interval`` iterations and at ``max_iters``. With ``out_dir`` the log,
    ``best.ckpt`` and ``final.ckpt`` are written there. ``stop_at`` halts early
    (writing ``final.ckpt`` at that point) so a later ``resume`` can continue.
    """
    from .checkpoint import save_checkpoint

    cfg.validate()
    num_classes = model.cfg.num_classes
    if resume is None:
        state = TrainState(0, AdamW(model.trainable_named(), cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps),
                           BatchStream(len(train_set), cfg.batch_size, cfg.seed), TrainLog())
    else:
        state = resume
    end = cfg.max_iters if stop_at is None else min(stop_at, cfg.max_iters)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def save(name):
        if out_dir:
            save_checkpoint(os.path.join(out_dir, name), model, state, exp_cfg)

    def validate(it):
        if val_set is None or len(val_set) == 0:
            return None
        miou = evaluate(model, val_set, num_classes, cfg.batch_size, cfg.ignore_index)["mIoU"]
        state.log.append(it, lr_at(it, cfg), None, miou)
        if miou > state.best_miou:
            state.best_miou = miou
            save("best.ckpt")

    if state.iteration == 0 and cfg.max_iters > 0 and not state.log.rows:
        validate(0)

    losses = [r[2] for r in state.log.rows[-8:] if r[2] is not None]
    while state.iteration < end:
        t = state.iteration
        lr = lr_at(t, cfg)
        idx = state.stream.next()
        state.optimizer.zero_grad()
        logits = model.forward(T.Tensor(train_set.images[idx]))
        loss = cross_entropy_loss(logits, train_set.masks[idx], cfg.ignore_index)
        value = float(loss.data)
        losses = (losses + [value])[-8:]
        if not math.isfinite(value):
            raise NumericAbort(f"non-finite loss at iteration {t} (lr={lr:.3e}); recent losses: {losses}")
        loss.backward()
        state.optimizer.step(lr)
        state.iteration = t + 1
        state.log.append(t + 1, lr, value)
        if progress is not None:
            progress(t + 1, lr, value)
        if state.iteration % cfg.val_interval == 0 or state.iteration == cfg.max_iters:
            validate(state.iteration)

    if out_dir:
        state.log.write(os.path.join(out_dir, "train_log.csv"))
    save("final.ckpt")
    return state.log, state
