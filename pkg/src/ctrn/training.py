"""Adam, reduce-on-plateau scheduling and the training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .cooccurrence import CooccurrenceModel
from .metrics import MetricError, per_frame_map
from .model import CTRN

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[tn.Parameter], state: OptimizerState) -> None:
    """One bias-corrected Adam update of ``params`` in place."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        p.data = (p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


@dataclass
class SchedulerState:
    """Multiply the learning rate by ``factor`` after ``patience`` flat epochs."""
    factor: float = 0.3
    patience: int = 10
    threshold: float = 1e-8
    best: float = float("inf")
    bad_epochs: int = 0


def plateau_schedule(sched: SchedulerState, opt: OptimizerState, epoch_loss: float) -> bool:
    """Update ``sched`` with this epoch's loss; returns True when lr was cut."""
    if epoch_loss < sched.best - sched.threshold:
        sched.best = epoch_loss
        sched.bad_epochs = 0
        return False
    sched.bad_epochs += 1
    if sched.bad_epochs >= sched.patience:
        opt.lr *= sched.factor
        sched.bad_epochs = 0
        return True
    return False


def pad_batch(features: Sequence[np.ndarray], labels: Sequence[np.ndarray] | None = None, dtype=np.float64):
    """Stack variable-length videos, padding time; returns X, Y, mask."""
    T = max(f.shape[0] for f in features)
    B = len(features)
    X = np.zeros((B, T, features[0].shape[1]), dtype=dtype)
    mask = np.zeros((B, T), dtype=dtype)
    Y = None
    if labels is not None:
        Y = np.zeros((B, T, labels[0].shape[1]), dtype=dtype)
    for b, f in enumerate(features):
        n = f.shape[0]
        X[b, :n] = f
        mask[b, :n] = 1.0
        if Y is not None:
            Y[b, :n] = labels[b]
    return X, Y, mask


def predict_logits(model: CTRN, features: Sequence[np.ndarray], batch_size: int = 8) -> list[np.ndarray]:
    """Eval-mode CTM-head logits, one ``T x C`` array per video."""
    out = []
    dt = np.dtype(model.config.dtype)
    for s in range(0, len(features), batch_size):
        chunk = features[s:s + batch_size]
        X, _, mask = pad_batch(chunk, dtype=dt)
        logits = model.predict_logits(X, mask)
        out.extend(logits[b, : f.shape[0]].astype(np.float64) for b, f in enumerate(chunk))
    return out


def evaluate_loss(model: CTRN, features, labels, batch_size: int = 8) -> float:
    """Snippet-weighted mean total loss in eval mode."""
    dt = np.dtype(model.config.dtype)
    total, count = 0.0, 0.0
    with tn.no_grad():
        for s in range(0, len(features), batch_size):
            X, Y, mask = pad_batch(features[s:s + batch_size], labels[s:s + batch_size], dtype=dt)
            n = float(mask.sum())
            total += float(model.loss(X, Y, mask, training=False).data) * n
            count += n
    return total / count


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class FitResult:
    log: list[dict]
    best_epoch: int
    best_val_loss: float
    best_state: dict
    cooccurrence: CooccurrenceModel | None = None


def fit(model: CTRN, train, val=None, epochs: int = 300, batch_size: int = 8, seed: int = 0,
        lr: float = 1e-3, factor: float = 0.3, patience: int = 10, clip_norm: float | None = None,
        restore_best: bool = True, log_path=None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train ``model`` on ``train`` (a list of ``(features, labels)`` pairs).

    The G-classifier adjacency is rebuilt from the training labels only. The
    validation split (``train`` itself when ``val`` is None) drives the
    plateau scheduler and best-checkpoint selection.
    """
    cfg = model.config
    dt = np.dtype(cfg.dtype)
    train = [(np.asarray(f), np.asarray(y)) for f, y in train]
    val = train if val is None else [(np.asarray(f), np.asarray(y)) for f, y in val]
    cooc = CooccurrenceModel.from_labels([y for _, y in train], cfg.theta, cfg.reweight_p, C=cfg.C)
    model.set_cooccurrence(cooc.A_S)

    rng = np.random.Generator(np.random.PCG64(seed))
    model.seed_dropout(int(rng.integers(2**63)))
    opt = OptimizerState(lr=lr)
    sched = SchedulerState(factor=factor, patience=patience)
    params = model.parameters()
    records: list[dict] = []
    best_loss, best_epoch, best_state = float("inf"), 0, _copy_state(model)
    val_f = [f for f, _ in val]
    val_y = [y for _, y in val]
    logf = open(log_path, "w") if log_path is not None else None
    try:
        # Non-finite values are caught explicitly below, so numpy's own
        # overflow warnings would only be noise.
        with np.errstate(over="ignore", invalid="ignore"):
            for epoch in range(1, epochs + 1):
                order = rng.permutation(len(train))
                losses = []
                for bi, s in enumerate(range(0, len(order), batch_size)):
                    idx = order[s:s + batch_size]
                    X, Y, mask = pad_batch([train[i][0] for i in idx], [train[i][1] for i in idx], dtype=dt)
                    model.zero_grad()
                    loss = model.loss(X, Y, mask, training=True)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
                    tn.backward(loss)
                    _check_grads(params, epoch, bi)
                    if clip_norm is not None:
                        _clip(params, clip_norm)
                    adam_step(params, opt)
                    _check_params(params, epoch, bi)
                    losses.append(value)
                train_loss = float(np.mean(losses))
                val_loss = evaluate_loss(model, val_f, val_y, batch_size)
                if not np.isfinite(val_loss):
                    raise NumericalError(f"non-finite validation loss at epoch {epoch}")
                scores = [_sigmoid(z) for z in predict_logits(model, val_f, batch_size)]
                try:
                    val_map = per_frame_map(scores, val_y).map
                except MetricError:
                    val_map = None
                rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                       "lr": opt.lr, "map": val_map}
                records.append(rec)
                if logf is not None:
                    logf.write(json.dumps(rec) + "\n")
                    logf.flush()
                if on_epoch is not None:
                    on_epoch(rec)
                log.debug("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val_loss, opt.lr)
                if val_loss < best_loss:
                    best_loss, best_epoch, best_state = val_loss, epoch, _copy_state(model)
                plateau_schedule(sched, opt, val_loss)
    finally:
        if logf is not None:
            logf.close()
    if restore_best and best_epoch > 0:
        model.load_state(best_state)
    return FitResult(records, best_epoch, best_loss, best_state, cooc)


def _copy_state(model: CTRN) -> dict:
    return {k: np.array(v, copy=True) for k, v in model.state().items()}


def _check_grads(params, epoch, batch) -> None:
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for {p.name} at epoch {epoch}, batch {batch}")


def _check_params(params, epoch, batch) -> None:
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise NumericalError(f"parameter {p.name} became non-finite at epoch {epoch}, batch {batch}")


def _clip(params, max_norm: float) -> None:
    total = np.sqrt(sum(float((p.grad**2).sum()) for p in params))
    if total > max_norm:
        for p in params:
            p.grad = p.grad * (max_norm / total)
