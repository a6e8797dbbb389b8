"""Loss, Adam with decoupled weight decay, staircase learning rate, epoch loop."""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from . import tensor as T
from .data import TRAIN, HsiCube, batches, identify, stack
from .errors import ConfigError, DataError, TrainingError
from .model import PATCH, ModelConfig, forward, init_params, is_decayed
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 5e-4
    decay_factor: float = 0.9
    epochs: int = 1000
    batch: int = 64
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    seed: int = 0
    bits: int = 32
    checkpoint_every: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.lr0 < 0.0:
            raise ConfigError(f"lr0 must be nonnegative, got {self.lr0}")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be at least 1")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be nonnegative")
        T.dtype_for_bits(self.bits)

    def to_dict(self) -> dict:
        return asdict(self)


def default_epochs(caf: bool, dataset: str | None) -> int:
    """Epoch budget of the published recipe: CAF converges faster on the public scenes."""
    if caf and dataset == "indian_pines":
        return 300
    if caf and dataset in ("pavia_university", "houston2013"):
        return 600
    return 1000


def default_weight_decay(input_mode: str) -> float:
    return 5e-3 if input_mode == PATCH else 0.0


def recipe(model_config: ModelConfig, cube: HsiCube | None = None, **overrides) -> TrainConfig:
    """TrainConfig with dataset- and mode-dependent defaults filled in."""
    values = {"epochs": default_epochs(model_config.caf, identify(cube) if cube is not None else None),
              "weight_decay": default_weight_decay(model_config.input_mode)}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


# --------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch; labels are 1-based."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    k = logits.shape[-1]
    if labels.size and (labels.min() < 1 or labels.max() > k):
        raise DataError(f"labels must lie in 1..{k}, got range {labels.min()}..{labels.max()}")
    return T.mul_const(T.mean_all(T.pick(T.log_softmax(logits), labels - 1)), -1.0)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, weight_decay: float = 0.0,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              decay: Callable[[str], bool] = is_decayed):
    """One bias-corrected Adam step with decoupled weight decay.

    Returns ``(new_params, new_state)``; the inputs are left untouched.
    Decay ``theta -= lr * wd * theta`` is applied before the Adam term and
    only to names selected by ``decay``.
    """
    b1, b2 = betas
    t = state.t + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        if weight_decay and decay(name):
            theta = theta - lr * weight_decay * theta
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = (theta - step).astype(theta.dtype, copy=False)
        new_m[name] = m.astype(theta.dtype, copy=False)
        new_v[name] = v.astype(theta.dtype, copy=False)
    return new_params, AdamState(new_m, new_v, t)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Staircase schedule: multiply by ``decay_factor`` after each tenth of the run."""
    if not 0 <= epoch < config.epochs:
        raise ConfigError(f"epoch {epoch} outside 0..{config.epochs - 1}")
    return config.lr0 * config.decay_factor ** ((10 * epoch) // config.epochs)


# --------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    train_oa: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def to_text(self) -> str:
        return "".join(f"{r.epoch}, {r.lr:.9g}, {r.mean_loss:.9g}, {r.train_oa:.6f}\n"
                       for r in self.records)

    @classmethod
    def from_text(cls, text: str) -> "History":
        recs = []
        for line in text.splitlines():
            if line.strip():
                e, lr, loss, oa = (s.strip() for s in line.split(","))
                recs.append(EpochRecord(int(e), float(lr), float(loss), float(oa)))
        return cls(recs)


@contextlib.contextmanager
def deterministic_threads(enabled: bool):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def _write(path: Path, data: bytes | str) -> None:
    try:
        if isinstance(data, str):
            path.write_text(data)
        else:
            path.write_bytes(data)
    except OSError as exc:
        raise TrainingError(f"cannot write {path}: {exc.strerror}") from exc


def loss_and_grads(params: Mapping[str, np.ndarray], config: ModelConfig, x: np.ndarray,
                   y: np.ndarray, rng=None, training: bool = True):
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    logits = forward(leaves, config, x, rng, training)
    loss = cross_entropy(logits, y)
    grads = tape.backward(loss)
    return loss.item(), logits.data, {k: grads[t.node_id] for k, t in leaves.items()}


def train(cube: HsiCube, model_config: ModelConfig, train_config: TrainConfig,
          out_dir=None, params: Mapping[str, np.ndarray] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None):
    """Seeded training loop; returns ``(params, history)``.

    With ``out_dir`` set, ``history.txt`` is rewritten after every epoch,
    ``model.sfck`` is written at the end and ``model_epoch{N}.sfck`` every
    ``checkpoint_every`` epochs.
    """
    if cube.m != model_config.m:
        raise DataError(f"cube has {cube.m} bands, model expects {model_config.m}")
    if cube.classes != model_config.classes:
        raise DataError(f"cube has {cube.classes} classes, model expects {model_config.classes}")
    if len(cube.locations(TRAIN)) == 0:
        raise DataError("training split is empty")
    cfg = train_config
    dtype = T.dtype_for_bits(cfg.bits)
    init_rng, shuffle_rng, drop_rng = (np.random.Generator(np.random.PCG64(s))
                                       for s in np.random.SeedSequence(cfg.seed).spawn(3))
    if params is None:
        params = init_params(model_config, init_rng, dtype)
    else:
        params = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    state = AdamState.zeros_like(params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = History()

    with deterministic_threads(cfg.deterministic):
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            total_loss, correct, seen = 0.0, 0, 0
            for bi, batch in enumerate(batches(cube, TRAIN, cfg.batch, shuffle_rng, shuffle=True,
                                               mode=model_config.input_mode,
                                               patch_side=model_config.patch_side)):
                x, y = stack(batch)
                loss, logits, grads = loss_and_grads(params, model_config, x.astype(dtype), y, drop_rng)
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {bi}")
                params, state = adam_step(params, grads, state, lr, cfg.weight_decay,
                                          cfg.betas, cfg.eps_adam)
                total_loss += loss * len(y)
                correct += int(np.sum(np.argmax(logits, axis=-1) + 1 == y))
                seen += len(y)
            rec = EpochRecord(epoch, lr, total_loss / seen, correct / seen)
            history.records.append(rec)
            logger.info("epoch %d lr %.3g loss %.5f train_oa %.4f", epoch, lr, rec.mean_loss, rec.train_oa)
            if on_epoch is not None:
                on_epoch(rec)
            if out is not None:
                _write(out / "history.txt", history.to_text())
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    _write(out / f"model_epoch{epoch + 1}.sfck", checkpoint.dumps(params, model_config))
    if out is not None:
        _write(out / "model.sfck", checkpoint.dumps(params, model_config))
    return params, history
