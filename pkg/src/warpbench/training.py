"""Mini-batch SGD training loop over a (possibly poisoned) batch stream."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from .errors import TrainingDiverged
from .nn import MnistNet, SgdState, cross_entropy, sgd_step
from .poison import STREAM_DROPOUT, derive_rng

logger = logging.getLogger(__name__)

Batch = Tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.01
    decay_epochs: int = 100
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 1
    # Stop after this many evaluations without a clean-accuracy improvement.
    patience: Optional[int] = None

    def sgd_state(self) -> SgdState:
        return SgdState(learning_rate=self.learning_rate, decay_epochs=self.decay_epochs,
                        decay_factor=self.decay_factor, momentum=self.momentum,
                        weight_decay=self.weight_decay)


@dataclass
class TrainResult:
    net: MnistNet
    history: List[Dict[str, float]] = field(default_factory=list)
    epochs_run: int = 0
    first_batch_loss: Optional[float] = None


def train(net: MnistNet, stream: Callable[[int], Iterable[Batch]], cfg: TrainConfig,
          evaluate: Optional[Callable[[MnistNet], Dict[str, float]]] = None) -> TrainResult:
    """Train ``net`` in place.

    ``stream(epoch)`` yields ``(x, y, mode_codes)`` batches for that epoch;
    ``evaluate(net)`` returns a metrics dict whose ``"clean"`` entry drives
    early stopping.
    """
    state = cfg.sgd_state()
    result = TrainResult(net=net)
    best_clean = -math.inf
    stale = 0
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        dropout_rng = derive_rng(cfg.seed, STREAM_DROPOUT, epoch)
        t0 = time.perf_counter()
        total_loss, correct, seen = 0.0, 0, 0
        for x, y, _ in stream(epoch):
            logits = net.forward(x, train=True, rng=dropout_rng)
            loss, dlogits = cross_entropy(logits, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            if result.first_batch_loss is None:
                result.first_batch_loss = loss
            grads = net.backward(dlogits)
            sgd_step(net, grads, state)
            total_loss += loss * len(y)
            correct += int((logits.argmax(axis=1) == y).sum())
            seen += len(y)
        record = {"epoch": epoch + 1, "lr": state.current_lr, "loss": total_loss / max(seen, 1),
                  "train_acc": 100.0 * correct / max(seen, 1), "seconds": time.perf_counter() - t0}
        result.epochs_run = epoch + 1
        if evaluate is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            record.update(evaluate(net))
            if cfg.patience is not None:
                if record["clean"] > best_clean:
                    best_clean, stale = record["clean"], 0
                else:
                    stale += 1
        result.history.append(record)
        logger.info("epoch %d: %s", epoch + 1,
                    ", ".join(f"{k}={v:.4g}" for k, v in record.items() if k != "epoch"))
        if cfg.patience is not None and stale >= cfg.patience:
            logger.info("clean accuracy plateaued; stopping after epoch %d", epoch + 1)
            break
    return result
