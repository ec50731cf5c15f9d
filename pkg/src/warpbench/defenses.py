"""Backdoor defenses run against a trained classifier.

* Neural Cleanse: per-class trigger reverse engineering plus a MAD outlier test.
* Fine-Pruning: accuracy curve while zeroing dormant conv3 channels.
* STRIP: prediction entropy under superimposition with clean images.
* Spectral signature: correlation with the top singular vector of features.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError
from .nn import MnistNet, cross_entropy

logger = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826
ANOMALY_THRESHOLD = 2.0


# ----------------------------------------------------------------- MAD outliers

def mad_anomaly_index(norms: Sequence[float]) -> List[float]:
    """``|x - median| / (1.4826 * MAD)`` for each value; MAD floored at 1e-9."""
    values = np.asarray(norms, dtype=np.float64)
    if values.size < 3:
        raise ConfigError(f"need at least 3 values for a MAD anomaly index, got {values.size}")
    median = np.median(values)
    deviation = np.abs(values - median)
    mad = max(float(np.median(deviation)), 1e-9)
    return list(deviation / (MAD_CONSISTENCY * mad))


# -------------------------------------------------------------- Neural Cleanse

@dataclass
class CleanseConfig:
    steps: int = 500
    batch_size: int = 32
    step_size: float = 0.1
    optimizer: str = "adam"  # "adam" or "sgd" (plain gradient descent)
    betas: Tuple[float, float] = (0.5, 0.9)
    init_cost: float = 1e-3
    cost_multiplier: float = 1.5
    adapt_every: int = 10
    success_threshold: float = 0.99
    converge_fraction: float = 0.9
    eval_size: int = 1000
    seed: int = 0


@dataclass
class TriggerCandidate:
    mask: np.ndarray  # (H, W) in [0, 1]
    pattern: np.ndarray  # (C, H, W) in [0, 1]
    target_class: int
    l1_norm: float
    success_rate: float
    converged: bool


@dataclass
class AnomalyReport:
    l1_norms: List[float]
    anomaly_indices: List[float]
    converged: List[bool]
    flagged: bool

    @property
    def max_index(self) -> float:
        return max(self.anomaly_indices)

    @property
    def min_norm(self) -> float:
        return min(self.l1_norms)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def apply_trigger(x: np.ndarray, mask: np.ndarray, pattern: np.ndarray) -> np.ndarray:
    return (1.0 - mask) * x + mask * pattern


class _Adam:
    def __init__(self, lr: float, betas: Tuple[float, float], eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for key, g in grads.items():
            m = self.m.setdefault(key, np.zeros_like(g))
            v = self.v.setdefault(key, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            params[key] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def reverse_engineer_trigger(net: MnistNet, images: np.ndarray, target: int,
                             cfg: CleanseConfig) -> TriggerCandidate:
    """Smallest mask/pattern pair that sends clean ``images`` to ``target``."""
    rng = np.random.default_rng([cfg.seed, target])
    c, h, w = images.shape[1:]
    raw = {
        "mask": rng.uniform(-1.0, 1.0, size=(h, w)),
        "pattern": rng.uniform(-1.0, 1.0, size=(c, h, w)),
    }
    optimizer = _Adam(cfg.step_size, cfg.betas) if cfg.optimizer == "adam" else None
    cost = cfg.init_cost
    best: Optional[Tuple[float, np.ndarray, np.ndarray]] = None
    window: List[float] = []
    targets = np.full(cfg.batch_size, target)
    for _ in range(cfg.steps):
        mask = _sigmoid(raw["mask"])
        pattern = _sigmoid(raw["pattern"])
        batch = images[rng.integers(0, len(images), size=cfg.batch_size)].astype(np.float64)
        blended = apply_trigger(batch, mask, pattern).astype(net.dtype)
        logits = net.forward(blended, train=False)
        _, dlogits = cross_entropy(logits, targets)
        dx = net.backward(dlogits, need_input_grad=True, need_param_grads=False)["input"].astype(np.float64)
        success = float(np.mean(logits.argmax(axis=1) == target))
        window.append(success)

        l1 = float(mask.sum())
        if success >= cfg.success_threshold and (best is None or l1 < best[0]):
            best = (l1, mask.copy(), pattern.copy())

        dmask = (dx * (pattern - batch)).sum(axis=(0, 1)) + cost
        dpattern = (dx * mask).sum(axis=0)
        grads = {"mask": dmask * mask * (1 - mask), "pattern": dpattern * pattern * (1 - pattern)}
        if optimizer is not None:
            optimizer.step(raw, grads)
        else:
            for key in raw:
                raw[key] -= cfg.step_size * grads[key]

        if len(window) == cfg.adapt_every:
            if np.mean(window) >= cfg.success_threshold:
                cost *= cfg.cost_multiplier
            else:
                cost /= cfg.cost_multiplier
            window.clear()

    if best is None:
        mask, pattern = _sigmoid(raw["mask"]), _sigmoid(raw["pattern"])
    else:
        _, mask, pattern = best
    probe = images[: cfg.eval_size].astype(np.float64)
    rate = float(np.mean(net.predict(apply_trigger(probe, mask, pattern).astype(net.dtype)) == target))
    return TriggerCandidate(mask=mask, pattern=pattern, target_class=int(target), l1_norm=float(mask.sum()),
                            success_rate=rate, converged=rate >= cfg.converge_fraction)


def neural_cleanse(net: MnistNet, images: np.ndarray, num_classes: int,
                   cfg: Optional[CleanseConfig] = None) -> Tuple[AnomalyReport, List[TriggerCandidate]]:
    cfg = cfg or CleanseConfig()
    if len(images) == 0:
        raise ConfigError("Neural Cleanse needs a non-empty clean set")
    candidates = [reverse_engineer_trigger(net, images, t, cfg) for t in range(num_classes)]
    norms = [cand.l1_norm for cand in candidates]
    converged = [cand.converged for cand in candidates]
    usable = [i for i, ok in enumerate(converged) if ok]
    for i, ok in enumerate(converged):
        if not ok:
            logger.warning("trigger for class %d did not converge (success %.3f); excluded from MAD",
                           i, candidates[i].success_rate)
    if len(usable) < 3:
        logger.warning("only %d classes converged; computing anomaly indices over all classes", len(usable))
        usable = list(range(num_classes))
    subset = mad_anomaly_index([norms[i] for i in usable])
    indices = [0.0] * num_classes
    for i, value in zip(usable, subset):
        indices[i] = float(value)
    report = AnomalyReport(l1_norms=norms, anomaly_indices=indices, converged=converged,
                           flagged=max(indices) > ANOMALY_THRESHOLD)
    return report, candidates


# ------------------------------------------------------------------ Fine-Pruning

@dataclass
class PruningCurve:
    num_pruned: List[int] = field(default_factory=list)
    clean_acc: List[float] = field(default_factory=list)
    attack_acc: List[float] = field(default_factory=list)
    order: List[int] = field(default_factory=list)

    def rows(self):
        return list(zip(self.num_pruned, self.clean_acc, self.attack_acc))


def dormancy_order(net: MnistNet, images: np.ndarray) -> np.ndarray:
    """conv3 channels sorted by ascending mean activation on clean data."""
    acts = net.conv3_activations(images)
    return np.argsort(acts.mean(axis=(0, 2, 3)), kind="stable")


def fine_pruning(net: MnistNet, clean_images: np.ndarray,
                 evaluate: Callable[[MnistNet], Tuple[float, float]]) -> PruningCurve:
    """Cumulatively zero dormant conv3 channels and record ``evaluate`` after each step.

    ``evaluate(net)`` returns ``(clean_acc, attack_acc)``. ``net`` is left unmodified.
    """
    order = dormancy_order(net, clean_images)
    pruned = net.copy()
    mask = np.ones(net.conv3_channels)
    curve = PruningCurve(order=[int(c) for c in order])
    for n in range(len(order) + 1):
        if n:
            mask[order[n - 1]] = 0.0
        pruned.channel_mask = mask.copy()
        clean, attack = evaluate(pruned)
        curve.num_pruned.append(n)
        curve.clean_acc.append(float(clean))
        curve.attack_acc.append(float(attack))
    return curve


# ------------------------------------------------------------------------ STRIP

def prediction_entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row of ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return np.maximum(-terms.sum(axis=-1), 0.0)


def strip_entropies(predict_proba: Callable[[np.ndarray], np.ndarray], inputs: np.ndarray,
                    overlay_set: np.ndarray, n_overlays: int = 100, seed: int = 0,
                    chunk: int = 10) -> np.ndarray:
    """Mean entropy over ``n_overlays`` equal-weight blends for each input."""
    if len(overlay_set) == 0:
        raise ConfigError("STRIP needs a non-empty overlay set")
    if n_overlays < 1:
        raise ConfigError("n_overlays must be >= 1")
    rng = np.random.default_rng(seed)
    replace = n_overlays > len(overlay_set)
    out = np.empty(len(inputs))
    for start in range(0, len(inputs), chunk):
        block = inputs[start:start + chunk]
        picks = np.stack([rng.choice(len(overlay_set), n_overlays, replace=replace) for _ in block])
        blends = 0.5 * block[:, None] + 0.5 * overlay_set[picks]
        probs = predict_proba(blends.reshape((-1,) + inputs.shape[1:]).astype(inputs.dtype))
        out[start:start + len(block)] = prediction_entropy(probs).reshape(len(block), n_overlays).mean(axis=1)
    return out


def strip_entropy(net: MnistNet, x: np.ndarray, overlay_set: np.ndarray, n_overlays: int = 100,
                  seed: int = 0) -> float:
    return float(strip_entropies(net.predict_proba, np.asarray(x)[None], overlay_set, n_overlays, seed)[0])


# ----------------------------------------------------------- spectral signature

@dataclass
class CorrelationHistogram:
    clean: np.ndarray
    backdoor: np.ndarray
    auc: float

    @property
    def separability(self) -> float:
        """Direction-free separation, ``max(auc, 1 - auc)``."""
        return max(self.auc, 1.0 - self.auc)


def auc_score(negatives: np.ndarray, positives: np.ndarray) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    negatives = np.asarray(negatives, dtype=np.float64)
    positives = np.asarray(positives, dtype=np.float64)
    if negatives.size == 0 or positives.size == 0:
        raise ConfigError("AUC needs both populations")
    ranks = rankdata(np.concatenate([negatives, positives]))
    n_pos = positives.size
    return float((ranks[negatives.size:].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * negatives.size))


def signature_scores(reps: np.ndarray) -> np.ndarray:
    """``|r_i . v|`` for mean-centred rows and the top right singular vector ``v``."""
    centered = np.asarray(reps, dtype=np.float64)
    centered = centered - centered.mean(axis=0)
    if np.abs(centered).max(initial=0.0) < 1e-12:
        return np.zeros(len(centered))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return np.abs(centered @ vt[0])


def spectral_signature_from_features(clean_reps: np.ndarray, backdoor_reps: np.ndarray) -> CorrelationHistogram:
    if len(clean_reps) == 0 or len(backdoor_reps) == 0:
        raise ConfigError("spectral signature needs both populations")
    scores = signature_scores(np.concatenate([clean_reps, backdoor_reps]))
    clean, backdoor = scores[: len(clean_reps)], scores[len(clean_reps):]
    return CorrelationHistogram(clean=clean, backdoor=backdoor, auc=auc_score(clean, backdoor))


def spectral_signature(net: MnistNet, clean_samples: np.ndarray, backdoor_samples: np.ndarray) -> CorrelationHistogram:
    return spectral_signature_from_features(net.features(clean_samples), net.features(backdoor_samples))
