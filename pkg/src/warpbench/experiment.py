"""End-to-end runs: build the trigger, train, evaluate, run defenses, persist."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
from filelock import FileLock, Timeout

from . import config as config_io
from .config import ExperimentConfig
from .datasets import Split, load_dataset
from .defenses import CleanseConfig, fine_pruning, neural_cleanse, spectral_signature, strip_entropies
from .errors import ConfigError, WarpBenchError
from .metrics import accuracy, attack_success, evaluate_triple
from .nn import MnistNet, load_checkpoint_with_manifest, save_checkpoint
from .poison import PoisonConfig, derive_rng, training_batches
from .training import train
from .warp import WarpField, build_warp_field, warp_batch

logger = logging.getLogger(__name__)

REPORT_FORMAT = "warpbench-report/1"
REPORT_FILE = "report.json"
CONFIG_FILE = "config.toml"
FIELD_FILE = "warp_field.wanf"
CHECKPOINT_FILE = "model.wack"
DEFENSES = ("neural_cleanse", "fine_pruning", "strip", "spectral")


@dataclass
class RunData:
    train: Split
    test: Split
    num_classes: int = 10


def load_run_data(cfg: ExperimentConfig) -> RunData:
    train_split, test_split = load_dataset(cfg.dataset, cfg.data_dir)
    if cfg.train.train_subset:
        train_split = train_split.subset(cfg.train.train_subset)
    if cfg.eval.test_subset:
        test_split = test_split.subset(cfg.eval.test_subset)
    return RunData(train_split, test_split)


def make_warp_field(cfg: ExperimentConfig, h: int, w: int) -> WarpField:
    return build_warp_field(cfg.warp.k, cfg.warp.s, h, w, derive_rng(cfg.sub_seed("warp")))


def eval_poison_config(cfg: ExperimentConfig) -> PoisonConfig:
    """Poison settings used for evaluation; benign runs get a nominal attack config."""
    if cfg.poisoned:
        return cfg.poison_config()
    p = cfg.poison
    return PoisonConfig(rho_a=0.1, rho_n=0.0, target_rule=p.target_rule, target_class=p.target_class,
                        k=cfg.warp.k, s=cfg.warp.s, seed=cfg.sub_seed("poison"))


def final_metrics(net: MnistNet, data: RunData, field: WarpField, cfg: ExperimentConfig) -> Dict[str, float]:
    pcfg = eval_poison_config(cfg)
    triple = evaluate_triple(net, data.test.images, data.test.labels, field, pcfg, data.num_classes,
                             noise_seed=cfg.sub_seed("eval"))
    out = {"clean": triple.clean, "attack": triple.attack}
    if cfg.poison.rho_n > 0:
        out["noise"] = triple.noise
    return out


def _write_csv(path: Path, header: Sequence[str], rows) -> str:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path.name


def run_defenses(net: MnistNet, field: WarpField, cfg: ExperimentConfig, data: RunData, outdir: Path,
                 which: Optional[Sequence[str]] = None) -> Dict[str, dict]:
    """Run the enabled defenses, write their CSV side files and return summaries."""
    if which is None:
        which = [name for name in DEFENSES if getattr(cfg.defense, name)]
    unknown = set(which) - set(DEFENSES)
    if unknown:
        raise ConfigError(f"unknown defenses {sorted(unknown)}")
    d = cfg.defense
    pcfg = eval_poison_config(cfg)
    seed = cfg.sub_seed("defense")
    test = data.test
    results: Dict[str, dict] = {}

    if "neural_cleanse" in which:
        nc_cfg = CleanseConfig(steps=d.nc_steps, batch_size=d.nc_batch_size, step_size=d.nc_step_size,
                               optimizer=d.nc_optimizer, seed=seed)
        report, candidates = neural_cleanse(net, test.images[: d.nc_clean_size], data.num_classes, nc_cfg)
        csv_name = _write_csv(outdir / "neural_cleanse.csv",
                              ["class", "l1_norm", "anomaly_index", "converged", "success_rate"],
                              [(c.target_class, c.l1_norm, a, int(c.converged), c.success_rate)
                               for c, a in zip(candidates, report.anomaly_indices)])
        np.savez(outdir / "neural_cleanse_triggers.npz", masks=np.stack([c.mask for c in candidates]),
                 patterns=np.stack([c.pattern for c in candidates]))
        results["neural_cleanse"] = {
            "l1_norms": report.l1_norms, "anomaly_indices": report.anomaly_indices,
            "converged": report.converged, "flagged": report.flagged, "max_anomaly_index": report.max_index,
            "min_l1_norm": report.min_norm, "csv": csv_name,
        }

    if "fine_pruning" in which:
        subset = d.pruning_eval_size or len(test)
        images, labels = test.images[:subset], test.labels[:subset]

        def evaluate(pruned: MnistNet):
            return (accuracy(pruned, images, labels),
                    attack_success(pruned, images, labels, field, pcfg, data.num_classes))

        curve = fine_pruning(net, test.images[: d.nc_clean_size], evaluate)
        csv_name = _write_csv(outdir / "fine_pruning.csv", ["num_pruned", "clean_acc", "attack_acc"], curve.rows())
        results["fine_pruning"] = {"num_pruned": curve.num_pruned, "clean_acc": curve.clean_acc,
                                   "attack_acc": curve.attack_acc, "order": curve.order, "csv": csv_name}

    if "strip" in which:
        n = d.strip_inputs
        clean_inputs = test.images[:n]
        pool = test.images[n:]
        keep = test.labels[n:] != pcfg.target_class if pcfg.target_rule == "all-to-one" else np.ones(len(pool), bool)
        backdoor_inputs = warp_batch(pool[keep][:n], field.offsets)
        overlays = pool[keep][n:] if len(pool[keep]) > n else pool
        if len(overlays) == 0:
            overlays = clean_inputs
        clean_h = strip_entropies(net.predict_proba, clean_inputs, overlays, d.strip_overlays, seed)
        bd_h = strip_entropies(net.predict_proba, backdoor_inputs, overlays, d.strip_overlays, seed + 1)
        rows = [("clean", v) for v in clean_h] + [("backdoor", v) for v in bd_h]
        csv_name = _write_csv(outdir / "strip.csv", ["population", "entropy"], rows)
        results["strip"] = {
            "clean_mean": float(clean_h.mean()), "backdoor_mean": float(bd_h.mean()),
            "backdoor_p01": float(np.percentile(bd_h, 1)), "clean_p01": float(np.percentile(clean_h, 1)),
            "n_clean": int(len(clean_h)), "n_backdoor": int(len(bd_h)), "csv": csv_name,
        }

    if "spectral" in which:
        target = pcfg.target_class
        train_split = data.train
        clean_pool = train_split.images[train_split.labels == target][: d.spectral_clean]
        others = train_split.images[train_split.labels != target][: d.spectral_backdoor]
        hist = spectral_signature(net, clean_pool, warp_batch(others, field.offsets))
        rows = [("clean", v) for v in hist.clean] + [("backdoor", v) for v in hist.backdoor]
        csv_name = _write_csv(outdir / "spectral.csv", ["population", "correlation"], rows)
        results["spectral"] = {"auc": hist.auc, "separability": hist.separability,
                               "n_clean": int(len(hist.clean)), "n_backdoor": int(len(hist.backdoor)),
                               "csv": csv_name}
    return results


def _lock(outdir: Path) -> FileLock:
    lock = FileLock(str(outdir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise WarpBenchError(f"another experiment is running in {outdir}") from None
    return lock


def _write_report(outdir: Path, report: dict) -> Path:
    for name in report.get("artifacts", {}).values():
        if name and not (outdir / name).exists():
            raise WarpBenchError(f"report references missing artifact {name}")
    path = outdir / REPORT_FILE
    path.write_text(json.dumps(report, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path


def run_experiment(cfg: ExperimentConfig, data: Optional[RunData] = None) -> dict:
    """Train a (possibly poisoned) model per ``cfg`` and write all artifacts to ``cfg.output_dir``."""
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    lock = _lock(outdir)
    timing: Dict[str, float] = {}
    report: dict = {"format": REPORT_FORMAT, "kind": "train", "complete": False,
                    "config": config_io.to_dict(cfg), "artifacts": {}}
    try:
        t0 = time.perf_counter()
        data = data or load_run_data(cfg)
        config_io.dump(cfg, outdir / CONFIG_FILE)
        report["artifacts"]["config"] = CONFIG_FILE
        h, w = data.train.images.shape[-2:]
        field = make_warp_field(cfg, h, w)
        field.save(outdir / FIELD_FILE)
        report["artifacts"]["warp_field"] = FIELD_FILE

        net = MnistNet(num_classes=data.num_classes, in_channels=data.train.images.shape[1], input_size=h,
                       dropout=cfg.train.dropout, seed=cfg.sub_seed("train"))
        pcfg = cfg.poison_config() if cfg.poisoned else None
        tcfg = cfg.train_config()
        aug = cfg.augment_config()

        def stream(epoch: int):
            return training_batches(data.train.images, data.train.labels, field, pcfg, epoch,
                                    tcfg.batch_size, data.num_classes, aug, seed=tcfg.seed)

        result = train(net, stream, tcfg, evaluate=lambda n: final_metrics(n, data, field, cfg))
        timing["train_seconds"] = sum(r.pop("seconds") for r in result.history)
        final = final_metrics(net, data, field, cfg)
        save_checkpoint(net, outdir / CHECKPOINT_FILE, epoch=result.epochs_run,
                        seeds={s: cfg.sub_seed(s) for s in ("warp", "poison", "train")}, metrics=final)
        report["artifacts"]["checkpoint"] = CHECKPOINT_FILE
        report["metrics"] = {"epochs_run": result.epochs_run, "first_batch_loss": result.first_batch_loss,
                             "history": result.history, "final": final}
        t1 = time.perf_counter()
        defenses = run_defenses(net, field, cfg, data, outdir)
        timing["defense_seconds"] = time.perf_counter() - t1
        if defenses:
            report["defenses"] = defenses
            for name, summary in defenses.items():
                report["artifacts"][f"{name}_csv"] = summary["csv"]
        report["complete"] = True
        timing["total_seconds"] = time.perf_counter() - t0
        report["timing"] = timing
        _write_report(outdir, report)
        return report
    except Exception:
        report["timing"] = timing
        (outdir / REPORT_FILE).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        raise
    finally:
        lock.release()


def load_trained(run_dir: Path, checkpoint: Optional[Path] = None, field: Optional[Path] = None):
    run_dir = Path(run_dir)
    net, manifest = load_checkpoint_with_manifest(checkpoint or run_dir / CHECKPOINT_FILE)
    return net, WarpField.load(field or run_dir / FIELD_FILE), manifest


def run_evaluation(cfg: ExperimentConfig, checkpoint: Path, field_path: Path,
                   data: Optional[RunData] = None) -> Dict[str, float]:
    net, field, _ = load_trained(Path(checkpoint).parent, checkpoint, field_path)
    data = data or load_run_data(cfg)
    return final_metrics(net, data, field, cfg)


def run_defense_only(cfg: ExperimentConfig, checkpoint: Path, field_path: Path,
                     which: Optional[Sequence[str]] = None, data: Optional[RunData] = None) -> dict:
    """Run defenses against an existing checkpoint; no training happens."""
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    lock = _lock(outdir)
    try:
        t0 = time.perf_counter()
        net, field, _ = load_trained(Path(checkpoint).parent, checkpoint, field_path)
        data = data or load_run_data(cfg)
        if which is None:
            which = [name for name in DEFENSES if getattr(cfg.defense, name)] or list(DEFENSES)
        defenses = run_defenses(net, field, cfg, data, outdir, which)
        report = {"format": REPORT_FORMAT, "kind": "defend", "complete": True,
                  "config": config_io.to_dict(cfg),
                  "inputs": {"checkpoint": str(checkpoint), "warp_field": str(field_path)},
                  "artifacts": {f"{name}_csv": s["csv"] for name, s in defenses.items()},
                  "defenses": defenses,
                  "timing": {"defense_seconds": time.perf_counter() - t0}}
        _write_report(outdir, report)
        return report
    finally:
        lock.release()


def load_report(run_dir: Path) -> dict:
    path = Path(run_dir) / REPORT_FILE
    if not path.is_file():
        raise WarpBenchError(f"no report found at {path}")
    return json.loads(path.read_text(encoding="utf-8"))
