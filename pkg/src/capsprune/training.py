"""Training, evaluation, pruning and reporting workflows behind the CLI."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import set_frozen
from .capsnet import classify, margin_loss
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_json
from .core import Adam, AdamState, Tape, Tensor
from .core.tensor import check_finite
from .data import Dataset, SplitConfig, batches, load_cifar10, load_idx, resize_nearest, split
from .errors import ConfigError, NoRunsError, NonFiniteError
from .network import CapsuleNetwork, build_network, forward_pipeline
from .pruning import build_prune_plan, format_table, network_cost, score_channels, simplify_network

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")
EVAL_BATCH = 500


# -- data -------------------------------------------------------------------------

def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(train, test) as configured, in the configured float dtype."""
    d = cfg.dataset.resolved()
    if d.kind == "mnist":
        paths = (d.train_images, d.train_labels, d.test_images, d.test_labels)
        if any(p is None for p in paths):
            raise ConfigError("mnist dataset needs `root` or all four IDX paths")
        train = load_idx(d.train_images, d.train_labels, d.class_count)
        test = load_idx(d.test_images, d.test_labels, d.class_count)
    else:
        if not d.train_files or not d.test_files:
            raise ConfigError("cifar10 dataset needs `root` or explicit train/test batch files")
        train, test = load_cifar10(d.train_files), load_cifar10(d.test_files)
    if d.train_limit is not None:
        train = train.subset(np.arange(min(d.train_limit, len(train))))
    if d.test_limit is not None:
        test = test.subset(np.arange(min(d.test_limit, len(test))))
    if d.resize:
        train = resize_nearest(train, *d.resize)
        test = resize_nearest(test, *d.resize)
    return train.astype(cfg.np_dtype), test.astype(cfg.np_dtype)


def train_val_split(train: Dataset, cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    return split(train, SplitConfig(cfg.dataset.validation_fraction, cfg.seed))


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def check_compatible(net: CapsuleNetwork, data: Dataset) -> None:
    """Explain every way a dataset disagrees with a model."""
    diffs = []
    if data.sample_shape != net.backbone.spec.input_shape:
        diffs.append(f"sample shape: data {data.sample_shape} vs model {net.backbone.spec.input_shape}")
    if data.class_count != net.caps.J:
        diffs.append(f"class count: data {data.class_count} vs model {net.caps.J}")
    if diffs:
        raise ConfigError("dataset does not match checkpoint: " + "; ".join(diffs))


# -- evaluation -------------------------------------------------------------------------

def evaluate(net: CapsuleNetwork, data: Dataset, batch_size: int = EVAL_BATCH) -> tuple[float, float]:
    """(mean margin loss, accuracy) in inference mode; (nan, nan) for empty data."""
    if len(data) == 0:
        return float("nan"), float("nan")
    loss_sum, correct = 0.0, 0
    for x, y in batches(data, batch_size, shuffle=False):
        v, _ = forward_pipeline(net, x)
        loss_sum += margin_loss(v, y).item() * len(y)
        correct += int(np.sum(classify(v) == y))
    return loss_sum / len(data), correct / len(data)


def backbone_digest(net: CapsuleNetwork) -> str:
    h = hashlib.sha256()
    for name, t in sorted(net.backbone.parameters().items()):
        h.update(name.encode())
        h.update(t.data.tobytes())
    for name, b in sorted(net.backbone.buffers().items()):
        h.update(name.encode())
        h.update(b.tobytes())
    return h.hexdigest()


# -- training loop -----------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float

    def csv_row(self) -> list[str]:
        return [str(self.epoch)] + [_fmt(x) for x in (self.train_loss, self.train_acc, self.val_loss, self.val_acc)]


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def train_epoch(net: CapsuleNetwork, opt: Adam, data: Dataset, batch_size: int, seed: int,
                epoch: int) -> tuple[float, float]:
    loss_sum, correct = 0.0, 0
    for b, (x, y) in enumerate(batches(data, batch_size, epoch_seed(seed, epoch), shuffle=True)):
        opt.zero_grad()
        try:
            with Tape() as tape:
                v, _ = forward_pipeline(net, Tensor(x), training=True)
                loss = margin_loss(v, y)
            tape.backward(loss)
            opt.step()
            for name, p in opt.params.items():
                check_finite(p.data, f"parameter {name}")
        except NonFiniteError as exc:
            raise NonFiniteError(f"epoch {epoch + 1}, batch {b}: {exc}") from None
        loss_sum += loss.item() * len(y)
        correct += int(np.sum(classify(v) == y))
    n = max(len(data), 1)
    return loss_sum / n, correct / n


class RunWriter:
    """Owns a run directory: metrics.csv, timings.csv, checkpoints, summary."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.metrics = self.out / "metrics.csv"
        self.timings = self.out / "timings.csv"
        self._write_csv(self.metrics, [METRICS_HEADER])
        self._write_csv(self.timings, [("epoch", "wall_seconds")])

    @staticmethod
    def _write_csv(path: Path, rows, mode="w"):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        with open(path, mode) as f:
            f.write(buf.getvalue())

    def add_epoch(self, stats: EpochStats) -> None:
        self._write_csv(self.metrics, [stats.csv_row()], "a")
        self._write_csv(self.timings, [(stats.epoch, f"{stats.seconds:.3f}")], "a")


def fit(net: CapsuleNetwork, train: Dataset, val: Dataset, cfg: ExperimentConfig, out: Path,
        epochs: int, config_record: dict, adam: AdamState | None = None, start_epoch: int = 0,
        extra: dict | None = None) -> dict:
    """Train for ``epochs`` more epochs, writing the run directory as we go.

    ``model.ckpt`` always holds the latest state and ``model.best.ckpt`` the
    best validation accuracy seen (the latest if there is no validation set).
    """
    writer = RunWriter(out)
    opt = Adam(net.parameters(), cfg.optimizer.lr, cfg.optimizer.beta1, cfg.optimizer.beta2,
               cfg.optimizer.epsilon)
    if adam is not None:
        opt.state = adam
    extra = dict(extra or {})

    def checkpoint(epoch, **more):
        return Checkpoint(net, config_record, epoch, opt.state, {**extra, **more})

    save_checkpoint(out / "model.ckpt", checkpoint(start_epoch))
    save_checkpoint(out / "model.best.ckpt", checkpoint(start_epoch))
    history, digests = [], [backbone_digest(net)]
    best_acc, best_epoch = -1.0, start_epoch
    for epoch in range(start_epoch, start_epoch + epochs):
        t0 = time.monotonic()
        tr_loss, tr_acc = train_epoch(net, opt, train, cfg.batch_size, cfg.seed, epoch)
        val_loss, val_acc = evaluate(net, val)
        stats = EpochStats(epoch + 1, tr_loss, tr_acc, val_loss, val_acc, time.monotonic() - t0)
        writer.add_epoch(stats)
        history.append(stats)
        digests.append(backbone_digest(net))
        log.info("epoch %d: train loss %.4f acc %.4f | val loss %.4f acc %.4f | %.1fs",
                 stats.epoch, tr_loss, tr_acc, val_loss, val_acc, stats.seconds)
        save_checkpoint(out / "model.ckpt", checkpoint(epoch + 1))
        score = tr_acc if np.isnan(val_acc) else val_acc
        if score > best_acc:
            best_acc, best_epoch = score, epoch + 1
            save_checkpoint(out / "model.best.ckpt", checkpoint(epoch + 1, best_val_acc=score))
    seconds = [h.seconds for h in history]
    return {
        "epochs_run": epochs,
        "best_epoch": best_epoch,
        "best_val_acc": None if best_acc < 0 else best_acc,
        "epoch_seconds": float(np.mean(seconds)) if seconds else None,
        "backbone_sha256": digests,
        "final_train_loss": history[-1].train_loss if history else None,
    }


# -- commands -------------------------------------------------------------------------------

def _cost_fields(net: CapsuleNetwork) -> dict:
    cost = network_cost(net)
    return {"bottleneck": cost.bottleneck, "primary_caps": cost.primary_caps,
            "total_flops": cost.total_flops, "params": cost.params, "cost": cost.to_dict()}


def cmd_train(cfg: ExperimentConfig) -> dict:
    cfg = cfg.materialized().validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.archived.json").write_text(dump_json(cfg.to_dict()))

    train_all, test = load_datasets(cfg)
    train, val = train_val_split(train_all, cfg)
    net = build_network(cfg.backbone_spec(), cfg.dataset.class_count, cfg.D1, cfg.D2,
                        cfg.routing_iterations, cfg.seed, cfg.np_dtype)
    check_compatible(net, train_all)
    set_frozen(net.backbone, cfg.freeze_backbone)

    result = fit(net, train, val, cfg, out, cfg.epochs, cfg.model_identity())
    best = load_checkpoint(out / "model.best.ckpt").net
    test_loss, test_acc = evaluate(best, test)
    _, last_acc = evaluate(net, test)
    summary = {
        "kind": "train",
        "pruned_ratio": 0.0,
        "frozen": cfg.freeze_backbone,
        "seed": cfg.seed,
        "accuracy": test_acc,
        "test_loss": test_loss,
        "last_accuracy": last_acc,
        "flops_reduction": 0.0,
        **_cost_fields(net),
        **result,
    }
    (out / "summary.json").write_text(dump_json(summary))
    return summary


def cmd_eval(checkpoint_path, cfg: ExperimentConfig | None = None) -> dict:
    """Test accuracy and recomputed cost of a checkpoint.

    Without an explicit config the checkpoint's own dataset settings are used.
    """
    ck = load_checkpoint(checkpoint_path)
    if cfg is None:
        cfg = ExperimentConfig.from_dict({**ck.config, "out": str(Path(checkpoint_path).parent)})
    _, test = load_datasets(cfg)
    test = test.astype(ck.net.dtype)
    check_compatible(ck.net, test)
    loss, acc = evaluate(ck.net, test)
    return {"accuracy": acc, "loss": loss, "samples": len(test), **_cost_fields(ck.net)}


def cmd_prune(checkpoint_path, ratio: float, out, finetune_epochs: int | None = None,
              freeze_backbone: bool | None = None) -> dict:
    """score -> plan -> simplify -> finetune -> eval, with a before/after report."""
    ck = load_checkpoint(checkpoint_path)
    cfg = ExperimentConfig.from_dict({**ck.config, "out": str(out)})
    if finetune_epochs is None:
        finetune_epochs = cfg.finetune_epochs
    if not 0 <= ratio < 1:
        raise ConfigError(f"prune ratio must be in [0, 1), got {ratio}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    train_all, test = load_datasets(cfg)
    check_compatible(ck.net, test)
    train, val = train_val_split(train_all, cfg)
    net = ck.net
    if freeze_backbone is not None:
        set_frozen(net.backbone, freeze_backbone)
    before_cost = network_cost(net)
    _, before_acc = evaluate(net, test)

    plan = build_prune_plan(score_channels(net.backbone), ratio, net.primary.D1)
    pruned = simplify_network(net, plan)
    after_cost = network_cost(pruned)
    _, acc_no_ft = evaluate(pruned, test)

    new_cfg = ExperimentConfig.from_dict({
        **cfg.to_dict(), "backbone": pruned.backbone.spec.to_dict(), "prune_ratio": ratio,
        "freeze_backbone": pruned.backbone.frozen, "finetune_epochs": finetune_epochs})
    (out / "config.archived.json").write_text(dump_json(new_cfg.to_dict()))
    # Shapes changed, so optimizer moments restart; the epoch counter continues.
    result = fit(pruned, train, val, new_cfg, out, finetune_epochs, new_cfg.model_identity(),
                 start_epoch=ck.epoch, extra={"prune_plan": plan.to_dict(), "parent": str(checkpoint_path)})
    final = load_checkpoint(out / "model.best.ckpt").net if finetune_epochs else pruned
    _, after_acc = evaluate(final, test)

    reduction = 1 - after_cost.total_flops / before_cost.total_flops
    rows = [
        {"pruned_ratio": 0.0, "flops_reduction": 0.0, "bottleneck": before_cost.bottleneck,
         "primary_caps": before_cost.primary_caps, "total_flops": before_cost.total_flops,
         "params": before_cost.params, "accuracy": before_acc},
        {"pruned_ratio": ratio, "flops_reduction": 100 * reduction, "bottleneck": after_cost.bottleneck,
         "primary_caps": after_cost.primary_caps, "total_flops": after_cost.total_flops,
         "params": after_cost.params, "epoch_seconds": result["epoch_seconds"], "accuracy": after_acc},
    ]
    report = {
        "ratio": ratio,
        "kept_channels": plan.kept_counts,
        "flops_reduction": reduction,
        "before": {"accuracy": before_acc, "cost": before_cost.to_dict()},
        "after": {"accuracy": after_acc, "accuracy_before_finetune": acc_no_ft, "cost": after_cost.to_dict()},
        "finetune_epochs": finetune_epochs,
    }
    (out / "prune_report.json").write_text(dump_json(report))
    (out / "prune_report.txt").write_text(format_table(rows))
    summary = {
        "kind": "prune",
        "pruned_ratio": ratio,
        "frozen": pruned.backbone.frozen,
        "seed": cfg.seed,
        "accuracy": after_acc,
        "accuracy_before_finetune": acc_no_ft,
        "flops_reduction": 100 * reduction,
        **_cost_fields(final),
        **result,
    }
    (out / "summary.json").write_text(dump_json(summary))
    return report


def find_runs(run_dir) -> list[Path]:
    root = Path(run_dir)
    if not root.is_dir():
        raise NoRunsError(f"no runs: {root} is not a directory")
    return sorted(p.parent for p in root.rglob("summary.json"))


def cmd_report(run_dir) -> dict:
    """Aggregate every completed run below ``run_dir`` into a text table, JSON rows and a FLOPs-accuracy CSV."""
    runs = find_runs(run_dir)
    if not runs:
        raise NoRunsError(f"no runs found under {run_dir}")
    rows = []
    for path in runs:
        s = json.loads((path / "summary.json").read_text())
        rows.append({
            "run": str(path.relative_to(run_dir)) if path != Path(run_dir) else ".",
            "pruned_ratio": s["pruned_ratio"], "flops_reduction": s.get("flops_reduction"),
            "bottleneck": s["bottleneck"], "primary_caps": s["primary_caps"],
            "total_flops": s["total_flops"], "params": s["params"],
            "epoch_seconds": s.get("epoch_seconds"), "accuracy": s["accuracy"], "frozen": s["frozen"],
        })
    rows.sort(key=lambda r: (r["pruned_ratio"], r["frozen"], r["run"]))
    root = Path(run_dir)
    table = format_table(rows)
    (root / "report.txt").write_text(table)
    (root / "report.json").write_text(dump_json(rows))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("total_flops", "accuracy", "frozen"))
    for r in rows:
        w.writerow((r["total_flops"], repr(r["accuracy"]), str(r["frozen"]).lower()))
    (root / "flops_accuracy.csv").write_text(buf.getvalue())
    return {"rows": rows, "table": table}
