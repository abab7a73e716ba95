"""Experiment execution: training loops, evaluation, ablations, audits.

Every run owns an output directory holding the resolved config (with
its hash), JSON-lines per-epoch metrics, a CSV of the same curves, and
a final checkpoint.  Metrics files contain only deterministic fields,
so identical configs reproduce identical bytes.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapter import count_parameters
from .analysis import (build_transfer_matrix, complexity_probe,
                       deviation_bound_check, kernel_perturbation)
from .autodiff import Tensor
from .config import ExperimentConfig
from .consistency import (ProjectionHead, cross_entropy, feature_loss,
                          prediction_loss, total_loss)
from .data import generate_dataset
from .errors import ConfigError
from .geometry import save_pointcloud
from .model import Batch, Model, ModelConfig
from .train import AdamW, OptimConfig, compute_gradients, save_checkpoint

log = logging.getLogger(__name__)

_METRIC_FIELDS = ("epoch", "lr", "loss_total", "loss_task", "loss_feat",
                  "loss_pred", "train_acc", "test_acc", "feat_disc",
                  "pred_disc")


@dataclass
class RunSummary:
    test_acc: float
    feat_disc: float
    pred_disc: float
    epochs: int
    trainable: int
    digest: str

    def as_dict(self) -> dict:
        return self.__dict__.copy()


def _write_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(cfg.raw)
    payload["config_hash"] = cfg.digest
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2) + "\n")


def _prepare_split(model: Model, clouds, cache: bool) -> Batch:
    prepared = [model.prepare_cloud(c) for c in clouds]
    batch = model.make_batch(prepared)
    return model.cache_tokens(batch) if cache else batch


def _minibatches(total: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(total)
    for start in range(0, total, batch_size):
        yield order[start:start + batch_size]


def evaluate(model: Model, batch: Batch, tau: float) -> tuple[float, float, float]:
    """Test accuracy plus both cross-serialization discrepancies."""
    with ad.no_grad():
        bound = model.store.bind()
        res = model.forward(bound, batch)
        pred = np.argmax(res.mean_logits().data, axis=-1)
        acc = float(np.mean(pred == batch.labels))
        head = ProjectionHead(bound["proj.w"])
        feat = feature_loss(res.tokens_final1, res.tokens_final2, head).item()
        pdisc = prediction_loss(res.logits1, res.logits2, tau).item()
    return acc, feat, pdisc


def _loss_on_batch(model: Model, bound, batch: Batch, train_cfg):
    """Full objective on one batch; returns (loss Tensor, report, #correct)."""
    res = model.forward(bound, batch)
    mean_logits = res.mean_logits()
    task = cross_entropy(mean_logits, batch.labels)
    head = ProjectionHead(bound["proj.w"])
    feat = feature_loss(res.tokens_final1, res.tokens_final2, head)
    pred = prediction_loss(res.logits1, res.logits2, train_cfg.tau)
    loss = task
    if train_cfg.alpha > 0:
        loss = loss + train_cfg.alpha * feat
    if train_cfg.beta > 0:
        loss = loss + train_cfg.beta * pred
    _, report = total_loss(task.item(), feat.item(), pred.item(),
                           train_cfg.alpha, train_cfg.beta, train_cfg.tau)
    correct = int(np.sum(np.argmax(mean_logits.data, axis=-1) == batch.labels))
    return loss, report, correct


def _augment_clouds(clouds, rng: np.random.Generator):
    from .geometry import PointCloud, normalize
    out = []
    for c in clouds:
        scale = rng.uniform(0.8, 1.25, size=3)
        shift = rng.uniform(-0.1, 0.1, size=3)
        out.append(normalize(PointCloud(c.points * scale + shift, c.label)))
    return out


def train_run(cfg: ExperimentConfig, out_dir: Path) -> RunSummary:
    _write_config(cfg, out_dir)
    t = cfg.train
    rng = np.random.default_rng(t.seed)
    dataset = generate_dataset(cfg.data, t.seed)
    model = Model(cfg.model, rng)
    model.set_tuning_mode(t.tuning)

    cache = t.tuning != "full_ft" and not t.augment
    test_batch = _prepare_split(model, dataset.test, cache)
    train_batch = _prepare_split(model, dataset.train, cache)

    if t.tuning == "linear_probe":
        return _probe_run(cfg, model, train_batch, test_batch, out_dir)

    opt = AdamW(model.store, OptimConfig(
        lr=t.lr, weight_decay=t.wd, epochs=t.epochs, warmup_epochs=t.warmup))

    metrics_path = out_dir / "metrics.jsonl"
    rows = []
    with metrics_path.open("w") as mf:
        for epoch in range(t.epochs):
            if t.augment:
                shuffled = _augment_clouds(
                    dataset.train, np.random.default_rng([t.seed, 30_000, epoch]))
                train_batch = _prepare_split(model, shuffled, False)
            epoch_rng = np.random.default_rng([t.seed, 20_000, epoch])
            totals = np.zeros(4)
            seen = correct = 0
            for idx in _minibatches(train_batch.size, t.batch, epoch_rng):
                sub = train_batch.subset(idx)
                report_box = {}

                def loss_fn(bound, sub=sub, box=report_box):
                    loss, report, n_ok = _loss_on_batch(model, bound, sub, t)
                    box["report"] = report
                    box["correct"] = n_ok
                    return loss

                _, grads = compute_gradients(loss_fn, model.store)
                opt.step(grads, epoch)
                rep = report_box["report"]
                totals += np.array([rep.total, rep.task, rep.feat, rep.pred]) * len(idx)
                correct += report_box["correct"]
                seen += len(idx)
            test_acc, feat_d, pred_d = evaluate(model, test_batch, t.tau)
            row = {
                "epoch": epoch, "lr": opt.learning_rate(epoch),
                "loss_total": totals[0] / seen, "loss_task": totals[1] / seen,
                "loss_feat": totals[2] / seen, "loss_pred": totals[3] / seen,
                "train_acc": correct / seen, "test_acc": test_acc,
                "feat_disc": feat_d, "pred_disc": pred_d,
            }
            rows.append(row)
            mf.write(json.dumps(row) + "\n")
    _write_curves(out_dir / "curves.csv", rows)
    save_checkpoint(out_dir / "final.ckpt", model.store, opt,
                    extra={"epochs": t.epochs, "config_hash": cfg.digest})
    final = rows[-1]
    return RunSummary(final["test_acc"], final["feat_disc"], final["pred_disc"],
                      t.epochs, model.store.num_trainable(), cfg.digest)


def _probe_run(cfg: ExperimentConfig, model: Model, train_batch: Batch,
               test_batch: Batch, out_dir: Path) -> RunSummary:
    """Head-only training on precomputed frozen features."""
    t = cfg.train
    with ad.no_grad():
        bound = model.store.bind()
        tr = model.forward(bound, train_batch)
        te = model.forward(bound, test_batch)
        feats = {
            "train": (tr.tokens_final1.mean(axis=-2).data,
                      tr.tokens_final2.mean(axis=-2).data),
            "test": (te.tokens_final1.mean(axis=-2).data,
                     te.tokens_final2.mean(axis=-2).data),
        }
    opt = AdamW(model.store, OptimConfig(
        lr=t.lr, weight_decay=t.wd, epochs=t.epochs, warmup_epochs=t.warmup))

    def head_logits(bound, which, idx):
        f1, f2 = feats[which]
        w_t = ad.swapaxes(bound["head.w"], 0, 1)
        l1 = ad.matmul(Tensor(f1[idx]), w_t) + bound["head.b"]
        l2 = ad.matmul(Tensor(f2[idx]), w_t) + bound["head.b"]
        return 0.5 * (l1 + l2)

    labels_tr = train_batch.labels
    rows = []
    metrics_path = out_dir / "metrics.jsonl"
    with metrics_path.open("w") as mf:
        for epoch in range(t.epochs):
            epoch_rng = np.random.default_rng([t.seed, 20_000, epoch])
            task_sum = seen = correct = 0
            for idx in _minibatches(train_batch.size, t.batch, epoch_rng):
                def loss_fn(bound, idx=idx):
                    return cross_entropy(
                        head_logits(bound, "train", idx), labels_tr[idx])

                loss_val, grads = compute_gradients(loss_fn, model.store)
                opt.step(grads, epoch)
                task_sum += loss_val * len(idx)
                seen += len(idx)
                with ad.no_grad():
                    lg = head_logits(model.store.bind(), "train", idx)
                    correct += int(np.sum(np.argmax(lg.data, -1) == labels_tr[idx]))
            with ad.no_grad():
                lg = head_logits(model.store.bind(), "test",
                                 np.arange(test_batch.size))
                test_acc = float(np.mean(np.argmax(lg.data, -1) == test_batch.labels))
            row = {"epoch": epoch, "lr": opt.learning_rate(epoch),
                   "loss_total": task_sum / seen, "loss_task": task_sum / seen,
                   "loss_feat": 0.0, "loss_pred": 0.0,
                   "train_acc": correct / seen, "test_acc": test_acc,
                   "feat_disc": 0.0, "pred_disc": 0.0}
            rows.append(row)
            mf.write(json.dumps(row) + "\n")
    _write_curves(out_dir / "curves.csv", rows)
    save_checkpoint(out_dir / "final.ckpt", model.store, opt,
                    extra={"epochs": t.epochs, "config_hash": cfg.digest})
    final = rows[-1]
    return RunSummary(final["test_acc"], 0.0, 0.0, t.epochs,
                      model.store.num_trainable(), cfg.digest)


def _write_curves(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=_METRIC_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in _METRIC_FIELDS})


def eval_run(cfg: ExperimentConfig, out_dir: Path) -> dict:
    _write_config(cfg, out_dir)
    rng = np.random.default_rng(cfg.train.seed)
    dataset = generate_dataset(cfg.data, cfg.train.seed)
    model = Model(cfg.model, rng)
    if cfg.checkpoint:
        from .train import load_checkpoint
        load_checkpoint(cfg.checkpoint, model.store)
    test_batch = _prepare_split(model, dataset.test, cache=True)
    acc, feat_d, pred_d = evaluate(model, test_batch, cfg.train.tau)
    result = {"test_acc": acc, "feat_disc": feat_d, "pred_disc": pred_d,
              "config_hash": cfg.digest}
    (out_dir / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def analyze_run(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Kernel, rank, deviation, and parameter audits on a live model."""
    from .ssm import ScanCapture, block_forward, selective_scan

    _write_config(cfg, out_dir)
    rng = np.random.default_rng(cfg.train.seed)
    dataset = generate_dataset(cfg.data, cfg.train.seed)
    model = Model(cfg.model, rng)
    if cfg.checkpoint:
        from .train import load_checkpoint
        load_checkpoint(cfg.checkpoint, model.store)
    batch = model.make_batch([model.prepare_cloud(dataset.test[0])])

    report: dict = {"config_hash": cfg.digest,
                    "adapter_params_per_module":
                        count_parameters(cfg.model.adapter_config()),
                    "trainable_total": model.store.num_trainable(),
                    "blocks": []}
    with ad.no_grad():
        bound = model.store.bind()
        tp = model.tokenizer_params(bound)
        from .tokenizer import encode_patches, fuse_branches, order_aware_global
        seq1 = encode_patches(batch.neighborhoods1, tp, branch=1)
        seq2 = encode_patches(batch.neighborhoods2, tp, branch=2)
        e1 = order_aware_global(seq1, tp)
        z1, _ = fuse_branches(seq1, seq2, model.fusion_params(bound),
                              batch.order1, batch.order2)
        z = z1.tokens
        for layer in range(cfg.model.blocks):
            blk = model.block_params(bound, layer)
            adapter_p = model.adapter_params(bound, layer)
            cap_frozen = ScanCapture()
            block_forward(z, blk, None, None, cap_frozen)
            frozen_bundle = cap_frozen.bundle()
            x = cap_frozen.inputs()
            y_scan, _ = selective_scan(x, frozen_bundle)
            kernel_err = float(np.abs(
                build_transfer_matrix(frozen_bundle).apply(x) - y_scan).max())
            entry = {"layer": layer, "kernel_vs_scan_max_err": kernel_err}
            if adapter_p is not None:
                cap_ctl = ScanCapture()
                z_next = block_forward(z, blk, adapter_p, e1, cap_ctl)
                ctl_bundle = cap_ctl.bundle(frozen=cap_frozen)
                perturb = kernel_perturbation(
                    build_transfer_matrix(frozen_bundle),
                    build_transfer_matrix(ctl_bundle),
                    controls=cap_ctl.controls,
                    u_mat=bound[f"block{layer}.adapter.u_mat"].data,
                    v_mat=bound[f"block{layer}.adapter.v_mat"].data)
                dev = deviation_bound_check(frozen_bundle, ctl_bundle, x)
                entry.update({
                    "max_kernel_change": perturb.max_block_change(),
                    "control_support_max": max(perturb.support_sizes, default=0),
                    "rank_bound_ok": all(
                        rk <= s <= cfg.model.r for rk, s in
                        zip(perturb.ranks, perturb.support_sizes)),
                    "deviation": dev.as_dict(),
                })
            else:
                z_next = block_forward(z, blk, None, None)
            report["blocks"].append(entry)
            z = z_next
    (out_dir / "analysis.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def complexity_run(cfg: ExperimentConfig, out_dir: Path) -> dict:
    _write_config(cfg, out_dir)
    probe_cfg = ModelConfig(
        d=cfg.complexity_probe_d, n=cfg.model.n, k=cfg.model.k, blocks=1,
        n_state=cfg.model.n_state, d_phi=cfg.model.d_phi, r=max(cfg.model.r, 1),
        controller=cfg.model.controller, fusion=cfg.model.fusion,
        classes=cfg.model.classes, adapters_on=True)
    lengths = list(cfg.complexity_lengths)
    on = complexity_probe(probe_cfg, lengths, adapter_on=True,
                          seed=cfg.train.seed)
    off = complexity_probe(probe_cfg, lengths, adapter_on=False,
                           seed=cfg.train.seed)
    result = {"adapter_on": on, "adapter_off": off,
              "slope_ratio": on["slope"] / off["slope"],
              "config_hash": cfg.digest}
    (out_dir / "complexity.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def generate_run(cfg: ExperimentConfig, out_dir: Path) -> dict:
    _write_config(cfg, out_dir)
    dataset = generate_dataset(cfg.data, cfg.train.seed)
    manifest = {"classes": list(cfg.data.classes), "seed": cfg.train.seed,
                "train": [], "test": [], "config_hash": cfg.digest}
    for split, clouds in (("train", dataset.train), ("test", dataset.test)):
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for i, cloud in enumerate(clouds):
            name = f"{split}_{i:05d}.txt"
            save_pointcloud(cloud, split_dir / name)
            manifest[split].append({"file": f"{split}/{name}",
                                    "label": int(cloud.label)})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return {"train": len(dataset.train), "test": len(dataset.test)}


# -- ablations ----------------------------------------------------------------


def _component_rows():
    base = {"adapters_on": False, "alpha": 0.0, "beta": 0.0, "tuning": "mantis"}
    rows = [
        ("linear_probe", {"tuning": "linear_probe"}),
        ("full_ft", {"tuning": "full_ft", "adapters_on": False}),
        ("feat", dict(base, alpha=None)),
        ("pred", dict(base, beta=None)),
        ("feat+pred", dict(base, alpha=None, beta=None)),
        ("saa", dict(base, adapters_on=True)),
        ("saa+feat", dict(base, adapters_on=True, alpha=None)),
        ("saa+pred", dict(base, adapters_on=True, beta=None)),
        ("saa+feat+pred", dict(base, adapters_on=True, alpha=None, beta=None)),
    ]
    return rows


def ablation_values(axis: str):
    if axis == "curves":
        return [("random", {"curves": ["random:0", "random:1"]}),
                ("hilbert+trans-hilbert", {"curves": ["hilbert", "trans-hilbert"]}),
                ("z+trans-z", {"curves": ["z", "trans-z"]}),
                ("hilbert+z", {"curves": ["hilbert", "z"]}),
                ("trans-hilbert+trans-z", {"curves": ["trans-hilbert", "trans-z"]})]
    if axis == "r":
        return [(f"r={r}", {"r": r}) for r in (8, 16, 32, 64)]
    if axis == "controller":
        return [(c, {"controller": c})
                for c in ("dense", "sigmoid", "tanh", "hard", "soft")]
    if axis == "fusion":
        return [(f, {"fusion": f})
                for f in ("add", "concat", "gated", "xattn", "concat_mlp")]
    if axis == "modulate":
        subsets = [("A",), ("B", "C"), ("Delta",), ("A", "Delta"),
                   ("B", "C", "Delta"), ("A", "B", "C", "Delta")]
        return [("+".join(s), {"modulate": list(s)}) for s in subsets]
    if axis == "components":
        return _component_rows()
    raise ConfigError(f"unknown ablation axis {axis!r}")


def _mutate_config(cfg: ExperimentConfig, mutation: dict) -> ExperimentConfig:
    from .config import resolve
    raw = json.loads(json.dumps(cfg.raw))  # deep copy
    raw["mode"] = "train"
    for key, value in mutation.items():
        if key in ("curves",):
            raw["model"][key] = value
        elif key in ("r", "controller", "fusion", "modulate"):
            raw["model"]["saa"][key] = value
        elif key == "adapters_on":
            raw["model"]["adapters_on"] = value
        elif key == "tuning":
            raw["train"]["tuning"] = value
        elif key in ("alpha", "beta"):
            # None marks "keep the configured weight", anything else sets it
            raw["train"][key] = cfg.raw["train"][key] if value is None else value
        else:
            raise ConfigError(f"unsupported ablation mutation {key!r}")
    return resolve(raw)


def ablate_run(cfg: ExperimentConfig, out_dir: Path) -> list[dict]:
    _write_config(cfg, out_dir)
    axis = cfg.ablation_axis
    results = []
    for name, mutation in ablation_values(axis):
        row_cfg = _mutate_config(cfg, mutation)
        row_dir = out_dir / f"{axis}_{name.replace('+', '_')}"
        summary = train_run(row_cfg, row_dir)
        saa_count = (count_parameters(row_cfg.model.adapter_config())
                     if row_cfg.model.adapters_on else 0)
        results.append({"axis": axis, "value": name,
                        "test_acc": summary.test_acc,
                        "saa_params_per_module": saa_count,
                        "trainable_total": summary.trainable,
                        "feat_disc": summary.feat_disc,
                        "pred_disc": summary.pred_disc})
    table_path = out_dir / "table.csv"
    with table_path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(results[0]))
        writer.writeheader()
        writer.writerows(results)
    lines = [f"ablation axis: {axis}"]
    for row in results:
        lines.append(
            f"  {row['value']:<24} acc={row['test_acc']:.4f} "
            f"saa_params={row['saa_params_per_module']} "
            f"trainable={row['trainable_total']}")
    (out_dir / "table.txt").write_text("\n".join(lines) + "\n")
    return results


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path):
    """Dispatch a resolved config to its mode's runner."""
    out_dir = Path(out_dir)
    started = time.perf_counter()
    dispatch = {
        "train": train_run, "eval": eval_run, "analyze": analyze_run,
        "ablate": ablate_run, "complexity": complexity_run,
        "generate": generate_run,
    }
    result = dispatch[cfg.mode](cfg, out_dir)
    log.info("mode=%s finished in %.1fs -> %s", cfg.mode,
             time.perf_counter() - started, out_dir)
    return result
