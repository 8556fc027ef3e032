"""Experiment orchestration: configs, training runs, sweeps, and file output.

The only module with side effects. Every run is fully determined by
(config, seed); outputs are a JSON-lines run log, a metrics CSV, a flat
binary parameter dump with a JSON header, and plot-data CSVs.
"""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import advmetrics, continual as cl, dro, selection
from .datasets import (
    DistractorTextSpec,
    GroupedDataset,
    GroupMetrics,
    TwoDomainSpec,
    batches,
    gen_distractor_text,
    gen_two_domain_gaussian,
    group_metrics,
    inject_label_noise,
    load_csv,
    save_csv,
)
from .diffcore import (
    Example,
    ModelSpec,
    ModelState,
    forward_logits,
    init_params,
    nll_loss_batch,
    softmax,
)


class ConfigError(ValueError):
    """Unknown or malformed configuration key/value."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# Every legal config key with its default. Values are parsed with the same
# coercion as --set overrides, so the table doubles as documentation.
DEFAULTS: Dict[str, object] = {
    # data
    "dataset": "two_domain",          # two_domain | distractor | path to CSV
    "data.total_points": 10000,
    "data.minority_ratio": 1.0 / 51.0,
    "data.sigma": 0.5,
    "data.n": 2000,
    "data.vocab_size": 32,
    "data.seq_len": 8,
    "data.bias": 0.95,
    "data.p_noise": 0.0,
    "data.test_n": 2000,
    # model
    "model.arch": "auto",             # auto | linear | mlp | embed_bag
    "model.hidden": 8,
    "model.embed_dim": 8,
    # optimization
    "method": "erm",                  # erm | nonparam | group_dro | pdro | rpdro
    "lr": 0.1,
    "batch_size": 64,
    "epochs": 10,
    "tau": 0.1,
    "kappa": 1.0,
    "k_window": 5,
    "adv_lr": 0.05,
    "adv_steps": 1,
    "adv_sigma_scale": 1.0,
    "checkpoint_every": 0,
    "eta_group": 0.1,
    "beta": 1.0,
    "norm_mode": "batch_level",       # batch_level | self_norm
    "project": True,
    "reverse_kl": True,
    # selection
    "selection": "minmax",            # minmax | greedy | last
    "selection.loss": "auto",         # auto | nll | zero_one
    "selection.kl_threshold": math.log(10.0),
    # continual
    "cl.method": "finetune",
    "cl.tasks": 5,
    "cl.points": 400,
    "cl.sigma": 0.5,
    "cl.hidden": 16,
    "cl.lr": 0.1,
    "cl.epochs": 3,
    "cl.batch_size": 16,
    "cl.alpha": 1.0,
    "cl.gamma": 0.9,
    "cl.ewc_lambda": 1.0,
    "cl.capacity": 200,
    "cl.fisher_samples": 500,
    "cl.grad_noise": 0.0,
    # attack
    "attack.constraint": "none",      # none | knn | charswap-oov
    "attack.k": 10,
    "attack.sign_normalize": False,
    "attack.steps": 1,
    "attack.alpha": 0.0,
    "attack.n": 200,
    # sweep: any "sweep.<key>" with a comma-separated value list is legal
}


def coerce_value(text: str) -> object:
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if lowered == "inf":
        return math.inf
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _check_key(key: str) -> None:
    if key in DEFAULTS:
        return
    if key.startswith("sweep.") and key[len("sweep."):] in DEFAULTS:
        return
    raise ConfigError(f"unknown config key: {key!r}")


def parse_config(path: str) -> Dict[str, object]:
    """Read a flat key=value config file; '#' starts a comment."""
    out: Dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}: line {lineno}: expected key=value")
            key, value = stripped.split("=", 1)
            key = key.strip()
            _check_key(key)
            out[key] = coerce_value(value)
    return out


def apply_overrides(config: Dict[str, object], overrides: Sequence[str]) -> Dict[str, object]:
    out = dict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        _check_key(key)
        out[key] = coerce_value(value)
    return out


def resolved(config: Dict[str, object]) -> Dict[str, object]:
    out = dict(DEFAULTS)
    for key, value in config.items():
        _check_key(key)
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# datasets


def build_datasets(cfg: Dict[str, object], seed: int) -> Tuple[GroupedDataset, GroupedDataset, GroupedDataset]:
    """(train, valid, test) for the configured dataset family."""
    kind = cfg["dataset"]
    if kind == "two_domain":
        train = gen_two_domain_gaussian(
            TwoDomainSpec(cfg["data.total_points"], cfg["data.minority_ratio"],
                          cfg["data.sigma"], seed=seed)
        )
        valid = gen_two_domain_gaussian(
            TwoDomainSpec(max(cfg["data.total_points"] // 5, 50),
                          cfg["data.minority_ratio"], cfg["data.sigma"], seed=seed + 1)
        )
        test = gen_two_domain_gaussian(
            TwoDomainSpec(cfg["data.test_n"], 0.5, cfg["data.sigma"], seed=seed + 2)
        )
    elif kind == "distractor":
        base = DistractorTextSpec(cfg["data.n"], cfg["data.vocab_size"],
                                  cfg["data.seq_len"], cfg["data.bias"], seed=seed)
        train = gen_distractor_text(base)
        valid = gen_distractor_text(
            DistractorTextSpec(max(cfg["data.n"] // 5, 50), cfg["data.vocab_size"],
                               cfg["data.seq_len"], cfg["data.bias"], seed=seed + 1)
        )
        # held-out split removes the spurious correlation entirely
        test = gen_distractor_text(
            DistractorTextSpec(cfg["data.test_n"], cfg["data.vocab_size"],
                               cfg["data.seq_len"], 0.5, seed=seed + 2)
        )
    else:
        full = load_csv(kind)
        n = len(full.examples)
        train = full.subset(range(0, int(n * 0.8)))
        valid = full.subset(range(int(n * 0.8), int(n * 0.9)))
        test = full.subset(range(int(n * 0.9), n))
    p_noise = cfg["data.p_noise"]
    if p_noise > 0:
        train = inject_label_noise(train, p_noise, seed + 3)
        valid = inject_label_noise(valid, p_noise, seed + 4)
    return train, valid, test


def build_model_spec(cfg: Dict[str, object], train: GroupedDataset) -> ModelSpec:
    labels = [ex.label for ex in train.examples]
    num_classes = max(max(labels) + 1, 2)
    arch = cfg["model.arch"]
    first = np.asarray(train.examples[0].input)
    if arch == "auto":
        arch = "embed_bag" if first.dtype.kind in "iu" else "linear"
    if arch == "embed_bag":
        vocab = max(cfg["data.vocab_size"],
                    int(max(np.asarray(ex.input).max() for ex in train.examples)) + 1)
        return ModelSpec("embed_bag", num_classes=num_classes,
                         vocab_size=vocab, embed_dim=cfg["model.embed_dim"])
    if arch == "mlp":
        return ModelSpec("mlp", input_dim=len(first), num_classes=num_classes,
                         hidden_units=cfg["model.hidden"])
    return ModelSpec("linear", input_dim=len(first), num_classes=num_classes)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: ModelState
    checkpoints: List[ModelState]
    records: List[selection.AdversaryRecord]
    chosen_index: int
    valid_metrics: GroupMetrics
    test_metrics: GroupMetrics
    log_rows: List[dict] = field(default_factory=list)


def _adversary_for(cfg: Dict[str, object], spec: ModelSpec,
                   train: GroupedDataset, seed: int):
    method = cfg["method"]
    if method == "pdro":
        x = np.stack([np.asarray(ex.input, dtype=float) for ex in train.examples])
        mean0 = x.mean(axis=0)
        sigma = float(np.sqrt(x.var(axis=0).mean())) * float(cfg["adv_sigma_scale"])
        return dro.GaussianAdversary(mean0.copy(), max(sigma, 1e-6), mean0)
    if method == "rpdro":
        return dro.RatioAdversary(init_params(spec, seed + 101))
    return None


def _valid_record(method: str, adversary, valid: GroupedDataset,
                  record_id: int) -> Optional[selection.AdversaryRecord]:
    if method == "pdro":
        raw = dro.pdro_model_weights(adversary, valid.examples)
        if raw.sum() == 0:
            return None
        return selection.make_record(record_id, raw)
    if method == "rpdro":
        f = adversary.f_values(valid.examples)
        shifted = np.exp(f - f.max())
        return selection.make_record(record_id, shifted)
    return None


def train_run(cfg: Dict[str, object], seed: int,
              datasets: Optional[Tuple[GroupedDataset, GroupedDataset, GroupedDataset]] = None,
              ) -> TrainResult:
    """One full training run: optimize, checkpoint per epoch, select, evaluate."""
    cfg = resolved(cfg)
    method = cfg["method"]
    if method not in ("erm", "nonparam", "group_dro", "pdro", "rpdro"):
        raise ConfigError(f"unknown method: {method!r}")
    train, valid, test = datasets if datasets is not None else build_datasets(cfg, seed)
    spec = build_model_spec(cfg, train)
    model = init_params(spec, seed)

    dro_cfg = dro.DroConfig(
        method=method, lr=cfg["lr"], tau=cfg["tau"], kappa=cfg["kappa"],
        k_window=cfg["k_window"], adv_lr=cfg["adv_lr"], eta_group=cfg["eta_group"],
        beta_selfnorm=cfg["beta"], norm_mode=cfg["norm_mode"],
        project=cfg["project"], reverse_kl=cfg["reverse_kl"],
        adv_steps_per_model_step=cfg["adv_steps"],
    )
    adversary = _adversary_for(cfg, spec, train, seed)
    normalizer = dro.RunningNormalizer(cfg["k_window"]) if method == "pdro" else None
    gw = np.full(train.num_groups, 1.0 / train.num_groups)

    checkpoints: List[ModelState] = []
    records: List[selection.AdversaryRecord] = [selection.identity_record(len(valid.examples))]
    log_rows: List[dict] = []

    def take_checkpoint(step: int) -> None:
        checkpoints.append(model.copy())
        record = None
        if adversary is not None:
            record = _valid_record(method, adversary, valid, len(records))
            if record is not None:
                records.append(record)
        vm = group_metrics(model, valid)
        mean_valid_loss = float(nll_loss_batch(model, valid.examples).mean())
        if not math.isfinite(mean_valid_loss):
            raise DivergenceError(f"non-finite validation loss at step {step}")
        log_rows.append({
            "step": step, "split": "valid", "loss": mean_valid_loss,
            "robust_acc": vm.robust_accuracy, "average_acc": vm.average_accuracy,
            "adversary_kl": None if record is None else record.kl_estimate,
        })

    every = int(cfg["checkpoint_every"])
    step = 0
    for epoch in range(cfg["epochs"]):
        for idx in batches(train, cfg["batch_size"], seed=seed * 1000 + epoch):
            batch = [train.examples[i] for i in idx]
            if method == "erm":
                model = dro.erm_step(model, batch, cfg["lr"])
            elif method == "nonparam":
                losses = nll_loss_batch(model, batch)
                weights, _ = dro.nonparam_weights(losses, cfg["kappa"])
                from .diffcore import grad_params
                model = model.copy()
                model.params -= cfg["lr"] * grad_params(model, batch, weights)
            elif method == "group_dro":
                losses = nll_loss_batch(model, batch)
                groups = np.array([0 if ex.group is None else ex.group for ex in batch])
                counts = np.bincount(groups, minlength=train.num_groups)
                sums = np.bincount(groups, weights=losses, minlength=train.num_groups)
                present = counts > 0
                gl = np.zeros(train.num_groups)
                gl[present] = sums[present] / counts[present]
                gw = dro.group_dro_weights(gl, gw, cfg["eta_group"])
                weights = gw[groups] / np.maximum(counts[groups], 1)
                from .diffcore import grad_params
                model = model.copy()
                model.params -= cfg["lr"] * grad_params(model, batch, weights)
            else:
                model, adversary, normalizer = dro.simultaneous_step(
                    model, adversary, batch, dro_cfg, normalizer
                )
            if not np.all(np.isfinite(model.params)):
                raise DivergenceError(f"non-finite parameters at epoch {epoch}")
            step += 1
            if every > 0 and step % every == 0:
                take_checkpoint(step)
        if every == 0:
            take_checkpoint(step)
    if every > 0 and step % every != 0:
        take_checkpoint(step)

    loss_kind = cfg["selection.loss"]
    if loss_kind == "auto":
        loss_kind = "zero_one" if method == "rpdro" else "nll"
    if cfg["selection"] == "last":
        chosen = len(checkpoints) - 1
    elif cfg["selection"] == "greedy":
        state = selection.SelectionState(records=[records[0]])
        for i, ckpt in enumerate(checkpoints):
            rec = records[i + 1] if i + 1 < len(records) else None
            state = selection.greedy_minmax_update(
                state, ckpt, i, rec, valid,
                cfg["selection.kl_threshold"], loss_kind,
            )
        chosen = state.best_model_id
    else:
        chosen, _ = selection.minmax_select(
            checkpoints, records, valid, cfg["selection.kl_threshold"], loss_kind
        )
    best = checkpoints[chosen]
    return TrainResult(
        model=best, checkpoints=checkpoints, records=records, chosen_index=chosen,
        valid_metrics=group_metrics(best, valid),
        test_metrics=group_metrics(best, test), log_rows=log_rows,
    )


# ---------------------------------------------------------------------------
# persistence


def save_model_bin(model: ModelState, path: str) -> None:
    """Flat little-endian float64 dump preceded by a length-prefixed JSON header."""
    header = {
        "architecture": model.spec.architecture,
        "input_dim": model.spec.input_dim,
        "num_classes": model.spec.num_classes,
        "hidden_units": model.spec.hidden_units,
        "vocab_size": model.spec.vocab_size,
        "embed_dim": model.spec.embed_dim,
        "layout": {k: list(v) for k, v in model.layout.items()},
        "dtype": "<f8",
        "param_count": int(model.num_params),
    }
    blob = json.dumps(header).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(model.params.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_model_bin(path: str) -> ModelState:
    with open(path, "rb") as fh:
        (length,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(length).decode("utf-8"))
        params = np.frombuffer(fh.read(), dtype="<f8").copy()
    spec = ModelSpec(
        header["architecture"], input_dim=header["input_dim"],
        num_classes=header["num_classes"], hidden_units=header["hidden_units"],
        vocab_size=header["vocab_size"], embed_dim=header["embed_dim"],
    )
    if params.size != header["param_count"]:
        raise ValueError(f"{path}: parameter count mismatch")
    layout = {k: tuple(v) for k, v in header["layout"].items()}
    return ModelState(spec, params, layout)


def _write_jsonl(rows: Sequence[dict], path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    os.replace(tmp, path)


def _write_csv(header: Sequence[str], rows: Sequence[Sequence[object]], path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def _metrics_rows(name: str, metrics: GroupMetrics) -> List[List[object]]:
    rows = [[name, "robust_accuracy", metrics.robust_accuracy],
            [name, "average_accuracy", metrics.average_accuracy]]
    for g, acc in enumerate(metrics.per_group_accuracy):
        rows.append([name, f"group{g}_accuracy", "" if math.isnan(acc) else acc])
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: Dict[str, object], seed: int, out_dir: str) -> None:
    cfg = resolved(cfg)
    os.makedirs(out_dir, exist_ok=True)
    train, valid, test = build_datasets(cfg, seed)
    for name, ds in (("train", train), ("valid", valid), ("test", test)):
        save_csv(ds, os.path.join(out_dir, f"{name}.csv"))
    manifest = {"seed": seed, "config": {k: cfg[k] for k in sorted(cfg) if k.startswith("data") or k == "dataset"}}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, default=str)


def cmd_train(cfg: Dict[str, object], seed: int, out_dir: str) -> TrainResult:
    cfg = resolved(cfg)
    os.makedirs(out_dir, exist_ok=True)
    try:
        result = train_run(cfg, seed)
    except DivergenceError as err:
        _write_jsonl([{"aborted": True, "reason": str(err), "seed": seed}],
                     os.path.join(out_dir, "run.jsonl"))
        raise
    rows = list(result.log_rows)
    rows.append({
        "final": True, "chosen_checkpoint": result.chosen_index,
        "test_robust_acc": result.test_metrics.robust_accuracy,
        "test_average_acc": result.test_metrics.average_accuracy,
    })
    _write_jsonl(rows, os.path.join(out_dir, "run.jsonl"))
    _write_csv(["split", "metric", "value"],
               _metrics_rows("valid", result.valid_metrics)
               + _metrics_rows("test", result.test_metrics),
               os.path.join(out_dir, "metrics.csv"))
    save_model_bin(result.model, os.path.join(out_dir, "model.bin"))
    _write_csv(["epoch", "valid_loss", "robust_acc", "average_acc"],
               [[r["step"], r["loss"], r["robust_acc"], r["average_acc"]]
                for r in result.log_rows],
               os.path.join(out_dir, "plotdata_training.csv"))
    return result


def cmd_continual(cfg: Dict[str, object], seed: int, out_dir: str) -> cl.ContinualMetrics:
    cfg = resolved(cfg)
    os.makedirs(out_dir, exist_ok=True)
    tasks = cl.rotated_gaussian_tasks(cfg["cl.tasks"], cfg["cl.points"],
                                      cfg["cl.sigma"], seed=seed)
    config = cl.ContinualConfig(
        method=cfg["cl.method"], hidden_units=cfg["cl.hidden"], lr=cfg["cl.lr"],
        epochs=cfg["cl.epochs"], batch_size=cfg["cl.batch_size"],
        alpha=cfg["cl.alpha"], gamma=cfg["cl.gamma"],
        ewc_lambda=cfg["cl.ewc_lambda"], replay_capacity=cfg["cl.capacity"],
        fisher_samples=cfg["cl.fisher_samples"], grad_noise=cfg["cl.grad_noise"],
        seed=seed,
    )
    metrics = cl.continual_train(tasks, cfg["cl.method"], config)
    num_tasks, num_ckpts = metrics.accuracy_matrix.shape
    _write_csv(["task"] + [f"ckpt{c}" for c in range(num_ckpts)],
               [[t] + list(metrics.accuracy_matrix[t]) for t in range(num_tasks)],
               os.path.join(out_dir, "plotdata_accuracy.csv"))
    _write_csv(["metric", "value"],
               [["average_accuracy", cl.average_accuracy(metrics)],
                ["average_forgetting", cl.average_forgetting(metrics)]],
               os.path.join(out_dir, "metrics.csv"))
    return metrics


def _detokenize(ids: Sequence[int]) -> str:
    return " ".join(f"tok{int(i)}" for i in ids)


def cmd_attack(cfg: Dict[str, object], seed: int, out_dir: str,
               model: Optional[ModelState] = None) -> List[dict]:
    """Attack an embedding-bag classifier with first-order substitutions."""
    cfg = resolved(cfg)
    os.makedirs(out_dir, exist_ok=True)
    if model is None:
        train_cfg = dict(cfg)
        train_cfg["dataset"] = "distractor"
        train_cfg["model.arch"] = "embed_bag"
        result = train_run(train_cfg, seed)
        model = result.model
    if model.spec.architecture != "embed_bag":
        from .diffcore import UnsupportedArchitectureError
        raise UnsupportedArchitectureError("attack requires an embed_bag model")
    _, _, test = build_datasets({**cfg, "dataset": "distractor"}, seed)
    vocab_size = model.spec.vocab_size
    lo, hi = model.layout["embedding.weight"]
    vectors = model.params[lo:hi].reshape(vocab_size, model.spec.embed_dim)
    table = advmetrics.EmbeddingTable(vectors, [f"tok{i}" for i in range(vocab_size)])
    oov_id = vocab_size - 1

    rows = []
    report = []
    for ex in test.examples[: cfg["attack.n"]]:
        perturbed = ex
        for _ in range(cfg["attack.steps"]):
            perturbed = advmetrics.attack_example(
                model, perturbed, table, cfg["attack.constraint"],
                cfg["attack.sign_normalize"], cfg["attack.k"], oov_id,
            )
        s_src = advmetrics.chrf(_detokenize(ex.input), _detokenize(perturbed.input)) / 100.0
        s_base = float(softmax(forward_logits(model, ex))[ex.label])
        s_adv = float(softmax(forward_logits(model, perturbed))[ex.label])
        d = advmetrics.d_tgt(s_base, s_adv)
        s = advmetrics.success(s_src, d)
        report.append({"id": ex.id, "s_src": s_src, "s_base": s_base,
                       "s_adv": s_adv, "d_tgt": d, "success": s})
        rows.append([ex.id, s_src, s_base, s_adv, d, s])
    _write_csv(["id", "s_src", "s_base", "s_adv", "d_tgt", "success"],
               rows, os.path.join(out_dir, "metrics.csv"))
    means = {k: float(np.mean([r[k] for r in report])) for k in
             ("s_src", "s_base", "s_adv", "d_tgt", "success")}
    _write_jsonl(report + [{"final": True, **means}], os.path.join(out_dir, "run.jsonl"))
    return report


def sweep_grid(cfg: Dict[str, object]) -> List[Dict[str, object]]:
    """Expand sweep.<key> comma lists into the cartesian grid of configs."""
    base = {k: v for k, v in cfg.items() if not k.startswith("sweep.")}
    axes: List[Tuple[str, List[object]]] = []
    for key, value in cfg.items():
        if not key.startswith("sweep."):
            continue
        target = key[len("sweep."):]
        values = [coerce_value(v) for v in str(value).split(",")]
        axes.append((target, values))
    if not axes:
        return [base]
    grid = [dict(base)]
    for target, values in axes:
        grid = [{**point, target: v} for point in grid for v in values]
    return grid


def cmd_sweep(cfg: Dict[str, object], seed: int, out_dir: str) -> List[dict]:
    os.makedirs(out_dir, exist_ok=True)
    points = sweep_grid(cfg)
    results = []
    failures = []
    shared = build_datasets(resolved(points[0]), seed)
    for i, point in enumerate(points):
        try:
            results.append((i, point, train_run(point, seed, datasets=shared)))
        except DivergenceError as err:
            failures.append({"point": i, "error": str(err)})
    if results:
        runs = [(r.checkpoints, r.records) for _, _, r in results]
        loss_kind = resolved(points[0])["selection.loss"]
        if loss_kind == "auto":
            loss_kind = "zero_one" if resolved(points[0])["method"] == "rpdro" else "nll"
        best_run, best_ckpt, _ = selection.hyperparam_select(
            runs, shared[1], loss_kind=loss_kind
        )
    else:
        best_run, best_ckpt = -1, -1
    ranked = sorted(results, key=lambda item: -item[2].test_metrics.robust_accuracy)
    rows = []
    report = []
    for i, point, result in ranked:
        swept = {k[len("sweep."):]: point[k[len("sweep."):]] for k in cfg if k.startswith("sweep.")}
        rows.append([i, json.dumps(swept), result.test_metrics.robust_accuracy,
                     result.test_metrics.average_accuracy, i == best_run])
        report.append({"point": i, "params": swept,
                       "robust_acc": result.test_metrics.robust_accuracy,
                       "average_acc": result.test_metrics.average_accuracy,
                       "selected": i == best_run, "chosen_checkpoint": best_ckpt if i == best_run else None})
    _write_csv(["point", "params", "test_robust_acc", "test_average_acc", "selected"],
               rows, os.path.join(out_dir, "metrics.csv"))
    _write_jsonl(report + [{"failures": failures}], os.path.join(out_dir, "run.jsonl"))
    return report


def cmd_report(run_dirs: Sequence[str], out_dir: str) -> List[dict]:
    """Join the metrics of several runs into one ranked table."""
    os.makedirs(out_dir, exist_ok=True)
    summary = []
    for run in run_dirs:
        path = os.path.join(run, "metrics.csv")
        if not os.path.exists(path):
            continue
        with open(path, newline="", encoding="utf-8") as fh:
            entries = list(csv.reader(fh))
        record = {"run": run}
        for row in entries[1:]:
            if len(row) == 3 and row[0] == "test":
                record[row[1]] = float(row[2]) if row[2] else math.nan
        summary.append(record)
    summary.sort(key=lambda r: -r.get("robust_accuracy", 0.0))
    header = ["run", "robust_accuracy", "average_accuracy"]
    rows = [[r.get(h, "") for h in header] for r in summary]
    _write_csv(header, rows, os.path.join(out_dir, "report.csv"))
    return summary
