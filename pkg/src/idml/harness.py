"""Experiment harness: configured runs, sweeps, gradient checks, diagnosis.

A run is fully described by a RunConfig (JSON round-trippable, exactly) and
a seed; everything downstream — data generation, init, batch order, mixing,
negative sampling, evaluation — draws from fixed Rng streams keyed on that
seed, so rerunning a config reproduces record.json byte for byte. Wall time
is the one nondeterministic output and lives in its own timing.json.

Output layout per run:
    output_dir/config.json       resolved config echo
    output_dir/record.json       per-epoch stats + final report (deterministic)
    output_dir/epochs.csv        epoch,loss,uncert_clean,uncert_mixed,grad_norm
    output_dir/uncertainty.csv   id,label,is_mixed,u_norm over the test split
    output_dir/eval.json         final EvalReport
    output_dir/model.bin         checkpoint
    output_dir/timing.json       wall-clock seconds
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from idml.augment import AugmentConfig, augment_batch
from idml.core import (
    STREAM_AUGMENT,
    STREAM_BATCH,
    STREAM_EVAL,
    STREAM_INIT,
    STREAM_LOSS,
    Batch,
    MetricParams,
    ParameterError,
    Rng,
    ShapeError,
)
from idml.data import BINARY_MAGIC, Dataset, SynthConfig, generate, load_binary, load_csv
from idml.evaluation import EvalReport, evaluate, uncertainty_levels
from idml.losses import (
    LOSS_NAMES,
    PROXY_LOSSES,
    LossParams,
    default_loss_params,
)
from idml.metric import METRIC_NAMES
from idml.model import (
    all_parameters,
    finite_difference_check,
    forward,
    h_factor_check,
    init_model,
    init_proxies,
    load_checkpoint,
    loss_and_grad,
    make_optimizer,
    save_checkpoint,
)

__all__ = [
    "RunConfig",
    "EpochStats",
    "RunRecord",
    "SWEEP_PARAMS",
    "desk_config",
    "paper_config",
    "benchmark_data_config",
    "baseline_run_config",
    "introspective_run_config",
    "config_to_json_dict",
    "config_from_json_dict",
    "load_dataset",
    "load_dataset_for",
    "train",
    "sweep",
    "GradcheckOutcome",
    "gradcheck",
    "diagnose",
    "worker_count",
]

OPTIMIZER_NAMES = ("adamw", "sgd")
UNCERTAINTY_MODES = ("train", "frozen_zero")
SWEEP_PARAMS = ("tau", "gamma", "batch_size", "semantic_dim", "uncertainty_dim")


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs; JSON round-trips exactly."""

    data: SynthConfig = SynthConfig()
    dataset_path: str = None
    loss: str = "contrastive"
    metric: str = "ism"
    test_metric: str = "euclidean"
    metric_params: MetricParams = MetricParams()
    loss_params: LossParams = None
    augment: AugmentConfig = AugmentConfig()
    hidden: tuple = (64,)
    semantic_dim: int = 32
    uncertainty_dim: int = 32
    uncertainty_mode: str = "train"
    optimizer: str = "adamw"
    lr: float = 1e-2
    weight_decay: float = 1e-4
    momentum: float = 0.9
    proxy_lr_scale: float = 10.0
    uncert_lr_scale: float = 1.0
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_NAMES:
            raise ParameterError(f"unknown loss {self.loss!r}")
        if self.metric not in METRIC_NAMES or self.test_metric not in METRIC_NAMES:
            raise ParameterError(f"unknown metric {self.metric!r}/{self.test_metric!r}")
        if self.optimizer not in OPTIMIZER_NAMES:
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.uncertainty_mode not in UNCERTAINTY_MODES:
            raise ParameterError(f"unknown uncertainty mode {self.uncertainty_mode!r}")
        if self.batch_size < 4:
            raise ParameterError(f"batch_size must be >= 4, got {self.batch_size}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.semantic_dim < 1 or self.uncertainty_dim < 1:
            raise ParameterError("embedding dims must be positive")
        if self.lr <= 0 or self.proxy_lr_scale <= 0 or self.uncert_lr_scale <= 0:
            raise ParameterError("lr and the lr scale factors must be positive")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be nonnegative")
        if self.seed < 0:
            raise ParameterError("seed must be nonnegative")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden) or not self.hidden:
            raise ParameterError(f"hidden layer sizes must be positive, got {self.hidden}")
        if self.loss_params is None:
            object.__setattr__(self, "loss_params", default_loss_params(self.loss))


def desk_config(**overrides) -> RunConfig:
    """The small-everything default configuration."""
    return RunConfig(**overrides)


def paper_config(**overrides) -> RunConfig:
    """Full-scale shape: batch 120, 512-dim embeddings, small learning rate."""
    base = dict(
        data=SynthConfig(n_classes=100, per_class=60, input_dim=64, seed=0),
        hidden=(512, 512),
        semantic_dim=512,
        uncertainty_dim=512,
        lr=1e-5,
        batch_size=120,
    )
    base.update(overrides)
    return RunConfig(**base)


def benchmark_data_config(seed: int = 0) -> SynthConfig:
    """The ambiguous synthetic benchmark: midpoint samples plus label noise."""
    return SynthConfig(ambiguous_frac=0.3, mislabel_frac=0.05, seed=seed)


# Settings shared by both arms of a paired benchmark run. Tuned once on the
# benchmark dataset so the A/B comparisons below differ only in metric and
# mixing; individual callers can still override any field.
_PAIRED_DEFAULTS = dict(hidden=(64, 64), weight_decay=1e-2, uncert_lr_scale=0.3)


def baseline_run_config(loss: str, seed: int = 0, **overrides) -> RunConfig:
    """Plain loss: Euclidean metric, no mixing, uncertainty head unused."""
    base = dict(
        data=benchmark_data_config(seed),
        loss=loss,
        metric="euclidean",
        augment=AugmentConfig(mix_fraction=0.0),
        seed=seed,
        **_PAIRED_DEFAULTS,
    )
    base.update(overrides)
    return RunConfig(**base)


def introspective_run_config(loss: str, seed: int = 0, metric: str = "ism", **overrides) -> RunConfig:
    """Same loss run through the introspective metric with mixing enabled."""
    base = dict(
        data=benchmark_data_config(seed),
        loss=loss,
        metric=metric,
        augment=AugmentConfig(mix_fraction=0.5, mix_lambda_dist=2.0),
        seed=seed,
        **_PAIRED_DEFAULTS,
    )
    base.update(overrides)
    return RunConfig(**base)


# ---------------------------------------------------------------------------
# Config serialization
# ---------------------------------------------------------------------------

_NESTED = {
    "data": SynthConfig,
    "metric_params": MetricParams,
    "loss_params": LossParams,
    "augment": AugmentConfig,
}


def config_to_json_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _NESTED:
            out[f.name] = dataclasses.asdict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def config_from_json_dict(d: dict) -> RunConfig:
    kwargs = {}
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key, v in d.items():
        if key not in known:
            raise ParameterError(f"unknown config key {key!r}")
        if key in _NESTED and v is not None:
            try:
                kwargs[key] = _NESTED[key](**v)
            except TypeError as e:
                raise ParameterError(f"bad {key} section: {e}") from None
        else:
            kwargs[key] = v
    return RunConfig(**kwargs)


def _json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    loss: float
    uncert_clean: float
    uncert_mixed: float
    grad_norm: float


@dataclass
class RunRecord:
    """Config echo, the per-epoch trace, and the final report.

    Wall time rides along for reporting but stays out of record.json so the
    record is a pure function of the config.
    """

    config: RunConfig
    epochs: list
    final: EvalReport
    wall_time_s: float = 0.0

    def record_json_dict(self) -> dict:
        return {
            "config": config_to_json_dict(self.config),
            "epochs": [dataclasses.asdict(e) for e in self.epochs],
            "final": self.final.to_json_dict(),
        }


def load_dataset_for(cfg: RunConfig) -> Dataset:
    if cfg.dataset_path is None:
        return generate(cfg.data)
    return load_dataset(cfg.dataset_path)


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    with open(path, "rb") as f:
        head = f.read(4)
    if head == BINARY_MAGIC:
        return load_binary(path)
    return load_csv(path)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _epoch_stream(seed: int, epoch: int, stream: int) -> Rng:
    return Rng(seed, (epoch << 8) | stream)


def _eval_mix_config(aug: AugmentConfig) -> AugmentConfig:
    """Mixing only — corruption channels off — for eval-time mixed samples."""
    return AugmentConfig(
        mix_lambda_dist=aug.mix_lambda_dist,
        mix_fraction=aug.mix_fraction,
    )


def _mixed_eval_batch(features, labels, aug: AugmentConfig, rng: Rng):
    base = Batch(
        features=features,
        labels=labels,
        is_mixed=np.zeros(len(labels), dtype=bool),
    )
    mixed = augment_batch(base, _eval_mix_config(aug), rng)
    keep = mixed.is_mixed
    return mixed.features[keep], tuple(
        ls for ls, m in zip(mixed.labels, keep) if m
    )


def train(cfg: RunConfig, output_dir=None) -> RunRecord:
    """Mini-batch training per the config; writes run outputs if a dir is given.

    Each epoch consumes fresh Rng streams for shuffling, mixing, and
    sampling. Partial trailing batches are dropped so every step sees the
    configured batch size.
    """
    t0 = time.perf_counter()
    ds = load_dataset_for(cfg)
    mp, lp = cfg.metric_params, cfg.loss_params
    x_train, l_train, _ = ds.train_split()
    n_train = x_train.shape[0]
    if n_train < cfg.batch_size:
        raise ParameterError(
            f"training split has {n_train} samples, fewer than batch_size={cfg.batch_size}"
        )

    init_rng = Rng(cfg.seed, STREAM_INIT)
    model = init_model(
        input_dim=ds.features.shape[1],
        hidden=cfg.hidden,
        semantic_dim=cfg.semantic_dim,
        uncertainty_dim=cfg.uncertainty_dim,
        rng=init_rng,
    )
    proxies = None
    if cfg.loss in PROXY_LOSSES:
        proxies = init_proxies(
            sorted(ds.train_classes()), cfg.semantic_dim, cfg.uncertainty_dim, init_rng
        )
    if cfg.uncertainty_mode == "frozen_zero":
        model.head_u_w[:] = 0.0
        model.head_u_b[:] = 0.0
        if proxies is not None:
            proxies.uncertainty[:] = 0.0

    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.momentum)
    lr_scale = {
        "proxy.semantic": cfg.proxy_lr_scale,
        "proxy.uncertainty": cfg.proxy_lr_scale * cfg.uncert_lr_scale,
        "head_u.W": cfg.uncert_lr_scale,
        "head_u.b": cfg.uncert_lr_scale,
    }

    n_batches = n_train // cfg.batch_size
    stats = []
    for epoch in range(1, cfg.epochs + 1):
        perm = _epoch_stream(cfg.seed, epoch, STREAM_BATCH).permutation(n_train)
        aug_rng = _epoch_stream(cfg.seed, epoch, STREAM_AUGMENT)
        loss_rng = _epoch_stream(cfg.seed, epoch, STREAM_LOSS)
        ep_loss, ep_grad = [], []
        clean_norms, mixed_norms = [], []
        for b in range(n_batches):
            rows = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = Batch(
                features=x_train[rows],
                labels=tuple(l_train[r] for r in rows),
                is_mixed=np.zeros(rows.size, dtype=bool),
            )
            batch = augment_batch(batch, cfg.augment, aug_rng)
            res, grads = loss_and_grad(
                model,
                batch,
                cfg.loss,
                metric=cfg.metric,
                mp=mp,
                lp=lp,
                proxies=proxies,
                rng=loss_rng,
            )
            _, u_now = forward(model, batch.features)
            norms = uncertainty_levels(u_now)
            clean_norms.extend(norms[~batch.is_mixed])
            mixed_norms.extend(norms[batch.is_mixed])
            ep_loss.append(res.value)
            ep_grad.append(float(np.linalg.norm(res.d_semantic, axis=1).mean()))
            if cfg.uncertainty_mode == "frozen_zero":
                grads.pop("head_u.W", None)
                grads.pop("head_u.b", None)
                grads.pop("proxy.uncertainty", None)
            opt.step(all_parameters(model, proxies), grads, lr_scale)
        stats.append(
            EpochStats(
                epoch=epoch,
                loss=float(np.mean(ep_loss)),
                uncert_clean=float(np.mean(clean_norms)) if clean_norms else 0.0,
                uncert_mixed=float(np.mean(mixed_norms)) if mixed_norms else 0.0,
                grad_norm=float(np.mean(ep_grad)),
            )
        )

    x_test, l_test, idx_test = ds.test_split()
    s_test, u_test = forward(model, x_test)
    eval_rng = Rng(cfg.seed, STREAM_EVAL)
    mixed_feats, mixed_labels = _mixed_eval_batch(x_test, l_test, cfg.augment, eval_rng)
    if mixed_feats.shape[0]:
        _, u_mixed = forward(model, mixed_feats)
    else:
        u_mixed = None
    report = evaluate(
        s_test,
        u_test,
        l_test,
        eval_rng,
        mixed_uncertainty=u_mixed,
        test_metric=cfg.test_metric,
        mp=mp,
    )
    record = RunRecord(
        config=cfg, epochs=stats, final=report, wall_time_s=time.perf_counter() - t0
    )
    if output_dir is not None:
        _write_run_outputs(
            Path(output_dir),
            record,
            model,
            proxies,
            ds,
            idx_test,
            u_test,
            mixed_labels,
            u_mixed,
        )
    return record


def _uncertainty_rows(ds, idx_test, u_test, mixed_labels, u_mixed):
    rows = []
    norms = uncertainty_levels(u_test)
    for i, row in enumerate(idx_test):
        label = "|".join(str(c) for c in sorted(ds.labels[row]))
        rows.append(f"{int(row)},{label},0,{norms[i]!r}")
    if u_mixed is not None:
        mixed_norms = uncertainty_levels(u_mixed)
        for j, ls in enumerate(mixed_labels):
            label = "|".join(str(c) for c in sorted(ls))
            rows.append(f"{len(ds) + j},{label},1,{mixed_norms[j]!r}")
    return rows


def _write_run_outputs(
    out: Path, record: RunRecord, model, proxies, ds, idx_test, u_test, mixed_labels, u_mixed
):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(_json_text(config_to_json_dict(record.config)))
    (out / "record.json").write_text(_json_text(record.record_json_dict()))
    (out / "timing.json").write_text(_json_text({"wall_time_s": record.wall_time_s}))
    (out / "eval.json").write_text(_json_text(record.final.to_json_dict()))
    lines = ["epoch,loss,uncert_clean,uncert_mixed,grad_norm"]
    for e in record.epochs:
        lines.append(
            f"{e.epoch},{e.loss!r},{e.uncert_clean!r},{e.uncert_mixed!r},{e.grad_norm!r}"
        )
    (out / "epochs.csv").write_text("\n".join(lines) + "\n")
    u_lines = ["id,label,is_mixed,u_norm"]
    u_lines += _uncertainty_rows(ds, idx_test, u_test, mixed_labels, u_mixed)
    (out / "uncertainty.csv").write_text("\n".join(u_lines) + "\n")
    save_checkpoint(out / "model.bin", model, proxies)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def _with_sweep_value(cfg: RunConfig, param: str, value) -> RunConfig:
    if param in ("tau", "gamma"):
        return dataclasses.replace(
            cfg, metric_params=dataclasses.replace(cfg.metric_params, **{param: float(value)})
        )
    return dataclasses.replace(cfg, **{param: int(value)})


def worker_count() -> int:
    env = os.environ.get("IDML_THREADS", "").strip()
    if env:
        n = int(env)
        if n < 1:
            raise ParameterError(f"IDML_THREADS must be positive, got {env!r}")
        return n
    return os.cpu_count() or 1


def _sweep_one(args):
    cfg, out_dir = args
    return train(cfg, output_dir=out_dir)


def sweep(cfg: RunConfig, param: str, values, output_dir=None, parallel: bool = False):
    """One run per value, shared seed; returns the records, writes sweep.csv."""
    if param not in SWEEP_PARAMS:
        raise ParameterError(f"sweep param must be one of {SWEEP_PARAMS}, got {param!r}")
    values = list(values)
    if not values:
        raise ParameterError("sweep needs at least one value")
    jobs = []
    for v in values:
        run_cfg = _with_sweep_value(cfg, param, v)
        run_dir = None if output_dir is None else str(Path(output_dir) / f"{param}={v}")
        jobs.append((run_cfg, run_dir))
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(worker_count(), len(jobs))) as pool:
            records = list(pool.map(_sweep_one, jobs))
    else:
        records = [_sweep_one(j) for j in jobs]
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = f"{param},final_loss,{records[0].final.csv_header()}"
        lines = [header]
        for v, rec in zip(values, records):
            lines.append(f"{v},{rec.epochs[-1].loss!r},{rec.final.csv_row()}")
        (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    return records


# ---------------------------------------------------------------------------
# Gradient checking, diagnosis
# ---------------------------------------------------------------------------


@dataclass
class GradcheckOutcome:
    passed: bool
    fd_report: object
    h_report: object

    def summary(self) -> str:
        return (
            f"finite differences: {self.fd_report.summary()}\n"
            f"gradient attenuation: {self.h_report.summary()}"
        )


_GRADCHECK_LABELS = tuple(frozenset({c}) for c in (0, 0, 1, 1, 2, 2, 3, 3))


def gradcheck(cfg: RunConfig) -> GradcheckOutcome:
    """Finite-difference check for the configured loss/metric, plus the
    attenuation-identity check; model kept deliberately tiny."""
    rng = Rng(cfg.seed, STREAM_LOSS)
    model = init_model(
        input_dim=6, hidden=(8,), semantic_dim=5, uncertainty_dim=4, rng=rng
    )
    proxies = None
    if cfg.loss in PROXY_LOSSES:
        proxies = init_proxies((0, 1, 2, 3), 5, 4, rng)

    def batch_fn(r):
        n = len(_GRADCHECK_LABELS)
        return Batch(
            features=r.normal(size=(n, 6)),
            labels=_GRADCHECK_LABELS,
            is_mixed=np.zeros(n, dtype=bool),
        )

    fd = finite_difference_check(
        model,
        batch_fn,
        cfg.loss,
        metric=cfg.metric,
        mp=cfg.metric_params,
        lp=cfg.loss_params,
        proxies=proxies,
        rng=rng,
    )
    hf = h_factor_check(Rng(cfg.seed, STREAM_EVAL), mp=MetricParams(tau=cfg.metric_params.tau))
    return GradcheckOutcome(passed=fd.passed and hf.passed, fd_report=fd, h_report=hf)


def diagnose(
    checkpoint_path,
    dataset_path,
    seed: int = 0,
    test_metric: str = "euclidean",
    mp: MetricParams = None,
    mix_fraction: float = 0.5,
    output_dir=None,
):
    """Evaluate a saved model on a dataset's test split.

    Returns (EvalReport, uncertainty rows); writes eval.json and
    uncertainty.csv when an output directory is given.
    """
    model, proxies = load_checkpoint(checkpoint_path)
    ds = load_dataset(dataset_path)
    if ds.features.shape[1] != model.input_dim:
        raise ShapeError(
            f"dataset feature dim {ds.features.shape[1]} != model input dim {model.input_dim}"
        )
    x_test, l_test, idx_test = ds.test_split()
    s_test, u_test = forward(model, x_test)
    eval_rng = Rng(seed, STREAM_EVAL)
    aug = AugmentConfig(mix_fraction=mix_fraction)
    mixed_feats, mixed_labels = _mixed_eval_batch(x_test, l_test, aug, eval_rng)
    if mixed_feats.shape[0]:
        _, u_mixed = forward(model, mixed_feats)
    else:
        u_mixed = None
    report = evaluate(
        s_test,
        u_test,
        l_test,
        eval_rng,
        mixed_uncertainty=u_mixed,
        test_metric=test_metric,
        mp=mp if mp is not None else MetricParams(),
    )
    rows = _uncertainty_rows(ds, idx_test, u_test, mixed_labels, u_mixed)
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(_json_text(report.to_json_dict()))
        (out / "uncertainty.csv").write_text("\n".join(["id,label,is_mixed,u_norm"] + rows) + "\n")
    return report, rows
