"""Training, evaluation with voting, ablation sweeps, and benchmarking.

The training loop follows the reference recipe: Adam with coupled weight
decay 0.01, initial learning rate 0.001 multiplied by 0.7 every 20 epochs,
batch size 32, anisotropic scale/shift augmentation. Classification batches
share one head pass over the stacked global features; segmentation clouds
are backpropagated one at a time with the loss scaled by the batch size.

Evaluation optionally votes: ``voting`` forward passes per cloud, each with
an independent augmentation draw (``voting=1`` means a single unaugmented
pass), averaging softmax probabilities before the argmax.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import data as D
from .checkpoint import Checkpoint, TrainState
from .metrics import MetricsReport
from .model import Model, ModelConfig, complexity, scaled_classifier_config

__all__ = [
    "TrainConfig",
    "EpochStats",
    "TrainResult",
    "lr_for_epoch",
    "train",
    "evaluate",
    "model_from_checkpoint",
    "model_to_checkpoint",
    "SweepError",
    "ablate",
    "ablation_csv",
    "ABLATION_COLUMNS",
    "BenchReport",
    "bench",
    "gradient_suite",
]


class SweepError(ValueError):
    """Unknown ablation sweep or toggle."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    """Optimization recipe plus the architecture it applies to.

    ``n_points`` resamples every training cloud per step (uniform policy);
    None uses clouds as they come.
    """

    model: ModelConfig
    epochs: int
    seed: int = 0
    lr: float = 0.001
    weight_decay: float = 0.01
    batch_size: int = 32
    lr_decay: float = 0.7
    lr_decay_every: int = 20
    augmentation: bool = True
    n_points: int | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ad.ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size <= 0:
            raise ad.ConfigError(f"batch_size must be > 0, got {self.batch_size}")
        if not 0 < self.lr_decay <= 1:
            raise ad.ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.lr_decay_every < 1:
            raise ad.ConfigError(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")
        if self.epochs < 0:
            raise ad.ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.n_points is not None and self.n_points < 1:
            raise ad.ConfigError(f"n_points must be >= 1, got {self.n_points}")

    def to_dict(self) -> dict:
        out = {
            "epochs": self.epochs,
            "seed": self.seed,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "lr_decay": self.lr_decay,
            "lr_decay_every": self.lr_decay_every,
            "augmentation": self.augmentation,
            "n_points": self.n_points,
            "model": self.model.to_dict(),
        }
        return out

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {
            "epochs", "seed", "lr", "weight_decay", "batch_size",
            "lr_decay", "lr_decay_every", "augmentation", "n_points", "model",
        }
        unknown = set(d) - known
        if unknown:
            raise ad.ConfigError(f"unknown training config fields: {sorted(unknown)}")
        if "model" not in d or "epochs" not in d:
            raise ad.ConfigError("training config needs 'model' and 'epochs'")
        kw = {k: v for k, v in d.items() if k != "model"}
        return TrainConfig(model=ModelConfig.from_dict(d["model"]), **kw)


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Stepped decay: the initial rate times ``lr_decay ** (epoch // every)``."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


# ---------------------------------------------------------------------------
# checkpoints <-> models


def model_to_checkpoint(model: Model, train_cfg: TrainConfig | None = None,
                        opt: ad.AdamState | None = None, epoch: int = 0) -> Checkpoint:
    """Freeze weights, normalization buffers, and optimizer moments."""
    config = train_cfg.to_dict() if train_cfg is not None else {"model": model.config.to_dict()}
    params = {k: t.data.copy() for k, t in model.parameters().items()}
    opt = opt or ad.AdamState()
    state = TrainState(
        epoch=epoch,
        step=opt.t,
        buffers={k: v.copy() for k, v in model.buffers().items()},
        first_moments={k: v.copy() for k, v in opt.m.items()},
        second_moments={k: v.copy() for k, v in opt.v.items()},
    )
    return Checkpoint(config=config, params=params, state=state)


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> Model:
    """Rebuild the architecture named in the checkpoint and load its weights."""
    if "model" not in ckpt.config:
        raise ad.ConfigError("checkpoint config has no 'model' section")
    model = Model(ModelConfig.from_dict(ckpt.config["model"]), seed=0, dtype=dtype)
    params = model.parameters()
    if set(params) != set(ckpt.params):
        missing = sorted(set(params) - set(ckpt.params))[:3]
        extra = sorted(set(ckpt.params) - set(params))[:3]
        raise ad.ConfigError(f"checkpoint/model parameter mismatch: missing {missing}, extra {extra}")
    for name, arr in ckpt.params.items():
        if params[name].data.shape != arr.shape:
            raise ad.ConfigError(f"parameter {name!r}: shape {arr.shape} != {params[name].data.shape}")
        params[name].data[...] = arr
    if ckpt.state is not None and ckpt.state.buffers:
        bufs = model.buffers()
        if set(bufs) != set(ckpt.state.buffers):
            raise ad.ConfigError("checkpoint/model buffer name mismatch")
        for name, arr in ckpt.state.buffers.items():
            bufs[name][...] = arr
    return model


def optimizer_from_checkpoint(ckpt: Checkpoint) -> ad.AdamState:
    if ckpt.state is None:
        return ad.AdamState()
    return ad.AdamState(
        t=ckpt.state.step,
        m={k: v.copy() for k, v in ckpt.state.first_moments.items()},
        v={k: v.copy() for k, v in ckpt.state.second_moments.items()},
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_metric: float | None = None


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint | None
    log: list[EpochStats]
    best_epoch: int | None = None


def _check_labels(model: Model, clouds: list[D.PointCloud], what: str) -> None:
    n_out = model.config.n_outputs
    if model.config.task == "classification":
        bad = [c.label for c in clouds if c.label is None or not 0 <= c.label < n_out]
        if bad:
            raise ad.ConfigError(
                f"{what}: class label {bad[0]} outside the model's {n_out} outputs"
            )
    else:
        for c in clouds:
            if c.parts is None:
                raise ad.ConfigError(f"{what}: segmentation needs per-point part labels")
            if c.parts.size and (c.parts.min() < 0 or c.parts.max() >= n_out):
                raise ad.ConfigError(
                    f"{what}: part label {int(c.parts.max())} outside the model's {n_out} outputs"
                )


def _prepare(cloud: D.PointCloud, cfg: TrainConfig, rng: np.random.Generator) -> D.PointCloud:
    c = D.augment(cloud, rng) if cfg.augmentation else cloud
    if cfg.n_points is not None and c.n_points > cfg.n_points:
        c = D.sample_points(c, cfg.n_points, "uniform", rng)
    return c


def _classify_batch(model: Model, batch, cfg, rng, lr, opt) -> float:
    feats = []
    labels = []
    for cloud in batch:
        c = _prepare(cloud, cfg, rng)
        t = model.trunk(c.positions, c.normals, "train", rng)
        feats.append(t.global_feats)
        labels.append(c.label)
    logits = model.head_forward(ad.concat_rows(feats), "train", rng)
    loss = ad.softmax_cross_entropy(logits, np.asarray(labels))
    for p in model.parameters().values():
        p.zero_grad()
    loss.backward()
    adam_params = model.parameters()
    ad.adam_step(adam_params, opt, lr, cfg.weight_decay)
    return float(loss.data)


def _segment_batch(model: Model, batch, cfg, rng, lr, opt) -> float:
    params = model.parameters()
    for p in params.values():
        p.zero_grad()
    total = 0.0
    share = 1.0 / len(batch)
    for cloud in batch:
        c = _prepare(cloud, cfg, rng)
        logits = model.forward_segment(c.positions, c.normals, "train", rng)
        loss = ad.softmax_cross_entropy(logits, c.parts)
        loss.backward(np.asarray(share, dtype=loss.data.dtype))
        total += float(loss.data)
    ad.adam_step(params, opt, lr, cfg.weight_decay)
    return total * share


def train(
    cfg: TrainConfig,
    train_set: list[D.PointCloud],
    val_set: list[D.PointCloud] | None = None,
    log_fn=None,
) -> TrainResult:
    """Run the full optimization recipe over ``train_set``.

    When ``val_set`` is given, every epoch is scored on it (overall accuracy
    for classification, part-category mIoU for segmentation) and the best
    epoch's checkpoint is kept alongside the final one.

    Raises:
        NonFiniteError: a non-finite activation or loss, annotated with the
            epoch and batch where it happened.
    """
    if not train_set:
        raise ad.ConfigError("training set is empty")
    model = Model(cfg.model, seed=cfg.seed)
    _check_labels(model, train_set, "train set")
    if val_set:
        _check_labels(model, val_set, "validation set")

    seg = model.config.task == "segmentation"
    step = _segment_batch if seg else _classify_batch
    opt = ad.AdamState()
    rng = np.random.default_rng(cfg.seed)
    log: list[EpochStats] = []
    best = None
    best_metric = -math.inf
    best_epoch = None

    for epoch in range(cfg.epochs):
        lr = lr_for_epoch(cfg, epoch)
        order = rng.permutation(len(train_set))
        losses = []
        for i, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_set[j] for j in order[start:start + cfg.batch_size]]
            try:
                loss = step(model, batch, cfg, rng, lr, opt)
            except ad.NonFiniteError as e:
                raise ad.NonFiniteError(f"epoch {epoch} batch {i}: {e}") from None
            if not math.isfinite(loss):
                raise ad.NonFiniteError(f"epoch {epoch} batch {i}: non-finite loss")
            losses.append(loss)
        stats = EpochStats(epoch, lr, float(np.mean(losses)))
        if val_set:
            report = evaluate(model, val_set, voting=1)
            stats.val_metric = (
                report.part_category_miou if seg else report.overall_accuracy
            )
            if stats.val_metric > best_metric:
                best_metric = stats.val_metric
                best_epoch = epoch
                best = model_to_checkpoint(model, cfg, opt, epoch + 1)
        log.append(stats)
        if log_fn is not None:
            log_fn(stats)

    final = model_to_checkpoint(model, cfg, opt, cfg.epochs)
    return TrainResult(final=final, best=best, log=log, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# evaluation


def _as_model(m) -> Model:
    return m if isinstance(m, Model) else model_from_checkpoint(m)


def _cloud_probs(model, cloud, voting, rng, augment_fn):
    """Averaged softmax probabilities over ``voting`` passes (float64)."""
    acc = None
    with ad.no_grad():
        for _ in range(voting):
            c = augment_fn(cloud, rng) if voting > 1 else cloud
            if model.config.task == "classification":
                logits = model.forward_classify(c.positions, c.normals, "eval")
            else:
                logits = model.forward_segment(c.positions, c.normals, "eval")
            p = ad.softmax(logits.data.astype(np.float64))
            acc = p if acc is None else acc + p
    return acc / voting


def evaluate(
    model_or_checkpoint,
    clouds: list[D.PointCloud],
    voting: int = 1,
    seed: int = 0,
    augment_fn=D.augment,
    n_threads: int = 1,
) -> MetricsReport:
    """Score a model on labeled clouds, optionally with augmentation voting.

    Each cloud gets its own seeded augmentation stream derived from
    ``(seed, cloud index)``, so results are independent of evaluation order
    and of ``n_threads``.
    """
    if voting < 1:
        raise ad.ConfigError(f"voting must be >= 1, got {voting}")
    if not clouds:
        raise ad.ConfigError("evaluation set is empty")
    model = _as_model(model_or_checkpoint)
    _check_labels(model, clouds, "evaluation set")
    seg = model.config.task == "segmentation"

    def one(i_cloud):
        i, cloud = i_cloud
        rng = np.random.default_rng([seed, i])
        probs = _cloud_probs(model, cloud, voting, rng, augment_fn)
        return probs.argmax(axis=-1)

    items = list(enumerate(clouds))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            preds = list(pool.map(one, items))
    else:
        preds = [one(it) for it in items]

    if seg:
        report = MetricsReport.from_part_predictions(
            [p for p in preds], [c.parts for c in clouds], model.config.n_outputs
        )
    else:
        labels = np.array([c.label for c in clouds])
        report = MetricsReport.from_predictions(
            np.concatenate(preds), labels, model.config.n_outputs
        )
    report.extra.update({"voting": voting, "n_clouds": len(clouds)})
    return report


# ---------------------------------------------------------------------------
# ablation sweeps

ABLATION_COLUMNS = [
    "sweep",
    "setting",
    "n_params",
    "overall_accuracy",
    "mean_class_accuracy",
    "part_category_miou",
]

_TOGGLE_KEYS = {"augmentation", "residual", "voting"}


def _row(sweep: str, setting: str, n_params: int, report: MetricsReport | None) -> dict:
    return {
        "sweep": sweep,
        "setting": setting,
        "n_params": n_params,
        "overall_accuracy": None if report is None else report.overall_accuracy,
        "mean_class_accuracy": None if report is None else report.mean_class_accuracy,
        "part_category_miou": None if report is None else report.part_category_miou,
    }


def _train_and_eval(cfg: TrainConfig, train_set, test_set, voting: int = 1):
    result = train(cfg, train_set)
    model = model_from_checkpoint(result.final)
    return model, evaluate(model, test_set, voting=voting, seed=cfg.seed)


def ablate(
    sweep: str,
    values: list,
    cfg: TrainConfig,
    train_set: list[D.PointCloud],
    test_set: list[D.PointCloud],
) -> list[dict]:
    """Run one sweep family and return one result row per setting.

    Sweeps:
        * ``"toggles"``: values are dicts over {"augmentation", "residual",
          "voting"}; each setting trains its own model.
        * ``"points"``: values are point counts; one model is trained, then
          scored on farthest-point-sampled test clouds of each size.
        * ``"noise"``: values are outlier counts added to each test cloud of
          one trained model; 0 reproduces the plain evaluation exactly.
        * ``"groups"``: values are group counts; rebuilds (and trains) the
          architecture at each width split.
        * ``"levels"``: values are backbone depths for the scaled classifier
          family.
    """
    rows: list[dict] = []
    if sweep == "toggles":
        for value in values:
            if not isinstance(value, dict) or set(value) - _TOGGLE_KEYS:
                raise SweepError(
                    f"unknown toggle in {value!r}; valid keys: {sorted(_TOGGLE_KEYS)}"
                )
            aug = bool(value.get("augmentation", True))
            res = bool(value.get("residual", True))
            voting = int(value.get("voting", 1))
            model_cfg = replace(cfg.model, use_residual=res)
            run_cfg = replace(cfg, model=model_cfg, augmentation=aug)
            model, report = _train_and_eval(run_cfg, train_set, test_set, voting)
            setting = f"da={'on' if aug else 'off'},r={'on' if res else 'off'},vote={voting}"
            rows.append(_row(sweep, setting, model.n_parameters(), report))
    elif sweep in ("points", "noise"):
        result = train(cfg, train_set)
        model = model_from_checkpoint(result.final)
        n_params = model.n_parameters()
        for value in values:
            v = int(value)
            if sweep == "points":
                clouds = [D.sample_points(c, v, "fps") for c in test_set]
            elif v == 0:
                clouds = test_set
            else:
                clouds = [
                    D.inject_noise(c, v, np.random.default_rng([cfg.seed, 7, i]))
                    for i, c in enumerate(test_set)
                ]
            report = evaluate(model, clouds, voting=1, seed=cfg.seed)
            rows.append(_row(sweep, str(v), n_params, report))
    elif sweep == "groups":
        for value in values:
            model_cfg = replace(cfg.model, n_groups=int(value))
            run_cfg = replace(cfg, model=model_cfg)
            model, report = _train_and_eval(run_cfg, train_set, test_set)
            rows.append(_row(sweep, str(int(value)), model.n_parameters(), report))
    elif sweep == "levels":
        for value in values:
            model_cfg = scaled_classifier_config(
                int(value), cfg.model.n_outputs, cfg.model.n_groups, cfg.model.use_residual
            )
            run_cfg = replace(cfg, model=model_cfg)
            model, report = _train_and_eval(run_cfg, train_set, test_set)
            rows.append(_row(sweep, str(int(value)), model.n_parameters(), report))
    else:
        raise SweepError(
            f"unknown sweep {sweep!r}; valid: toggles, points, noise, groups, levels"
        )
    return rows


def ablation_csv(rows: list[dict], path: str | None = None) -> str:
    """Serialize sweep rows (header always present, empty cells for None)."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if r.get(k) is None else r[k]) for k in ABLATION_COLUMNS})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    return text


# ---------------------------------------------------------------------------
# benchmarking


@dataclass
class BenchReport:
    per_sample_ms: float
    peak_live_bytes: int
    batch_size: int
    n_batches: int
    per_batch_ms: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_sample_ms": self.per_sample_ms,
            "peak_live_bytes": self.peak_live_bytes,
            "batch_size": self.batch_size,
            "n_batches": self.n_batches,
        }


def _infer_batch(model: Model, batch: list[D.PointCloud]) -> np.ndarray:
    """Eval-mode predictions for one batch: per-cloud trunks, one head pass."""
    with ad.no_grad():
        if model.config.task == "classification":
            feats = [
                model.trunk(c.positions, c.normals, "eval").global_feats for c in batch
            ]
            logits = model.head_forward(ad.concat_rows(feats), "eval")
            return logits.data.argmax(axis=1)
        preds = []
        for c in batch:
            logits = model.forward_segment(c.positions, c.normals, "eval")
            preds.append(logits.data.argmax(axis=1))
        return np.concatenate(preds)


def gradient_suite(seed: int = 0, n_points: int = 16) -> list[tuple[str, ad.GradCheckResult]]:
    """Finite-difference checks of both full models at 64-bit precision.

    Each model runs in train mode with a per-call reseeded rng so dropout
    masks and sampling starts repeat exactly between probes. The two
    strongest-gradient elements of every parameter tensor are compared (full
    sweeps of a million parameters need two forward passes per element, and
    elements far below a deep graph's roundoff floor carry no resolvable
    signal; exhaustive element-level checks live in the layer tests, whose
    shallow graphs keep finite differences exact). Biases absorbed by
    train-mode batch normalization carry identically-zero gradients that
    finite differences cannot resolve relative to rounding noise; they are
    left out here and verified analytically in the layer test suite.

    Parameters are nudged off their initial values before checking: a fresh
    init parks every batch-norm offset at zero, so any constant pre-norm
    channel (for instance relative coordinates when a query ball holds only
    its own center) lands exactly on the ReLU kink, where central differences
    and the subgradient convention legitimately disagree. The check must run
    at a point where the loss is differentiable.
    """
    from .model import classifier_config, segmenter_config

    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (n_points, 3))
    nrm = rng.standard_normal((n_points, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    results = []

    jobs = [
        ("classifier", Model(classifier_config(4, 2), seed=seed, dtype=np.float64),
         np.array([1, 2])),
        ("segmenter", Model(segmenter_config(3, 2), seed=seed, dtype=np.float64),
         rng.integers(0, 3, n_points)),
    ]
    for name, model, targets in jobs:
        nudge = np.random.default_rng(seed + 3)
        for pname, t in model.parameters().items():
            if pname.endswith(".beta"):
                t.data += nudge.uniform(0.02, 0.05, t.data.shape) * nudge.choice([-1.0, 1.0], t.data.shape)

        def fn(model=model, targets=targets):
            call_rng = np.random.default_rng(seed + 1)
            if model.config.task == "classification":
                # Head batch norm wants >= 2 distinct rows, as in batched
                # training; a scaled copy avoids a second trunk pass.
                f = model.trunk(pts, nrm, "train", call_rng).global_feats
                rows = ad.concat_rows([f, ad.scale(f, 1.1)])
                logits = model.head_forward(rows, "train", call_rng)
            else:
                logits = model.forward_segment(pts, nrm, "train", call_rng)
            return ad.softmax_cross_entropy(logits, targets)

        params = model.parameters()
        wrt = [
            t for pname, t in params.items()
            if not (pname.endswith(".b") and pname[:-2] + ".gamma" in params)
        ]
        res = ad.grad_check(
            fn, wrt, eps=1e-6, max_per_tensor=2, atol=1e-7,
            select="largest", eps_check=3.7e-7,
        )
        results.append((name, res))
    return results


def bench(
    model_or_checkpoint,
    clouds: list[D.PointCloud],
    batch_size: int = 1,
    n_batches: int = 20,
    warmup: int = 2,
) -> BenchReport:
    """Median per-sample inference time and peak accounted tensor bytes.

    Batches cycle through ``clouds``; ``warmup`` leading batches are run but
    not timed.
    """
    if batch_size < 1:
        raise ad.ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if n_batches < 1:
        raise ad.ConfigError(f"n_batches must be >= 1, got {n_batches}")
    if not clouds:
        raise ad.ConfigError("bench needs at least one cloud")
    model = _as_model(model_or_checkpoint)

    def batch_at(k: int) -> list[D.PointCloud]:
        return [clouds[(k * batch_size + j) % len(clouds)] for j in range(batch_size)]

    for k in range(warmup):
        _infer_batch(model, batch_at(k))

    ad.reset_peak_live_bytes()
    times = []
    for k in range(n_batches):
        batch = batch_at(warmup + k)
        t0 = time.perf_counter()
        _infer_batch(model, batch)
        times.append((time.perf_counter() - t0) * 1000.0)
    return BenchReport(
        per_sample_ms=float(np.median(times)) / batch_size,
        peak_live_bytes=ad.peak_live_bytes(),
        batch_size=batch_size,
        n_batches=n_batches,
        per_batch_ms=times,
    )
