"""Two-stage training, fold-wise evaluation, and the cross-validation
harness.

Stage 1 trains the patch VAE with AdamW (lr 1e-4, batch 12).  Stage 2
freezes the VAE, precomputes each patient's latent mean, and trains the
fusion network with Adam (lr 1e-3, batch 12) on the weighted Cox loss,
early-stopping on validation loss with patience 10.  The latent path is
deterministic (z = mu) in both stage-2 training and evaluation.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .cox import (
    TIME_SORTED,
    VERBATIM_ALG1,
    event_weights,
    records_to_arrays,
    weighted_cox_loss,
    weighted_cox_loss_grad,
)
from .data import fit_gene_scaler, make_folds, resample_patches
from .errors import ConfigError, ConvergenceError, NumericError, ValidationError
from .fusion import (
    FusionConfig,
    ModelParams,
    VaeParams,
    forward,
    forward_from_latent,
    init_model_params,
    init_vae_params,
    model_params_from_arrays,
    parameter_count,
    reparameterize,
    vae_decode,
    vae_encode,
    vae_loss,
    vae_params_from_arrays,
)
from .metrics import concordance_index, kaplan_meier, log_rank, risk_groups, time_dependent_auc
from .tensor import FlopCounter, Tensor, backward, concat, reshape

log = logging.getLogger("survfusion")

__all__ = [
    "Stage1Config",
    "Stage2Config",
    "TrainConfig",
    "AdamState",
    "adam_step",
    "adamw_step",
    "train_stage1",
    "train_stage2",
    "median_threshold",
    "predict_risks",
    "evaluate",
    "aggregate_fold_metrics",
    "run_cross_validation",
    "compare_loss_weighting",
    "gradcheck_suite",
    "FoldMetrics",
    "EvalReport",
    "FusionRiskEstimator",
    "checkpoint_blob",
]


# -- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class Stage1Config:
    lr: float = 1e-4
    batch_size: int = 12
    max_epochs: int = 30
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("stage1 needs lr > 0, batch_size >= 1, max_epochs >= 1")


@dataclass(frozen=True)
class Stage2Config:
    lr: float = 1e-3
    batch_size: int = 12
    patience: int = 10
    max_epochs: int = 100
    w_event: float = 3.0
    loss_mode: str = TIME_SORTED
    weight_decay: float = 0.0  # 0 keeps the optimizer plain Adam

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("stage2 needs lr > 0, batch_size >= 1, max_epochs >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.w_event <= 0:
            raise ConfigError("w_event must be > 0")
        if self.loss_mode not in (TIME_SORTED, VERBATIM_ALG1):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    seed: int = 0
    precision: str = "64"
    standardize_genes: bool = True

    def __post_init__(self):
        if self.precision not in ("32", "64"):
            raise ConfigError("precision must be '32' or '64'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "32" else np.float64

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "stage1" in d:
            d["stage1"] = Stage1Config(**d["stage1"])
        if "stage2" in d:
            d["stage2"] = Stage2Config(**d["stage2"])
        return cls(**d)


# -- optimizers ----------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new params, new state)."""
    return adamw_step(params, grads, state, lr, weight_decay=0.0,
                      beta1=beta1, beta2=beta2, eps=eps)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float,
               weight_decay: float = 0.0, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8):
    """Adam with decoupled weight decay: p -= lr * wd * p after the moment update."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            update = update + lr * weight_decay * p
        new_params[name] = p - update
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(t, new_m, new_v)


def _arrays_of(params) -> dict:
    return {name: t.data for name, t in params.named_tensors().items()}


def _grads_of(params) -> dict:
    out = {}
    for name, t in params.named_tensors().items():
        out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return out


# -- loss bridge into the autodiff graph ------------------------------------------------


def cox_loss_node(risks: Tensor, times, events, weights, mode: str = TIME_SORTED) -> Tensor:
    """Weighted Cox loss as a graph node with its analytic gradient."""
    flat = risks.data.ravel()
    value = weighted_cox_loss(flat, times, events, weights, mode)
    grad = weighted_cox_loss_grad(flat, times, events, weights, mode)

    def bwd(g):
        return (g * grad.reshape(risks.shape).astype(risks.data.dtype),)

    return Tensor._from_op(np.asarray(value, dtype=risks.data.dtype), (risks,),
                           "weighted_cox_loss", bwd)


# -- batching ----------------------------------------------------------------------------


def event_stratified_batches(events, batch_size: int, rng,
                             min_events: int = 2) -> list[np.ndarray]:
    """Index batches with events spread so every batch sees at least
    min(min_events, n_events) of them.

    When events are too scarce for every size-``batch_size`` batch to carry
    ``min_events``, the number of batches per epoch shrinks instead of the
    guarantee; leftover censored samples rotate in across epochs via the
    shuffle.
    """
    events = np.asarray(events)
    n = len(events)
    if int(events.sum()) == 0:
        raise ValidationError("cannot build Cox batches without any event")
    n_batches = max(1, min(n // batch_size, int(events.sum()) // min_events))
    want = min(min_events, int(events.sum()))
    for _attempt in range(100):
        event_idx = np.flatnonzero(events == 1)
        censored_idx = np.flatnonzero(events == 0)
        rng.shuffle(event_idx)
        rng.shuffle(censored_idx)
        batches: list[list[int]] = [[] for _ in range(n_batches)]
        slot = 0
        for idx in np.concatenate([event_idx, censored_idx]):
            placed = False
            for _ in range(n_batches):
                if len(batches[slot % n_batches]) < batch_size:
                    batches[slot % n_batches].append(int(idx))
                    slot += 1
                    placed = True
                    break
                slot += 1
            if not placed:
                break  # all batches at capacity; leftovers rotate in next epoch
        if all(int(events[b].sum()) >= min(want, len(b)) for b in batches):
            return [np.array(sorted(b), dtype=np.int64) for b in batches]
        warnings.warn("batch missed its event quota; resampling epoch")
    raise ConvergenceError("could not compose event-stratified batches in 100 attempts")


# -- stage 1 ------------------------------------------------------------------------------


def _stack_patches(bundles, config: FusionConfig, dtype, seed: int) -> list[np.ndarray]:
    out = []
    for i, b in enumerate(bundles):
        m = resample_patches(b.patch_features, config.patches_per_patient, seed=seed + i)
        out.append(np.asarray(m, dtype=dtype))
    return out


def _vae_value_loss(patch_mats, arrays, config: FusionConfig) -> float:
    """Deterministic (z = mu) VAE loss over a bundle list, no gradients."""
    vae = vae_params_from_arrays(arrays, trainable=False)
    total = 0.0
    for m in patch_mats:
        x = Tensor(m)
        mu, sigma = vae_encode(x, vae)
        x_hat = vae_decode(mu, vae)
        total += vae_loss(x, x_hat, mu, sigma, config.vae_beta).item()
    return total / len(patch_mats)


@dataclass
class Stage1Result:
    arrays: dict
    history: list
    best_epoch: int

    @property
    def vae(self) -> VaeParams:
        return vae_params_from_arrays(self.arrays, trainable=False)


def train_stage1(train_bundles, val_bundles, fusion_config: FusionConfig,
                 train_config: TrainConfig) -> Stage1Result:
    """Minimize the VAE objective; returns the best-validation checkpoint."""
    if not train_bundles:
        raise ValidationError("stage 1 needs a nonempty training set")
    cfg = train_config.stage1
    dtype = train_config.dtype
    rng = np.random.default_rng(train_config.seed)
    train_mats = _stack_patches(train_bundles, fusion_config, dtype, train_config.seed)
    val_mats = (
        _stack_patches(val_bundles, fusion_config, dtype, train_config.seed + 7919)
        if val_bundles else train_mats
    )
    arrays = _arrays_of(init_vae_params(fusion_config, rng, dtype))
    state = AdamState.zeros_like(arrays)
    best_val = math.inf
    best_arrays = dict(arrays)
    best_epoch = 0
    history = []
    n = len(train_mats)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        steps = 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            x_np = np.concatenate([train_mats[i] for i in batch], axis=0)
            vae = vae_params_from_arrays(arrays, trainable=True)
            try:
                x = Tensor(x_np)
                mu, sigma = vae_encode(x, vae)
                eps = rng.standard_normal(mu.shape).astype(dtype)
                z = reparameterize(mu, sigma, eps)
                x_hat = vae_decode(z, vae)
                loss = vae_loss(x, x_hat, mu, sigma, fusion_config.vae_beta)
                backward(loss)
            except NumericError as exc:
                raise ConvergenceError(
                    f"stage 1 diverged at epoch {epoch} step {steps + 1}: {exc}"
                ) from exc
            arrays, state = adamw_step(arrays, _grads_of(vae), state, cfg.lr,
                                       weight_decay=cfg.weight_decay)
            epoch_loss += loss.item()
            steps += 1
        val_loss = _vae_value_loss(val_mats, arrays, fusion_config)
        history.append({"epoch": epoch, "train_loss": epoch_loss / steps,
                        "val_loss": val_loss})
        log.info("stage1 epoch %d train %.6f val %.6f", epoch, epoch_loss / steps, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_arrays = dict(arrays)
            best_epoch = epoch
    return Stage1Result(best_arrays, history, best_epoch)


# -- stage 2 ------------------------------------------------------------------------------


def _latent_means(patch_mats, vae_arrays) -> list[np.ndarray]:
    """mu per patient, computed once: the VAE is frozen during stage 2."""
    w, b = vae_arrays["enc_w_mu"], vae_arrays["enc_b_mu"]
    return [m @ w + b for m in patch_mats]


def _prepared_inputs(bundles, fusion_config, train_config, vae_arrays,
                     gene_scaler, mask_genes, mask_clinical, seed):
    dtype = train_config.dtype
    mats = _stack_patches(bundles, fusion_config, dtype, seed)
    mus = _latent_means(mats, {k: v.astype(dtype) for k, v in vae_arrays.items()})
    genes = []
    clinical = []
    for b in bundles:
        g = np.asarray(b.genes, dtype=np.float64)
        if gene_scaler is not None:
            g = (g - gene_scaler[0]) / gene_scaler[1]
        if mask_genes:
            g = np.zeros_like(g)
        genes.append(g.astype(dtype))
        c = np.asarray(b.clinical, dtype=np.float64)
        if mask_clinical:
            c = np.zeros_like(c)
        clinical.append(c.astype(dtype))
    return mus, genes, clinical


def _batch_loss(model, batch, mus, genes, clinical, times, events, weights,
                fusion_config, mode) -> Tensor:
    risks = []
    for i in batch:
        r = forward_from_latent(Tensor(mus[i]), genes[i], clinical[i], model, fusion_config)
        risks.append(reshape(r, (1,)))
    risk_vec = concat(risks, axis=0)
    return cox_loss_node(risk_vec, times[batch], events[batch], weights[batch], mode)


def _value_risks(arrays, mus, genes, clinical, fusion_config) -> np.ndarray:
    model = model_params_from_arrays(arrays, trainable=False)
    out = np.empty(len(mus))
    for i in range(len(mus)):
        out[i] = forward_from_latent(
            Tensor(mus[i]), genes[i], clinical[i], model, fusion_config
        ).item()
    return out


@dataclass
class Stage2Result:
    arrays: dict
    gene_scaler: tuple | None
    history: list
    best_epoch: int
    stopped_epoch: int

    @property
    def model(self) -> ModelParams:
        return model_params_from_arrays(self.arrays, trainable=False)


def train_stage2(train_bundles, val_bundles, vae: Stage1Result | VaeParams | dict,
                 fusion_config: FusionConfig, train_config: TrainConfig,
                 mask_genes: bool = False, mask_clinical: bool = False) -> Stage2Result:
    """Minimize the weighted Cox loss over the fusion network with the VAE
    frozen; early stopping on validation loss."""
    cfg = train_config.stage2
    dtype = train_config.dtype
    if isinstance(vae, Stage1Result):
        vae_arrays = vae.arrays
    elif isinstance(vae, VaeParams):
        vae_arrays = _arrays_of(vae)
    else:
        vae_arrays = vae
    times, events, _ = records_to_arrays([b.record for b in train_bundles])
    if events.sum() == 0:
        raise ValidationError("stage 2 needs at least one training event")
    val_times, val_events, _ = records_to_arrays([b.record for b in val_bundles])
    if val_events.sum() == 0:
        raise ValidationError("stage 2 needs at least one validation event")

    gene_scaler = fit_gene_scaler(train_bundles) if train_config.standardize_genes else None
    rng = np.random.default_rng(train_config.seed + 1)
    mus, genes, clinical = _prepared_inputs(
        train_bundles, fusion_config, train_config, vae_arrays, gene_scaler,
        mask_genes, mask_clinical, train_config.seed,
    )
    val_mus, val_genes, val_clinical = _prepared_inputs(
        val_bundles, fusion_config, train_config, vae_arrays, gene_scaler,
        mask_genes, mask_clinical, train_config.seed + 7919,
    )
    weights = event_weights(events, cfg.w_event)
    val_weights = event_weights(val_events, cfg.w_event)

    arrays = _arrays_of(init_model_params(fusion_config, rng, dtype))
    state = AdamState.zeros_like(arrays)
    best_val = math.inf
    best_arrays = dict(arrays)
    best_epoch = 0
    epochs_since_best = 0
    history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        batches = event_stratified_batches(events, cfg.batch_size, rng)
        epoch_loss = 0.0
        for step, batch in enumerate(batches, start=1):
            model = model_params_from_arrays(arrays, trainable=True)
            try:
                loss = _batch_loss(model, batch, mus, genes, clinical, times,
                                   events, weights, fusion_config, cfg.loss_mode)
                backward(loss)
            except NumericError as exc:
                raise ConvergenceError(
                    f"stage 2 diverged at epoch {epoch} step {step}: {exc}"
                ) from exc
            arrays, state = adamw_step(arrays, _grads_of(model), state, cfg.lr,
                                       weight_decay=cfg.weight_decay)
            epoch_loss += loss.item()
        val_risk = _value_risks(arrays, val_mus, val_genes, val_clinical, fusion_config)
        val_loss = weighted_cox_loss(val_risk, val_times, val_events, val_weights,
                                     cfg.loss_mode)
        history.append({"epoch": epoch, "train_loss": epoch_loss / len(batches),
                        "val_loss": val_loss})
        log.info("stage2 epoch %d train %.6f val %.6f", epoch,
                 epoch_loss / len(batches), val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_arrays = dict(arrays)
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break
    return Stage2Result(best_arrays, gene_scaler, history, best_epoch, epoch)


def median_threshold(train_risks) -> float:
    """Exact median (mean of the middle two for even counts)."""
    risks = np.asarray(train_risks, dtype=np.float64)
    if risks.size == 0:
        raise ValidationError("median threshold needs a nonempty risk list")
    return float(np.median(risks))


def predict_risks(bundles, vae_arrays: dict, model_arrays: dict,
                  fusion_config: FusionConfig, train_config: TrainConfig,
                  gene_scaler=None, mask_genes: bool = False,
                  mask_clinical: bool = False, seed_offset: int = 0) -> np.ndarray:
    """Deterministic risk scores for a bundle list."""
    mus, genes, clinical = _prepared_inputs(
        bundles, fusion_config, train_config, vae_arrays, gene_scaler,
        mask_genes, mask_clinical, train_config.seed + seed_offset,
    )
    return _value_risks(model_arrays, mus, genes, clinical, fusion_config)


# -- evaluation -----------------------------------------------------------------------------


@dataclass
class FoldMetrics:
    fold: int
    c_index: float
    auc_at: dict
    mean_auc: float
    theta_opt: float
    n_high: int
    n_low: int
    logrank_chi2: float | None
    logrank_p: float | None

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "c_index": self.c_index,
            "auc_at": {str(k): v for k, v in self.auc_at.items()},
            "mean_auc": self.mean_auc,
            "theta_opt": self.theta_opt,
            "n_high": self.n_high,
            "n_low": self.n_low,
            "logrank_chi2": self.logrank_chi2,
            "logrank_p": self.logrank_p,
        }


@dataclass
class EvalReport:
    folds: list
    c_index_mean: float
    c_index_std: float
    mean_auc_mean: float
    mean_auc_std: float
    parameter_count: int
    checkpoint_bytes: int
    flops_estimate: int

    def to_dict(self) -> dict:
        return {
            "folds": [f.to_dict() for f in self.folds],
            "aggregate": {
                "c_index_mean": self.c_index_mean,
                "c_index_std": self.c_index_std,
                "mean_auc_mean": self.mean_auc_mean,
                "mean_auc_std": self.mean_auc_std,
            },
            "computational": {
                "parameter_count": self.parameter_count,
                "checkpoint_bytes": self.checkpoint_bytes,
                "flops_estimate": self.flops_estimate,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def aggregate_fold_metrics(fold_metrics, parameter_count_, checkpoint_bytes, flops) -> EvalReport:
    c = np.array([f.c_index for f in fold_metrics], dtype=np.float64)
    a = np.array([f.mean_auc for f in fold_metrics], dtype=np.float64)
    return EvalReport(
        folds=list(fold_metrics),
        c_index_mean=float(np.mean(c)),
        c_index_std=float(np.std(c, ddof=1)) if len(c) > 1 else 0.0,
        mean_auc_mean=float(np.mean(a)),
        mean_auc_std=float(np.std(a, ddof=1)) if len(a) > 1 else 0.0,
        parameter_count=parameter_count_,
        checkpoint_bytes=checkpoint_bytes,
        flops_estimate=flops,
    )


def evaluate(fold: int, train_risks, val_risks, val_records,
             horizons=(60.0, 120.0), auc_weights="ipcw",
             out_dir=None) -> FoldMetrics:
    """Validation-fold metrics: C-index, AUC at the horizons, risk-group
    Kaplan-Meier curves and log-rank.  Undefined metrics become labeled
    warnings, not crashes."""
    from .errors import UndefinedMetricError

    val_risks = np.asarray(val_risks, dtype=np.float64)
    theta = median_threshold(train_risks)
    try:
        c_index = concordance_index(val_risks, val_records)
    except UndefinedMetricError as exc:
        warnings.warn(f"fold {fold}: C-index undefined: {exc}")
        c_index = math.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        auc = time_dependent_auc(val_risks, val_records, horizons=horizons,
                                 weights=auc_weights)
    groups = risk_groups(val_risks, theta)
    high = groups == "high"
    times, events, _ = records_to_arrays(val_records)
    chi2 = p = None
    if high.any() and (~high).any() and events.sum() > 0:
        res = log_rank((times[high], events[high]), (times[~high], events[~high]))
        chi2, p = res.chi2, res.p
    else:
        warnings.warn(f"fold {fold}: degenerate risk grouping, log-rank skipped")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, mask in (("high", high), ("low", ~high)):
            if mask.any():
                curve = kaplan_meier(times[mask], events[mask])
                (out_dir / f"km_fold{fold}_{name}.csv").write_text(curve.to_csv())
        summary = {"fold": fold, "logrank_chi2": chi2, "logrank_p": p,
                   "n_high": int(high.sum()), "n_low": int((~high).sum())}
        (out_dir / f"km_fold{fold}_summary.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2)
        )
    return FoldMetrics(
        fold=fold,
        c_index=float(c_index),
        auc_at=dict(auc.auc_at),
        mean_auc=float(auc.mean_auc),
        theta_opt=float(theta),
        n_high=int(high.sum()),
        n_low=int((~high).sum()),
        logrank_chi2=chi2,
        logrank_p=p,
    )


def checkpoint_blob(named_arrays: dict, config_echo: dict) -> bytes:
    """The exact byte content a checkpoint file would hold."""
    from .fusion import build_checkpoint_blob

    return build_checkpoint_blob(named_arrays, config_echo)


def _forward_flops(bundle, vae_arrays, model_arrays, fusion_config) -> int:
    vae = vae_params_from_arrays(vae_arrays, trainable=False)
    model = model_params_from_arrays(model_arrays, trainable=False)
    with FlopCounter() as counter:
        forward(bundle, vae, model, fusion_config)
    return counter.total


def run_cross_validation(bundles, fusion_config: FusionConfig,
                         train_config: TrainConfig, k: int = 5,
                         mask_genes: bool = False, mask_clinical: bool = False,
                         horizons=(60.0, 120.0), out_dir=None) -> EvalReport:
    """Train both stages per fold and aggregate validation metrics."""
    records = [b.record for b in bundles]
    folds = make_folds(records, k=k, seed=train_config.seed)
    fold_metrics = []
    last_stage2 = None
    last_vae = None
    for fold in folds:
        fold_seed = train_config.seed + 1000 * fold.fold
        fold_config = dataclasses.replace(train_config, seed=fold_seed)
        train_b = [bundles[i] for i in fold.train_idx]
        val_b = [bundles[i] for i in fold.val_idx]
        stage1 = train_stage1(train_b, val_b, fusion_config, fold_config)
        stage2 = train_stage2(train_b, val_b, stage1, fusion_config, fold_config,
                              mask_genes=mask_genes, mask_clinical=mask_clinical)
        train_risks = predict_risks(train_b, stage1.arrays, stage2.arrays,
                                    fusion_config, fold_config, stage2.gene_scaler,
                                    mask_genes, mask_clinical)
        val_risks = predict_risks(val_b, stage1.arrays, stage2.arrays,
                                  fusion_config, fold_config, stage2.gene_scaler,
                                  mask_genes, mask_clinical, seed_offset=7919)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fm = evaluate(fold.fold, train_risks, val_risks,
                          [b.record for b in val_b], horizons=horizons,
                          out_dir=out_dir)
        fold_metrics.append(fm)
        last_stage2, last_vae = stage2, stage1
    named = dict(last_vae.vae.named_tensors())
    named.update(last_stage2.model.named_tensors())
    n_params = parameter_count(last_vae.vae) + parameter_count(last_stage2.model)
    ckpt_bytes = len(checkpoint_blob(named, fusion_config.to_dict()))
    flops = _forward_flops(bundles[0], last_vae.arrays, last_stage2.arrays, fusion_config)
    report = aggregate_fold_metrics(fold_metrics, n_params, ckpt_bytes, flops)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "report.json").write_text(report.to_json())
    return report


def compare_loss_weighting(bundles, fusion_config: FusionConfig,
                           train_config: TrainConfig, k: int = 5) -> dict:
    """Paired runs of the unweighted (w_event = 1) and weighted losses on the
    same folds and seed; returns the side-by-side per-fold C-index table."""
    weighted_cfg = train_config
    unweighted_cfg = dataclasses.replace(
        train_config, stage2=dataclasses.replace(train_config.stage2, w_event=1.0)
    )
    weighted = run_cross_validation(bundles, fusion_config, weighted_cfg, k=k)
    unweighted = run_cross_validation(bundles, fusion_config, unweighted_cfg, k=k)
    rows = []
    for fw, fu in zip(weighted.folds, unweighted.folds):
        rows.append({"fold": fw.fold, "c_index_unweighted": fu.c_index,
                     "c_index_weighted": fw.c_index})
    return {
        "per_fold": rows,
        "unweighted_mean": unweighted.c_index_mean,
        "unweighted_std": unweighted.c_index_std,
        "weighted_mean": weighted.c_index_mean,
        "weighted_std": weighted.c_index_std,
    }


def render_loss_comparison(table: dict) -> str:
    lines = [f"{'Fold':<6}{'C-index (unweighted)':>22}{'C-index (weighted)':>20}"]
    for row in table["per_fold"]:
        lines.append(
            f"{row['fold']:<6}{row['c_index_unweighted']:>22.4f}{row['c_index_weighted']:>20.4f}"
        )
    lines.append(
        f"{'Mean':<6}{table['unweighted_mean']:>15.4f} ± {table['unweighted_std']:.4f}"
        f"{table['weighted_mean']:>13.4f} ± {table['weighted_std']:.4f}"
    )
    return "\n".join(lines)


# -- scikit-learn style estimator --------------------------------------------------------------


class FusionRiskEstimator(BaseEstimator):
    """Two-stage multimodal risk model with a fit/predict surface.

    ``fit`` takes a list of PatientBundle; a validation split is carved out
    internally (event-stratified) when none is provided.  ``predict``
    returns risk scores; higher means earlier expected failure.
    """

    def __init__(self, fusion_config: FusionConfig | None = None,
                 train_config: TrainConfig | None = None,
                 mask_genes: bool = False, mask_clinical: bool = False):
        self.fusion_config = fusion_config
        self.train_config = train_config
        self.mask_genes = mask_genes
        self.mask_clinical = mask_clinical

    def _configs(self):
        return (self.fusion_config or FusionConfig(),
                self.train_config or TrainConfig())

    def fit(self, X, y=None, validation=None):
        fusion_config, train_config = self._configs()
        bundles = list(X)
        if validation is None:
            folds = make_folds([b.record for b in bundles], k=5,
                               seed=train_config.seed)
            train_b = [bundles[i] for i in folds[0].train_idx]
            val_b = [bundles[i] for i in folds[0].val_idx]
        else:
            train_b, val_b = bundles, list(validation)
        stage1 = train_stage1(train_b, val_b, fusion_config, train_config)
        stage2 = train_stage2(train_b, val_b, stage1, fusion_config, train_config,
                              mask_genes=self.mask_genes,
                              mask_clinical=self.mask_clinical)
        self.vae_arrays_ = stage1.arrays
        self.model_arrays_ = stage2.arrays
        self.gene_scaler_ = stage2.gene_scaler
        self.history_ = {"stage1": stage1.history, "stage2": stage2.history}
        self.theta_ = median_threshold(
            predict_risks(train_b, stage1.arrays, stage2.arrays, fusion_config,
                          train_config, stage2.gene_scaler,
                          self.mask_genes, self.mask_clinical)
        )
        return self

    def predict(self, X) -> np.ndarray:
        fusion_config, train_config = self._configs()
        return predict_risks(list(X), self.vae_arrays_, self.model_arrays_,
                             fusion_config, train_config, self.gene_scaler_,
                             self.mask_genes, self.mask_clinical)

    def predict_groups(self, X) -> np.ndarray:
        return risk_groups(self.predict(X), self.theta_)

    def score(self, X, y=None) -> float:
        bundles = list(X)
        return concordance_index(self.predict(bundles), [b.record for b in bundles])


# -- gradient-check suite -----------------------------------------------------------------------


def _tiny_gradcheck_setup(seed=0):
    from .data import SyntheticSpec, synthesize_cohort

    config = FusionConfig(
        feat_dim_per_extractor=4, n_extractors=2, latent_dim=16,
        patches_per_patient=4, gene_dim=6, clinical_dim=4,
        n_image_tokens=2, n_gene_tokens=2, d_model=8, n_heads=2,
        n_encoder_layers=1, pool_attn_dim=4, fc_stack_dims=(8, 8, 8, 4),
    )
    spec = SyntheticSpec(
        n_patients=6, patches_per_patient=4, feat_dim=config.concat_dim,
        gene_dim=6, seed=seed, censoring_fraction=0.4,
    )
    bundles = synthesize_cohort(spec)
    rng = np.random.default_rng(seed + 1)
    vae = init_vae_params(config, rng)
    model = init_model_params(config, rng)
    return config, bundles, vae, model


def _full_loss(bundles, vae, model, config, w_event=3.0) -> Tensor:
    times, events, _ = records_to_arrays([b.record for b in bundles])
    weights = event_weights(events, w_event)
    risks = [reshape(forward(b, vae, model, config), (1,)) for b in bundles]
    return cox_loss_node(concat(risks, axis=0), times, events, weights, TIME_SORTED)


def stage2_forward_gradcheck(seed: int = 0, coords_per_tensor: int = 5,
                             h: float = 1e-5) -> float:
    """Max relative finite-difference error over sampled coordinates of every
    trainable tensor of the full tiny-config stage-2 forward + loss."""
    from .tensor import check_gradients

    config, bundles, vae, model = _tiny_gradcheck_setup(seed)
    named = dict(vae.named_tensors())
    named.update(model.named_tensors())
    worst = 0.0
    rng = np.random.default_rng(seed + 2)
    vae_arrays = {k: t.data for k, t in vae.named_tensors().items()}
    model_arrays = {k: t.data for k, t in model.named_tensors().items()}
    for name in named:
        def f(candidate, _name=name):
            vae2 = vae_params_from_arrays(vae_arrays, trainable=False)
            model2 = model_params_from_arrays(model_arrays, trainable=False)
            if _name in vae_arrays:
                setattr(vae2, _name, candidate)
            else:
                _assign_named(model2, _name, candidate)
            return _full_loss(bundles, vae2, model2, config)

        err = check_gradients(f, named[name], h=h, max_coords=coords_per_tensor, rng=rng)
        worst = max(worst, err)
    return worst


def _assign_named(model: ModelParams, name: str, tensor: Tensor) -> None:
    if name.startswith("encoder"):
        layer_id, field_name = name.split(".", 1)
        layer = model.encoder_layers[int(layer_id[len("encoder"):])]
        setattr(layer, field_name, tensor)
    else:
        setattr(model, name, tensor)


def gradcheck_suite(seed: int = 0) -> dict[str, float]:
    """Finite-difference verification of every analytic-gradient surface.

    Returns op name -> max relative error; all must sit below 1e-4.
    """
    from .tensor import check_gradients, tensor_sum
    from .fusion import (
        co_attention,
        dual_cross_attention,
        self_attention_pool,
        transformer_encode,
    )

    rng = np.random.default_rng(seed)
    results = {}

    # weighted Cox loss, both orderings
    for mode in (TIME_SORTED, VERBATIM_ALG1):
        worst = 0.0
        for trial in range(5):
            n = 16
            trial_rng = np.random.default_rng(seed + 10 * trial)
            times = trial_rng.uniform(1.0, 80.0, size=n)
            events = (trial_rng.uniform(size=n) < 0.25).astype(int)
            events[trial_rng.integers(n)] = 1
            risks0 = np.sort(trial_rng.standard_normal(n)) + np.arange(n) * 1e-3
            weights = event_weights(events, 3.0)

            def f(t):
                return cox_loss_node(t, times, events, weights, mode)

            worst = max(worst, check_gradients(f, Tensor(risks0), h=1e-5))
        results[f"weighted_cox_loss[{mode}]"] = worst

    config, bundles, vae, model = _tiny_gradcheck_setup(seed)
    proj_pool = Tensor(rng.standard_normal((1, config.latent_dim)))

    def pool_f(z):
        return tensor_sum(self_attention_pool(z, model) * proj_pool)

    results["self_attention_pool"] = check_gradients(
        pool_f, Tensor(rng.standard_normal((5, config.latent_dim))), h=1e-5
    )

    g_tok = Tensor(rng.standard_normal((2, config.d_model)))
    proj_tok = Tensor(rng.standard_normal((2, config.d_model)))

    def co_f(i_tok):
        a_ig, a_gi = co_attention(i_tok, g_tok, model)
        return tensor_sum(a_ig * proj_tok) + tensor_sum(a_gi * proj_tok)

    results["co_attention"] = check_gradients(
        co_f, Tensor(rng.standard_normal((2, config.d_model))), h=1e-5
    )

    def dual_f(i_tok):
        a_ig, a_gi = co_attention(i_tok, g_tok, model)
        d_ig, d_gi = dual_cross_attention(a_ig, a_gi, i_tok, g_tok)
        return tensor_sum(d_ig * proj_tok) + tensor_sum(d_gi * proj_tok)

    results["dual_cross_attention"] = check_gradients(
        dual_f, Tensor(rng.standard_normal((2, config.d_model))), h=1e-5
    )

    proj_enc = Tensor(rng.standard_normal((4, config.d_model)))

    def enc_f(x):
        return tensor_sum(transformer_encode(x, model, config.n_heads) * proj_enc)

    results["transformer_encoder"] = check_gradients(
        enc_f, Tensor(rng.standard_normal((4, config.d_model))), h=1e-5
    )

    results["stage2_forward_with_loss"] = stage2_forward_gradcheck(seed)
    return results
