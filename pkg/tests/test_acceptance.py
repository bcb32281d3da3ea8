"""Acceptance suite: every criterion runs at its stated tolerance and
prints one pass/fail line."""

import math
import time
import warnings

import numpy as np
import pytest

from survfusion.cox import (
    VERBATIM_ALG1,
    event_weights,
    fit_coxph,
    hazard_table,
    weighted_cox_loss,
)
from survfusion.data import (
    SyntheticSpec,
    read_feature_file,
    synthesize_cohort,
    write_feature_file,
)
from survfusion.fusion import (
    FusionConfig,
    build_checkpoint_blob,
    dual_cross_attention,
    forward,
    init_model_params,
    init_vae_params,
    load_checkpoint,
    save_checkpoint,
)
from survfusion.metrics import concordance_index, kaplan_meier, time_dependent_auc
from survfusion.tensor import Tensor, softmax_rows
from survfusion.training import (
    Stage1Config,
    Stage2Config,
    TrainConfig,
    compare_loss_weighting,
    gradcheck_suite,
    render_loss_comparison,
    run_cross_validation,
)

GRAD_TOL = 1e-4


def announce(number: int, ok: bool, detail: str) -> None:
    print(f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {number}: {detail}"


# -- pinned end-to-end benchmark (criteria 7 and 9 share it) -----------------------------


BENCH_SPEC = SyntheticSpec(
    n_patients=240, patches_per_patient=32, feat_dim=48, gene_dim=16,
    clinical_dim=4, image_weight=1.0, gene_weight=1.4, clinical_weight=1.1,
    feature_noise=0.2, weibull_shape=2.0, weibull_scale=200.0,
    censoring_fraction=0.67, seed=11,
)

BENCH_FUSION = FusionConfig(
    feat_dim_per_extractor=16, n_extractors=3, latent_dim=12,
    patches_per_patient=32, gene_dim=16, clinical_dim=4,
    n_image_tokens=4, n_gene_tokens=4, d_model=8, n_heads=2,
    n_encoder_layers=1, pool_attn_dim=8, fc_stack_dims=(16, 8, 8, 4),
    vae_beta=0.25,
)

BENCH_TRAIN = TrainConfig(
    stage1=Stage1Config(max_epochs=8),
    stage2=Stage2Config(max_epochs=40, patience=10, weight_decay=0.3),
    seed=3,
)


@pytest.fixture(scope="module")
def benchmark_runs():
    bundles = synthesize_cohort(BENCH_SPEC)
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        trimodal = run_cross_validation(bundles, BENCH_FUSION, BENCH_TRAIN, k=5)
        image_only = run_cross_validation(bundles, BENCH_FUSION, BENCH_TRAIN, k=5,
                                          mask_genes=True, mask_clinical=True)
    elapsed = time.perf_counter() - start
    return bundles, trimodal, image_only, elapsed


# -- criterion 1: loss reduction ----------------------------------------------------------


def breslow_nll_oracle(risks, times, events):
    """Classical event-averaged Breslow negative log partial likelihood,
    risk sets enumerated explicitly."""
    terms = []
    for i in range(len(risks)):
        if events[i] != 1:
            continue
        hazard_sum = sum(
            math.exp(risks[j]) for j in range(len(risks)) if times[j] >= times[i]
        )
        terms.append(risks[i] - math.log(hazard_sum))
    return -sum(terms) / len(terms)


def test_criterion_1_loss_reduction():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 65))
        rate = rng.uniform(0.1, 0.9)
        times = rng.uniform(0.5, 100.0, size=n)
        events = (rng.uniform(size=n) < rate).astype(int)
        if events.sum() == 0:
            events[int(rng.integers(n))] = 1
        risks = rng.standard_normal(n)
        got = weighted_cox_loss(risks, times, events, np.ones(n))
        want = breslow_nll_oracle(risks, times, events)
        worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - start
    announce(1, worst < 1e-12 and elapsed < 5.0,
             f"unit-weight loss vs Breslow oracle, max |diff| {worst:.2e}, "
             f"100 batches in {elapsed:.2f}s")


# -- criterion 2: gradient fidelity ----------------------------------------------------------


def test_criterion_2_gradient_fidelity():
    start = time.perf_counter()
    results = gradcheck_suite(seed=0)
    elapsed = time.perf_counter() - start
    worst = max(results.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in results.items())
    announce(2, worst < GRAD_TOL and elapsed < 60.0,
             f"max rel err {worst:.2e} (< {GRAD_TOL}) in {elapsed:.1f}s [{detail}]")


# -- criterion 3: metric oracles ----------------------------------------------------------


def cindex_pair_oracle(risks, times, events):
    num = 0.0
    den = 0
    n = len(risks)
    for i in range(n):
        for j in range(n):
            if times[i] < times[j] and events[i] == 1:
                den += 1
                if risks[i] > risks[j]:
                    num += 1.0
    return num / den


def auc_double_sum(risks, times, events, horizon):
    num = 0.0
    n = len(risks)
    for i in range(n):
        for j in range(n):
            if times[i] <= horizon and times[j] > horizon and risks[j] <= risks[i]:
                num += 1.0
    den = sum(1 for i in range(n) if times[i] <= horizon) * sum(
        1 for j in range(n) if times[j] > horizon
    )
    return num / den


def km_product_limit_oracle(times, events):
    out = []
    surv = 1.0
    for t in sorted({t for t, e in zip(times, events) if e == 1}):
        n = sum(1 for y in times if y >= t)
        d = sum(1 for y, e in zip(times, events) if y == t and e == 1)
        surv *= 1.0 - d / n
        out.append(surv)
    return np.array(out)


def test_criterion_3_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(103)

    for _ in range(200):
        n = int(rng.integers(3, 51))
        times = rng.uniform(1.0, 90.0, size=n)
        events = (rng.uniform(size=n) < 0.6).astype(int)
        if not np.any(events[np.argsort(times)][:-1] == 1):
            events[int(np.argmin(times))] = 1
        risks = rng.standard_normal(n)
        got = concordance_index(risks, times, events)
        assert got == cindex_pair_oracle(risks, times, events)

    auc_worst = 0.0
    checked = 0
    while checked < 50:
        n = int(rng.integers(4, 31))
        times = rng.uniform(1.0, 100.0, size=n)
        events = (rng.uniform(size=n) < 0.6).astype(int)
        horizon = 50.0
        if not np.any((times <= horizon) & (events == 1)) or not np.any(times > horizon):
            continue
        risks = rng.standard_normal(n)
        res = time_dependent_auc(risks, times, events, horizons=(horizon,),
                                 weights="uniform")
        auc_worst = max(auc_worst, abs(res.auc_at[horizon]
                                       - auc_double_sum(risks, times, events, horizon)))
        checked += 1

    km_worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 41))
        times = rng.integers(1, 20, size=n).astype(float)
        events = (rng.uniform(size=n) < 0.6).astype(int)
        curve = kaplan_meier(times, events)
        want = km_product_limit_oracle(times, events)
        if len(want):
            km_worst = max(km_worst, float(np.max(np.abs(curve.survival - want))))
        else:
            assert len(curve.survival) == 0

    elapsed = time.perf_counter() - start
    announce(3, auc_worst < 1e-12 and km_worst < 1e-12 and elapsed < 30.0,
             f"C-index exact on 200 instances; AUC max |diff| {auc_worst:.1e}; "
             f"KM max |diff| {km_worst:.1e}; {elapsed:.1f}s")


# -- criterion 4: pseudocode fidelity ---------------------------------------------------------


def sorted_prefix_transcription(risks, events, weights):
    """Line-by-line transcription: sort by descending risk, cumulative
    weighted hazard, per-sample log likelihood, event mask, normalized mean."""
    n = len(risks)
    total_weighted_events = sum(weights[i] * events[i] for i in range(n))
    order = sorted(range(n), key=lambda i: -risks[i])
    r = [risks[i] for i in order]
    e = [events[i] for i in order]
    w = [weights[i] for i in order]
    h = [math.exp(v) for v in r]
    cumulative = []
    running = 0.0
    for i in range(n):
        running += w[i] * h[i]
        cumulative.append(running)
    u = [w[i] * (r[i] - math.log(cumulative[i])) for i in range(n)]
    masked = [u[i] * e[i] for i in range(n)]
    return -sum(masked) / total_weighted_events


def test_criterion_4_verbatim_mode():
    rng = np.random.default_rng(104)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(3, 33))
        times = rng.uniform(1.0, 60.0, size=n)
        events = (rng.uniform(size=n) < 0.5).astype(int)
        if events.sum() == 0:
            events[0] = 1
        risks = rng.standard_normal(n)
        weights = event_weights(events, 3.0)
        got = weighted_cox_loss(risks, times, events, weights, mode=VERBATIM_ALG1)
        want = sorted_prefix_transcription(list(risks), list(events), list(weights))
        worst = max(worst, abs(got - want))
    announce(4, worst < 1e-12,
             f"risk-sorted mode vs literal transcription, max |diff| {worst:.2e} on 20 batches")


# -- criterion 5: CoxPH fitter ----------------------------------------------------------------


def exponential_cohort(n, beta, seed, censor_target=0.30):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    lam = 0.05 * np.exp(beta * x)
    t_event = rng.exponential(1.0 / lam)
    draws = rng.exponential(1.0, size=n)
    lo, hi = 1e-4, 1e6  # bisect the censor-time scale to the target fraction
    for _ in range(60):
        mid = (lo + hi) / 2
        if np.mean(mid * draws < t_event) > censor_target:
            lo = mid
        else:
            hi = mid
    t_cens = ((lo + hi) / 2) * draws
    times = np.minimum(t_event, t_cens)
    events = (t_event <= t_cens).astype(int)
    return x, times, events


def breslow_loglik(x, times, events, beta):
    eta = beta * x
    shift = eta.max() if beta >= 0 else eta.min()
    ex = np.exp(eta - shift)
    ll = 0.0
    for i in np.flatnonzero(events == 1):
        ll += (eta[i] - shift) - math.log(ex[times >= times[i]].sum())
    return ll


def grid_search_maximizer(x, times, events):
    coarse = np.arange(-2.0, 2.0, 0.05)
    values = [breslow_loglik(x, times, events, b) for b in coarse]
    center = float(coarse[int(np.argmax(values))])
    fine = np.arange(center - 0.06, center + 0.06, 1e-3)
    values = [breslow_loglik(x, times, events, b) for b in fine]
    return float(fine[int(np.argmax(values))])


def test_criterion_5_coxph_fitter():
    hits = 0
    ci_worst = 0.0
    for seed in range(20):
        x, times, events = exponential_cohort(500, 0.7, seed=seed)
        model = fit_coxph(x[:, None], times=times, events=events)
        beta_hat = float(model.coefficients[0])
        grid = grid_search_maximizer(x, times, events)
        in_range = 0.55 <= beta_hat <= 0.85
        matches = abs(grid - beta_hat) <= 1e-3
        hits += int(model.converged and in_range and matches)
        (row,) = hazard_table(model, ["x"])
        se = float(model.standard_errors[0])
        ci_worst = max(
            ci_worst,
            abs(row.ci_low - math.exp(beta_hat - 1.96 * se)),
            abs(row.ci_high - math.exp(beta_hat + 1.96 * se)),
        )
    announce(5, hits == 20 and ci_worst < 1e-9,
             f"{hits}/20 replicates in [0.55, 0.85] and matching the 1e-3 grid oracle; "
             f"CI bound max |diff| {ci_worst:.1e}")


# -- criterion 6: architecture invariants -------------------------------------------------------


def test_criterion_6_architecture_invariants():
    rng = np.random.default_rng(106)

    # single-token collapse is exact
    i_tok = Tensor(rng.standard_normal((1, 5)))
    g_tok = Tensor(rng.standard_normal((1, 5)))
    d_ig, d_gi = dual_cross_attention(
        Tensor(rng.standard_normal((1, 5))), Tensor(rng.standard_normal((1, 5))),
        i_tok, g_tok,
    )
    collapse_exact = np.array_equal(d_ig.data, i_tok.data) and np.array_equal(
        d_gi.data, g_tok.data
    )

    # attention rows sum to one (every attention map is a softmax_rows output)
    row_sum_err = 0.0
    for _ in range(50):
        m = int(rng.integers(1, 12))
        n = int(rng.integers(1, 12))
        scores = rng.standard_normal((m, n)) * rng.uniform(0.1, 50.0)
        s = softmax_rows(Tensor(scores)).data
        row_sum_err = max(row_sum_err, float(np.max(np.abs(s.sum(axis=1) - 1.0))))
        assert np.all(s > 0) and np.all(s <= 1.0)

    # patch-permutation invariance of the full forward risk
    cfg = FusionConfig(
        feat_dim_per_extractor=8, n_extractors=3, latent_dim=12,
        patches_per_patient=20, gene_dim=10, clinical_dim=4,
        n_image_tokens=2, n_gene_tokens=2, d_model=8, n_heads=2,
        n_encoder_layers=1, pool_attn_dim=4, fc_stack_dims=(8, 8, 8, 4),
    )
    vae = init_vae_params(cfg, rng)
    model = init_model_params(cfg, rng)
    spec = SyntheticSpec(n_patients=1, patches_per_patient=20, feat_dim=24,
                         gene_dim=10, seed=6)
    bundle = synthesize_cohort(spec)[0]
    base = forward(bundle, vae, model, cfg).item()
    perm = rng.permutation(20)
    import dataclasses as dc

    shuffled = dc.replace(bundle, patch_features=bundle.patch_features[perm])
    permuted = forward(shuffled, vae, model, cfg).item()
    perm_err = abs(permuted - base) / max(1.0, abs(base))

    # full-size shape smoke test under the time budget
    full_cfg = FusionConfig()
    full_vae = init_vae_params(full_cfg, rng)
    full_model = init_model_params(full_cfg, rng)
    full_spec = SyntheticSpec(n_patients=1, patches_per_patient=500, feat_dim=1152,
                              gene_dim=138, seed=7)
    full_bundle = synthesize_cohort(full_spec)[0]
    start = time.perf_counter()
    risk = forward(full_bundle, full_vae, full_model, full_cfg).item()
    full_elapsed = time.perf_counter() - start

    announce(6, collapse_exact and row_sum_err < 1e-9 and perm_err <= 1e-6
             and math.isfinite(risk) and full_elapsed < 2.0,
             f"collapse exact; row-sum err {row_sum_err:.1e}; permutation err {perm_err:.1e}; "
             f"full-size risk {risk:.4f} in {full_elapsed:.2f}s")


# -- criterion 7: synthetic end-to-end benchmark -------------------------------------------------


def test_criterion_7_end_to_end(benchmark_runs):
    _, trimodal, image_only, elapsed = benchmark_runs
    tri = trimodal.c_index_mean
    img = image_only.c_index_mean
    gap = tri - img
    announce(7, tri >= 0.70 and gap >= 0.02 and elapsed < 300.0,
             f"trimodal C {tri:.4f} (folds "
             f"{[round(f.c_index, 3) for f in trimodal.folds]}), image-only {img:.4f}, "
             f"gap {gap:.4f}, {elapsed:.0f}s")


def test_benchmark_risk_grouping(benchmark_runs):
    # median-threshold grouping on the learned risks separates survival on
    # the validation folds, and the threshold is fold-specific
    _, trimodal, _, _ = benchmark_runs
    p_values = [f.logrank_p for f in trimodal.folds]
    assert sum(p < 0.05 for p in p_values) >= 3
    assert min(p_values) < 0.01
    thetas = [f.theta_opt for f in trimodal.folds]
    assert len(set(thetas)) == len(thetas)


# -- criterion 8: loss comparison protocol --------------------------------------------------------


def test_criterion_8_loss_comparison_protocol(capsys):
    spec = SyntheticSpec(
        n_patients=120, patches_per_patient=8, feat_dim=24, gene_dim=8,
        clinical_dim=4, image_weight=0.9, gene_weight=1.2, clinical_weight=1.0,
        feature_noise=0.25, weibull_scale=200.0, censoring_fraction=0.85, seed=21,
    )
    bundles = synthesize_cohort(spec)
    event_rate = np.mean([b.record.event for b in bundles])
    fusion_config = FusionConfig(
        feat_dim_per_extractor=8, n_extractors=3, latent_dim=8,
        patches_per_patient=8, gene_dim=8, clinical_dim=4,
        n_image_tokens=2, n_gene_tokens=2, d_model=8, n_heads=2,
        n_encoder_layers=1, pool_attn_dim=4, fc_stack_dims=(8, 8, 8, 4),
        vae_beta=0.25,
    )
    train_config = TrainConfig(
        stage1=Stage1Config(max_epochs=4),
        stage2=Stage2Config(max_epochs=15, patience=6, weight_decay=0.3), seed=9,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = compare_loss_weighting(bundles, fusion_config, train_config, k=5)
    rendered = render_loss_comparison(table)
    print()
    print(rendered)
    complete = (
        len(table["per_fold"]) == 5
        and all(math.isfinite(r["c_index_weighted"])
                and math.isfinite(r["c_index_unweighted"]) for r in table["per_fold"])
    )
    announce(8, complete and abs(event_rate - 0.15) < 0.05,
             f"paired runs complete at event rate {event_rate:.2f}; weighted "
             f"{table['weighted_mean']:.3f} vs unweighted {table['unweighted_mean']:.3f}")


# -- criterion 9: determinism ----------------------------------------------------------------------


def test_criterion_9_determinism(benchmark_runs):
    bundles, trimodal, _, _ = benchmark_runs
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rerun = run_cross_validation(bundles, BENCH_FUSION, BENCH_TRAIN, k=5)
    identical = rerun.to_json() == trimodal.to_json()
    announce(9, identical, "two same-seed benchmark runs produced bit-identical reports")


# -- criterion 10: format round trips ---------------------------------------------------------------


def test_criterion_10_format_round_trips(tmp_path):
    rng = np.random.default_rng(110)
    feature_ok = True
    for i in range(50):
        rows = int(rng.integers(1, 40))
        cols = int(rng.integers(1, 40))
        matrix = (rng.standard_normal((rows, cols)) * 100).astype(np.float32)
        path = tmp_path / f"f{i}.bfnf"
        write_feature_file(path, matrix)
        back = read_feature_file(path)
        path2 = tmp_path / f"f{i}b.bfnf"
        write_feature_file(path2, back)
        feature_ok &= np.array_equal(back.astype(np.float32), matrix)
        feature_ok &= path.read_bytes() == path2.read_bytes()

    checkpoint_ok = True
    for i in range(50):
        arrays = {
            f"t{j}": (rng.standard_normal(
                (int(rng.integers(1, 8)), int(rng.integers(1, 8)))
            ) * 10).astype(np.float32).astype(np.float64)
            for j in range(int(rng.integers(1, 6)))
        }
        path = tmp_path / f"c{i}.ckpt"
        save_checkpoint(path, arrays, {"case": i})
        echo, back = load_checkpoint(path)
        checkpoint_ok &= echo == {"case": i}
        for name, arr in arrays.items():
            checkpoint_ok &= np.array_equal(back[name], arr)
        checkpoint_ok &= build_checkpoint_blob(back, echo) == path.read_bytes()

    announce(10, feature_ok and checkpoint_ok,
             "50 feature files and 50 checkpoints round-tripped bit-exactly")
