"""Data ingestion, fold splitting, and the synthetic multimodal cohort
generator used for desk-scale verification.

External formats:
  * patch-feature files: magic ``BFNF``, u32 version=1, u32 rows, u32 cols
    (little-endian), then rows*cols little-endian float32, row-major;
  * ``genes.csv``: patient_id column plus one column per panel gene;
  * ``clinical.csv``: patient_id, grade, size_mm, age_years, ln_status,
    time_months, event;
  * ``folds.json``: fold -> {train: [...], val: [...]} patient ids.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cox import SurvivalRecord
from .errors import (
    ConfigError,
    FormatError,
    ShapeError,
    StratificationError,
    ValidationError,
)

MAGIC = b"BFNF"
VERSION = 1
HEADER_BYTES = 16
LN_MISSING_COXPH_VALUE = 2.0  # fixed imputation value in the hazard analyses

__all__ = [
    "PatientBundle",
    "FoldSplit",
    "SyntheticSpec",
    "ClinicalVector",
    "write_feature_file",
    "read_feature_file",
    "binarize_clinical",
    "load_gene_matrix",
    "load_clinical_csv",
    "make_folds",
    "folds_to_json",
    "folds_from_json",
    "synthesize_cohort",
    "resample_patches",
    "write_cohort",
    "load_cohort",
    "fit_gene_scaler",
    "apply_gene_scaler",
]


# -- core containers -----------------------------------------------------------------


@dataclass
class PatientBundle:
    """One patient's multimodal sample."""

    id: str
    patch_features: np.ndarray  # P x feat_dim
    genes: np.ndarray  # gene_dim
    clinical: np.ndarray  # binarized {0,1} vector
    clinical_missing: np.ndarray  # per-field missing flags
    record: SurvivalRecord
    raw_clinical: dict | None = None
    true_risk: float | None = None  # generating log-hazard, synthetic cohorts only

    def __post_init__(self):
        self.patch_features = np.asarray(self.patch_features, dtype=np.float64)
        self.genes = np.asarray(self.genes, dtype=np.float64)
        self.clinical = np.asarray(self.clinical, dtype=np.float64)
        self.clinical_missing = np.asarray(self.clinical_missing, dtype=np.int64)
        if self.patch_features.ndim != 2:
            raise ShapeError(f"patch_features must be 2-D, got {self.patch_features.shape}")
        if not np.all(np.isfinite(self.patch_features)):
            raise ValidationError(f"patient {self.id}: non-finite patch features")
        if not np.all(np.isfinite(self.genes)):
            raise ValidationError(f"patient {self.id}: non-finite gene values")
        if not np.all(np.isin(self.clinical, (0.0, 1.0))):
            raise ValidationError(f"patient {self.id}: clinical vector must be binary")


@dataclass(frozen=True)
class FoldSplit:
    fold: int  # 1-based
    train_idx: np.ndarray
    val_idx: np.ndarray


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a seeded synthetic multimodal cohort.

    ``image_weight``/``gene_weight``/``clinical_weight`` are the true
    log-hazard coefficients of the three independent per-patient latent
    factors; each modality's observed features are noisy encodings of its
    own factor, so masking a modality genuinely removes signal.
    """

    n_patients: int
    patches_per_patient: int
    feat_dim: int
    gene_dim: int
    clinical_dim: int = 4
    image_weight: float = 1.0
    gene_weight: float = 1.0
    clinical_weight: float = 1.0
    feature_noise: float = 0.5
    weibull_shape: float = 2.0
    weibull_scale: float = 60.0
    censoring_fraction: float = 0.33
    ln_missing_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.censoring_fraction < 1.0):
            raise ConfigError(
                f"censoring_fraction must be in (0,1), got {self.censoring_fraction}"
            )
        for name in ("n_patients", "patches_per_patient", "feat_dim", "gene_dim", "clinical_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


# -- patch-feature binary format -------------------------------------------------------


def write_feature_file(path, matrix) -> None:
    """Write a patch-feature matrix as BFNF (float32, little-endian)."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("refusing to write non-finite feature values")
    rows, cols = m.shape
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, rows, cols))
        fh.write(payload)


def read_feature_file(path) -> np.ndarray:
    """Read a BFNF file; malformed content raises FormatError with a byte offset."""
    blob = Path(path).read_bytes()
    if len(blob) < HEADER_BYTES:
        raise FormatError(f"truncated header: {len(blob)} bytes", offset=len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    version, rows, cols = struct.unpack("<III", blob[4:HEADER_BYTES])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    expected = rows * cols * 4
    got = len(blob) - HEADER_BYTES
    if got != expected:
        raise FormatError(
            f"payload is {got} bytes, header {rows}x{cols} needs {expected}",
            offset=HEADER_BYTES + min(got, expected),
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=HEADER_BYTES)
    bad = np.flatnonzero(~np.isfinite(flat))
    if len(bad):
        raise FormatError(
            f"non-finite value at element {bad[0]}",
            offset=HEADER_BYTES + 4 * int(bad[0]),
        )
    return flat.reshape(rows, cols).astype(np.float64)


# -- clinical preparation ---------------------------------------------------------------


@dataclass(frozen=True)
class ClinicalVector:
    """Binarized clinical covariates with both encodings of missingness.

    ``values`` feeds the network (missing -> 0 with a flag); ``coxph_values``
    feeds the hazard analyses, where missing lymph-node status keeps the
    fixed imputation value 2.
    """

    values: np.ndarray
    missing: np.ndarray
    coxph_values: np.ndarray


def binarize_clinical(grade, size_mm, age_years, ln_status) -> ClinicalVector:
    """Cutoffs: grade 3 vs 1&2, size > 20 mm, age > 55, LN positive vs negative."""
    if grade not in (1, 2, 3):
        raise ValidationError(f"grade must be 1, 2 or 3, got {grade!r}")
    if not size_mm > 0:
        raise ValidationError(f"size_mm must be positive, got {size_mm!r}")
    if not age_years > 0:
        raise ValidationError(f"age_years must be positive, got {age_years!r}")
    if ln_status not in ("pos", "neg", "missing"):
        raise ValidationError(f"ln_status must be pos/neg/missing, got {ln_status!r}")
    grade3 = 1.0 if grade == 3 else 0.0
    size = 1.0 if size_mm > 20.0 else 0.0
    age = 1.0 if age_years > 55.0 else 0.0
    if ln_status == "missing":
        ln_net, ln_cox, ln_flag = 0.0, LN_MISSING_COXPH_VALUE, 1
    else:
        ln_net = ln_cox = 1.0 if ln_status == "pos" else 0.0
        ln_flag = 0
    values = np.array([grade3, size, age, ln_net])
    coxph = np.array([grade3, size, age, ln_cox])
    missing = np.array([0, 0, 0, ln_flag], dtype=np.int64)
    return ClinicalVector(values, missing, coxph)


# -- CSV tables ----------------------------------------------------------------------


def load_gene_matrix(csv_path, panel) -> tuple[list[str], np.ndarray]:
    """Read per-patient expression for the panel genes, values unmodified."""
    panel = list(panel)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "patient_id" not in reader.fieldnames:
            raise FormatError(f"{csv_path}: missing patient_id column")
        missing = [g for g in panel if g not in reader.fieldnames]
        if missing:
            raise ValidationError(f"{csv_path}: missing gene columns: {', '.join(missing)}")
        ids: list[str] = []
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            pid = row["patient_id"]
            if pid in ids:
                raise ValidationError(f"{csv_path}: duplicated patient_id {pid!r}")
            values = []
            for gene in panel:
                try:
                    values.append(float(row[gene]))
                except (TypeError, ValueError):
                    raise FormatError(
                        f"{csv_path}: non-numeric value {row[gene]!r} at row {line_no}, column {gene}"
                    ) from None
            ids.append(pid)
            rows.append(values)
    return ids, np.array(rows, dtype=np.float64)


def load_clinical_csv(csv_path) -> list[dict]:
    """Rows of the clinical table, typed; ln_status normalized to pos/neg/missing."""
    required = ["patient_id", "grade", "size_mm", "age_years", "ln_status",
                "time_months", "event"]
    out = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise FormatError(f"{csv_path}: missing columns: {', '.join(missing)}")
        for line_no, row in enumerate(reader, start=2):
            try:
                out.append(
                    {
                        "patient_id": row["patient_id"],
                        "grade": int(row["grade"]),
                        "size_mm": float(row["size_mm"]),
                        "age_years": float(row["age_years"]),
                        "ln_status": row["ln_status"].strip().lower(),
                        "time_months": float(row["time_months"]),
                        "event": int(row["event"]),
                    }
                )
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{csv_path}: row {line_no}: {exc}") from None
    ids = [r["patient_id"] for r in out]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{csv_path}: duplicated patient ids")
    return out


# -- fold splitting ---------------------------------------------------------------------


def make_folds(records, k: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Event-stratified k-fold split, deterministic for a given seed.

    Validation sets partition the cohort; sizes differ by at most one and
    per-fold event counts stay within one of the stratified ideal.
    """
    events = np.array([r.event for r in records], dtype=np.int64)
    n = len(events)
    if n < k:
        raise StratificationError(f"cannot split {n} records into {k} folds")
    n_events = int(events.sum())
    if n_events < k:
        raise StratificationError(f"{n_events} events cannot stratify {k} folds")
    rng = np.random.default_rng(seed)
    event_idx = np.flatnonzero(events == 1)
    censored_idx = np.flatnonzero(events == 0)
    rng.shuffle(event_idx)
    rng.shuffle(censored_idx)
    buckets: list[list[int]] = [[] for _ in range(k)]
    # one continuous round-robin keeps both totals and event counts balanced
    for pos, idx in enumerate(np.concatenate([event_idx, censored_idx])):
        buckets[pos % k].append(int(idx))
    folds = []
    for f in range(k):
        val = np.array(sorted(buckets[f]), dtype=np.int64)
        train = np.array(sorted(set(range(n)) - set(buckets[f])), dtype=np.int64)
        folds.append(FoldSplit(f + 1, train, val))
    return folds


def folds_to_json(folds, ids) -> str:
    payload = {
        str(f.fold): {
            "train": [ids[i] for i in f.train_idx],
            "val": [ids[i] for i in f.val_idx],
        }
        for f in folds
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def folds_from_json(text, ids) -> list[FoldSplit]:
    payload = json.loads(text)
    index_of = {pid: i for i, pid in enumerate(ids)}
    folds = []
    for key in sorted(payload, key=int):
        entry = payload[key]
        try:
            train = np.array([index_of[p] for p in entry["train"]], dtype=np.int64)
            val = np.array([index_of[p] for p in entry["val"]], dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"folds file references unknown patient {exc}") from None
        folds.append(FoldSplit(int(key), train, val))
    return folds


# -- synthetic cohort ---------------------------------------------------------------------


def _calibrate_censoring(t_event, target, shape, rng_draws):
    """Bisection on the censoring Weibull scale to hit the target censored
    fraction on the drawn sample."""
    draws = rng_draws ** (1.0 / shape)  # unit-scale Weibull variates

    def censored_fraction(scale):
        return float(np.mean(scale * draws < t_event))

    lo, hi = 1e-6 * np.median(t_event), 1e6 * np.median(t_event)
    if not (censored_fraction(lo) >= target >= censored_fraction(hi)):
        raise ConfigError(f"censoring fraction {target} unachievable for this cohort")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if censored_fraction(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi) * draws


def synthesize_cohort(spec: SyntheticSpec) -> list[PatientBundle]:
    """Seeded multimodal cohort with known generating risk.

    Three independent standard-normal patient factors drive the image,
    gene, and clinical modalities; the true log hazard is their weighted
    sum and survival times are Weibull with hazard proportional to
    exp(eta).  Censoring times are calibrated by bisection to the target
    censored fraction.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_patients
    u_img = rng.standard_normal(n)
    u_gene = rng.standard_normal(n)
    u_clin = rng.standard_normal(n)

    img_direction = rng.standard_normal(spec.feat_dim)
    img_direction /= np.linalg.norm(img_direction)
    gene_direction = rng.standard_normal(spec.gene_dim)
    gene_direction /= np.linalg.norm(gene_direction)

    eta = (
        spec.image_weight * u_img
        + spec.gene_weight * u_gene
        + spec.clinical_weight * u_clin
    )

    uniforms = rng.uniform(size=n)
    t_event = spec.weibull_scale * (-np.log(uniforms) / np.exp(eta)) ** (1.0 / spec.weibull_shape)
    cens_draws = -np.log(rng.uniform(size=n))
    t_cens = _calibrate_censoring(t_event, spec.censoring_fraction,
                                  spec.weibull_shape, cens_draws)
    observed = np.minimum(t_event, t_cens)
    observed = np.maximum(observed, 1e-6)  # record contract: time > 0
    events = (t_event <= t_cens).astype(int)

    bundles = []
    for i in range(n):
        patches = (
            u_img[i] * img_direction[None, :]
            + spec.feature_noise * rng.standard_normal((spec.patches_per_patient, spec.feat_dim))
        )
        # float32-representable so disk round trips are exact
        patches = patches.astype(np.float32).astype(np.float64)
        genes = u_gene[i] * gene_direction + spec.feature_noise * rng.standard_normal(spec.gene_dim)

        bits = (u_clin[i] + 0.5 * rng.standard_normal(4) > 0.0).astype(int)
        grade = 3 if bits[0] else int(rng.integers(1, 3))
        size_mm = float(rng.uniform(21.0, 50.0) if bits[1] else rng.uniform(5.0, 20.0))
        age_years = float(rng.uniform(56.0, 80.0) if bits[2] else rng.uniform(30.0, 55.0))
        if rng.uniform() < spec.ln_missing_fraction:
            ln_status = "missing"
        else:
            ln_status = "pos" if bits[3] else "neg"
        raw = {
            "grade": grade,
            "size_mm": round(size_mm, 2),
            "age_years": round(age_years, 2),
            "ln_status": ln_status,
        }
        clin = binarize_clinical(**raw)
        bundles.append(
            PatientBundle(
                id=f"P{i:04d}",
                patch_features=patches,
                genes=genes,
                clinical=clin.values,
                clinical_missing=clin.missing,
                record=SurvivalRecord(float(observed[i]), int(events[i])),
                raw_clinical=raw,
                true_risk=float(eta[i]),
            )
        )
    return bundles


def resample_patches(matrix, target_rows: int, seed: int = 0) -> np.ndarray:
    """Resample patch rows with replacement (seeded) up to a fixed count."""
    m = np.asarray(matrix)
    if m.shape[0] == target_rows:
        return m
    if m.shape[0] > target_rows:
        return m[:target_rows]
    rng = np.random.default_rng(seed)
    extra = rng.integers(0, m.shape[0], size=target_rows - m.shape[0])
    return np.concatenate([m, m[extra]], axis=0)


# -- cohort directory layout ---------------------------------------------------------------


def write_cohort(directory, bundles) -> None:
    """Materialize a cohort: features/<id>.bfnf + genes.csv + clinical.csv."""
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    gene_dim = len(bundles[0].genes)
    gene_names = [f"gene_{j:03d}" for j in range(gene_dim)]
    with open(directory / "genes.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id"] + gene_names)
        for b in bundles:
            writer.writerow([b.id] + [repr(float(v)) for v in b.genes])
    with open(directory / "clinical.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "grade", "size_mm", "age_years", "ln_status",
                         "time_months", "event"])
        for b in bundles:
            raw = b.raw_clinical
            if raw is None:
                raise ValidationError(f"patient {b.id} has no raw clinical values to write")
            writer.writerow([
                b.id, raw["grade"], repr(float(raw["size_mm"])),
                repr(float(raw["age_years"])), raw["ln_status"],
                repr(float(b.record.time)), b.record.event,
            ])
    for b in bundles:
        write_feature_file(directory / "features" / f"{b.id}.bfnf", b.patch_features)


def load_cohort(directory) -> list[PatientBundle]:
    """Load a cohort produced by :func:`write_cohort` (or hand-assembled)."""
    directory = Path(directory)
    clinical_rows = load_clinical_csv(directory / "clinical.csv")
    with open(directory / "genes.csv", newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh))
    panel = [c for c in header if c != "patient_id"]
    gene_ids, gene_matrix = load_gene_matrix(directory / "genes.csv", panel)
    gene_of = {pid: gene_matrix[i] for i, pid in enumerate(gene_ids)}
    bundles = []
    for row in clinical_rows:
        pid = row["patient_id"]
        if pid not in gene_of:
            raise ValidationError(f"patient {pid} present in clinical.csv but not genes.csv")
        features = read_feature_file(directory / "features" / f"{pid}.bfnf")
        clin = binarize_clinical(row["grade"], row["size_mm"], row["age_years"],
                                 row["ln_status"])
        bundles.append(
            PatientBundle(
                id=pid,
                patch_features=features,
                genes=gene_of[pid],
                clinical=clin.values,
                clinical_missing=clin.missing,
                record=SurvivalRecord(row["time_months"], row["event"]),
                raw_clinical={k: row[k] for k in ("grade", "size_mm", "age_years", "ln_status")},
            )
        )
    return bundles


# -- gene scaling at the network boundary ------------------------------------------------------


def fit_gene_scaler(bundles) -> tuple[np.ndarray, np.ndarray]:
    """Per-gene mean/std fitted on (training) bundles; zero spread maps to std 1."""
    genes = np.stack([b.genes for b in bundles])
    mean = genes.mean(axis=0)
    std = genes.std(axis=0)
    std[std == 0.0] = 1.0
    return mean, std


def apply_gene_scaler(genes, scaler) -> np.ndarray:
    mean, std = scaler
    return (np.asarray(genes, dtype=np.float64) - mean) / std
