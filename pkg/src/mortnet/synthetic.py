"""Synthetic ICU cohorts calibrated to the reference cohort statistics.

Each patient gets a persistent baseline per temporal feature plus AR(1) hourly
drift, so forward filling is meaningful. Hourly slots go missing at the
per-feature rates of the reference cohort (patient-level Beta variation
around that rate). Mortality follows a planted logistic risk:

    logit P(death) = intercept + signal * (z_age - z_gcs - z_urine) / sqrt(3)

where ``z_gcs`` and ``z_urine`` are the patient's latent (standardized)
consciousness and urine-output levels and ``z_age`` the standardized clipped
age. The intercept is solved per cohort so expected prevalence matches the
reference mortality rate.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from mortnet.ingest import (
    AGE_CLIP,
    FEATURES,
    HORIZON,
    MORTALITY_RATE,
    STATIC,
    STATIC_FLAGS,
    TEMPORAL,
    CohortDataset,
    Observation,
    RawPatientRecord,
    impute_temporal,
    slot_means,
)

LOGNORMAL = frozenset({"bilirubin", "bun", "po2", "wbc", "urine_output", "potassium"})
GCS = ("gcs_eyes", "gcs_motor", "gcs_verbal")
BASELINE_SHARE = 0.7  # fraction of marginal sd that is between-patient
AR_COEF = 0.8
MISSING_CONCENTRATION = 8.0
DEFAULT_SIGNAL = 4.0


def _lognormal_params(mean, std):
    s2 = np.log1p((std / mean) ** 2)
    return np.log(mean) - s2 / 2, np.sqrt(s2)


def _ar1(rng, n, sd):
    eps = rng.standard_normal((n, HORIZON))
    out = np.empty((n, HORIZON))
    out[:, 0] = eps[:, 0]
    k = np.sqrt(1 - AR_COEF ** 2)
    for h in range(1, HORIZON):
        out[:, h] = AR_COEF * out[:, h - 1] + k * eps[:, h]
    return out * sd


def _temporal_values(rng, spec, n, latent):
    """Complete (n, 48) hourly trajectories; ``latent`` is a standardized patient level."""
    sb = BASELINE_SHARE
    sw = np.sqrt(1 - sb ** 2)
    if spec.name in LOGNORMAL:
        mu, sigma = _lognormal_params(spec.mean, spec.std)
        vals = np.exp(mu + sigma * (sb * latent[:, None] + _ar1(rng, n, sw)))
    else:
        vals = spec.mean + spec.std * (sb * latent[:, None] + _ar1(rng, n, sw))
    if spec.name in GCS:
        vals = np.round(vals)
    return np.clip(vals, *spec.bounds)


def _sample(n, rng, signal_strength):
    latents = {s.name: rng.standard_normal(n) for s in TEMPORAL}
    gcs_level = rng.standard_normal(n)
    for name in GCS:
        # the three components share most of one consciousness level
        latents[name] = 0.85 * gcs_level + np.sqrt(1 - 0.85 ** 2) * latents[name]

    raw = np.empty((n, len(TEMPORAL), HORIZON))
    for i, spec in enumerate(TEMPORAL):
        vals = _temporal_values(rng, spec, n, latents[spec.name])
        a = MISSING_CONCENTRATION * (1 - spec.missing)
        b = MISSING_CONCENTRATION * spec.missing
        p_obs = rng.beta(a, b, size=n)
        seen = rng.random((n, HORIZON)) < p_obs[:, None]
        raw[:, i] = np.where(seen, vals, np.nan)

    age_spec = STATIC[0]
    ages = rng.normal(65.5, 17.0, size=n)
    while np.any(bad := ages <= 16.5):
        ages[bad] = rng.normal(65.5, 17.0, size=bad.sum())
    # the source database shifts ages above 89 to ~300 years
    ages = np.where(ages > 89, 300.0, ages)
    flags = {f.name: rng.random(n) < f.prevalence for f in STATIC[1:]}

    z_age = (np.minimum(ages, AGE_CLIP) - age_spec.mean) / age_spec.std
    score = (z_age - gcs_level - latents["urine_output"]) / np.sqrt(3.0)
    score = signal_strength * score
    intercept = brentq(lambda c: expit(c + score).mean() - MORTALITY_RATE, -60, 60)
    died = (rng.random(n) < expit(intercept + score)).astype(np.int64)
    return raw, ages, flags, died, {"intercept": float(intercept)}


def generate_synthetic_records(n: int, seed: int = 0,
                               signal_strength: float = DEFAULT_SIGNAL) -> list[RawPatientRecord]:
    """Raw per-patient records (one observation per observed hour)."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    raw, ages, flags, died, _ = _sample(n, rng, signal_strength)
    offsets = rng.random(raw.shape)
    stays = 48.0 + 1.0 + rng.exponential(72.0, size=n)
    records = []
    for p in range(n):
        obs = []
        for i, spec in enumerate(TEMPORAL):
            for h in np.flatnonzero(~np.isnan(raw[p, i])):
                obs.append(Observation(spec.name, float(h + offsets[p, i, h]), float(raw[p, i, h])))
        records.append(RawPatientRecord(
            f"S{p:06d}", float(ages[p]), float(stays[p]), 1,
            {k: bool(flags[k][p]) for k in STATIC_FLAGS}, obs, int(died[p])))
    return records


def generate_synthetic_cohort(n: int, seed: int = 0,
                              signal_strength: float = DEFAULT_SIGNAL) -> CohortDataset:
    """Synthetic cohort of ``n`` qualifying first admissions, already imputed.

    The matrices equal what ``build_matrix`` produces from
    ``generate_synthetic_records(n, seed, signal_strength)``.
    """
    if n < 50:
        raise ValueError("synthetic cohorts need n >= 50")
    rng = np.random.default_rng(seed)
    raw, ages, flags, died, info = _sample(n, rng, signal_strength)
    means = {s.name: float(m) for s, m in zip(TEMPORAL, slot_means(raw)) if not np.isnan(m)}
    temporal = impute_temporal(raw, means)
    static = np.stack([np.minimum(ages, AGE_CLIP)] + [flags[k].astype(float) for k in STATIC_FLAGS],
                      axis=1)
    grids = np.concatenate([temporal, np.repeat(static[:, :, None], HORIZON, axis=2)], axis=1)
    missing = {s.name: float(np.isnan(raw[:, i]).mean()) for i, s in enumerate(TEMPORAL)}
    observed = raw[:, [s.name for s in TEMPORAL].index("heart_rate")]
    meta = {"seed": seed, "signal_strength": signal_strength, "missing_fraction": missing,
            "heart_rate_observed_mean": float(np.nanmean(observed)),
            "heart_rate_observed_std": float(np.nanstd(observed)), **info}
    assert grids.shape[1] == len(FEATURES)
    return CohortDataset(grids, died, [f"S{p:06d}" for p in range(n)], means, "synthetic", meta)
