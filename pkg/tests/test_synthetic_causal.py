"""Linear recovery-study tests.

Oracles: closed-form least squares (numpy.linalg.lstsq) for the
no-spurious-block cases, the exactly-known generating weights for the
noiseless case, and two-sample Kolmogorov-Smirnov statistics for the
claim that domains differ only through the spurious block.
"""

from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from invardef.seeds import substream
from invardef.synthetic_causal import (
    DomainSample,
    FitConfig,
    LinearFit,
    LinearSCM,
    domain_risk,
    fit_erm,
    fit_invariant_defender,
    generate_domain_data,
    ground_truth_weights,
    random_scm,
    recovery_study,
    verify_fit,
)

FAST_FIT = FitConfig(steps=400, learning_rate=0.05, penalty_weight=25.0)


def pure_causal_scm(noise_std: float, num_causal: int = 3) -> LinearSCM:
    """No spurious block, identity mixing: y is a plain regression."""
    return LinearSCM(
        causal_weights=np.arange(1.0, num_causal + 1.0),
        noise_std=noise_std,
        mixing=np.eye(num_causal),
        shift_matrices=np.zeros((2, 0, num_causal)),
        shift_offsets=np.zeros((2, 0)),
        leak_gains=np.zeros((2, 0)),
    )


class TestConstruction:
    def test_latent_smaller_than_causal_rejected(self):
        with pytest.raises(ValueError, match="num_latent >= num_causal"):
            random_scm(num_causal=4, num_latent=3)

    def test_negative_noise_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            pure_causal_scm(noise_std=-1.0)

    def test_degenerate_mixing_rejected(self):
        scm = random_scm()
        mixing = scm.mixing.copy()
        mixing[:, 0] = 0.0
        with pytest.raises(ValueError, match="degenerate"):
            LinearSCM(
                causal_weights=scm.causal_weights,
                noise_std=scm.noise_std,
                mixing=mixing,
                shift_matrices=scm.shift_matrices,
                shift_offsets=scm.shift_offsets,
                leak_gains=scm.leak_gains,
            )

    def test_dimensions(self):
        scm = random_scm(num_causal=3, num_latent=6, num_domains=8)
        assert scm.num_causal == 3
        assert scm.num_spurious == 3
        assert scm.num_latent == 6
        assert scm.num_domains == 8


class TestGenerate:
    def test_noiseless_pure_causal_is_exact(self):
        scm = pure_causal_scm(noise_std=0.0)
        sample = generate_domain_data(scm, 0, 50, substream(0, "t"))
        assert np.allclose(sample.y, sample.rho @ scm.causal_weights)

    def test_fixed_seed_reproduces_sample(self):
        scm = random_scm()
        a = generate_domain_data(scm, 1, 100, substream(9, "t"))
        b = generate_domain_data(scm, 1, 100, substream(9, "t"))
        assert np.array_equal(a.rho, b.rho)
        assert np.array_equal(a.y, b.y)

    def test_bad_domain_rejected(self):
        scm = random_scm(num_domains=4)
        with pytest.raises(ValueError, match="domain must be in"):
            generate_domain_data(scm, 4, 100, substream(0, "t"))

    def test_too_few_samples_rejected(self):
        scm = random_scm(num_latent=6)
        with pytest.raises(ValueError, match="at least 7 samples"):
            generate_domain_data(scm, 0, 6, substream(0, "t"))

    def test_domains_share_cause_label_marginals(self):
        """Domains differ only through the spurious block, so the joint
        (C, y) distribution must match across domains (KS check)."""
        scm = random_scm(seed=3)
        m = 10_000
        a = generate_domain_data(scm, 0, m, substream(0, "ks-a"))
        b = generate_domain_data(scm, 1, m, substream(0, "ks-b"))
        # undo the mixing to look at the latent blocks directly
        ua = a.rho @ np.linalg.inv(scm.mixing.T)
        ub = b.rho @ np.linalg.inv(scm.mixing.T)
        assert stats.ks_2samp(a.y, b.y).pvalue > 0.01
        for j in range(scm.num_causal):
            assert stats.ks_2samp(ua[:, j], ub[:, j]).pvalue > 0.01

    def test_spurious_block_differs_across_domains(self):
        scm = random_scm(seed=3)
        m = 10_000
        a = generate_domain_data(scm, 0, m, substream(0, "ks-a"))
        b = generate_domain_data(scm, 1, m, substream(0, "ks-b"))
        ua = a.rho @ np.linalg.inv(scm.mixing.T)
        ub = b.rho @ np.linalg.inv(scm.mixing.T)
        spurious_stats = [
            stats.ks_2samp(ua[:, scm.num_causal + j], ub[:, scm.num_causal + j]).pvalue
            for j in range(scm.num_spurious)
        ]
        assert min(spurious_stats) < 0.01


class TestGroundTruth:
    def test_reads_off_causal_contribution(self):
        scm = random_scm(seed=5)
        truth = ground_truth_weights(scm)
        sample = generate_domain_data(scm, 0, 5000, substream(1, "gt"))
        fit = LinearFit(weights=truth, intercept=0.0)
        # residual is exactly the label noise, so risk ~= noise_std^2
        assert domain_risk(fit, sample) == pytest.approx(
            scm.noise_std**2, rel=0.1
        )

    def test_oracle_weights_risk_spread_within_noise_bound(self):
        scm = random_scm(seed=2)
        truth = LinearFit(weights=ground_truth_weights(scm), intercept=0.0)
        m = 10_000
        report = verify_fit(truth, scm, domains=range(scm.num_domains), size=m)
        assert report.risk_spread <= 3 * scm.noise_std**2 / np.sqrt(m)
        assert report.weight_error_inf < 1e-12
        assert report.non_causal_norm < 1e-12


class TestFits:
    def test_single_domain_rejected(self):
        scm = random_scm()
        sample = generate_domain_data(scm, 0, 200, substream(0, "t"))
        with pytest.raises(ValueError, match="at least 2 training domains"):
            fit_invariant_defender([sample])

    def test_noiseless_pure_causal_recovers_exactly(self):
        scm = pure_causal_scm(noise_std=0.0)
        samples = [
            generate_domain_data(scm, d, 200, substream(d, "fit")) for d in (0, 1)
        ]
        fit = fit_invariant_defender(samples, FAST_FIT)
        assert np.max(np.abs(fit.weights - scm.causal_weights)) < 1e-6
        assert abs(fit.intercept) < 1e-6

    def test_pure_causal_matches_least_squares_oracle(self):
        # With no spurious channel the risk-disparity penalty sees only
        # sampling noise; at this m its pull is below the tolerance.
        scm = pure_causal_scm(noise_std=0.5)
        samples = [
            generate_domain_data(scm, d, 10_000, substream(d, "ls")) for d in (0, 1)
        ]
        fit = fit_invariant_defender(samples, FAST_FIT)
        rho = np.concatenate([s.rho for s in samples])
        y = np.concatenate([s.y for s in samples])
        design = np.concatenate([rho, np.ones((rho.shape[0], 1))], axis=1)
        oracle, *_ = np.linalg.lstsq(design, y, rcond=None)
        assert np.max(np.abs(fit.weights - oracle[:-1])) < 1e-2
        assert abs(fit.intercept - oracle[-1]) < 1e-2

    def test_erm_loads_on_spurious_block(self):
        scm = random_scm(seed=0)
        samples = [
            generate_domain_data(scm, d, 4000, substream(d, "erm")) for d in range(5)
        ]
        fit = fit_erm(samples)
        composed = scm.mixing.T @ fit.weights
        assert np.linalg.norm(composed[scm.num_causal :]) > 0.1

    def test_invariant_fit_drops_spurious_block(self):
        scm = random_scm(seed=0)
        samples = [
            generate_domain_data(scm, d, 4000, substream(d, "inv")) for d in range(5)
        ]
        erm = fit_erm(samples)
        inv = fit_invariant_defender(samples, FAST_FIT)
        erm_composed = scm.mixing.T @ erm.weights
        inv_composed = scm.mixing.T @ inv.weights
        assert (
            np.linalg.norm(inv_composed[scm.num_causal :])
            < 0.5 * np.linalg.norm(erm_composed[scm.num_causal :])
        )

    def test_spurious_norm_shrinks_with_more_samples(self):
        scm = random_scm(seed=4)
        norms = []
        for m in (1_000, 10_000):
            samples = [
                generate_domain_data(scm, d, m, substream(d, f"grow-{m}"))
                for d in range(5)
            ]
            fit = fit_invariant_defender(samples, FAST_FIT)
            composed = scm.mixing.T @ fit.weights
            norms.append(np.linalg.norm(composed[scm.num_causal :]))
        assert norms[1] < norms[0]


@pytest.fixture(scope="module")
def study():
    # default sample size: weight recovery is checked at the tolerance
    # the acceptance suite uses, which needs the variance of the domain
    # risks down near its asymptotics.
    return recovery_study()


class TestVerifyAndStudy:
    def test_erm_spread_strictly_larger(self, study):
        assert study.erm.risk_spread > study.invariant.risk_spread

    def test_invariant_weights_recovered(self, study):
        assert study.invariant.weight_error_inf <= 0.05

    def test_held_out_risk_near_training_risk(self):
        scm = random_scm(seed=0)
        samples = [
            generate_domain_data(scm, d, 4000, substream(d, "near")) for d in range(5)
        ]
        fit = fit_invariant_defender(samples, FAST_FIT)
        train_risk = np.mean([domain_risk(fit, s) for s in samples])
        held = verify_fit(fit, scm, domains=range(5, scm.num_domains), size=4000)
        held_risk = np.mean(list(held.domain_risks.values()))
        assert abs(held_risk - train_risk) / train_risk < 0.05

    def test_report_reproducible(self):
        a = recovery_study(samples_per_domain=2000, config=FAST_FIT)
        b = recovery_study(samples_per_domain=2000, config=FAST_FIT)
        assert a.erm.to_dict() == b.erm.to_dict()
        assert a.invariant.to_dict() == b.invariant.to_dict()

    def test_empty_verify_rejected(self):
        scm = random_scm()
        fit = LinearFit(weights=ground_truth_weights(scm), intercept=0.0)
        with pytest.raises(ValueError, match="at least one domain"):
            verify_fit(fit, scm, domains=[])
