"""Separation quality metrics: SDR/SDRi, embedding-cosine scores, FAD."""

from __future__ import annotations

import numpy as np

from .dsp import Waveform
from .encoders import EncoderSuite, cosine

SDR_CAP_DB = 200.0
_FAD_RIDGE = 1e-6


def _samples(x) -> np.ndarray:
    return np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64)


def sdr(reference, estimate, scale_invariant: bool = False) -> float:
    """Signal-to-distortion ratio in dB: 10*log10(|ref|^2 / |ref - est|^2).

    Gain-sensitive by default; ``scale_invariant`` projects the estimate
    onto the reference first. Perfect estimates return the documented cap
    of 200 dB rather than infinity.
    """
    ref = _samples(reference)
    est = _samples(estimate)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {est.shape}")
    ref_energy = float(np.sum(ref**2))
    if ref_energy == 0.0:
        raise ValueError("reference has zero energy")
    if scale_invariant:
        alpha = float(np.dot(est, ref) / ref_energy)
        ref = alpha * ref
        ref_energy = float(np.sum(ref**2))
        if ref_energy == 0.0:
            raise ValueError("scaled reference has zero energy")
    err_energy = float(np.sum((ref - est) ** 2))
    if err_energy == 0.0:
        return SDR_CAP_DB
    return min(10.0 * np.log10(ref_energy / err_energy), SDR_CAP_DB)


def sdri(reference, estimate, mixture) -> float:
    """SDR improvement of the estimate over the unprocessed mixture."""
    return sdr(reference, estimate) - sdr(reference, mixture)


def clap_score(estimate: Waveform, query: str, suite: EncoderSuite) -> float:
    """100 x cosine between the estimate's audio embedding and the query's
    text embedding."""
    return 100.0 * cosine(suite.encode_audio(estimate), suite.encode_text(query))


def clap_score_a(estimate: Waveform, target: Waveform, suite: EncoderSuite) -> float:
    """100 x cosine between the estimate's and the target's audio embeddings."""
    return 100.0 * cosine(suite.encode_audio(estimate), suite.encode_audio(target))


def _gaussian_stats(embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = embeddings.mean(axis=0)
    centered = embeddings - mu
    sigma = centered.T @ centered / max(len(embeddings) - 1, 1)
    return mu, sigma


def fad(set_a, set_b) -> float:
    """Frechet distance between Gaussians fit to two embedding sets.

    ||mu_a - mu_b||^2 + Tr(Sigma_a + Sigma_b - 2 (Sigma_a Sigma_b)^(1/2)),
    computed through the symmetric form
    Tr((Sigma_a^(1/2) Sigma_b Sigma_a^(1/2))^(1/2)). A ridge of 1e-6 is
    added to both covariances so rank-deficient sets stay well-posed; the
    ridge cancels in same-set and shifted-set comparisons.
    """
    a = np.asarray([getattr(e, "values", e) for e in set_a], dtype=np.float64)
    b = np.asarray([getattr(e, "values", e) for e in set_b], dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("embedding sets must be [n, D] with matching D")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each embedding set needs at least 2 entries")
    mu_a, sig_a = _gaussian_stats(a)
    mu_b, sig_b = _gaussian_stats(b)
    dim = a.shape[1]
    sig_a = sig_a + _FAD_RIDGE * np.eye(dim)
    sig_b = sig_b + _FAD_RIDGE * np.eye(dim)

    # Symmetric square-root route: eigendecompose sig_a, then the PSD
    # product, clipping tiny negative eigenvalues from roundoff.
    vals_a, vecs_a = np.linalg.eigh(sig_a)
    root_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    inner = root_a @ sig_b @ root_a
    inner_vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    trace_sqrt = float(np.sum(np.sqrt(np.clip(inner_vals, 0.0, None))))

    mean_term = float(np.sum((mu_a - mu_b) ** 2))
    value = mean_term + float(np.trace(sig_a) + np.trace(sig_b)) - 2.0 * trace_sqrt
    return max(value, 0.0)
