"""Rotation-speed estimation from harmonic detection maps.

The coarse stage treats every spectral bin between ``f_min`` and half the
analysis band as a candidate fundamental and scores it by a weighted sum of
detection evidence at its integer multiples: ``score(g) = sum_k beta_k *
p(k*g)``, where ``p`` is the per-bin detection probability softened by a
``+/- delta_f`` neighborhood maximum.  Candidates whose higher multiples are
entirely absent from the binarized detection map are removed before the
argmax; that one rule is what keeps half- and double-speed impostors from
winning on partial evidence.

The fine stage re-reads the enhanced time signal with a zero-padded Welch
transform (``gamma`` times denser frequency grid) and takes the density peak
inside ``+/- delta_f`` of the coarse pick.  RPM is exactly ``60 * fine``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter1d

from .detector import DetectionMap, detect_with_network, threshold_detector
from .dsp import (
    NoiseReference,
    PowerSpectrum,
    default_segment_len,
    delay_and_sum,
    log_normalize,
    welch_psd,
)
from .ppsp import PpspWeights
from .signals import SensorTrace

__all__ = [
    "CoarseResult",
    "FuzzyLikelihood",
    "HarmonicWeights",
    "PipelineConfig",
    "PipelineError",
    "SpeedEstimate",
    "coarse_estimate",
    "compute_likelihood",
    "default_harmonic_weights",
    "estimate_rpm",
    "estimate_rpm_multi",
    "fine_estimate",
    "fit_beta",
]


class PipelineError(RuntimeError):
    """Estimation failure, tagged with the stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class PipelineConfig:
    """Everything the end-to-end estimator needs besides the trace itself."""

    welch_segment: int | None = None
    input_bins: int = 1024
    f_min_hz: float = 5.0
    delta_f_hz: float | None = None
    n_support: int = 4
    gamma: int = 50
    detector: str = "threshold"
    threshold_quantile: float = 0.99
    detection_threshold: float = 0.5
    max_lag_s: float = 0.01
    m_harmonics: int = 8
    weights_path: str | None = None

    def __post_init__(self):
        if self.f_min_hz <= 0:
            raise ValueError("f_min_hz must be positive")
        if self.delta_f_hz is not None and self.delta_f_hz <= 0:
            raise ValueError("delta_f_hz must be positive")
        if self.n_support < 2:
            raise ValueError("n_support must be >= 2")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.detector not in ("threshold", "network"):
            raise ValueError("detector must be 'threshold' or 'network'")
        if not 0.0 < self.threshold_quantile < 1.0:
            raise ValueError("threshold_quantile must be in (0, 1)")
        if not 0.0 < self.detection_threshold <= 1.0:
            raise ValueError("detection_threshold must be in (0, 1]")
        if self.max_lag_s < 0:
            raise ValueError("max_lag_s must be >= 0")
        if self.m_harmonics < 1:
            raise ValueError("m_harmonics must be >= 1")
        if self.input_bins < 2:
            raise ValueError("input_bins must be >= 2")

    def to_dict(self) -> dict:
        return {
            "welch_segment": self.welch_segment,
            "input_bins": self.input_bins,
            "f_min_hz": self.f_min_hz,
            "delta_f_hz": self.delta_f_hz,
            "n_support": self.n_support,
            "gamma": self.gamma,
            "detector": self.detector,
            "threshold_quantile": self.threshold_quantile,
            "detection_threshold": self.detection_threshold,
            "max_lag_s": self.max_lag_s,
            "m_harmonics": self.m_harmonics,
            "weights_path": self.weights_path,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return cls(**data)


@dataclass
class HarmonicWeights:
    """Per-harmonic evidence weights beta_1..beta_M."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size < 1:
            raise ValueError("harmonic weights must be a non-empty vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("harmonic weights must be finite")

    @property
    def m(self) -> int:
        return self.values.size

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"harmonic_weights": self.values.tolist()}, sort_keys=True)
            + "\n"
        )

    @classmethod
    def load(cls, path: str | Path) -> "HarmonicWeights":
        data = json.loads(Path(path).read_text())
        return cls(values=np.array(data["harmonic_weights"], dtype=np.float64))


def default_harmonic_weights(m: int = 8) -> HarmonicWeights:
    """beta_k = 1/k: the fundamental counts most, evidence decays up the
    harmonic ladder."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return HarmonicWeights(values=1.0 / np.arange(1, m + 1))


@dataclass
class FuzzyLikelihood:
    """Candidate fundamentals with their aggregated harmonic evidence."""

    candidate_hz: np.ndarray
    scores: np.ndarray
    delta_f_hz: float

    def __post_init__(self):
        if self.candidate_hz.shape != self.scores.shape:
            raise ValueError("candidates and scores must align")

    def argmax_hz(self) -> float:
        return float(self.candidate_hz[int(np.argmax(self.scores))])


@dataclass
class CoarseResult:
    frequency_hz: float
    score: float
    flags: tuple[str, ...]
    likelihood: FuzzyLikelihood


@dataclass
class SpeedEstimate:
    """Final output of the pipeline.  ``rpm`` is exactly ``60 * fine_hz``."""

    fine_hz: float
    coarse_hz: float
    rpm: float
    confidence: float
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        self.fine_hz = float(self.fine_hz)
        self.coarse_hz = float(self.coarse_hz)
        self.rpm = float(self.rpm)
        self.confidence = float(self.confidence)
        self.flags = tuple(self.flags)

    def to_dict(self) -> dict:
        return {
            "fine_hz": self.fine_hz,
            "coarse_hz": self.coarse_hz,
            "rpm": self.rpm,
            "confidence": self.confidence,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SpeedEstimate":
        return cls(
            fine_hz=float(data["fine_hz"]),
            coarse_hz=float(data["coarse_hz"]),
            rpm=float(data["rpm"]),
            confidence=float(data["confidence"]),
            flags=tuple(data.get("flags", ())),
        )

    CSV_HEADER = "rpm,fine_hz,coarse_hz,confidence,flags"

    def csv_row(self) -> str:
        return (
            f"{self.rpm!r},{self.fine_hz!r},{self.coarse_hz!r},"
            f"{self.confidence!r},{';'.join(self.flags)}"
        )


# ---------------------------------------------------------------------------
# Coarse stage
# ---------------------------------------------------------------------------


def _grid_spacing(freqs: np.ndarray) -> float:
    if freqs.size < 2:
        raise ValueError("need at least two bins")
    return float(freqs[1] - freqs[0])


def _window_radius_bins(delta_f: float, spacing: float) -> int:
    return max(0, int(round(delta_f / spacing)))


def _soft_probabilities(dmap: DetectionMap, delta_f: float) -> np.ndarray:
    """Per-bin probability softened by a +/- delta_f neighborhood max."""
    r = _window_radius_bins(delta_f, _grid_spacing(dmap.bin_frequencies))
    if r == 0:
        return dmap.probabilities
    return maximum_filter1d(dmap.probabilities, size=2 * r + 1, mode="constant", cval=0.0)


def _candidate_indices(freqs: np.ndarray, f_min: float) -> np.ndarray:
    """Grid indices eligible as fundamentals: [f_min, band_max / 2].

    Capping at half the band guarantees every candidate has at least its
    second multiple inside the band, so the support check below never runs
    on an empty range.
    """
    band_max = float(freqs[-1])
    idx = np.flatnonzero((freqs >= f_min) & (freqs <= band_max / 2.0))
    if idx.size == 0:
        raise ValueError(
            f"no candidate bins between {f_min} Hz and {band_max / 2.0} Hz"
        )
    return idx


def _multiple_index(freqs: np.ndarray, spacing: float, target_hz: float) -> int | None:
    """Nearest grid index for a harmonic frequency, None when out of band."""
    i = int(round((target_hz - float(freqs[0])) / spacing))
    if i < 0 or i >= freqs.size:
        return None
    return i


def compute_likelihood(
    dmap: DetectionMap,
    beta: HarmonicWeights | None = None,
    *,
    f_min_hz: float = 5.0,
    delta_f_hz: float | None = None,
) -> FuzzyLikelihood:
    """Aggregate detection evidence over each candidate's harmonic ladder.

    score(g) = sum_{k=1..M} beta_k * max(prob within +/- delta_f of k*g);
    multiples beyond the band contribute nothing.
    """
    if beta is None:
        beta = default_harmonic_weights()
    freqs = dmap.bin_frequencies
    spacing = _grid_spacing(freqs)
    delta_f = spacing if delta_f_hz is None else delta_f_hz
    soft = _soft_probabilities(dmap, delta_f)
    idx = _candidate_indices(freqs, f_min_hz)
    scores = np.zeros(idx.size)
    for k in range(1, beta.m + 1):
        for j, i in enumerate(idx):
            mi = _multiple_index(freqs, spacing, k * freqs[i])
            if mi is not None:
                scores[j] += beta.values[k - 1] * soft[mi]
    return FuzzyLikelihood(
        candidate_hz=freqs[idx].copy(), scores=scores, delta_f_hz=delta_f
    )


def _supported(
    dmap: DetectionMap,
    candidate_hz: float,
    delta_f: float,
    n_support: int,
    detection_threshold: float,
) -> bool:
    """A candidate keeps its place when at least one of its low multiples
    (2nd up to the n_support-th, clipped to the band) has a binarized
    detection within +/- delta_f.  No detected multiple at all means the
    candidate is an artifact of a single strong bin and is removed."""
    freqs = dmap.bin_frequencies
    spacing = _grid_spacing(freqs)
    band_max = float(freqs[-1])
    r = _window_radius_bins(delta_f, spacing)
    binary = dmap.binarize(detection_threshold)
    top = min(n_support, int(math.floor(band_max / candidate_hz)))
    for m in range(2, top + 1):
        mi = _multiple_index(freqs, spacing, m * candidate_hz)
        if mi is None:
            continue
        lo = max(0, mi - r)
        hi = min(freqs.size, mi + r + 1)
        if binary[lo:hi].any():
            return True
    return False


def coarse_estimate(
    dmap: DetectionMap,
    beta: HarmonicWeights | None = None,
    *,
    f_min_hz: float = 5.0,
    delta_f_hz: float | None = None,
    n_support: int = 4,
    detection_threshold: float = 0.5,
) -> CoarseResult:
    """Best-supported fundamental on the coarse grid.

    Candidates with no detected low multiple are removed before the argmax;
    when the removal empties the field, the unfiltered argmax is returned
    with ``fallback`` and ``low_confidence`` flags.  Score ties break toward
    the lower frequency.
    """
    like = compute_likelihood(
        dmap, beta, f_min_hz=f_min_hz, delta_f_hz=delta_f_hz
    )
    keep = np.array(
        [
            _supported(dmap, float(g), like.delta_f_hz, n_support, detection_threshold)
            for g in like.candidate_hz
        ]
    )
    flags: tuple[str, ...] = ()
    if keep.any():
        scores = np.where(keep, like.scores, -np.inf)
    else:
        scores = like.scores
        flags = ("fallback", "low_confidence")
    best = int(np.argmax(scores))  # argmax takes the first, hence lowest, frequency
    return CoarseResult(
        frequency_hz=float(like.candidate_hz[best]),
        score=float(like.scores[best]),
        flags=flags,
        likelihood=like,
    )


# ---------------------------------------------------------------------------
# Fine stage
# ---------------------------------------------------------------------------


def fine_estimate(
    signal: np.ndarray,
    sample_rate_hz: float,
    coarse_hz: float,
    *,
    segment_len: int | None = None,
    gamma: int = 50,
    delta_f_hz: float | None = None,
    window: str = "hann",
) -> float:
    """Refine a coarse frequency on a gamma-times denser spectral grid.

    The Welch transform is re-run with the FFT zero-padded to
    ``gamma * segment_len`` points, and the density peak within
    ``+/- delta_f`` of the coarse pick is returned.  ``gamma=1`` reproduces
    the coarse grid.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if segment_len is None:
        segment_len = default_segment_len(sample_rate_hz, signal.size)
    if delta_f_hz is None:
        delta_f_hz = sample_rate_hz / segment_len
    spec = welch_psd(
        signal,
        sample_rate_hz,
        segment_len=segment_len,
        nfft=segment_len * gamma,
        window=window,
    )
    lo = coarse_hz - delta_f_hz
    hi = coarse_hz + delta_f_hz
    sel = np.flatnonzero((spec.frequencies >= lo) & (spec.frequencies <= hi))
    if sel.size == 0:
        raise PipelineError(
            "fine", f"no spectral bins within {delta_f_hz} Hz of {coarse_hz} Hz"
        )
    best = sel[int(np.argmax(spec.densities[sel]))]
    return float(spec.frequencies[best])


# ---------------------------------------------------------------------------
# End-to-end pipeline
# ---------------------------------------------------------------------------


def _prepare_band(
    spec: PowerSpectrum, input_bins: int, need_exact: bool
) -> PowerSpectrum:
    if spec.n_bins < input_bins:
        if need_exact:
            raise PipelineError(
                "spectrum",
                f"need {input_bins} bins for the network, got {spec.n_bins}",
            )
        return spec
    return PowerSpectrum(
        frequencies=spec.frequencies[:input_bins],
        densities=spec.densities[:input_bins],
        resolution_df=spec.resolution_df,
    )


def _detect(
    band: PowerSpectrum,
    config: PipelineConfig,
    weights: PpspWeights | None,
) -> DetectionMap:
    normalized = log_normalize(band)
    if config.detector == "threshold":
        return threshold_detector(normalized, quantile=config.threshold_quantile)
    if weights is None:
        if config.weights_path is None:
            raise PipelineError(
                "detect", "network detector needs weights or weights_path"
            )
        weights = PpspWeights.load(config.weights_path)
    return detect_with_network(normalized, weights)


def estimate_rpm(
    trace: SensorTrace,
    config: PipelineConfig | None = None,
    *,
    noise_reference: NoiseReference | None = None,
    beta: HarmonicWeights | None = None,
    weights: PpspWeights | None = None,
) -> SpeedEstimate:
    """Full pipeline: denoise + align + sum, spectrum, detect, coarse pick,
    fine refinement.

    Failures raise :class:`PipelineError` tagged with the stage.  The
    confidence is the winning score normalized by the best achievable score
    (all harmonics fully detected).
    """
    if config is None:
        config = PipelineConfig()
    if beta is None:
        beta = default_harmonic_weights(config.m_harmonics)
    fs = trace.sample_rate_hz
    if noise_reference is None:
        noise_reference = NoiseReference.unity(trace.n_samples)
    try:
        max_lag = int(round(config.max_lag_s * fs))
        enhanced = delay_and_sum(trace, noise_reference, max_lag=max_lag)
    except ValueError as exc:
        raise PipelineError("enhance", str(exc)) from exc
    try:
        segment = config.welch_segment or default_segment_len(fs, enhanced.size)
        spec = welch_psd(enhanced, fs, segment_len=segment)
    except ValueError as exc:
        raise PipelineError("spectrum", str(exc)) from exc
    band = _prepare_band(spec, config.input_bins, config.detector == "network")
    dmap = _detect(band, config, weights)
    try:
        coarse = coarse_estimate(
            dmap,
            beta,
            f_min_hz=config.f_min_hz,
            delta_f_hz=config.delta_f_hz,
            n_support=config.n_support,
            detection_threshold=config.detection_threshold,
        )
    except ValueError as exc:
        raise PipelineError("coarse", str(exc)) from exc
    delta_f = coarse.likelihood.delta_f_hz
    fine = fine_estimate(
        enhanced,
        fs,
        coarse.frequency_hz,
        segment_len=segment,
        gamma=config.gamma,
        delta_f_hz=delta_f,
    )
    confidence = float(np.clip(coarse.score / beta.values.sum(), 0.0, 1.0))
    return SpeedEstimate(
        fine_hz=fine,
        coarse_hz=coarse.frequency_hz,
        rpm=60.0 * fine,
        confidence=confidence,
        flags=coarse.flags,
    )


def estimate_rpm_multi(
    trace: SensorTrace,
    count: int,
    config: PipelineConfig | None = None,
    *,
    noise_reference: NoiseReference | None = None,
    beta: HarmonicWeights | None = None,
    weights: PpspWeights | None = None,
) -> list[SpeedEstimate]:
    """Iterative multi-motor estimation.

    After each pick, the detection evidence within ``delta_f`` of every
    integer multiple of the winner is cleared before rescoring, so later
    picks can neither be the winner's harmonics nor subharmonic ghosts
    that borrow its ladder.  The first pick mirrors
    :func:`estimate_rpm` exactly, fallback path included.  When supported
    candidates run out before ``count`` picks, the list comes up short and
    every returned estimate carries a ``harmonic_shortfall`` flag.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if config is None:
        config = PipelineConfig()
    if beta is None:
        beta = default_harmonic_weights(config.m_harmonics)
    fs = trace.sample_rate_hz
    if noise_reference is None:
        noise_reference = NoiseReference.unity(trace.n_samples)
    try:
        max_lag = int(round(config.max_lag_s * fs))
        enhanced = delay_and_sum(trace, noise_reference, max_lag=max_lag)
        segment = config.welch_segment or default_segment_len(fs, enhanced.size)
        spec = welch_psd(enhanced, fs, segment_len=segment)
    except ValueError as exc:
        raise PipelineError("enhance", str(exc)) from exc
    band = _prepare_band(spec, config.input_bins, config.detector == "network")
    dmap = _detect(band, config, weights)
    freqs = dmap.bin_frequencies
    spacing = _grid_spacing(freqs)
    probs = dmap.probabilities.copy()
    estimates: list[SpeedEstimate] = []
    for pick in range(count):
        current = DetectionMap(probabilities=probs, bin_frequencies=freqs)
        like = compute_likelihood(
            current, beta, f_min_hz=config.f_min_hz, delta_f_hz=config.delta_f_hz
        )
        delta_f = like.delta_f_hz
        supported = np.array(
            [
                _supported(
                    current, float(g), delta_f, config.n_support,
                    config.detection_threshold,
                )
                for g in like.candidate_hz
            ]
        )
        pool = supported & (like.scores > 0.0)
        flags: tuple[str, ...] = ()
        if not pool.any():
            if pick > 0:
                break
            # nothing supported on the untouched map: match estimate_rpm's
            # fallback so k = 1 stays equivalent to the single-source path
            scores = like.scores
            flags = ("fallback", "low_confidence")
        else:
            scores = np.where(pool, like.scores, -np.inf)
        best = int(np.argmax(scores))
        f_coarse = float(like.candidate_hz[best])
        fine = fine_estimate(
            enhanced,
            fs,
            f_coarse,
            segment_len=segment,
            gamma=config.gamma,
            delta_f_hz=delta_f,
        )
        confidence = float(np.clip(like.scores[best] / beta.values.sum(), 0.0, 1.0))
        estimates.append(
            SpeedEstimate(
                fine_hz=fine,
                coarse_hz=f_coarse,
                rpm=60.0 * fine,
                confidence=confidence,
                flags=flags,
            )
        )
        # clear the winner's harmonic evidence before the next pick; the
        # fine frequency tracks the true ladder where the coarse pick can
        # sit a bin off, and each window grows over the contiguous
        # binarized run so a leakage cluster dies whole
        r = _window_radius_bins(delta_f, spacing)
        binary = probs >= config.detection_threshold
        band_max = float(freqs[-1])
        k = 1
        while k * fine <= band_max + delta_f:
            mi = _multiple_index(freqs, spacing, k * fine)
            if mi is not None:
                lo = max(0, mi - r)
                hi = min(freqs.size, mi + r + 1)
                while lo > 0 and binary[lo - 1]:
                    lo -= 1
                while hi < freqs.size and binary[hi]:
                    hi += 1
                probs[lo:hi] = 0.0
            k += 1
    if len(estimates) < count:
        estimates = [
            SpeedEstimate(
                fine_hz=e.fine_hz,
                coarse_hz=e.coarse_hz,
                rpm=e.rpm,
                confidence=e.confidence,
                flags=e.flags + ("harmonic_shortfall",),
            )
            for e in estimates
        ]
    return estimates


# ---------------------------------------------------------------------------
# Harmonic-weight fitting
# ---------------------------------------------------------------------------


def _ridge_solve(design: np.ndarray, target: np.ndarray, lam: float) -> np.ndarray:
    """Posterior-mean ridge solution (lam -> 0 recovers least squares)."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    gram = design.T @ design + lam * np.eye(design.shape[1])
    rhs = design.T @ target
    if lam == 0:
        sol, *_ = np.linalg.lstsq(design, target, rcond=None)
        return sol
    return np.linalg.solve(gram, rhs)


def fit_beta(
    detection_maps: list[DetectionMap],
    true_fundamentals_hz: list[float],
    *,
    m_harmonics: int = 8,
    f_min_hz: float = 5.0,
    delta_f_hz: float | None = None,
    ridge_lambda: float = 1.0,
) -> HarmonicWeights:
    """Learn harmonic weights from labeled detection maps.

    Each map contributes one positive row (the candidate bin nearest the true
    fundamental, target 1) and one negative row per remaining candidate
    (target 0); features are the softened detection probabilities at the
    candidate's first ``m_harmonics`` multiples.  The weights are the ridge
    posterior mean over all rows.
    """
    if len(detection_maps) != len(true_fundamentals_hz):
        raise ValueError("need one true fundamental per detection map")
    if not detection_maps:
        raise ValueError("need at least one detection map")
    rows: list[np.ndarray] = []
    targets: list[float] = []
    for dmap, f_true in zip(detection_maps, true_fundamentals_hz):
        freqs = dmap.bin_frequencies
        spacing = _grid_spacing(freqs)
        delta_f = spacing if delta_f_hz is None else delta_f_hz
        soft = _soft_probabilities(dmap, delta_f)
        idx = _candidate_indices(freqs, f_min_hz)
        features = np.zeros((idx.size, m_harmonics))
        for k in range(1, m_harmonics + 1):
            for j, i in enumerate(idx):
                mi = _multiple_index(freqs, spacing, k * freqs[i])
                if mi is not None:
                    features[j, k - 1] = soft[mi]
        pos = int(np.argmin(np.abs(freqs[idx] - f_true)))
        for j in range(idx.size):
            rows.append(features[j])
            targets.append(1.0 if j == pos else 0.0)
    design = np.array(rows)
    target = np.array(targets)
    if not design.any():
        raise ValueError("detection maps carry no evidence to fit weights from")
    return HarmonicWeights(values=_ridge_solve(design, target, ridge_lambda))
