"""Synthetic sleep-staging data: ground-truth hypnograms and the probabilistic
prediction streams ("hypnodensities") that stand in for pretrained per-channel
staging models.

Stages are indexed 0..4 = Wake, N1, N2, N3, REM throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

STAGES = ("W", "N1", "N2", "N3", "REM")
N_STAGES = 5

ROW_SUM_TOL = 1e-6
STOCHASTIC_TOL = 1e-9

# Harness default: diagonal-dominant transitions (self-transition 0.85) with
# the physiologically plausible moves favored (W->N1, N1->N2, N2->{N3, REM}).
DEFAULT_TRANSITION = np.array(
    [
        [0.85, 0.08, 0.04, 0.01, 0.02],
        [0.03, 0.85, 0.09, 0.01, 0.02],
        [0.02, 0.02, 0.85, 0.06, 0.05],
        [0.02, 0.01, 0.10, 0.85, 0.02],
        [0.04, 0.04, 0.06, 0.01, 0.85],
    ]
)

DEFAULT_INITIAL = np.array([1.0, 0.0, 0.0, 0.0, 0.0])


def _check_row_stochastic(matrix: np.ndarray, what: str, tol: float) -> None:
    if np.any(matrix < 0):
        raise ValidationError(f"{what} has negative entries")
    err = np.abs(matrix.sum(axis=-1) - 1.0).max()
    if err > tol:
        raise ValidationError(f"{what} rows must sum to 1 (max deviation {err:.3g})")


@dataclass
class Hypnogram:
    """A discrete stage sequence over one recording."""

    stages: np.ndarray

    def __post_init__(self):
        self.stages = np.asarray(self.stages, dtype=np.int64)
        if self.stages.ndim != 1 or len(self.stages) < 1:
            raise ValidationError("hypnogram must be a non-empty 1-d sequence")
        if self.stages.min() < 0 or self.stages.max() >= N_STAGES:
            raise ValidationError(f"stage indices must lie in [0, {N_STAGES})")

    def __len__(self) -> int:
        return len(self.stages)


@dataclass
class Hypnodensity:
    """Per-epoch probability distribution over the five stages (T x 5, float32)."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs)
        if probs.ndim != 2 or probs.shape[1] != N_STAGES or probs.shape[0] < 1:
            raise ValidationError(f"hypnodensity must be (T, {N_STAGES}), got {probs.shape}")
        if np.any(probs < 0):
            raise ValidationError("hypnodensity probabilities must be nonnegative")
        err = np.abs(probs.sum(axis=1) - 1.0).max()
        if err > ROW_SUM_TOL:
            raise ValidationError(
                f"hypnodensity rows must sum to 1 within {ROW_SUM_TOL} (max deviation {err:.3g}); "
                "logit-valued inputs are rejected, not normalized"
            )
        self.probs = probs.astype(np.float32, copy=False)

    def __len__(self) -> int:
        return self.probs.shape[0]

    def argmax_hypnogram(self) -> Hypnogram:
        return Hypnogram(self.probs.argmax(axis=1))


@dataclass
class ReliabilityProfile:
    """How a synthetic predictor corrupts the truth.

    ``confusion[s]`` is the emission distribution of predicted stages given
    true stage ``s``; ``kappa`` sharpens the emitted probability rows
    (Dirichlet concentration); ``blur`` spreads rows over ``2*blur + 1``
    neighboring epochs; ``exact`` emits one-hot rows instead of Dirichlet
    draws.
    """

    confusion: np.ndarray
    kappa: float = 20.0
    blur: int = 2
    exact: bool = False

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.float64)
        if self.confusion.shape != (N_STAGES, N_STAGES):
            raise ValidationError(f"confusion must be {N_STAGES}x{N_STAGES}")
        _check_row_stochastic(self.confusion, "confusion matrix", STOCHASTIC_TOL)
        if self.kappa <= 0:
            raise ValidationError("kappa must be positive")
        if self.blur < 0:
            raise ValidationError("blur width must be >= 0")

    @classmethod
    def diagonal(cls, diag: float, **kwargs) -> "ReliabilityProfile":
        """Profile with ``diag`` mass on the true stage, remainder uniform."""
        off = (1.0 - diag) / (N_STAGES - 1)
        confusion = np.full((N_STAGES, N_STAGES), off)
        np.fill_diagonal(confusion, diag)
        return cls(confusion=confusion, **kwargs)


@dataclass
class PredictionSet:
    """All prediction streams for one recording: modality -> channel -> predictor."""

    recording_id: str
    truth: Hypnogram
    streams: dict[str, dict[str, dict[str, Hypnodensity]]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.streams:
            raise ValidationError("a prediction set needs at least one modality")
        t_rec = len(self.truth)
        for modality, channels in self.streams.items():
            if not channels:
                raise ValidationError(f"modality '{modality}' has no channels")
            for channel, predictors in channels.items():
                if not predictors:
                    raise ValidationError(f"channel '{modality}/{channel}' has no predictors")
                for predictor, hd in predictors.items():
                    if len(hd) != t_rec:
                        raise ValidationError(
                            f"stream {modality}/{channel}/{predictor} has length "
                            f"{len(hd)}, expected {t_rec}"
                        )

    @property
    def t_rec(self) -> int:
        return len(self.truth)

    def layout(self) -> list[tuple[str, list[str], list[str]]]:
        """Per-modality (modality_id, channel_ids, predictor_ids), in storage order."""
        out = []
        for modality, channels in self.streams.items():
            channel_ids = list(channels)
            predictor_ids = list(next(iter(channels.values())))
            out.append((modality, channel_ids, predictor_ids))
        return out

    def stream(self, modality: str, channel: str, predictor: str) -> Hypnodensity:
        return self.streams[modality][channel][predictor]

    def iter_streams(self):
        for modality, channels in self.streams.items():
            for channel, predictors in channels.items():
                for predictor, hd in predictors.items():
                    yield modality, channel, predictor, hd


def generate_hypnogram(
    transition: np.ndarray,
    initial: np.ndarray,
    t_rec: int,
    seed,
) -> Hypnogram:
    """Sample a first-order Markov stage sequence; deterministic per seed."""
    transition = np.asarray(transition, dtype=np.float64)
    initial = np.asarray(initial, dtype=np.float64)
    if transition.shape != (N_STAGES, N_STAGES):
        raise ValidationError(f"transition must be {N_STAGES}x{N_STAGES}")
    _check_row_stochastic(transition, "transition matrix", STOCHASTIC_TOL)
    _check_row_stochastic(initial[None, :], "initial distribution", STOCHASTIC_TOL)
    if t_rec < 1:
        raise ValidationError("t_rec must be >= 1")

    rng = np.random.default_rng(seed)
    cum_t = transition.cumsum(axis=1)
    u = rng.random(t_rec)
    stages = np.empty(t_rec, dtype=np.int64)
    stages[0] = np.searchsorted(initial.cumsum(), u[0], side="right")
    for t in range(1, t_rec):
        stages[t] = np.searchsorted(cum_t[stages[t - 1]], u[t], side="right")
    np.clip(stages, 0, N_STAGES - 1, out=stages)
    return Hypnogram(stages)


def generate_base_predictions(
    truth: Hypnogram,
    profile: ReliabilityProfile,
    seed,
) -> Hypnodensity:
    """Emit a synthetic hypnodensity for ``truth`` under ``profile``.

    Per epoch: draw a predicted stage from the profile's confusion row, emit a
    probability row peaked at it (one-hot in exact mode, otherwise a Dirichlet
    draw with concentration ``kappa``), then blur along time and renormalize.
    """
    rng = np.random.default_rng(seed)
    t_rec = len(truth)

    cum = profile.confusion.cumsum(axis=1)[truth.stages]
    u = rng.random((t_rec, 1))
    predicted = (u > cum).sum(axis=1).clip(0, N_STAGES - 1)

    onehot = np.zeros((t_rec, N_STAGES))
    onehot[np.arange(t_rec), predicted] = 1.0
    if profile.exact:
        rows = onehot
    else:
        alpha = profile.kappa * (0.9 * onehot + 0.1 / N_STAGES)
        draws = rng.standard_gamma(alpha)
        rows = draws / draws.sum(axis=1, keepdims=True)

    if profile.blur > 0:
        width = 2 * profile.blur + 1
        kernel = np.ones(width)
        counts = np.convolve(np.ones(t_rec), kernel, mode="same")
        rows = np.stack(
            [np.convolve(rows[:, s], kernel, mode="same") / counts for s in range(N_STAGES)],
            axis=1,
        )
    rows = rows / rows.sum(axis=1, keepdims=True)
    return Hypnodensity(rows)


def soft_vote(streams: list[Hypnodensity]) -> Hypnodensity:
    """Unweighted per-epoch mean of probability rows (the plain-averaging baseline)."""
    if not streams:
        raise ValidationError("soft_vote needs at least one stream")
    lengths = {len(s) for s in streams}
    if len(lengths) != 1:
        raise ValidationError(f"soft_vote streams differ in length: {sorted(lengths)}")
    mean = np.mean([s.probs.astype(np.float64) for s in streams], axis=0)
    mean /= mean.sum(axis=1, keepdims=True)
    return Hypnodensity(mean)
