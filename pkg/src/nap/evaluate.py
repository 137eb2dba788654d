"""Evaluation: per-stage F1, windowed model inference, baseline comparisons,
and multi-annotator soft-agreement / consensus scoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ValidationError
from .model import NapModel
from .synth import N_STAGES, STAGES, Hypnodensity, Hypnogram, PredictionSet, soft_vote

INFERENCE_WINDOW = 35


def confusion_counts(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """5x5 counts, rows = truth stage, columns = predicted stage."""
    counts = np.zeros((N_STAGES, N_STAGES), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    return counts


def per_stage_f1(pred: Hypnogram, truth: Hypnogram) -> tuple[np.ndarray, float]:
    """F1 per stage plus macro-F1.

    Stages absent from both truth and prediction have undefined F1 (NaN) and
    are excluded from the macro average; a stage present on either side with
    no true positives scores 0.
    """
    if len(pred) != len(truth):
        raise ValidationError(f"length mismatch: prediction {len(pred)} vs truth {len(truth)}")
    counts = confusion_counts(pred.stages, truth.stages)
    tp = np.diag(counts).astype(np.float64)
    fn = counts.sum(axis=1) - tp
    fp = counts.sum(axis=0) - tp

    f1 = np.full(N_STAGES, np.nan)
    present = (tp + fn + fp) > 0
    denom = 2.0 * tp + fp + fn
    f1[present] = 2.0 * tp[present] / denom[present]
    macro = float(f1[present].mean())
    return f1, macro


def window_starts(t_rec: int, window: int) -> tuple[list[int], int]:
    """Start offsets of the inference tiling and the effective window length.

    Non-overlapping windows cover the recording left to right; a remainder is
    covered by one final right-aligned window. Recordings shorter than
    ``window`` get a single full-length window.
    """
    if t_rec < 1:
        raise ValidationError("recording must have at least one epoch")
    if t_rec <= window:
        return [0], t_rec
    starts = list(range(0, t_rec - window + 1, window))
    if starts[-1] + window < t_rec:
        starts.append(t_rec - window)
    return starts, window


def infer_recording(
    model: NapModel,
    prediction_set: PredictionSet,
    window: int = INFERENCE_WINDOW,
) -> tuple[Hypnodensity, Hypnogram]:
    """Aggregate one full recording with all its streams, dropout off.

    The recording is tiled with non-overlapping ``window``-epoch segments; a
    remainder shorter than ``window`` is covered by a final right-aligned
    window, and doubly covered epochs take the mean of the overlapping
    windows' probabilities.
    """
    t_rec = prediction_set.t_rec
    starts, window = window_starts(t_rec, window)

    layout = prediction_set.layout()
    blocks = []
    for modality, channels, predictors in layout:
        # (T_rec, C, B, 5) in layout order
        block = np.stack(
            [
                np.stack(
                    [
                        prediction_set.stream(modality, ch, pr).probs.astype(np.float64)
                        for pr in predictors
                    ],
                    axis=1,
                )
                for ch in channels
            ],
            axis=1,
        )
        blocks.append(block)
    modality_ids = list(range(len(layout)))

    windowed = [np.stack([b[s : s + window] for s in starts]) for b in blocks]
    with ag.no_grad():
        logits = model.forward_batch(windowed, modality_ids)
        probs = ag.softmax(logits, axis=-1).data

    accum = np.zeros((t_rec, N_STAGES))
    cover = np.zeros(t_rec)
    for i, s in enumerate(starts):
        accum[s : s + window] += probs[i]
        cover[s : s + window] += 1.0
    accum /= cover[:, None]
    density = Hypnodensity(accum)
    return density, density.argmax_hypnogram()


@dataclass
class MetricsReport:
    """Per-recording macro/per-stage F1 for one method, with aggregates."""

    method: str
    recording_ids: list[str]
    macro_f1: np.ndarray  # (R,)
    stage_f1: np.ndarray  # (R, 5), NaN where a stage is absent from both sides

    def __post_init__(self):
        self.macro_f1 = np.asarray(self.macro_f1, dtype=np.float64)
        self.stage_f1 = np.asarray(self.stage_f1, dtype=np.float64)

    @property
    def mean_macro_f1(self) -> float:
        return float(self.macro_f1.mean())

    @property
    def sd_macro_f1(self) -> float:
        return float(self.macro_f1.std(ddof=0))

    def aggregate_row(self) -> dict[str, str]:
        def short(x):
            s = f"{x:.3f}"
            return s[1:] if s.startswith("0.") else s

        def fmt(mean, sd):
            return f"{short(mean)}({short(sd)})" if np.isfinite(mean) else "-"

        row = {"method": self.method, "mf1": fmt(self.mean_macro_f1, self.sd_macro_f1)}
        for i, stage in enumerate(STAGES):
            col = self.stage_f1[:, i]
            finite = col[np.isfinite(col)]
            if finite.size:
                row[f"f1_{stage.lower()}"] = fmt(finite.mean(), finite.std(ddof=0))
            else:
                row[f"f1_{stage.lower()}"] = "-"
        return row


def _score_method(method: str, recordings: list[PredictionSet],
                  hypnograms: list[Hypnogram]) -> MetricsReport:
    macro, stages = [], []
    for ps, pred in zip(recordings, hypnograms):
        f1, mf1 = per_stage_f1(pred, ps.truth)
        macro.append(mf1)
        stages.append(f1)
    return MetricsReport(method, [ps.recording_id for ps in recordings],
                         np.array(macro), np.array(stages))


def evaluate_methods(dataset: list[PredictionSet], model: NapModel) -> list[MetricsReport]:
    """Score three methods against the same recordings and truth:

    1. the best single (modality, predictor) pair, soft-voted across its
       channels, chosen by mean macro-F1;
    2. soft-voting across all channels, modalities and predictors;
    3. the trained aggregation model, full-stream windowed inference.
    """
    if not dataset:
        raise ValidationError("evaluate_methods needs a non-empty dataset")

    pair_votes: dict[tuple[str, str], list[Hypnogram]] = {}
    for ps in dataset:
        for modality, channels, predictors in ps.layout():
            for predictor in predictors:
                streams = [ps.stream(modality, ch, predictor) for ch in channels]
                vote = soft_vote(streams).argmax_hypnogram()
                pair_votes.setdefault((modality, predictor), []).append(vote)

    pair_reports = {
        pair: _score_method(f"single[{pair[0]}/{pair[1]}]", dataset, votes)
        for pair, votes in pair_votes.items()
    }
    best_pair = max(pair_reports, key=lambda pair: pair_reports[pair].mean_macro_f1)
    best_single = pair_reports[best_pair]
    best_single.method = f"best_single[{best_pair[0]}/{best_pair[1]}]"

    somnus_votes = [
        soft_vote([hd for _, _, _, hd in ps.iter_streams()]).argmax_hypnogram()
        for ps in dataset
    ]
    somnus = _score_method("soft_vote_all", dataset, somnus_votes)

    nap_preds = [infer_recording(model, ps)[1] for ps in dataset]
    nap = _score_method("nap", dataset, nap_preds)
    return [best_single, somnus, nap]


def write_metrics_csv(path, reports: list[MetricsReport], dataset_name: str) -> None:
    columns = ["dataset", "method", "recording_id", "mf1"] + [
        f"f1_{s.lower()}" for s in STAGES
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for report in reports:
            for i, rec_id in enumerate(report.recording_ids):
                row = [dataset_name, report.method, rec_id, f"{report.macro_f1[i]:.6f}"]
                row += [
                    f"{v:.6f}" if np.isfinite(v) else "nan" for v in report.stage_f1[i]
                ]
                writer.writerow(row)


def format_aggregate_table(reports: list[MetricsReport], dataset_name: str) -> str:
    """Plain-text mean(SD) summary table, three decimals."""
    headers = ["dataset", "method", "MF1"] + [f"F1_{s}" for s in STAGES]
    rows = []
    for report in reports:
        agg = report.aggregate_row()
        rows.append([dataset_name, report.method, agg["mf1"]]
                    + [agg[f"f1_{s.lower()}"] for s in STAGES])
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)


# -- multi-annotator machinery ---------------------------------------------


def _as_annotation_matrix(annotations) -> np.ndarray:
    if isinstance(annotations, np.ndarray):
        ann = annotations
    else:
        ann = np.stack([a.stages if isinstance(a, Hypnogram) else np.asarray(a)
                        for a in annotations])
    ann = np.asarray(ann, dtype=np.int64)
    if ann.ndim != 2 or ann.shape[0] < 2:
        raise ValidationError(f"need >= 2 equal-length scorers, got shape {ann.shape}")
    if ann.min() < 0 or ann.max() >= N_STAGES:
        raise ValidationError("annotations contain out-of-range stages")
    return ann


def soft_agreement(annotations) -> np.ndarray:
    """Per-scorer alignment with the other scorers' pooled votes.

    For scorer s and epoch t, the other scorers' one-hot labels are summed
    and scaled by the column maximum; the scorer's score is the mean over
    epochs of that normalized vector at the scorer's own label.
    """
    ann = _as_annotation_matrix(annotations)
    n_scorers, t_len = ann.shape
    onehot = np.zeros((n_scorers, t_len, N_STAGES))
    onehot[np.arange(n_scorers)[:, None], np.arange(t_len)[None, :], ann] = 1.0
    total = onehot.sum(axis=0)

    scores = np.empty(n_scorers)
    for s in range(n_scorers):
        others = total - onehot[s]
        normalized = others / others.max(axis=1, keepdims=True)
        scores[s] = normalized[np.arange(t_len), ann[s]].mean()
    return scores


def consensus_hypnogram(annotations) -> Hypnogram:
    """Per-epoch majority stage; ties go to the tied stage chosen by the most
    reliable scorer (highest soft-agreement) voting within the tie."""
    ann = _as_annotation_matrix(annotations)
    reliability = soft_agreement(ann)
    # Stable priority: by descending reliability, then scorer index.
    priority = np.lexsort((np.arange(len(reliability)), -reliability))

    t_len = ann.shape[1]
    consensus = np.empty(t_len, dtype=np.int64)
    for t in range(t_len):
        votes = np.bincount(ann[:, t], minlength=N_STAGES)
        tied = np.flatnonzero(votes == votes.max())
        if len(tied) == 1:
            consensus[t] = tied[0]
            continue
        for scorer in priority:
            if ann[scorer, t] in tied:
                consensus[t] = ann[scorer, t]
                break
    return Hypnogram(consensus)
