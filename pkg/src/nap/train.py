"""Dimension-adaptive training.

Every optimizer step consumes several freshly sampled batches whose shape
tuple (segment length, modality subset, channels and predictors per modality)
is drawn anew, so one set of weights learns to serve any input configuration;
batches are always rectangular, never padded or masked. Gradients are
averaged over all epoch-level terms in the accumulation window and applied
with decoupled-weight-decay Adam. Early stopping tracks validation macro-F1
from full-stream windowed inference.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import save_checkpoint
from .errors import ConfigError, NumericError, ValidationError
from .evaluate import infer_recording, per_stage_f1
from .model import NapModel
from .synth import N_STAGES, PredictionSet

logger = logging.getLogger(__name__)

Layout = list[tuple[str, list[str], list[str]]]


@dataclass
class BatchSpec:
    """The concrete dimensions and identities shared by every segment of one batch."""

    seq_len: int
    modalities: Layout  # chosen (modality, channels, predictors), in dataset order

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValidationError("seq_len must be >= 1")
        if not self.modalities:
            raise ValidationError("a batch needs at least one modality")
        for modality, channels, predictors in self.modalities:
            if not channels or not predictors:
                raise ValidationError(f"modality '{modality}' needs >= 1 channel and predictor")


@dataclass
class TrainConfig:
    recordings_per_batch: int = 8
    segments_per_recording: int = 4
    accumulation_steps: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    patience: int = 15
    steps_per_epoch: int = 50
    max_epochs: int = 100
    seq_len_min: int = 20
    seq_len_max: int = 80
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("recordings_per_batch", "segments_per_recording", "accumulation_steps",
                     "patience", "steps_per_epoch", "max_epochs", "seq_len_min"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.seq_len_max < self.seq_len_min:
            raise ConfigError("seq_len_max must be >= seq_len_min")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def segments_per_step(self) -> int:
        return self.accumulation_steps * self.recordings_per_batch * self.segments_per_recording


@dataclass
class Batch:
    """Rectangular arrays for one forward/backward pass."""

    blocks: list[np.ndarray]  # one (S, T, C_k, B_k, 5) array per chosen modality
    modality_ids: list[int]  # embedding index of each block (dataset layout order)
    labels: np.ndarray  # (S, T) int stages

    @property
    def term_count(self) -> int:
        return self.labels.size


def modality_indices(dataset: list[PredictionSet]) -> dict[str, int]:
    """Stable embedding index per modality id, first-seen order across the dataset."""
    mapping: dict[str, int] = {}
    for ps in dataset:
        for modality, _, _ in ps.layout():
            if modality not in mapping:
                mapping[modality] = len(mapping)
    return mapping


def common_layout(dataset: list[PredictionSet]) -> Layout:
    """Modalities/channels/predictors present in every recording, in the
    order of the first recording."""
    if not dataset:
        raise ValidationError("empty dataset")
    layout = []
    first = dataset[0].layout()
    rest = [dict((m, (set(c), set(p))) for m, c, p in ps.layout()) for ps in dataset[1:]]
    for modality, channels, predictors in first:
        if any(modality not in other for other in rest):
            continue
        chans = [c for c in channels if all(c in other[modality][0] for other in rest)]
        preds = [p for p in predictors if all(p in other[modality][1] for other in rest)]
        if chans and preds:
            layout.append((modality, chans, preds))
    if not layout:
        raise ValidationError("recordings share no common prediction streams")
    return layout


def sample_batch_dims(
    layout: Layout,
    rng: np.random.Generator,
    t_bounds: tuple[int, int] = (20, 80),
) -> BatchSpec:
    """Draw one batch-shape tuple: T and the modality count uniformly, then
    per chosen modality a uniform channel count and predictor count, with the
    concrete identities sampled uniformly without replacement."""
    t_lo, t_hi = t_bounds
    if t_lo < 1 or t_hi < t_lo:
        raise ValidationError(f"bad segment-length bounds ({t_lo}, {t_hi})")
    seq_len = int(rng.integers(t_lo, t_hi + 1))
    m_max = len(layout)
    m = int(rng.integers(1, m_max + 1))
    chosen = sorted(rng.choice(m_max, size=m, replace=False).tolist())

    modalities = []
    for k in chosen:
        modality, channels, predictors = layout[k]
        c_k = int(rng.integers(1, len(channels) + 1))
        chan_idx = sorted(rng.choice(len(channels), size=c_k, replace=False).tolist())
        b_k = int(rng.integers(1, len(predictors) + 1))
        pred_idx = sorted(rng.choice(len(predictors), size=b_k, replace=False).tolist())
        modalities.append(
            (modality, [channels[i] for i in chan_idx], [predictors[i] for i in pred_idx])
        )
    return BatchSpec(seq_len=seq_len, modalities=modalities)


def _has_streams(ps: PredictionSet, spec: BatchSpec) -> bool:
    for modality, channels, predictors in spec.modalities:
        if modality not in ps.streams:
            return False
        have = ps.streams[modality]
        for ch in channels:
            if ch not in have:
                return False
            for pr in predictors:
                if pr not in have[ch]:
                    return False
    return True


def assemble_batch(
    dataset: list[PredictionSet],
    spec: BatchSpec,
    recordings_per_batch: int,
    segments_per_recording: int,
    rng: np.random.Generator,
    seq_len_min: int = 20,
) -> Batch:
    """Slice ``recordings_per_batch * segments_per_recording`` contiguous
    segments matching ``spec`` out of the dataset.

    Recordings lacking a requested stream are skipped with a warning. If a
    selected recording is shorter than the sampled segment length, the length
    is re-drawn from {seq_len_min .. shortest length} so no padding is ever
    introduced.
    """
    if len(dataset) < recordings_per_batch:
        raise ValidationError(
            f"dataset has {len(dataset)} recordings, need {recordings_per_batch}"
        )
    order = rng.permutation(len(dataset))
    selected = []
    for idx in order:
        ps = dataset[idx]
        if not _has_streams(ps, spec):
            logger.warning("skipping recording %s: lacks streams required by the batch spec",
                           ps.recording_id)
            continue
        selected.append(ps)
        if len(selected) == recordings_per_batch:
            break
    if len(selected) < recordings_per_batch:
        raise ValidationError(
            f"only {len(selected)} recordings provide the requested streams, "
            f"need {recordings_per_batch}"
        )

    seq_len = spec.seq_len
    shortest = min(ps.t_rec for ps in selected)
    if shortest < seq_len:
        lo = min(seq_len_min, shortest)
        seq_len = int(rng.integers(lo, shortest + 1))

    modality_order = modality_indices(dataset)
    blocks = []
    labels = []
    segment_starts = []
    for ps in selected:
        starts = rng.integers(0, ps.t_rec - seq_len + 1, size=segments_per_recording)
        segment_starts.append(starts)
        labels.extend(ps.truth.stages[s : s + seq_len] for s in starts)

    for modality, channels, predictors in spec.modalities:
        block = np.empty(
            (len(selected), segments_per_recording, seq_len,
             len(channels), len(predictors), N_STAGES),
            dtype=np.float32,
        )
        for r, ps in enumerate(selected):
            for c, ch in enumerate(channels):
                for b, pr in enumerate(predictors):
                    probs = ps.stream(modality, ch, pr).probs
                    for k, s in enumerate(segment_starts[r]):
                        block[r, k, :, c, b] = probs[s : s + seq_len]
        blocks.append(block.reshape(-1, seq_len, len(channels), len(predictors), N_STAGES))

    return Batch(
        blocks=blocks,
        modality_ids=[modality_order[m] for m, _, _ in spec.modalities],
        labels=np.stack(labels),
    )


class AdamW:
    """Decoupled weight decay Adam with bias-corrected moments."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def compute_gradients(model: NapModel, batches: list[Batch],
                      dropout_rngs=None) -> tuple[dict[str, np.ndarray], float]:
    """Backprop each batch and average gradients over all epoch-level loss
    terms in the window, so accumulation acts as pure batch enlargement.
    Returns (gradients, mean loss per term)."""
    grads = {name: np.zeros_like(p.data) for name, p in model.params.items()}
    loss_sum = 0.0
    total_terms = 0
    if dropout_rngs is None:
        dropout_rngs = [None] * len(batches)
    for batch, drop_rng in zip(batches, dropout_rngs):
        for p in model.params.values():
            p.zero_grad()
        logits = model.forward_batch(batch.blocks, batch.modality_ids, rng=drop_rng)
        flat = ag.reshape(logits, (batch.term_count, logits.shape[-1]))
        loss = ag.cross_entropy(flat, batch.labels.reshape(-1))
        loss.backward()
        n = batch.term_count
        for name, p in model.params.items():
            if p.grad is not None:
                grads[name] += n * p.grad
        loss_sum += loss.item() * n
        total_terms += n
    for name in grads:
        grads[name] /= total_terms
    return grads, loss_sum / total_terms


def validation_macro_f1(model: NapModel, dataset: list[PredictionSet]) -> float:
    """Mean per-recording macro-F1 under full-stream windowed inference."""
    scores = []
    for ps in dataset:
        _, hyp = infer_recording(model, ps)
        scores.append(per_stage_f1(hyp, ps.truth)[1])
    return float(np.mean(scores))


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    best_val_mf1: float
    history: list[dict] = field(default_factory=list)


def train(
    train_set: list[PredictionSet],
    val_set: list[PredictionSet],
    model: NapModel,
    cfg: TrainConfig,
    run_dir=None,
) -> TrainResult:
    """Optimize ``model`` in place; retains and returns the parameters with the
    best validation macro-F1. Fully deterministic for a fixed config and seed."""
    if not train_set or not val_set:
        raise ValidationError("train and validation splits must be non-empty")
    train_ids = {ps.recording_id for ps in train_set}
    if train_ids & {ps.recording_id for ps in val_set}:
        raise ValidationError("train and validation recordings must be disjoint")

    if cfg.dtype == "float32":
        model.cast(np.float32)
    layout = common_layout(train_set)
    bounds = (cfg.seq_len_min, cfg.seq_len_max)
    optimizer = AdamW(model.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    best = TrainResult(best_params=model.copy_params(), best_epoch=-1, best_val_mf1=-np.inf)
    history: list[dict] = []
    since_best = 0
    for epoch in range(cfg.max_epochs):
        epoch_loss = 0.0
        for step in range(cfg.steps_per_epoch):
            batches, drop_rngs = [], []
            for g in range(cfg.accumulation_steps):
                rng = np.random.default_rng((cfg.seed, epoch, step, g))
                spec = sample_batch_dims(layout, rng, bounds)
                batches.append(
                    assemble_batch(train_set, spec, cfg.recordings_per_batch,
                                   cfg.segments_per_recording, rng,
                                   seq_len_min=cfg.seq_len_min)
                )
                drop_rngs.append(
                    np.random.default_rng((cfg.seed, epoch, step, g, 1))
                    if model.config.dropout > 0 else None
                )
            grads, loss = compute_gradients(model, batches, drop_rngs)
            optimizer.step(grads)
            epoch_loss += loss
        train_loss = epoch_loss / cfg.steps_per_epoch
        val_mf1 = validation_macro_f1(model, val_set)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_mf1": val_mf1})
        logger.info("epoch %d: train_loss %.4f val_mf1 %.4f", epoch, train_loss, val_mf1)

        if val_mf1 > best.best_val_mf1:
            best = TrainResult(model.copy_params(), epoch, val_mf1)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    best.history = history

    if run_dir is not None:
        _write_run_dir(Path(run_dir), model, cfg, best)
    return best


def _write_run_dir(run_dir: Path, model: NapModel, cfg: TrainConfig, result: TrainResult) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"model": model.config.to_dict(), "train": asdict(cfg)}
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2) + "\n")
    lines = ["epoch,train_loss,val_mf1"]
    lines += [f"{h['epoch']},{h['train_loss']:.6f},{h['val_mf1']:.6f}" for h in result.history]
    (run_dir / "history.csv").write_text("\n".join(lines) + "\n")
    final = model.copy_params()
    model.set_params(result.best_params)
    save_checkpoint(run_dir / "best.napw", model.config, model.params)
    model.set_params(final)
    save_checkpoint(run_dir / "final.napw", model.config, model.params)
