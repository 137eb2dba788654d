"""Run configuration: one YAML file drives synthesis, training and evaluation.

Every section is optional; defaults reproduce the reference model and
training setup. Relative paths are resolved against the config file's
directory, so a snapshot written into a run directory is self-contained.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .model import ModelConfig
from .synth import DEFAULT_INITIAL, DEFAULT_TRANSITION, ReliabilityProfile
from .train import TrainConfig

RATIO_TOL = 1e-9


@dataclass
class ModalitySpec:
    id: str
    channels: list[str]
    predictors: list[str]
    # Optional per-stream diagonal confusion mass, indexed [predictor][channel];
    # when absent, the synth-wide diag_span is spread across streams.
    diag: list[list[float]] | None = None

    def __post_init__(self):
        if not self.channels or not self.predictors:
            raise ConfigError(f"modality '{self.id}' needs channels and predictors")
        if self.diag is not None:
            if len(self.diag) != len(self.predictors) or any(
                len(row) != len(self.channels) for row in self.diag
            ):
                raise ConfigError(
                    f"modality '{self.id}': diag must be [predictors][channels] = "
                    f"[{len(self.predictors)}][{len(self.channels)}]"
                )


# Default benchmark layout: a couple of reliable streams, the rest mediocre,
# so that unweighted averaging is clearly suboptimal. diag is [predictor][channel].
DEFAULT_MODALITIES = [
    ModalitySpec("eeg", ["c1", "c2", "c3"], ["p0", "p1"],
                 diag=[[0.90, 0.50, 0.45], [0.55, 0.50, 0.48]]),
    ModalitySpec("eog", ["e1", "e2"], ["p0", "p1"],
                 diag=[[0.85, 0.50], [0.52, 0.47]]),
]


# Two systematic misclassification patterns for unreliable streams, alternated
# across streams: each maps true stage -> favored wrong stage (the classic
# confusions: wake/N1 mixups, N3 scored as N2, REM scored as N1, and a second
# family for variety). Uniform-error streams would make plain averaging nearly
# unbeatable; systematically biased ones mirror real predictor pathologies.
WEAK_BIAS_TARGETS = ((1, 0, 1, 2, 1), (4, 2, 3, 2, 0))


def biased_confusion(diag: float, targets, bias: float) -> np.ndarray:
    """Row-stochastic confusion with ``diag`` on the truth and ``bias`` of the
    remaining mass concentrated on one favored wrong stage per row."""
    n = len(targets)
    conf = np.zeros((n, n))
    for s, target in enumerate(targets):
        conf[s, s] = diag
        off = 1.0 - diag
        conf[s, target] += off * bias
        rest = off * (1.0 - bias) / (n - 2)
        for o in range(n):
            if o != s and o != target:
                conf[s, o] += rest
    return conf


@dataclass
class SynthConfig:
    counts: dict[str, int] = field(default_factory=lambda: {"train": 40, "val": 8, "test": 12})
    t_rec: int = 300
    kappa: float = 20.0
    blur: int = 0
    exact: bool = False
    diag_span: tuple[float, float] = (0.45, 0.9)
    # Streams with diagonal mass below weak_threshold err systematically
    # (weak_bias of their off-diagonal mass on one wrong stage) and
    # overconfidently (kappa scaled by weak_kappa_scale).
    weak_bias: float = 0.75
    weak_threshold: float = 0.7
    weak_kappa_scale: float = 2.0
    transition: np.ndarray = field(default_factory=lambda: DEFAULT_TRANSITION.copy())
    initial: np.ndarray = field(default_factory=lambda: DEFAULT_INITIAL.copy())
    modalities: list[ModalitySpec] = field(default_factory=lambda: list(DEFAULT_MODALITIES))

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        for split in ("train", "val", "test"):
            if split not in self.counts:
                raise ConfigError(f"synth counts missing '{split}'")
            if int(self.counts[split]) < 1:
                raise ConfigError(f"synth count for '{split}' must be >= 1")
        self.counts = {k: int(v) for k, v in self.counts.items()}
        if self.t_rec < 1:
            raise ConfigError("t_rec must be >= 1")
        lo, hi = self.diag_span
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"diag_span must satisfy 0 < lo <= hi <= 1, got {self.diag_span}")
        if not 0.0 <= self.weak_bias < 1.0:
            raise ConfigError("weak_bias must lie in [0, 1)")

    def stream_keys(self) -> list[tuple[str, str, str]]:
        return [
            (m.id, ch, pr)
            for m in self.modalities
            for ch in m.channels
            for pr in m.predictors
        ]

    def profiles(self) -> dict[tuple[str, str, str], ReliabilityProfile]:
        """One reliability profile per stream.

        Explicit per-modality diag tables win; remaining streams get the
        diag_span spread linearly across them in layout order.
        """
        keys = self.stream_keys()
        diags: dict[tuple[str, str, str], float] = {}
        unassigned = []
        for m in self.modalities:
            for ci, ch in enumerate(m.channels):
                for pi, pr in enumerate(m.predictors):
                    if m.diag is not None:
                        diags[(m.id, ch, pr)] = float(m.diag[pi][ci])
                    else:
                        unassigned.append((m.id, ch, pr))
        lo, hi = self.diag_span
        for i, key in enumerate(unassigned):
            frac = i / max(1, len(unassigned) - 1)
            diags[key] = lo + (hi - lo) * frac

        profiles = {}
        for i, key in enumerate(keys):
            diag = diags[key]
            if self.weak_bias > 0.0 and diag < self.weak_threshold:
                confusion = biased_confusion(
                    diag, WEAK_BIAS_TARGETS[i % len(WEAK_BIAS_TARGETS)], self.weak_bias
                )
                kappa = self.kappa * self.weak_kappa_scale
            else:
                off = (1.0 - diag) / 4.0
                confusion = np.full((5, 5), off)
                np.fill_diagonal(confusion, diag)
                kappa = self.kappa
            profiles[key] = ReliabilityProfile(
                confusion, kappa=kappa, blur=self.blur, exact=self.exact
            )
        return profiles


@dataclass
class EvalConfig:
    dataset: str | None = None  # defaults to <data_dir>/test.napd
    checkpoint: str | None = None  # defaults to <run_dir>/best.napw
    window: int = 35


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: Path = Path("data")
    run_dir: Path = Path("run")
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def dataset_path(self, split: str) -> Path:
        return Path(self.data_dir) / f"{split}.napd"

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "data_dir": str(self.data_dir),
            "run_dir": str(self.run_dir),
            "synth": asdict(self.synth),
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
        }
        d["synth"]["transition"] = self.synth.transition.tolist()
        d["synth"]["initial"] = self.synth.initial.tolist()
        d["synth"]["diag_span"] = list(self.synth.diag_span)
        return d


def _build_synth(raw: dict) -> SynthConfig:
    raw = dict(raw)
    if "ratios" in raw:
        ratios = raw.pop("ratios")
        total = int(raw.pop("total", 0))
        if total < 1:
            raise ConfigError("synth ratios require a positive 'total'")
        r = [float(ratios[s]) for s in ("train", "val", "test")]
        if any(x <= 0 for x in r):
            raise ConfigError("split ratios must be positive")
        if sum(r) > 1.0 + RATIO_TOL:
            raise ConfigError(f"split ratios sum to {sum(r):.3f} > 1")
        counts = {s: max(1, int(round(total * x))) for s, x in zip(("train", "val", "test"), r)}
        raw["counts"] = counts
    if "modalities" in raw:
        raw["modalities"] = [
            m if isinstance(m, ModalitySpec) else ModalitySpec(**m) for m in raw["modalities"]
        ]
    if "diag_span" in raw:
        raw["diag_span"] = tuple(raw["diag_span"])
    if raw.get("transition") == "default":
        raw.pop("transition")
    known = {"counts", "t_rec", "kappa", "blur", "exact", "diag_span", "transition",
             "initial", "modalities"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown synth settings: {sorted(unknown)}")
    return SynthConfig(**raw)


def _build_section(raw: dict, cls, label: str):
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad '{label}' section: {exc}") from exc


def load_config(path, seed_override: int | None = None) -> RunConfig:
    """Parse a YAML run config, filling defaults for anything omitted."""
    path = Path(path)
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    known = {"seed", "data_dir", "run_dir", "synth", "model", "train", "eval"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    base = path.resolve().parent

    def respath(value, default):
        p = Path(value) if value is not None else Path(default)
        return p if p.is_absolute() else base / p

    train_raw = raw.get("train", {}) or {}
    cfg = RunConfig(
        seed=int(raw.get("seed", 0)),
        data_dir=respath(raw.get("data_dir"), "data"),
        run_dir=respath(raw.get("run_dir"), "run"),
        synth=_build_synth(raw.get("synth", {}) or {}),
        model=_build_section(raw.get("model", {}) or {}, ModelConfig, "model"),
        train=_build_section(train_raw, TrainConfig, "train"),
        eval=_build_section(raw.get("eval", {}) or {}, EvalConfig, "eval"),
    )
    if seed_override is not None:
        cfg.seed = seed_override
        cfg.train.seed = seed_override
    elif "seed" not in train_raw:
        cfg.train.seed = cfg.seed
    eval_cfg = cfg.eval
    if eval_cfg.dataset is not None:
        eval_cfg.dataset = str(respath(eval_cfg.dataset, eval_cfg.dataset))
    if eval_cfg.checkpoint is not None:
        eval_cfg.checkpoint = str(respath(eval_cfg.checkpoint, eval_cfg.checkpoint))
    return cfg


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
