"""Command-line entry point.

Subcommands: ``synth`` (generate dataset files), ``train`` (fit a model into
a run directory), ``eval`` / ``compare`` (score methods on a dataset),
``inspect`` (summarize a checkpoint and its fusion weights).

Exit codes: 0 success, 2 missing/unreadable input, 3 configuration mismatch,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_MISSING_INPUT = 2
EXIT_CONFIG_MISMATCH = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nap", description="Synthesize, train, and evaluate prediction-stream aggregation."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "generate train/val/test dataset files"),
        ("train", "train a model and write a run directory"),
        ("eval", "score methods on a dataset against a checkpoint"),
        ("compare", "like eval, plus aggregation-vs-baseline deltas"),
        ("inspect", "summarize a checkpoint (and fusion weights, given data)"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=name != "inspect", help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS thread cap (set before numpy loads to take full effect)")
        if name == "inspect":
            p.add_argument("--checkpoint", default=None, help="checkpoint file (.napw)")
            p.add_argument("--dataset", default=None, help="dataset for fusion-weight stats")
    return parser


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _load(args):
    from .config import load_config

    cfg = load_config(args.config, seed_override=args.seed)
    if args.out is not None:
        out = Path(args.out)
        if args.command == "synth":
            cfg.data_dir = out
        else:
            cfg.run_dir = out
    return cfg


def cmd_synth(args) -> int:
    import numpy as np

    from .config import save_config
    from .dataio import write_dataset
    from .synth import PredictionSet, generate_base_predictions, generate_hypnogram

    cfg = _load(args)
    data_dir = Path(cfg.data_dir)
    paths = {split: cfg.dataset_path(split) for split in ("train", "val", "test")}
    existing = [p for p in paths.values() if p.exists()]
    if existing and not args.force:
        print(f"error: output exists (use --force): {existing[0]}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    data_dir.mkdir(parents=True, exist_ok=True)

    profiles = cfg.synth.profiles()
    global_index = 0
    for split in ("train", "val", "test"):
        sets = []
        for _ in range(cfg.synth.counts[split]):
            # One independent RNG stream per recording: seed = base seed + index.
            rec_seed = cfg.seed + global_index
            truth = generate_hypnogram(cfg.synth.transition, cfg.synth.initial,
                                       cfg.synth.t_rec, seed=(rec_seed, 0))
            streams: dict = {}
            for si, (mod, ch, pr) in enumerate(cfg.synth.stream_keys()):
                hd = generate_base_predictions(truth, profiles[(mod, ch, pr)],
                                               seed=(rec_seed, 1, si))
                streams.setdefault(mod, {}).setdefault(ch, {})[pr] = hd
            sets.append(PredictionSet(f"{split}{global_index:04d}", truth, streams))
            global_index += 1
        write_dataset(paths[split], sets)
        print(f"wrote {paths[split]} ({len(sets)} recordings, t_rec={cfg.synth.t_rec})")
    save_config(data_dir / "config.yaml", cfg)
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import save_config
    from .dataio import read_dataset
    from .model import NapModel
    from .train import train

    cfg = _load(args)
    datasets = {}
    for split in ("train", "val"):
        path = cfg.dataset_path(split)
        if not path.exists():
            print(f"error: missing dataset {path} (run synth first)", file=sys.stderr)
            return EXIT_MISSING_INPUT
        datasets[split] = read_dataset(path)

    run_dir = Path(cfg.run_dir)
    if (run_dir / "history.csv").exists() and not args.force:
        print(f"error: run directory {run_dir} already holds results (use --force)",
              file=sys.stderr)
        return EXIT_MISSING_INPUT
    run_dir.mkdir(parents=True, exist_ok=True)

    model = NapModel(cfg.model, seed=cfg.seed)
    result = train(datasets["train"], datasets["val"], model, cfg.train, run_dir=run_dir)
    save_config(run_dir / "config.yaml", cfg)
    print(f"best epoch {result.best_epoch}: validation macro-F1 {result.best_val_mf1:.4f}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _eval_common(args, with_delta: bool) -> int:
    from .checkpoint import load_checkpoint
    from .dataio import read_dataset
    from .evaluate import evaluate_methods, format_aggregate_table, write_metrics_csv
    from .model import NapModel

    cfg = _load(args)
    ckpt_path = Path(cfg.eval.checkpoint) if cfg.eval.checkpoint else Path(cfg.run_dir) / "best.napw"
    data_path = Path(cfg.eval.dataset) if cfg.eval.dataset else cfg.dataset_path("test")
    for path in (ckpt_path, data_path):
        if not path.exists():
            print(f"error: missing input {path}", file=sys.stderr)
            return EXIT_MISSING_INPUT

    model_config, values = load_checkpoint(ckpt_path, expected_config=cfg.model)
    model = NapModel(model_config)
    model.set_params(values)
    dataset = read_dataset(data_path)

    reports = evaluate_methods(dataset, model)
    table = format_aggregate_table(reports, data_path.stem)
    print(table)
    if with_delta:
        by_method = {r.method: r for r in reports}
        nap = by_method["nap"]
        somnus = by_method["soft_vote_all"]
        best = next(r for r in reports if r.method.startswith("best_single"))
        print(f"\nmacro-F1 deltas: aggregator - soft_vote_all = "
              f"{nap.mean_macro_f1 - somnus.mean_macro_f1:+.4f}; "
              f"aggregator - {best.method} = {nap.mean_macro_f1 - best.mean_macro_f1:+.4f}")

    out_dir = Path(cfg.run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    write_metrics_csv(csv_path, reports, data_path.stem)
    (out_dir / "metrics.txt").write_text(table + "\n")
    print(f"\nper-recording metrics: {csv_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    return _eval_common(args, with_delta=False)


def cmd_compare(args) -> int:
    return _eval_common(args, with_delta=True)


def cmd_inspect(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .dataio import read_dataset
    from .evaluate import INFERENCE_WINDOW
    from .model import NapModel

    if args.checkpoint is None and args.config is None:
        print("error: inspect needs --checkpoint or --config", file=sys.stderr)
        return EXIT_MISSING_INPUT
    if args.checkpoint is not None:
        ckpt_path = Path(args.checkpoint)
    else:
        cfg = _load(args)
        ckpt_path = (Path(cfg.eval.checkpoint) if cfg.eval.checkpoint
                     else Path(cfg.run_dir) / "best.napw")
    if not ckpt_path.exists():
        print(f"error: missing checkpoint {ckpt_path}", file=sys.stderr)
        return EXIT_MISSING_INPUT

    config, values = load_checkpoint(ckpt_path)
    print(f"checkpoint: {ckpt_path}")
    print("model config:")
    for key, value in config.to_dict().items():
        print(f"  {key}: {value}")
    total = sum(v.size for v in values.values())
    print(f"parameters: {total} across {len(values)} arrays")

    if args.dataset:
        model = NapModel(config)
        model.set_params(values)
        dataset = read_dataset(args.dataset)
        ps = dataset[0]
        window = min(INFERENCE_WINDOW, ps.t_rec)
        blocks, labels = [], []
        for modality, channels, predictors in ps.layout():
            block = np.stack(
                [np.stack([ps.stream(modality, ch, pr).probs[:window].astype(np.float64)
                           for pr in predictors], axis=1) for ch in channels], axis=1
            )
            blocks.append(block[None])
            labels += [f"{modality}/{ch}/{pr}" for ch in channels for pr in predictors]
        from . import autograd as ag

        with ag.no_grad():
            _, alpha = model.forward_batch(blocks, list(range(len(blocks))), return_alpha=True)
        weights = alpha.data.reshape(-1, alpha.shape[-1])
        print(f"fusion weights over {ps.recording_id}[:{window}] (mean / sd per stream):")
        for i, label in enumerate(labels):
            print(f"  {label}: {weights[:, i].mean():.4f} / {weights[:, i].std():.4f}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _set_threads(args.threads)
    from .errors import ConfigError, NumericError, ParseError

    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except ParseError as exc:
        print(f"error: unreadable input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except ConfigError as exc:
        print(f"error: configuration mismatch: {exc}", file=sys.stderr)
        return EXIT_CONFIG_MISMATCH
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
