"""Throwaway pilot: benchmark-scale convergence probe (not part of the package)."""
import time
import numpy as np
from nap.synth import (DEFAULT_INITIAL, DEFAULT_TRANSITION, PredictionSet,
                       ReliabilityProfile, generate_base_predictions, generate_hypnogram)
from nap.model import ModelConfig, NapModel
from nap.train import TrainConfig, train
from nap.evaluate import evaluate_methods

LAYOUT = {"eeg": (["c1", "c2", "c3"], ["p0", "p1"]),
          "eog": (["e1", "e2"], ["p0", "p1"])}
# ten streams spanning 0.45..0.9 diagonal mass, mixed within predictor groups
DIAGS = {("eeg", "c1", "p0"): 0.90, ("eeg", "c2", "p0"): 0.62, ("eeg", "c3", "p0"): 0.45,
         ("eeg", "c1", "p1"): 0.84, ("eeg", "c2", "p1"): 0.56, ("eeg", "c3", "p1"): 0.51,
         ("eog", "e1", "p0"): 0.87, ("eog", "e2", "p0"): 0.48,
         ("eog", "e1", "p1"): 0.73, ("eog", "e2", "p1"): 0.59}


def make_set(rid, seed, t_rec=300):
    truth = generate_hypnogram(DEFAULT_TRANSITION, DEFAULT_INITIAL, t_rec, seed=(seed, 0))
    streams = {}
    for si, (mod, (chs, prs)) in enumerate(LAYOUT.items()):
        streams[mod] = {ch: {pr: generate_base_predictions(
            truth, ReliabilityProfile.diagonal(DIAGS[(mod, ch, pr)]), seed=(seed, 1, si, ci, pi))
            for pi, pr in enumerate(prs)} for ci, ch in enumerate(chs)}
        si += 1
    return PredictionSet(rid, truth, streams)


def main():
    t0 = time.time()
    train_set = [make_set(f"tr{i:03d}", i) for i in range(40)]
    val_set = [make_set(f"va{i:03d}", 1000 + i) for i in range(8)]
    test_set = [make_set(f"te{i:03d}", 2000 + i) for i in range(12)]
    print(f"synth: {time.time()-t0:.1f}s", flush=True)

    model = NapModel(ModelConfig(), seed=42)
    cfg = TrainConfig(steps_per_epoch=25, max_epochs=10, seed=42, dtype="float32",
                      weight_decay=0.01)
    t0 = time.time()
    result = train(train_set, val_set, model, cfg)
    print(f"train: {time.time()-t0:.1f}s best epoch {result.best_epoch} "
          f"val {result.best_val_mf1:.4f}", flush=True)
    for h in result.history:
        print(f"  epoch {h['epoch']}: loss {h['train_loss']:.4f} val {h['val_mf1']:.4f}",
              flush=True)

    model.set_params(result.best_params)
    t0 = time.time()
    reports = evaluate_methods(test_set, model)
    print(f"eval: {time.time()-t0:.1f}s")
    for r in reports:
        print(f"  {r.method}: {r.mean_macro_f1:.4f} ({r.sd_macro_f1:.4f})", flush=True)


if __name__ == "__main__":
    main()
