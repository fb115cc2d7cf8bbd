"""Desk-scale experiments: memorisation check and paired baseline/full ablation."""

from __future__ import annotations

import json
import time
from pathlib import Path

from masf.data import GenConfig, SyntheticDataset, SyntheticSpec
from masf.network import MasfYolo, ModelConfig, count_params
from masf.train import TrainConfig, run_training


def run_overfit(num_scenes: int = 8, epochs: int = 200, batch_size: int = 2,
                image_size: int = 128, seed: int = 0, log_fn=None) -> dict:
    """Train the full model on ``num_scenes`` scenes and score it on the same scenes."""
    scenes = SyntheticDataset(GenConfig(image_size=image_size), range(num_scenes))
    model_cfg = ModelConfig.full(image_size=image_size)
    train_cfg = TrainConfig(epochs=epochs, batch_size=batch_size, image_size=image_size,
                            seed=seed, eval_every=epochs)
    t0 = time.perf_counter()
    out = run_training(model_cfg, train_cfg, {"train": scenes, "val": scenes}, log_fn=log_fn)
    final = out["records"][-1]
    return {"map50": final["map50"], "map5095": final["map5095"],
            "seconds": time.perf_counter() - t0}


def run_ablation(seeds=(0, 1, 2), train: int = 2000, val: int = 500, epochs: int = 30,
                 image_size: int = 128, out_path=None, log_fn=None) -> dict:
    """Paired runs of the baseline and full models, one synthetic dataset per seed.

    Both members of a pair share the dataset, the initialisation seed and the
    batch order. Only the final epoch is evaluated. Results are written to
    ``out_path`` as JSON after every run so partial progress survives.
    """
    configs = {"baseline": ModelConfig.baseline(image_size=image_size),
               "full": ModelConfig.full(image_size=image_size)}
    params = {k: count_params(MasfYolo(c)) for k, c in configs.items()}
    result = {"seeds": list(seeds), "params": params, "runs": [], "seconds": 0.0}
    t0 = time.perf_counter()
    for seed in seeds:
        data = SyntheticSpec(train=train, val=val, seed=seed,
                             gen=GenConfig(image_size=image_size)).splits()
        train_cfg = TrainConfig(epochs=epochs, image_size=image_size, seed=seed, eval_every=epochs)
        for name, cfg in configs.items():
            t_run = time.perf_counter()
            out = run_training(cfg, train_cfg, data, log_fn=log_fn)
            last = out["records"][-1]
            result["runs"].append({"seed": seed, "model": name, "map50": last["map50"],
                                   "map5095": last["map5095"], "final_loss": last["loss"],
                                   "seconds": time.perf_counter() - t_run})
            result["seconds"] = time.perf_counter() - t0
            if out_path is not None:
                Path(out_path).write_text(json.dumps(result, indent=1) + "\n")
    for name in configs:
        vals = [r["map50"] for r in result["runs"] if r["model"] == name]
        result[f"mean_map50_{name}"] = sum(vals) / len(vals)
    if out_path is not None:
        Path(out_path).write_text(json.dumps(result, indent=1) + "\n")
    return result
