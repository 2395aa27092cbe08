"""
Training the toy model on synthetic scenes
==========================================

Disk "heads" with a short tick for gaze direction; a pair is labeled laeo
when each tick points at the other head. A few minutes of CPU training on 16
scenes is enough for the model to memorize them.
"""
import logging
import sys

import torch

from mgtr import SyntheticSceneSpec, toy_config
from mgtr.pipeline import evaluate_model, export_attention, load_checkpoint, synthetic_dataset, train

logging.basicConfig(level=logging.INFO, stream=sys.stderr)
torch.set_num_threads(1)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000

data = synthetic_dataset(SyntheticSceneSpec(seed=1), 16)
print(len(data), "scenes,", sum(len(g) for g in data.gts), "instances")

cfg = toy_config(max_steps=steps, epochs=10**6, out_dir="runs/toy")
result = train(cfg, data)
for entry in result.history[:: max(1, steps // 10)]:
    print(entry["step"], round(entry["loss"], 3))

model, cfg, _ = load_checkpoint(result.checkpoint)
print(evaluate_model(model, data, cfg).to_json())

# where does the model look?
exp = export_attention((model, cfg), data.image(0), "runs/toy/attention")
print(*exp.paths, sep="\n")
