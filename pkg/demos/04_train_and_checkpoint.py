"""
Train, evaluate, checkpoint, reload
===================================

A short run on interleaved spirals with every augmentation enabled. The
reloaded checkpoint reproduces the final accuracy exactly.
"""

import tempfile
from pathlib import Path

from laurel.data import gen_spirals
from laurel.model import ModelConfig, load_checkpoint, save_checkpoint
from laurel.training import TrainConfig, accuracy, train_model

train = gen_spirals(3, 100, 0.05, seed=1)
test = gen_spirals(3, 50, 0.05, seed=2, split="eval")

model_cfg = ModelConfig(input_dim=2, width=16, num_blocks=4, num_classes=3,
                        variant="rw+lr+pa", rank=2)
train_cfg = TrainConfig(steps=600, batch_size=32, lr=0.02, warmup_steps=50, eval_every=100)

model, result, records = train_model(model_cfg, train_cfg, train, test, seed=0)
for rec in records:
    print(f"step {rec.step:4d}  loss {rec.train_loss:.4f}  eval acc {rec.eval_accuracy:.3f}")
print("best accuracy@1:", result.best_eval_accuracy_at_1, "at step", result.step_of_best)

# the learned residual weights of each block
for i, rw in enumerate(model.residual.rw):
    alpha, beta = rw.weights()
    print(f"block {i}: alpha={alpha.item():.3f} beta={beta.item():.3f}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "checkpoint.bin"
    save_checkpoint(model, path)
    again = load_checkpoint(path)
    print("reloaded accuracy:", accuracy(again, test), "final:", records[-1].eval_accuracy)
