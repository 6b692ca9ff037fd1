"""
How many parameters does each variant add?
==========================================

Closed-form counts against enumeration of a built model, and the cost of
simply adding one more block.
"""

from laurel.layers import Variant, param_count
from laurel.model import ModelConfig, build, count_params, naive_scale, vanilla_param_count

base = ModelConfig(input_dim=64, width=64, num_blocks=8, num_classes=10, hidden_mult=4)
total = vanilla_param_count(base)
print(f"vanilla: {total} parameters")

for variant, rank in [("rw", None), ("lr", 4), ("pa", 2), ("rw+lr", 16), ("rw+lr+pa", 16)]:
    cfg = base.replace(variant=variant, rank=rank)
    enumerated = count_params(build(cfg)) - total
    closed = param_count(variant, cfg.width, cfg.num_blocks, rank)
    label = Variant.parse(variant).label(rank)
    print(f"{label:16s} +{enumerated:6d}  (closed form {closed}, {100 * enumerated / total:.3f}%)")

naive = naive_scale(base)
extra = vanilla_param_count(naive) - total
print(f"{'naive +1 block':16s} +{extra:6d}  ({100 * extra / total:.3f}%)")
