"""Train a small detector on synthetic streets and score it on held-out ones.

Runs in about a minute on one core. Raise the sizes to the defaults in
storefront.experiment for the full-scale run.
"""

import logging

from storefront.experiment import DataConfig, ModelConfig, PriorConfig, make_splits, run_experiment
from storefront.model import PostClassifierConfig, TrainConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")

# small panoramas keep rendering and featurizing cheap
data = DataConfig(num_streets=120, pano_width_px=832, pano_height_px=416)
splits = make_splits(data)
print(f"{len(splits.train)} train, {len(splits.val)} val, {len(splits.test)} test panoramas")

result = run_experiment(splits,
                        prior_cfg=PriorConfig(n=32),
                        model_cfg=ModelConfig(hidden=128),
                        train_cfg=TrainConfig(steps=8000),
                        post_cfg=PostClassifierConfig(epochs=5))

print(f"proposal threshold  {result.threshold:.3f}")
print(f"AP@0.5              {result.average_precision:.3f}")
print(f"AP@0.5 with fusion  {result.post_report.average_precision:.3f}")
print(f"counts              {result.report.counts}")
print(f"timings (s)         { {k: round(v, 1) for k, v in result.timings.items()} }")
