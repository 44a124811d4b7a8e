"""AP and network cost as the crop plan grows from one scale to three.

One detector is trained with the full plan and then evaluated with only
its first k scales, so the weights stay fixed across the sweep.
"""

from storefront.experiment import DataConfig, ModelConfig, PriorConfig, evaluate_scenes, make_splits, run_experiment
from storefront.geometry import CropPlanConfig, plan_crops
from storefront.model import TrainConfig
from storefront.pipeline import PipelineConfig, cost_report

splits = make_splits(DataConfig(num_streets=120, pano_width_px=832, pano_height_px=416))
result = run_experiment(splits, prior_cfg=PriorConfig(n=32), model_cfg=ModelConfig(hidden=128),
                        train_cfg=TrainConfig(steps=8000))

plan = CropPlanConfig()
pipe = PipelineConfig(proposal_threshold=result.threshold)
print("scales  crops  AP@0.5  cost vs sliding window")
for k in (1, 2, 3):
    sub = plan.first_scales(k)
    crops = len(plan_crops(13312, 6656, sub))
    ap = evaluate_scenes(result.detector.model, result.detector.priors, splits.test, sub, pipe).average_precision
    cost = cost_report(crops, 37)
    print(f"{k:6d}  {crops:5d}  {ap:6.3f}  {cost.relative_cost_vs_baseline:.4f}")
