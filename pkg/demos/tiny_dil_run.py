"""Four-stage run on a small synthetic set, then the forgetting table.

Takes under a minute on one core. At this size the numbers are noisy.

    python demos/tiny_dil_run.py [out_dir]
"""
import sys
import tempfile
from pathlib import Path

from rehydil.chsnet import ModelConfig
from rehydil.data import generate_dataset, load_dataset
from rehydil.evaluation import evaluate_forgetting
from rehydil.trainer import ExperimentConfig, StagePlan, run_dil

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="rehydil-"))
ds = load_dataset(generate_dataset(out / "data", seed=0, num_patients=20, slices_per_patient=4, image_size=16))

for name, plan in [("replay+tac", StagePlan(epochs=2, batch_size=4)),
                   ("plain", StagePlan(epochs=2, batch_size=4, use_replay=False, use_tac=False))]:
    cfg = ExperimentConfig(ModelConfig(image_size=16, base_channels=4), plan)
    run = run_dil(cfg, ds, run_dir=out / name)
    rep = evaluate_forgetting(run.stage_models, ds, plan.modality_order)
    print(f"== {name}: replay buffer holds {len(run.replay)} samples")
    for row in rep.table():
        if row["region"] == "WT":
            print(f"  {row['modality']:5s} final {row['final']:6.2f}  forgetting {row['forgetting']:6.2f}")
print("run directories in", out)
