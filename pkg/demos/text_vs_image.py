"""Train a text-guided model and an image-only twin for a few epochs and compare them.

The desk-scale model on a smaller dataset for 12 epochs, so the script
finishes in under ten minutes on one core. Expect the text-guided model to be
ahead already; the acceptance suite runs the full 50-epoch version.
"""
import tempfile
from pathlib import Path

from useg.data import GenerateConfig, generate_dataset, select
from useg.model import SegmentationModel
from useg.train import RunConfig, compare, evaluate, format_comparison, train

samples = generate_dataset(GenerateConfig(n_samples=180, seed=1))
test = select(samples, "test")

reports = {}
with tempfile.TemporaryDirectory() as tmp:
    for fusion in ("stage_add", "none"):
        cfg = RunConfig(fusion=fusion, epochs=12, seed=1)
        log = train(cfg, samples, Path(tmp) / fusion, progress=True)
        model, _ = SegmentationModel.load(Path(tmp) / fusion / "checkpoint")
        reports[fusion] = evaluate(model, test, fusion, "test")
        print(f"{fusion}: best val Dice {log['best_val_dice']:.3f}\n")

print(format_comparison(compare(reports["stage_add"].per_case, reports["none"].per_case), "stage_add", "none"))
