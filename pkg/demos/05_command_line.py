"""Drive the whole pipeline through the command-line entry point."""

# %%
import json
import tempfile
from pathlib import Path

from padl.cli import run

work = Path(tempfile.mkdtemp())
small = ["--set", "scene.height=32", "--set", "scene.width=32",
         "--set", "scene.size_range=[5.0, 7.0]", "--set", "scene.jitter=2.0"]

# %%
assert run(["gen", "--out", str(work / "data"), "--set", "n_train=16", "--set", "n_test=4", *small]) == 0
assert run(["train", "--data", str(work / "data"), "--out", str(work / "run"),
            "--set", "epochs=2", "--set", "batch_size=4", "--set", "lr0=0.003",
            "--set", "model.backbone.base_channels=4", "--set", "model.backbone.out_channels=8"]) == 0

# %%
assert run(["eval", "--checkpoint", str(work / "run" / "checkpoint.padl"),
            "--data", str(work / "data"), "--out", str(work / "eval")]) == 0
print(json.dumps(json.loads((work / "eval" / "report.json").read_text())["per_annotator"], indent=1))

# %% Mimic annotator 3 on one test image.
image = sorted((work / "data" / "images").glob("*.pgm"))[-1]
run(["mimic", "--checkpoint", str(work / "run" / "checkpoint.padl"), "--annotator", "3",
     "--image", str(image), "--out", str(work / "mimic")])
print(sorted(p.name for p in (work / "mimic").iterdir()))

# %%
run(["report", "--runs", str(work / "run"), "--out", str(work / "report")])
print((work / "report" / "summary.md").read_text())
