"""
Train, evaluate, infer, render
==============================

The command-line workflow end to end on a handful of small scenes. A few
dozen steps will not learn much; the overfit acceptance test uses 1000.
"""
import os
import tempfile
from pathlib import Path

from rcvmap.cli import main

work = Path(tempfile.mkdtemp(prefix="rcvmap_run_"))
os.environ["RCVMAP_RUNS"] = str(work / "runs")
data = work / "data"

main(["gen-data", "--seed", "0", "--n-scenes", "4", "--out", str(data)])
main(["train", "--dataset", str(data), "--steps", "30", "--checkpoint-every", "0", "--run-id", "demo"])

ckpt = work / "runs" / "demo" / "checkpoints" / "last.pt"
main(["eval", "--checkpoint", str(ckpt), "--dataset", str(data), "--split", "train"])
main(["eval", "--checkpoint", str(ckpt), "--dataset", str(data), "--split", "train", "--gt-as-predictions"])

pred = work / "pred.json"
main(["infer", "--checkpoint", str(ckpt), "--scene-dir", str(data / "scene_000000"), "--out", str(pred)])
main(["render", str(data / "scene_000000" / "annotation.json"), str(pred), "--titles", "gt", "pred",
      "--out", str(work / "compare.svg")])
