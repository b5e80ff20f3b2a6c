"""
The command-line pipeline
=========================

synth -> prepare -> train -> evaluate -> predict, all in a scratch directory.
The same commands are available as ``wgpnn <command>`` once installed.
"""

import json
import os
import tempfile

from wgpnn.cli import main

work = tempfile.mkdtemp(prefix="wgpnn-demo-")
os.chdir(work)

main(["synth", "-o", "events.tsv", "--entities", "6", "--horizon", "60", "--noise", "0.05"])
main(["prepare", "events.tsv", "-o", "prep"])
main(["train", "prep", "-o", "run", "--set", "epochs=10", "--set", "dim=16", "--set", "lr=0.01"])
main(["evaluate", "run/best.ckpt", "prep", "-o", "eval"])

metrics = json.load(open("eval/test_report.json"))["metrics"]["both"]
print("test MRR raw %.4f, filtered %.4f" % (metrics["raw"]["mrr"], metrics["filtered"]["mrr"]))

# ranked candidates plus a plot-ready uncertainty curve
main(["predict", "run/best.ckpt", "prep", "e0", "r0", "60", "--top-k", "3", "--curve", "curve.tsv"])
print(open("curve.tsv").read().splitlines()[:4])

# every command leaves a manifest with input and output checksums
print(sorted(json.load(open("run/manifest.json"))))
print("outputs in", work)
