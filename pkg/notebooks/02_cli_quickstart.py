# ---
# jupyter:
#   jupytext:
#     formats: py:light
#     text_representation:
#       extension: .py
#       format_name: light
# ---

# # From synthetic world to re-ranked lists
#
# The command line covers the whole loop.  Here it runs on a small world
# so training takes a few minutes on one core; the same calls
# scale up by changing the flags.

# +
import json
import tempfile
from pathlib import Path

from locore.cli import main
# -

# + tags=["parameters"]
steps = 1000
work = Path(tempfile.mkdtemp(prefix="locore-"))
# -

# ## Data
#
# `gen-data` writes a descriptor bank, ground truth, and manifests whose
# galleries come from a global-descriptor nearest-neighbour search.

world = {"instance_count": 30, "images_per_instance": 10, "distractor_images": 60, "d": 64, "L": 8,
         "patch_pool_per_instance": 6, "patches_per_image": 4, "noise_sigma": 0.05}
(work / "world_config.json").write_text(json.dumps(world))
main(["gen-data", "--out", str(work), "--seed", "1", "--config", str(work / "world_config.json")])
print(sorted(p.name for p in work.iterdir()))

# ## Training
#
# Each step samples queries, takes their top-K shortlist, shuffles it, and
# fits token-level labels with binary cross-entropy.

main(["train", "--bank", str(work / "bank.lcrb"), "--manifest", str(work / "train_manifest.json"),
      "--variant", "toy", "--K", "16", "--lr", "1e-3", "--max-steps", str(steps),
      "--micro-batch-size", "8", "--accumulation-steps", "1", "--out", str(work / "model.ckpt"), "--seed", "0"])
losses = [json.loads(line)["loss"] for line in (work / "model.metrics.jsonl").read_text().splitlines()]
print(f"loss: first {losses[0]:.3f}, last 20 steps {sum(losses[-20:]) / 20:.3f}")

# ## Re-ranking and scoring
#
# One window of K images, or a sliding pass over a deeper head with stride S.

# +
base = ["--bank", str(work / "bank.lcrb"), "--manifest", str(work / "eval_manifest.json"), "--checkpoint", str(work / "model.ckpt")]
main(["rerank", *base, "--aggregator", "mean", "--out", str(work / "single.jsonl")])
main(["rerank", *base, "--aggregator", "mean", "--N", "32", "--S", "8", "--out", str(work / "sliding.jsonl")])

main(["eval", "--manifest", str(work / "eval_manifest.json"), "--out", str(work / "baseline.json")])
for name in ("single", "sliding"):
    main(["eval", "--results", str(work / f"{name}.jsonl"), "--manifest", str(work / "eval_manifest.json"), "--out", str(work / f"{name}.json")])

for name in ("baseline", "single", "sliding"):
    print(f"{name:9s} mAP {json.loads((work / f'{name}.json').read_text())['medium']['mAP']:.3f}")
# -

# ## Cost model
#
# `bench` prints operation counts for a range of context lengths.

main(["bench", "--M-list", "512,1024,2048"])
