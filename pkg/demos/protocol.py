"""Every method on the default synthetic benchmark, as one table.

    python3 demos/protocol.py [config.json]

Trains the source-only network (v1), tunes its classifier (v3), trains on
the 200 target labels alone (v2) and trains with the MK-MMD penalty before
tuning (dsdanet); CVA needs no training. About a minute on one core.
"""
import json
import sys

from dacd.config import ExperimentConfig
from dacd.protocol import run_protocol

cfg = ExperimentConfig.load(sys.argv[1]) if len(sys.argv) > 1 else ExperimentConfig()
result = run_protocol(cfg)

print(f"{'method':<10} {'OA':>7} {'kappa':>7} {'fp':>6} {'fn':>6} {'seconds':>8}")
for name, r in result["reports"].items():
    seconds = result["seconds"].get(name, 0.0)
    print(f"{name:<10} {r['oa']:7.4f} {r['kappa']:7.4f} {r['fp']:6d} {r['fn']:6d} {seconds:8.1f}")

history = result["histories"]["dsdanet"]
print("\nMK-MMD penalty per epoch (dense128, dense64):")
for rec in history:
    pen = ", ".join(f"{p:+.5f}" for p in rec["mmd_penalties"])
    print(f"  epoch {rec['epoch']:2d}  cd {rec['cd_loss']:.4f}  mmd [{pen}]")
print("\nresolved config:", json.dumps(cfg.resolved()["train"], sort_keys=True))
