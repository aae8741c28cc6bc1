"""
Tracking an abrupt channel change
=================================

The first FIR filter of the Wiener-Hammerstein channel switches between two
impulse responses while the blind equalizers keep training at a fixed
learning rate.  The loss jumps at every switch and then recovers.
"""

# %%
import numpy as np

from blindeq import harness

cfg = harness.parse_config({
    "version": 1,
    "name": "demo_tracking",
    "channel": {"kind": "wh", "params": {"alpha": 0.1, "snr_db": 16.0}},
    "seeds": {"master": 0, "n_seeds": 1},
    "tracking": {"h1_alt": [1.0, 0.5, 0.1525], "switch_every": 250_000, "n_segments": 3,
                 "batch_size": 500, "lr": 1.5e-3, "n_val": 20_000, "methods": ["vae", "v2vae"]},
})
res = harness.run_tracking(cfg)

# %%
# Mean loss of the first and last 20 batches of every segment.
for method in ("vae", "v2vae"):
    rows = [r for r in res["loss"] if r["method"] == method]
    for seg in range(3):
        loss = np.array([r["loss"] for r in rows if r["segment"] == seg])
        print(f"{method:6s} segment {seg} (system {1 + seg % 2}): "
              f"start {loss[:20].mean():8.1f}  end {loss[-20:].mean():8.1f}")

# %%
# Validation SER at the end of each segment.
for r in res["ser"]:
    print(f"{r['method']:6s} segment {r['segment']}: SER {r['ser']:.4f}")
