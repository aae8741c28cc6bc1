"""
Blind equalization of a Wiener-Hammerstein channel
==================================================

PAM-4 symbols pass through FIR -> x + alpha x^2 -> FIR, with AWGN.  Two
supervised baselines (linear FFE and second-order Volterra, both trained on
known symbols) are compared with the two blind VAE equalizers, which only
know the constellation.
"""

# %%
import time

import numpy as np

from blindeq.channels import WhConfig, simulate_wh
from blindeq.dsp import symbol_error_rate
from blindeq.optim import TrainConfig, Trainer
from blindeq.qstats import PAM4

rng = np.random.default_rng(1)
channel = WhConfig(alpha=0.2, snr_db=16.0)
idx_train, idx_test = rng.integers(0, 4, 50_000), rng.integers(0, 4, 50_000)
rx_train = simulate_wh(PAM4.array[idx_train], channel, rng).rx
rx_test = simulate_wh(PAM4.array[idx_test], channel, rng).rx
print(f"{rx_train.size} training samples at 2 samples per symbol")

# %%
# Every method uses Adam with the stepped learning-rate decay.  The blind
# methods never see `idx_train`.
for method in ("ffe", "volterra", "vae", "v2vae"):
    t0 = time.perf_counter()
    pilots = PAM4.array[idx_train] if method in ("ffe", "volterra") else None
    tr = Trainer(TrainConfig(method=method, lr=5e-3, n_epochs=10)).fit(rx_train, pilots)
    ser = symbol_error_rate(tr.decide(rx_test), idx_test)
    print(f"{method:9s} SER {ser:.4f}   ({time.perf_counter() - t0:.1f} s)")

# %%
# Expected picture: the quadratic channel model lets the blind V2VAE track the
# supervised Volterra equalizer, while the linear-model VAE lands near the FFE.
