"""Delete/insert analysis, from a 2x2 matrix up to a masked spectrogram.

Work in the linear mel domain: take the change from a reference to an output,
sum the negative part as deleted energy D and the positive part as inserted
energy I. A mask can only delete; anything that adds energy back inserts.
"""

import numpy as np

from maskflow import di
from maskflow import dsp
from maskflow import mixture as mix
from maskflow.masknet import apply_mask

# a change given directly: two entries drop, one rises
delta = np.array([[-1.0, 2.0], [-3.0, 0.0]])
r = di.di_proportion(delta)
print(f"hand example      D={r.D:.1f} I={r.I:.1f}  deleted {r.d_pct:.1f}%  inserted {r.i_pct:.1f}%")

# nothing changed: the shares are undefined rather than 0/0
r = di.di_proportion(np.zeros((2, 2)))
print(f"no change         D={r.D} I={r.I}  shares {r.d_pct}, {r.i_pct}")

# log-mel inputs: the comparison happens after undoing the log10
fe = dsp.FrontendConfig.toy()
s = mix.make_sample(0, "additive", seed=3, duration_s=1.0)
X = dsp.log_mel(s.mixture, fe).frames
Y = dsp.log_mel(s.target, fe).frames
r = di.di_between(X, Y)
print(f"mixture -> target D={r.D:.3g} I={r.I:.3g}  deleted {r.d_pct:.1f}%")

# any soft mask with values in (0, 1) only removes energy
rng = np.random.default_rng(0)
m = rng.uniform(0.05, 0.95, X.shape)
masked = apply_mask(X, m)
r = di.di_between(X, masked)
print(f"mixture -> masked D={r.D:.3g} I={r.I:.3g}  deleted {r.d_pct:.1f}%")

# adding energy back on top of the masked spectrogram shows up as insertion
restored = np.log10(dsp.to_linear_mel(masked) + 0.5 * dsp.to_linear_mel(Y))
r = di.di_between(masked, restored)
print(f"masked -> restore D={r.D:.3g} I={r.I:.3g}  inserted {r.i_pct:.1f}%")
