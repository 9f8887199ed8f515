# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Free-field forward model
#
# A point source at `r'` with complex amplitude `a` produces the pressure
# `a * exp(-j k d) / (4 pi d)` at distance `d`. Everything downstream (training
# data, the sparse dictionary, reconstruction) is built from this one kernel.

# %%
import numpy as np

from wavesplit import PointSource, Wavenumber, add_noise, green, synthesize, tdesign_64
from wavesplit.acoustics import sample_source_positions

k = Wavenumber(500.0)
print(f"k = {k.k:.4f} rad/m at 500 Hz, c = {k.speed_of_sound} m/s")
print("g(0.5 m) =", green([0.5, 0, 0], [0, 0, 0], k))

# %% [markdown]
# ## The microphone array
#
# 64 points on a 1 m sphere forming a spherical 10-design: equal-weight averages
# over the points integrate polynomials up to degree 10 exactly.

# %%
mics = tdesign_64()
x = mics.positions
print("mean position", x.mean(axis=0).round(15))
print("mean x^2 (1/3):", (x[:, 0] ** 2).mean(), " mean x^4 (1/5):", (x[:, 0] ** 4).mean())

# %% [markdown]
# ## Synthesis and noise
#
# Sources never leave the 0.8 m ball, so the array always sees them from outside.
# Noise is circular complex Gaussian scaled to the mean per-microphone power.

# %%
rng = np.random.default_rng(0)
sources = [PointSource(r, a) for r, a in zip(sample_source_positions(rng, 2), [1.0, 0.5j])]
p = synthesize(sources, mics, k)
for snr in (60, 40, 20):
    noisy = add_noise(p, snr, rng)
    measured = 10 * np.log10(np.mean(np.abs(p) ** 2) / np.mean(np.abs(noisy - p) ** 2))
    print(f"target SNR {snr} dB, realised {measured:.2f} dB")
