# %% [markdown]
# Preprocessing
#
# Raw sequences go through keyframe extraction and windowed deduplication.
# They are then resampled to a common length with a natural cubic spline and
# Z-scored with statistics from the training split only.

# %%
import numpy as np

from strokecomp.preprocess import (PreprocessConfig, dedup_sliding_window, extract_keyframes, preprocess_dataset,
                                   resample_cubic_spline)
from strokecomp.skeleton import stratified_split
from strokecomp.synthgen import GenConfig, generate

ds = generate(GenConfig(n_subjects=3, reps_per_action=4, seed=1))
seq = ds.sequences[0]
cfg = PreprocessConfig()
print(seq.key(), len(seq), "frames")

# %%
# Pad the sequence with a held pose at the end to see the cleaning steps at work.
held = np.repeat(seq.coords[-1:], 20, axis=0) + np.random.default_rng(0).normal(0, 1e-4, (20, 20, 3))
padded = seq.with_frames(np.concatenate([seq.coords, held]), np.arange(len(seq) + 20) / seq.fps)
kf = extract_keyframes(padded, cfg.keyframe_threshold)
dd = dedup_sliding_window(kf, cfg)
print("raw", len(padded), "-> keyframes", len(kf), "-> dedup", len(dd))

# %%
# Resampling keeps the end frames exactly.
rs = resample_cubic_spline(dd, 50)
print(len(rs), "frames; endpoints kept:",
      np.array_equal(rs.coords[0], dd.coords[0]) and np.array_equal(rs.coords[-1], dd.coords[-1]))

# %%
# Whole dataset. The target length defaults to the longest training sequence.
pds, stats = preprocess_dataset(stratified_split(ds, 0.8, seed=0), cfg)
Z = np.concatenate([s.channels() for s in pds.subset("train")])
print("target length", stats.target_length)
print(f"train channels: max |mean| {np.abs(Z.mean(0)).max():.1e}, max |std - 1| {np.abs(Z.std(0) - 1).max():.1e}")
