# Synthetic bi-temporal scenes: what the generator produces and how the
# labels relate.
#
# Run with:  python demos/02_synthetic_scenes.py [output_dir]

# %%
import sys
import tempfile
from pathlib import Path

import numpy as np

from trendmatch import SceneSpec, augment, generate, read_dataset, trend_to_change, write_dataset
from trendmatch.synthdata import generate_many

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="trendmatch_demo_"))

# %% One pair.  Images are float CHW in [0,1]; labels are HxW.
spec = SceneSpec(size=64)
pair = generate(spec, seed=7)
print("t1", pair.t1.shape, pair.t1.dtype, "range", pair.t1.min().round(3), pair.t1.max().round(3))
print("change label values:", np.unique(pair.change_label))
codes, counts = np.unique(pair.trend_label, return_counts=True)
print("trend codes and pixel counts:", dict(zip(codes.tolist(), counts.tolist())))

# The change label is exactly "trend code != unchanged".
print("change == (trend > 0):", bool((trend_to_change(pair.trend_label) == pair.change_label).all()))

# %% Augmentation applies one crop/rotation/flip to both images and both labels.
aug = augment(pair, seed=3, crop_size=32)
print("augmented shapes:", aug.t1.shape, aug.change_label.shape)
print("still consistent:", bool((trend_to_change(aug.trend_label) == aug.change_label).all()))

# %% Class balance over a batch of scenes.
pairs = generate_many(spec, 50, master_seed=1)
totals = np.bincount(np.concatenate([p.trend_label.ravel() for p in pairs]), minlength=4)
for code, name in enumerate(("unchanged", "appear", "disappear", "transform")):
    print(f"{name:>10}: {100 * totals[code] / totals.sum():5.1f}% of pixels")

# %% On disk.  Training readers never open trend/; evaluation does.
write_dataset(pairs, out, spec, master_seed=1)
print("wrote", out, sorted(p.name for p in out.iterdir()))
weak = read_dataset(out, include_trend=False)
print("weak read has trend labels:", any(p.trend_label is not None for p in weak))
