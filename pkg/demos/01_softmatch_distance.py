# A tour of the per-pixel distances and the trend decoder.
#
# Run with:  python demos/01_softmatch_distance.py

# %%
import numpy as np

from trendmatch import Tensor, cosine_dist, decode_trend, euclid_dist, softmatch


def pixel(*logits):
    # one pixel, channels on axis 1: shape [1, C, 1, 1]
    return Tensor(np.array(logits, dtype=np.float64).reshape(1, -1, 1, 1))


def show(name, dm):
    print(f"{name:>10}: {dm.numpy()[0, 0, 0]:.6f}")


# %% Two pixels that agree on the winning channel, and two that do not.
same = pixel(3.0, 0.0, 0.0), pixel(2.0, 0.5, 0.0)
diff = pixel(3.0, 0.0, 0.0), pixel(0.0, 3.0, 0.0)

for label, (a, b) in (("agree", same), ("disagree", diff)):
    print(label)
    show("softmatch", softmatch(a, b, tau=0.1))
    show("cosine", cosine_dist(a, b))
    show("euclidean", euclid_dist(a, b))

# Softmatch only cares about which channel wins, not by how much: the
# "agree" pair is near 0 even though the raw vectors differ.

# %% Temperature.  Large tau flattens both softmaxes, so every pair drifts
# toward the uniform value 1 - 1/C.
a, b = pixel(1.0, 0.0, -1.0), pixel(-1.0, 0.0, 1.0)
for tau in (0.05, 0.1, 0.5, 1.0, 5.0, 100.0):
    print(f"tau={tau:<6} d={softmatch(a, b, tau).numpy()[0, 0, 0]:.6f}")
print("uniform limit:", 1 - 1 / 3)

# %% The output never touches 0 or 1, even for extreme logits.
rng = np.random.default_rng(0)
p1 = Tensor(rng.uniform(-50, 50, size=(10000, 3, 1, 1)))
p2 = Tensor(rng.uniform(-50, 50, size=(10000, 3, 1, 1)))
d = softmatch(p1, p2, tau=0.1).numpy()
print("min", d.min(), "max", d.max(), "strictly inside (0,1):", bool(((d > 0) & (d < 1)).all()))

# %% Trend decoding compares the argmax channel of the two time steps.
# Channel 2 is background: background -> object is "appear", the reverse is
# "disappear", object -> other object is "transform".
names = {0: "unchanged", 1: "appear", 2: "disappear", 3: "transform"}
for a1 in range(3):
    for a2 in range(3):
        f1, f2 = np.zeros((1, 3, 1, 1)), np.zeros((1, 3, 1, 1))
        f1[0, a1] = f2[0, a2] = 1.0
        code = decode_trend((Tensor(f1), Tensor(f2)), bg_index=2)[0, 0, 0]
        print(f"argmax t1={a1} t2={a2} -> {names[int(code)]}")
