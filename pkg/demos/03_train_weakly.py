# Train from change labels only, then recover appear/disappear/transform.
#
# A deliberately small run (32x32 scenes, a narrow network, a few epochs) so
# it finishes in a couple of minutes on one CPU core.  The full-size setting
# is what the acceptance suite uses.
#
# Run with:  python demos/03_train_weakly.py [output_dir]

# %%
import sys
import tempfile
from pathlib import Path

from trendmatch import NetConfig, RunConfig, SceneSpec
from trendmatch.checkpoint import load_checkpoint
from trendmatch.synthdata import generate_many, save_trend_png
from trendmatch.train import evaluate, predict, train

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="trendmatch_train_"))

# %% Data: trend labels are stripped from the training pairs before train() sees them.
spec = SceneSpec(size=32, min_shapes=2, max_shapes=3, min_extent=5, max_extent=10)
train_pairs = [type(p)(p.t1, p.t2, p.change_label, None, p.seed) for p in generate_many(spec, 120, 10)]
test_pairs = generate_many(spec, 30, 20)

# %% A small configuration.  tau is shared by the distances and the background loss.
config = RunConfig(net=NetConfig(depth=3, base_channels=8, input_size=32), epochs=40, batch_size=8, crop_size=32,
                   lr_step_epochs=30, seed=0)
result = train(config, train_pairs, out_dir=out, log=print)

# %% Score against the held-out trend labels.
report = evaluate(result.model, test_pairs, config)
print(report.to_text())

# %% The checkpoint reproduces the model exactly.
model, ckpt = load_checkpoint(out / "final.tcdw")
a = result.model.infer(test_pairs[0].t1[None], test_pairs[0].t2[None])
b = model.infer(test_pairs[0].t1[None], test_pairs[0].t2[None])
print("checkpoint epoch", ckpt.epoch, "bitwise equal:", a[1][0].data.tobytes() == b[1][0].data.tobytes())

# %% Save a few trend maps (black/blue/white/red palette) next to the truth.
for i, pred in enumerate(predict(model, test_pairs[:4], config.tau)):
    save_trend_png(out / f"pred_trend_{i}.png", pred.trend)
    save_trend_png(out / f"true_trend_{i}.png", test_pairs[i].trend_label)
    agree = (pred.trend == test_pairs[i].trend_label).mean()
    print(f"pair {i}: pixel agreement {100 * agree:.1f}%")
print("outputs in", out)
