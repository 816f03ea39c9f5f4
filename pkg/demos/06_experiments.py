# %% [markdown]
# Comparison and ablation experiments
#
# The same runs are available from the command line:
#
#     python -m strokecomp compare --out runs/compare
#     python -m strokecomp ablate --out runs/ablate
#
# With the defaults each trains for 100 epochs on 810 sequences over 3 seeds,
# which takes a while on one core. `--jobs 3` runs the seeds in parallel.
# This script uses a reduced config to show the shape of the output.

# %%
from strokecomp.harness import load_config, run_ablate, run_compare

cfg = load_config(None, {"n_seeds": 2, "gen.n_subjects": 5, "train.epochs": 10,
                         "preprocess.target_length": 40})
exp = run_compare(cfg)
print(exp.render().text)

# %%
exp = run_ablate(cfg)
print(exp.render().text)
for h in exp.extra["inputs"]:
    print("seed", h["seed"], "inputs", h["sha256"][:16], "test size", h["n_test"])
