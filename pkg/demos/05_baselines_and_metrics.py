# %% [markdown]
# Classical baselines and the metrics table
#
# KNN, a linear SVM and a random forest all see the same flattened,
# preprocessed sequences. Scores are support-weighted over the four classes,
# so weighted recall always equals accuracy.

# %%
import time

from strokecomp.baselines import BaselineConfig, feature_matrix, fit_baseline
from strokecomp.metrics import compute_metrics, evaluate, render_report
from strokecomp.preprocess import PreprocessConfig, preprocess_dataset
from strokecomp.skeleton import stratified_split
from strokecomp.synthgen import GenConfig, generate

ds = generate(GenConfig(n_subjects=6, seed=2))
pds, _ = preprocess_dataset(stratified_split(ds, 0.8, seed=0), PreprocessConfig(target_length=60))
Xtr, ytr = feature_matrix(pds.subset("train"))
Xte, yte = feature_matrix(pds.subset("test"))
print("features", Xtr.shape)

# %%
reports = {}
for name in ("svm", "knn", "rf"):
    t0 = time.perf_counter()
    clf = fit_baseline(name, Xtr, ytr, BaselineConfig())
    reports[name.upper()] = evaluate(yte, clf.predict(Xte))
    print(f"{name}: {time.perf_counter() - t0:.1f}s")
out = render_report(reports)
print(out.text)
print(out.csv)

# %%
# A two-class example worked by hand: TP 3, FP 1, FN 2, TN 4.
r = compute_metrics([[4, 1], [2, 3]], average="binary")
print(r.precision, r.recall, round(r.f1, 6), r.accuracy)
