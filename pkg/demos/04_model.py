# %% [markdown]
# The graph-recurrent classifier
#
# Per frame, two graph convolutions mix each joint with its neighbours, then
# the joints are averaged. An LSTM runs over the frame embeddings and additive
# attention pools its states into one vector for the linear head.

# %%
import numpy as np

from strokecomp.metrics import evaluate, render_report
from strokecomp.model import ModelConfig, TrainConfig, normalize_adjacency, predict, train
from strokecomp.preprocess import PreprocessConfig, preprocess_dataset
from strokecomp.skeleton import canonical_upper_limb_graph, stratified_split
from strokecomp.synthgen import GenConfig, generate

A = normalize_adjacency(canonical_upper_limb_graph())
print("A_hat symmetric:", np.array_equal(A, A.T), " spectral radius:", round(float(np.abs(np.linalg.eigvalsh(A)).max()), 6))

# %%
# A reduced run so the cell finishes quickly. The full experiments live in 06.
ds = generate(GenConfig(n_subjects=5, seed=3))
pds, stats = preprocess_dataset(stratified_split(ds, 0.8, seed=0), PreprocessConfig(target_length=40))
model, hist = train(pds, ModelConfig(), TrainConfig(epochs=15, seed=0))
for e in hist.epochs[::3]:
    print(f"epoch {e['epoch']:3d} loss {e['train_loss']:.3f} train {e['train_accuracy']:.3f} test {e['test_accuracy']:.3f}")

# %%
test = pds.subset("test")
rep = evaluate([s.label for s in test], predict(test, model))
print(render_report({"GCN-LSTM-ATT": rep}).text)
print(rep.confusion)

# %%
# Attention weights over time for one test sequence.
alpha = model.attention_weights(test[0].coords)
print("peak at frame", int(alpha.argmax()), "of", len(alpha), "| weights sum to", round(float(alpha.sum()), 12))
