"""GCN-LSTM-ATT sequence classifier and its two ablation variants."""
from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .preprocess import ChannelStats
from .skeleton import Dataset, Label, MotionSequence, SkeletonGraph, canonical_upper_limb_graph

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
N_CLASSES = len(Label)


class Variant(str, enum.Enum):
    GCN_ONLY = "GCN_ONLY"
    GCN_LSTM = "GCN_LSTM"
    GCN_LSTM_ATT = "GCN_LSTM_ATT"

    @property
    def display_name(self) -> str:
        return {"GCN_ONLY": "GCN", "GCN_LSTM": "GCN-LSTM", "GCN_LSTM_ATT": "GCN-LSTM-ATT"}[self.value]


@dataclass(frozen=True)
class ModelConfig:
    gcn_channels: tuple[int, ...] = (3, 32, 64)
    lstm_hidden: int = 64
    attention_dim: int = 64
    n_classes: int = N_CLASSES
    dropout: float = 0.0
    variant: Variant = Variant.GCN_LSTM_ATT

    def __post_init__(self):
        object.__setattr__(self, "gcn_channels", tuple(int(c) for c in self.gcn_channels))
        object.__setattr__(self, "variant", Variant(self.variant))
        if len(self.gcn_channels) < 2 or self.gcn_channels[0] != 3:
            raise ValueError("gcn_channels must start with 3 and have at least one layer")
        if min(self.gcn_channels) < 1 or self.lstm_hidden < 1 or self.attention_dim < 1 or self.n_classes < 1:
            raise ValueError("all model dimensions must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def feature_dim(self) -> int:
        return self.gcn_channels[-1] if self.variant is Variant.GCN_ONLY else self.lstm_hidden

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gcn_channels"] = list(self.gcn_channels)
        d["variant"] = self.variant.value
        return d


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("need learning_rate >= 0, epochs >= 1, batch_size >= 1")


class TrainingError(RuntimeError):
    pass


def normalize_adjacency(g: SkeletonGraph | np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    A = g.adjacency() if isinstance(g, SkeletonGraph) else np.asarray(g, dtype=np.float64)
    A_hat = A + np.eye(len(A))
    d = A_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return A_hat * inv_sqrt[:, None] * inv_sqrt[None, :]


# -- stages -----------------------------------------------------------------

def gcn_forward(X, A_hat, layers, fused: bool = True) -> Tensor:
    """relu(A_hat @ H @ W + b) per frame for each (W, b) in ``layers``; X is (..., 20, C_in).

    ``fused=False`` composes the layer from matmul/add/relu tape operations.
    """
    H = ad.as_tensor(X)
    A = ad.as_tensor(A_hat)
    for W, b in layers:
        _check_channels(H, W)
        if fused:
            H = ad.graph_conv(H, A, W, b)
        else:
            H = ad.relu(ad.matmul(ad.matmul(A, H), W) + b)
    return H


def _check_channels(H, W):
    if H.shape[-1] != W.shape[0]:
        raise ad.ShapeError(f"gcn layer expects {W.shape[0]} input channels, got {H.shape[-1]}")


def gcn_embed(X, A_hat, layers) -> Tensor:
    """``frame_embed(gcn_forward(...))`` with the joint average folded into the last layer."""
    H = ad.as_tensor(X)
    A = ad.as_tensor(A_hat)
    for k, (W, b) in enumerate(layers):
        _check_channels(H, W)
        H = ad.graph_conv(H, A, W, b, pool=k == len(layers) - 1)
    return H


def frame_embed(H) -> Tensor:
    """Average over the joint axis: (..., T, 20, C) -> (..., T, C)."""
    return ad.tmean(H, axis=-2)


def lstm_forward(E, w_x, w_h, b, fused: bool = True) -> Tensor:
    """All hidden states of a single-layer LSTM, gates ordered (i, f, o, g).

    ``fused=False`` builds the recurrence out of elementary tape operations;
    it is slower and exists as a cross-check for the fused kernel.
    """
    E = ad.as_tensor(E)
    squeeze = E.ndim == 2
    if squeeze:
        E = E.reshape((1,) + E.shape)
    if fused:
        out = ad.lstm(E, w_x, w_h, b)
    else:
        out = _lstm_composed(E, w_x, w_h, b)
    return out.reshape(out.shape[1:]) if squeeze else out


def _lstm_composed(E, w_x, w_h, b):
    B, T, _ = E.shape
    Hd = w_h.shape[0]
    pre = ad.matmul(E, w_x) + b
    h = Tensor(np.zeros((B, Hd)))
    c = Tensor(np.zeros((B, Hd)))
    outs = []
    for t in range(T):
        z = pre[:, t] + ad.matmul(h, w_h)
        i = ad.sigmoid(z[:, :Hd])
        f = ad.sigmoid(z[:, Hd:2 * Hd])
        o = ad.sigmoid(z[:, 2 * Hd:3 * Hd])
        g = ad.tanh(z[:, 3 * Hd:])
        c = f * c + i * g
        h = o * ad.tanh(c)
        outs.append(h.reshape((B, 1, Hd)))
    return ad.concat(outs).reshape((B, T, Hd)) if T > 1 else outs[0]


def attention_pool(H, w, b, v) -> tuple[Tensor, Tensor]:
    """Additive temporal attention: e_t = v . tanh(W h_t + b), alpha = softmax(e).

    H is (..., T, hidden); returns the context (..., hidden) and alpha (..., T).
    """
    H = ad.as_tensor(H)
    scores = ad.tsum(ad.tanh(ad.linear(H, w, b)) * v, axis=-1)
    alpha = ad.softmax(scores)
    context = ad.tsum(H * alpha.reshape(alpha.shape + (1,)), axis=-2)
    return context, alpha


# -- model ------------------------------------------------------------------

class GcnLstmAttModel:
    """Parameters plus the fixed normalized adjacency of the joint graph."""

    def __init__(self, config: ModelConfig | None = None, graph: SkeletonGraph | None = None,
                 seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.config = config or ModelConfig()
        self.graph = graph or canonical_upper_limb_graph()
        A = normalize_adjacency(self.graph)
        A.flags.writeable = False
        self.A_hat = A
        self._A = Tensor(A)
        self.stats: ChannelStats | None = None
        self.params: dict[str, Tensor] = {}
        shapes = self.param_shapes()
        if params is None:
            params = _init_params(shapes, self.config, np.random.default_rng(seed))
        for name, shape in shapes.items():
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"parameter {name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} is not finite")
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        shapes = {}
        ch = cfg.gcn_channels
        for l in range(len(ch) - 1):
            shapes[f"gcn{l}.weight"] = (ch[l], ch[l + 1])
            shapes[f"gcn{l}.bias"] = (ch[l + 1],)
        if cfg.variant is not Variant.GCN_ONLY:
            H = cfg.lstm_hidden
            shapes["lstm.w_x"] = (ch[-1], 4 * H)
            shapes["lstm.w_h"] = (H, 4 * H)
            shapes["lstm.bias"] = (4 * H,)
        if cfg.variant is Variant.GCN_LSTM_ATT:
            shapes["att.w"] = (cfg.lstm_hidden, cfg.attention_dim)
            shapes["att.b"] = (cfg.attention_dim,)
            shapes["att.v"] = (cfg.attention_dim,)
        shapes["cls.weight"] = (cfg.feature_dim, cfg.n_classes)
        shapes["cls.bias"] = (cfg.n_classes,)
        return shapes

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def target_length(self) -> int | None:
        return None if self.stats is None else self.stats.target_length

    def gcn_layers(self):
        n = len(self.config.gcn_channels) - 1
        return [(self.params[f"gcn{l}.weight"], self.params[f"gcn{l}.bias"]) for l in range(n)]

    def features(self, X, return_alpha: bool = False, dropout_rng=None):
        p = self.params
        E = gcn_embed(X, self._A, self.gcn_layers())
        alpha = None
        variant = self.config.variant
        if variant is Variant.GCN_ONLY:
            feat = ad.tmean(E, axis=-2)
        else:
            Hs = lstm_forward(E, p["lstm.w_x"], p["lstm.w_h"], p["lstm.bias"])
            if variant is Variant.GCN_LSTM:
                feat = ad.tmean(Hs, axis=-2)
            else:
                feat, alpha = attention_pool(Hs, p["att.w"], p["att.b"], p["att.v"])
        if dropout_rng is not None and self.config.dropout > 0:
            keep = 1.0 - self.config.dropout
            feat = feat * ((dropout_rng.random(feat.shape) < keep) / keep)
        return (feat, alpha) if return_alpha else feat

    def logits(self, X, dropout_rng=None) -> Tensor:
        """X is (B, T, 20, 3) or (T, 20, 3); returns (B, n_classes) or (n_classes,)."""
        feat = self.features(X, dropout_rng=dropout_rng)
        return ad.linear(feat, self.params["cls.weight"], self.params["cls.bias"])

    def attention_weights(self, X) -> np.ndarray:
        if self.config.variant is not Variant.GCN_LSTM_ATT:
            raise ValueError("only the attention variant has attention weights")
        with ad.no_grad():
            return self.features(X, return_alpha=True)[1].data


def _init_params(shapes, cfg: ModelConfig, rng) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in shapes.items():
        if name.endswith(("bias", ".b")):
            arr = np.zeros(shape)
            if name == "lstm.bias":
                H = cfg.lstm_hidden
                arr[H:2 * H] = 1.0
        else:
            fan_in = shape[0]
            # graph layers feed a relu and then a joint average, which shrink the
            # signal; He scaling keeps their output variance near the input's
            gain = 6.0 if name.startswith("gcn") else 1.0
            bound = np.sqrt(gain / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr
    return params


def stack_sequences(seqs) -> np.ndarray:
    lengths = {len(s) for s in seqs}
    if len(lengths) > 1:
        raise ValueError(f"sequences differ in length: {sorted(lengths)}")
    return np.stack([s.coords for s in seqs])


def forward(seq: MotionSequence, model: GcnLstmAttModel) -> np.ndarray:
    """Logits (n_classes,) for one preprocessed sequence."""
    _check_compatible([seq], model)
    with ad.no_grad():
        return model.logits(seq.coords).data


def _check_compatible(seqs, model, stats: ChannelStats | None = None):
    tl = model.target_length
    if tl is not None:
        bad = [s.key() for s in seqs if len(s) != tl]
        if bad:
            raise ValueError(f"{len(bad)} sequence(s) have length != model target_length {tl} (e.g. {bad[0]})")
    if stats is not None and model.stats is not None and stats != model.stats:
        raise ValueError("dataset was preprocessed with different channel statistics than the model")


def predict_logits(X: np.ndarray, model: GcnLstmAttModel, chunk: int = 64) -> np.ndarray:
    out = []
    with ad.no_grad():
        for k in range(0, len(X), chunk):
            out.append(model.logits(X[k:k + chunk]).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def predict(ds: Dataset | list[MotionSequence], model: GcnLstmAttModel, subset: str = "all") -> list[Label]:
    """Argmax class per sequence; ``np.argmax`` returns the first maximum, i.e. the lowest code on ties."""
    if isinstance(ds, Dataset):
        seqs, stats = ds.subset(subset), ds.stats
    else:
        seqs, stats = list(ds), None
    _check_compatible(seqs, model, stats)
    if not seqs:
        return []
    logits = predict_logits(stack_sequences(seqs), model)
    return [Label(int(k)) for k in np.argmax(logits, axis=1)]


# -- training ---------------------------------------------------------------

class Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + c.weight_decay * p.data if c.weight_decay else p.grad
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_accuracy,test_accuracy"]
        for e in self.epochs:
            test = "" if e["test_accuracy"] is None else repr(e["test_accuracy"])
            lines.append(f"{e['epoch']},{e['train_loss']!r},{e['train_accuracy']!r},{test}")
        return "\n".join(lines) + "\n"

    @property
    def final_loss(self) -> float:
        return self.epochs[-1]["train_loss"]


def _accuracy(X, y, model):
    if len(X) == 0:
        return None
    return float(np.mean(np.argmax(predict_logits(X, model), axis=1) == y))


def train(ds: Dataset, mcfg: ModelConfig | None = None, tcfg: TrainConfig | None = None,
          graph: SkeletonGraph | None = None, eval_every: int = 1) -> tuple[GcnLstmAttModel, History]:
    """Minibatch Adam on mean softmax cross-entropy over the training subset."""
    mcfg = mcfg or ModelConfig()
    tcfg = tcfg or TrainConfig()
    if not ds.has_split:
        raise ValueError("training needs a dataset with a train/test split")
    init_seq, shuffle_seq, drop_seq = np.random.SeedSequence(tcfg.seed).spawn(3)
    model = GcnLstmAttModel(mcfg, graph, seed=int(init_seq.generate_state(1)[0]))
    model.stats = ds.stats
    train_seqs, test_seqs = ds.subset("train"), ds.subset("test")
    X = stack_sequences(train_seqs)
    y = np.array([int(s.label) for s in train_seqs])
    X_test = stack_sequences(test_seqs) if test_seqs else np.zeros((0,) + X.shape[1:])
    y_test = np.array([int(s.label) for s in test_seqs], dtype=np.int64)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    drop_rng = np.random.default_rng(drop_seq) if mcfg.dropout > 0 else None
    opt = Adam(model.parameters(), tcfg)
    history = History()
    n = len(X)
    t0 = time.perf_counter()
    for epoch in range(1, tcfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total, correct = 0.0, 0
        for b, start in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            opt.zero_grad()
            try:
                logits = model.logits(X[idx], dropout_rng=drop_rng)
                loss = ad.cross_entropy(logits, y[idx])
                ad.backward(loss)
            except ad.NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {b}: {exc}") from exc
            opt.step()
            total += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y[idx]))
        # train accuracy is the running minibatch figure (pre-update weights), as for the loss
        record = {"epoch": epoch, "train_loss": total / n, "train_accuracy": correct / n,
                  "test_accuracy": None}
        if epoch % eval_every == 0 or epoch == tcfg.epochs:
            record["test_accuracy"] = _accuracy(X_test, y_test, model)
        history.epochs.append(record)
        log.debug("epoch %d loss %.5f train %.4f test %s (%.1fs)", epoch, record["train_loss"],
                  record["train_accuracy"] or float("nan"), record["test_accuracy"], time.perf_counter() - t0)
    return model, history


# -- serialization ----------------------------------------------------------

def save_model(model: GcnLstmAttModel, directory) -> Path:
    """Writes manifest.json, weights.bin (little-endian float64, declaration order) and stats.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table, offset = [], 0
    with (directory / "weights.bin").open("wb") as fh:
        for name, p in model.params.items():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
            table.append({"name": name, "shape": list(p.shape), "offset": offset})
            offset += p.data.size
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "classes": {lab.name: int(lab) for lab in Label},
        "target_length": model.target_length,
        "stats": "stats.json" if model.stats is not None else None,
        "graph": {"n_nodes": model.graph.n_nodes, "edges": [list(e) for e in model.graph.edges],
                  "joint_names": list(model.graph.joint_names)},
        "weights": "weights.bin",
        "parameters": table,
    }
    if model.stats is not None:
        model.stats.save(directory / "stats.json")
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_model(directory) -> GcnLstmAttModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format {manifest.get('format_version')!r}")
    if manifest["classes"] != {lab.name: int(lab) for lab in Label}:
        raise ValueError("class mapping in manifest does not match this library")
    cfg = ModelConfig(**manifest["config"])
    g = manifest["graph"]
    graph = SkeletonGraph(g["n_nodes"], tuple(tuple(e) for e in g["edges"]), tuple(g["joint_names"]))
    flat = np.frombuffer((directory / manifest["weights"]).read_bytes(), dtype="<f8")
    params = {}
    for entry in manifest["parameters"]:
        size = int(np.prod(entry["shape"]))
        params[entry["name"]] = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"])
    model = GcnLstmAttModel(cfg, graph, params=params)
    if manifest.get("stats"):
        model.stats = ChannelStats.load(directory / manifest["stats"])
    return model


# -- gradient check ---------------------------------------------------------

def tiny_gradient_check(variant: Variant | str = Variant.GCN_LSTM_ATT, seed: int = 0, T: int = 5,
                        gcn_channels=(3, 4), lstm_hidden: int = 6, attention_dim: int = 5,
                        batch: int = 3, eps: float = 1e-5) -> float:
    """Max relative gradient error of the cross-entropy loss over every parameter
    of a small random model, against central differences."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(gcn_channels=gcn_channels, lstm_hidden=lstm_hidden, attention_dim=attention_dim,
                      variant=variant)
    model = GcnLstmAttModel(cfg, seed=int(rng.integers(2 ** 31)))
    # non-zero biases so relu kinks are not sitting exactly at the inputs' zeros
    for name, p in model.params.items():
        if name.endswith(("bias", ".b")):
            p.data[...] = rng.uniform(-0.3, 0.3, size=p.shape)
    X = rng.normal(size=(batch, T, model.graph.n_nodes, 3))
    y = rng.integers(0, cfg.n_classes, size=batch)
    return ad.gradient_check(lambda: ad.cross_entropy(model.logits(X), y), model.parameters(), eps=eps)
