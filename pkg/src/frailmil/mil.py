"""Attention-pooling multi-instance network with hand-written gradients.

Per bag the network computes::

    e_j   = W2_m relu(W1_m x_j + b1_m) + b2_m + v_m      (modality encoder + tag)
    h_j   = relu(Wp e_j + bp)                             (projector)
    l_j   = w . tanh(V h_j + bv)                          (attention score)
    alpha = softmax(l)                                    (over the whole bag)
    z     = sum_j alpha_j h_j
    y     = Wc z + bc                                     (3 logits)

and the loss is ``-w_y log softmax(y)_y``. Everything runs in float64 numpy,
one bag at a time.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

from ._random import make_rng
from .cohort import MODALITIES, Modality, parse_modality
from .exceptions import NumericalError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "frailmil-mil-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 128
    encoder_hidden: object = 128  # int, or mapping modality -> int
    attention_dim: int = 64
    n_classes: int = 3
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    max_epochs: int = 100
    patience: int = 10
    accumulate: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        dims = [self.embed_dim, self.attention_dim, self.n_classes, self.accumulate, self.max_epochs]
        if isinstance(self.encoder_hidden, Mapping):
            object.__setattr__(
                self, "encoder_hidden", {parse_modality(k).value: int(v) for k, v in self.encoder_hidden.items()}
            )
            dims += list(self.encoder_hidden.values())
        else:
            dims.append(self.encoder_hidden)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all model dimensions must be >= 1: {self}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.patience < 0 or self.weight_decay < 0:
            raise ValueError("patience and weight decay must be non-negative")

    def hidden_for(self, modality) -> int:
        if isinstance(self.encoder_hidden, Mapping):
            return int(self.encoder_hidden.get(parse_modality(modality).value, 128))
        return int(self.encoder_hidden)

    def to_dict(self) -> dict:
        return asdict(self)


def _is_decayed(name: str) -> bool:
    # weight matrices and the attention vector; biases and modality tags are not decayed
    return name.rsplit(".", 1)[-1] in {"W1", "W2", "W", "V", "w"}


@dataclass
class MilModel:
    config: ModelConfig
    input_dims: dict  # Modality -> F_m, canonical order
    params: dict  # name -> ndarray
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    @property
    def modalities(self) -> tuple:
        return tuple(self.input_dims)

    def copy(self) -> "MilModel":
        return copy.deepcopy(self)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def equals(self, other: "MilModel") -> bool:
        """Bit-exact comparison of parameters and optimizer state."""
        if self.params.keys() != other.params.keys() or self.step != other.step:
            return False
        for store, other_store in ((self.params, other.params), (self.adam_m, other.adam_m), (self.adam_v, other.adam_v)):
            for k, v in store.items():
                if k not in other_store or v.tobytes() != other_store[k].tobytes():
                    return False
        return True


def _param_shapes(config: ModelConfig, input_dims: Mapping) -> list[tuple[str, tuple]]:
    D, L, C = config.embed_dim, config.attention_dim, config.n_classes
    shapes = []
    for m, f in input_dims.items():
        H = config.hidden_for(m)
        shapes += [
            (f"enc.{m.value}.W1", (H, f)),
            (f"enc.{m.value}.b1", (H,)),
            (f"enc.{m.value}.W2", (D, H)),
            (f"enc.{m.value}.b2", (D,)),
        ]
    shapes += [(f"mod.{m.value}", (D,)) for m in input_dims]
    shapes += [
        ("proj.W", (D, D)),
        ("proj.b", (D,)),
        ("attn.V", (L, D)),
        ("attn.b", (L,)),
        ("attn.w", (L,)),
        ("cls.W", (C, D)),
        ("cls.b", (C,)),
    ]
    return shapes


def init_model(config: ModelConfig, input_dims: Mapping, seed: Optional[int] = None) -> MilModel:
    """Glorot-uniform weights from a Philox stream; zero biases.

    ``input_dims`` maps each modality the model should accept to its feature
    count. Modality tags ``v_m`` use ``fan_in = fan_out = D``.
    """
    seed = config.seed if seed is None else seed
    given = {parse_modality(k): int(v) for k, v in input_dims.items()}
    dims = {m: given[m] for m in MODALITIES if m in given}
    rng = make_rng(seed, "model-init")
    params = {}
    D = config.embed_dim
    for name, shape in _param_shapes(config, dims):
        kind = name.rsplit(".", 1)[-1]
        if name.startswith("mod."):
            limit = np.sqrt(6.0 / (2 * D))
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif kind == "w":
            limit = np.sqrt(6.0 / (shape[0] + 1))
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif _is_decayed(name):
            fan_out, fan_in = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    model = MilModel(config, dims, params, seed=seed)
    model.adam_m = {k: np.zeros_like(v) for k, v in params.items()}
    model.adam_v = {k: np.zeros_like(v) for k, v in params.items()}
    return model


@dataclass
class ForwardTrace:
    logits: np.ndarray
    probs: np.ndarray
    alpha: np.ndarray
    slices: dict  # Modality -> slice of rows in the concatenated bag
    cache: dict = field(repr=False, default_factory=dict)

    def alpha_by_modality(self) -> dict:
        return {m: self.alpha[s] for m, s in self.slices.items()}


def _instances(bag) -> Mapping:
    return bag.instances if hasattr(bag, "instances") else bag


def _finite(name: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite values in layer {name}")
    return value


def encode_instances(model: MilModel, bag):
    """Tagged instance embeddings (N x D) plus per-modality caches and row slices."""
    p = model.params
    inst = {parse_modality(k): v for k, v in _instances(bag).items()}
    blocks, caches, slices = [], {}, {}
    start = 0
    for m in model.modalities:
        x = inst.get(m)
        if x is None:
            continue
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != model.input_dims[m]:
            raise ValueError(
                f"{m.value} instances have shape {x.shape}; encoder expects {model.input_dims[m]} features"
            )
        if x.shape[0] == 0:
            continue
        k = m.value
        a1 = x @ p[f"enc.{k}.W1"].T + p[f"enc.{k}.b1"]
        r1 = np.maximum(a1, 0.0)
        e = _finite(f"enc.{k}", r1 @ p[f"enc.{k}.W2"].T + p[f"enc.{k}.b2"]) + p[f"mod.{k}"]
        blocks.append(e)
        caches[m] = (x, a1, r1)
        slices[m] = slice(start, start + x.shape[0])
        start += x.shape[0]
    unknown = set(inst) - set(model.modalities)
    if any(np.asarray(inst[m]).shape[0] for m in unknown):
        raise ValueError(f"model has no encoder for modality {sorted(m.value for m in unknown)}")
    if not blocks:
        raise ValueError("bag has no instances")
    return np.vstack(blocks), caches, slices


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def attention_pool(model: MilModel, embeddings: np.ndarray):
    """Project, score and pool; returns ``(z, alpha, cache)``."""
    p = model.params
    pre = embeddings @ p["proj.W"].T + p["proj.b"]
    h = _finite("proj", np.maximum(pre, 0.0))
    u = np.tanh(h @ p["attn.V"].T + p["attn.b"])
    scores = _finite("attn", u @ p["attn.w"])
    alpha = _softmax(scores)
    z = alpha @ h
    return z, alpha, {"pre": pre, "h": h, "u": u}


def forward(model: MilModel, bag) -> ForwardTrace:
    emb, enc_cache, slices = encode_instances(model, bag)
    z, alpha, pool_cache = attention_pool(model, emb)
    logits = _finite("cls", model.params["cls.W"] @ z + model.params["cls.b"])
    cache = {"emb": emb, "enc": enc_cache, "z": z, **pool_cache}
    return ForwardTrace(logits, _softmax(logits), alpha, slices, cache)


def _cross_entropy(logits: np.ndarray, label: int, weight: float) -> float:
    shifted = logits - logits.max()
    log_p = shifted[label] - np.log(np.exp(shifted).sum())
    return float(-weight * log_p)


def bag_loss(model: MilModel, bag, label: int, class_weights=None) -> float:
    w = 1.0 if class_weights is None else float(class_weights[label])
    return _cross_entropy(forward(model, bag).logits, int(label), w)


def loss_and_grad(model: MilModel, bag, label: int, class_weights=None):
    """Weighted cross-entropy of one bag and its exact gradient w.r.t. every parameter."""
    label = int(label)
    if not 0 <= label < model.config.n_classes:
        raise ValueError(f"label {label} outside [0, {model.config.n_classes})")
    w = 1.0 if class_weights is None else float(class_weights[label])
    p = model.params
    tr = forward(model, bag)
    c = tr.cache
    loss = _cross_entropy(tr.logits, label, w)

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dy = w * tr.probs
    dy[label] -= w
    grads["cls.W"] = np.outer(dy, c["z"])
    grads["cls.b"] = dy
    dz = p["cls.W"].T @ dy

    h, u, alpha = c["h"], c["u"], tr.alpha
    dh = np.outer(alpha, dz)
    dalpha = h @ dz
    dscore = alpha * (dalpha - alpha @ dalpha)
    grads["attn.w"] = u.T @ dscore
    da = np.outer(dscore, p["attn.w"]) * (1.0 - u**2)
    grads["attn.V"] = da.T @ h
    grads["attn.b"] = da.sum(axis=0)
    dh += da @ p["attn.V"]

    dpre = dh * (c["pre"] > 0)
    grads["proj.W"] = dpre.T @ c["emb"]
    grads["proj.b"] = dpre.sum(axis=0)
    demb = dpre @ p["proj.W"]

    for m, (x, a1, r1) in c["enc"].items():
        k = m.value
        de = demb[tr.slices[m]]
        grads[f"mod.{k}"] = de.sum(axis=0)
        grads[f"enc.{k}.W2"] = de.T @ r1
        grads[f"enc.{k}.b2"] = de.sum(axis=0)
        da1 = (de @ p[f"enc.{k}.W2"]) * (a1 > 0)
        grads[f"enc.{k}.W1"] = da1.T @ x
        grads[f"enc.{k}.b1"] = da1.sum(axis=0)
    return loss, grads


def optimizer_step(model: MilModel, grads: Mapping, config: Optional[ModelConfig] = None, t: Optional[int] = None) -> MilModel:
    """One bias-corrected adaptive-moment update with decoupled weight decay, in place.

    Decay multiplies weight matrices (and the attention vector) by
    ``1 - lr * weight_decay``; biases and modality tags are never decayed.
    """
    cfg = config or model.config
    t = model.step + 1 if t is None else int(t)
    lr, b1, b2, eps = cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, param in model.params.items():
        g = grads[name]
        if g.shape != param.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {param.shape}")
        m = model.adam_m[name]
        v = model.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay and _is_decayed(name):
            param *= 1.0 - lr * cfg.weight_decay
        param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    model.step = t
    return model


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


def _bag_label(bag) -> int:
    return int(bag.label)


def mean_loss(model: MilModel, bags, class_weights=None) -> float:
    return float(np.mean([bag_loss(model, b, _bag_label(b), class_weights) for b in bags]))


def train(model: MilModel, train_bags, val_bags, config: Optional[ModelConfig] = None, class_weights=None):
    """Mini-batch training with early stopping on validation loss.

    Each epoch visits ``train_bags`` in a seed-determined order; gradients of
    ``config.accumulate`` consecutive bags are averaged per optimizer step.
    Returns the parameters with the lowest validation loss and the per-epoch
    history.
    """
    cfg = config or model.config
    train_bags, val_bags = list(train_bags), list(val_bags)
    if not train_bags or not val_bags:
        raise ValueError("train and validation bag sets must both be non-empty")
    rng = make_rng(cfg.seed, "epoch-order")
    model = model.copy()
    best, best_val = model.copy(), np.inf
    history: list[EpochRecord] = []
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_bags))
        total = 0.0
        for start in range(0, len(order), cfg.accumulate):
            group = order[start : start + cfg.accumulate]
            acc = None
            for i in group:
                bag = train_bags[i]
                loss, g = loss_and_grad(model, bag, _bag_label(bag), class_weights)
                total += loss
                if acc is None:
                    acc = g
                else:
                    for k in acc:
                        acc[k] += g[k]
            for k in acc:
                acc[k] /= len(group)
            optimizer_step(model, acc, cfg)
        val = mean_loss(model, val_bags, class_weights)
        history.append(EpochRecord(epoch, total / len(train_bags), val))
        if val < best_val:
            best, best_val, stale = model.copy(), val, 0
        else:
            stale += 1
        if stale >= cfg.patience:
            break
    logger.debug("trained %d epochs, best val loss %.5f", len(history), best_val)
    return best, history


def count_params_flops(model: MilModel, instance_counts: Mapping) -> dict:
    """Exact trainable-scalar count and forward FLOPs (2 x multiply-adds) for one bag.

    ``instance_counts`` maps modality to the number of instances in the
    reference bag. The result also breaks FLOPs into the per-instance
    ("pooled path": encoders, projector, attention, weighted sum) and the
    per-bag classifier part.
    """
    cfg = model.config
    D, L, C = cfg.embed_dim, cfg.attention_dim, cfg.n_classes
    counts = {parse_modality(k): int(v) for k, v in instance_counts.items()}
    macs_instances = 0
    n_total = 0
    for m, f in model.input_dims.items():
        n = counts.get(m, 0)
        H = cfg.hidden_for(m)
        macs_instances += n * (f * H + H * D)
        n_total += n
    # projector, attention scoring (V then w), weighted sum
    macs_instances += n_total * (D * D + L * D + L + D)
    macs_classifier = C * D
    return {
        "params": model.n_params(),
        "flops": 2 * (macs_instances + macs_classifier),
        "flops_pooled_path": 2 * macs_instances,
        "flops_classifier": 2 * macs_classifier,
        "instances": n_total,
    }


def save_checkpoint(model: MilModel, path) -> None:
    """Write config, parameters and optimizer state to an ``.npz`` container.

    Layout: ``meta`` holds a JSON string (format tag, config, input dims, seed,
    step, parameter order); arrays are stored as ``param/<name>``,
    ``adam_m/<name>`` and ``adam_v/<name>`` in float64, so loading is bit-exact.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "input_dims": {m.value: f for m, f in model.input_dims.items()},
        "seed": model.seed,
        "step": model.step,
        "order": list(model.params),
    }
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for name in model.params:
        arrays[f"param/{name}"] = model.params[name]
        arrays[f"adam_m/{name}"] = model.adam_m[name]
        arrays[f"adam_v/{name}"] = model.adam_v[name]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> MilModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a frailmil checkpoint")
        config = ModelConfig(**meta["config"])
        given = {Modality(k): int(v) for k, v in meta["input_dims"].items()}
        dims = {m: given[m] for m in MODALITIES if m in given}
        params = {n: data[f"param/{n}"].copy() for n in meta["order"]}
        adam_m = {n: data[f"adam_m/{n}"].copy() for n in meta["order"]}
        adam_v = {n: data[f"adam_v/{n}"].copy() for n in meta["order"]}
    return MilModel(config, dims, params, adam_m, adam_v, int(meta["step"]), int(meta["seed"]))
