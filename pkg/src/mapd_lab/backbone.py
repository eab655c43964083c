"""Small causal transformer used as the frozen language model.

Pre-norm blocks with learned absolute positions and an output head tied to
the token embedding table. Inputs are embedding tensors so that distilled
prompt rows can be spliced in between token embeddings.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tensor

CHECKPOINT_FORMAT = "mapd-lab/1"
LORA_MATRICES = ("q", "k", "v")


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 72
    max_seq_len: int = 512
    seed: int = 0
    warmup_steps: int = 3000
    warmup_batch: int = 32
    warmup_lr: float = 3e-3

    def validate(self):
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        from .tasks import VOCAB
        if self.vocab_size < len(VOCAB):
            raise ConfigError(f"vocab_size={self.vocab_size} is smaller than the task vocabulary ({len(VOCAB)})")


def _weight_names(cfg: BackboneConfig) -> list[str]:
    names = ["tok_emb", "pos_emb", "lnf_g", "lnf_b"]
    for i in range(cfg.num_layers):
        names += [f"l{i}.{n}" for n in ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
                                         "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")]
    return names


def random_weights(cfg: BackboneConfig) -> dict:
    rng = np.random.default_rng([cfg.seed, 11])
    d, f = cfg.d_model, cfg.d_ff
    w = {"tok_emb": rng.normal(0, 1 / math.sqrt(d), (cfg.vocab_size, d)),
         "pos_emb": rng.normal(0, 0.02, (cfg.max_seq_len, d)),
         "lnf_g": np.ones(d), "lnf_b": np.zeros(d)}
    for i in range(cfg.num_layers):
        p = f"l{i}."
        w[p + "ln1_g"], w[p + "ln1_b"] = np.ones(d), np.zeros(d)
        w[p + "ln2_g"], w[p + "ln2_b"] = np.ones(d), np.zeros(d)
        for n in ("wq", "wk", "wv"):
            w[p + n] = rng.normal(0, 1 / math.sqrt(d), (d, d))
        w[p + "wo"] = rng.normal(0, 1 / math.sqrt(d) / math.sqrt(2 * cfg.num_layers), (d, d))
        w[p + "w1"] = rng.normal(0, 1 / math.sqrt(d), (d, f))
        w[p + "b1"] = np.zeros(f)
        w[p + "w2"] = rng.normal(0, 1 / math.sqrt(f) / math.sqrt(2 * cfg.num_layers), (f, d))
        w[p + "b2"] = np.zeros(d)
    return {k: w[k].astype(np.float32) for k in _weight_names(cfg)}


class FrozenBackbone:
    """Immutable weights plus cached frozen leaves per dtype."""

    def __init__(self, config: BackboneConfig, weights: dict, warmup_log: list | None = None):
        config.validate()
        self.config = config
        self.weights = {k: np.array(v, copy=True) for k, v in weights.items()}
        for v in self.weights.values():
            v.setflags(write=False)
        self.warmup_log = warmup_log or []
        self._leaves: dict = {}

    def leaves(self, dtype=np.float32) -> dict:
        key = np.dtype(dtype).name
        if key not in self._leaves:
            self._leaves[key] = {k: Tensor(v.astype(dtype), name=k) for k, v in self.weights.items()}
        return self._leaves[key]

    def weight_norms(self) -> dict:
        return {k: float(np.linalg.norm(v)) for k, v in self.weights.items()}


@dataclass
class LoraAdapter:
    layers: tuple
    matrices: tuple = LORA_MATRICES
    rank: int = 2
    alpha: float = 8.0
    seed: int = 0

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def targets(self) -> list[tuple[int, str]]:
        return [(l, m) for l in self.layers for m in self.matrices]


class LoraModel:
    """Backbone handle carrying trainable low-rank adapters.

    Adapter arrays live in ``params`` under keys ``lora.{layer}.{matrix}.A``
    and ``.B``; they may carry a leading episode axis.
    """

    def __init__(self, backbone: FrozenBackbone, adapters: list, params: dict, scales: dict):
        self.backbone, self.adapters, self.params, self.scales = backbone, adapters, params, scales

    def detach(self) -> FrozenBackbone:
        return self.backbone

    def count_trainable(self) -> int:
        return sum(v.size for v in self.params.values())


def attach_lora(backbone: FrozenBackbone, adapters: list, dtype=np.float32) -> LoraModel:
    cfg = backbone.config
    seen: dict = {}
    params, scales = {}, {}
    for ad in adapters:
        for layer, mat in ad.targets():
            if not 0 <= layer < cfg.num_layers or mat not in LORA_MATRICES:
                raise ConfigError(f"LoRA target ({layer}, {mat!r}) does not exist")
            if (layer, mat) in seen:
                raise ConfigError(f"overlapping LoRA adapters on layer {layer} matrix {mat!r}")
            seen[(layer, mat)] = ad
            rng = np.random.default_rng([ad.seed, layer, LORA_MATRICES.index(mat)])
            bound = 1.0 / math.sqrt(cfg.d_model)
            params[f"lora.{layer}.{mat}.A"] = rng.uniform(-bound, bound, (cfg.d_model, ad.rank)).astype(dtype)
            params[f"lora.{layer}.{mat}.B"] = np.zeros((ad.rank, cfg.d_model), dtype=dtype)
            scales[(layer, mat)] = ad.scale
    return LoraModel(backbone, list(adapters), params, scales)


def _stacked_weight(w: Tensor, lead: int) -> Tensor:
    """Reshape a parameter with a leading episode axis to broadcast over ``[E, S, T, d]``."""
    if w.ndim == 2:
        return w
    shape = (w.shape[0],) + (1,) * (lead - 1) + w.shape[1:]
    return tn.reshape(w, shape)


def forward_logits(model, input_embeds: Tensor, lora: dict | None = None,
                   want_attention: bool = False, weights: dict | None = None):
    """Causal forward pass over ``input_embeds[..., T, d_model]``.

    ``model`` is a :class:`FrozenBackbone` or :class:`LoraModel`. ``lora``
    maps adapter keys to tensors (trainable leaves) and overrides the handle's
    stored arrays. ``weights`` substitutes backbone leaves (warm-up only).
    Returns ``(logits, attentions)`` where attentions is a list with one
    ``[..., H, T, T]`` array per layer, or ``None``.
    """
    lora_scales = {}
    if isinstance(model, LoraModel):
        lora_scales = model.scales
        if lora is None:
            lora = {k: Tensor(v) for k, v in model.params.items()}
        model = model.backbone
    cfg = model.config
    T, d = input_embeds.shape[-2], input_embeds.shape[-1]
    if T > cfg.max_seq_len:
        raise tn.ShapeError(f"sequence length {T} exceeds max_seq_len={cfg.max_seq_len}")
    if d != cfg.d_model:
        raise tn.ShapeError(f"input width {d} does not match d_model={cfg.d_model}")
    dtype = input_embeds.dtype
    W = weights if weights is not None else model.leaves(dtype)
    H = cfg.num_heads
    dh = d // H
    lead = input_embeds.ndim - 2
    pos = W["pos_emb"][:T] if weights is not None else Tensor(W["pos_emb"].data[:T])
    x = input_embeds + pos
    mask = np.triu(np.full((T, T), -1e9, dtype=dtype), k=1)
    attentions = [] if want_attention else None

    def proj(h, layer, name):
        out = h @ W[f"l{layer}.w{name}"]
        if (layer, name) in lora_scales:
            A = _stacked_weight(lora[f"lora.{layer}.{name}.A"], lead)
            B = _stacked_weight(lora[f"lora.{layer}.{name}.B"], lead)
            out = out + tn.scale((h @ A) @ B, lora_scales[(layer, name)])
        return out

    def heads(t):
        return tn.swapaxes(tn.reshape(t, t.shape[:-1] + (H, dh)), -2, -3)

    for i in range(cfg.num_layers):
        p = f"l{i}."
        h = tn.layer_norm(x, W[p + "ln1_g"], W[p + "ln1_b"])
        q, k, v = heads(proj(h, i, "q")), heads(proj(h, i, "k")), heads(proj(h, i, "v"))
        scores = tn.scale(q @ tn.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh)) + Tensor(mask)
        att = tn.softmax(scores, axis=-1)
        if want_attention:
            attentions.append(att.data)
        ctx = tn.swapaxes(att @ v, -2, -3)
        x = x + tn.reshape(ctx, ctx.shape[:-2] + (d,)) @ W[p + "wo"]
        h = tn.layer_norm(x, W[p + "ln2_g"], W[p + "ln2_b"])
        x = x + (tn.gelu(h @ W[p + "w1"] + W[p + "b1"]) @ W[p + "w2"] + W[p + "b2"])
    x = tn.layer_norm(x, W["lnf_g"], W["lnf_b"])
    logits = x @ tn.transpose(W["tok_emb"])
    return logits, attentions


def embed_tokens(model, ids: np.ndarray, dtype=np.float32) -> Tensor:
    bb = model.backbone if isinstance(model, LoraModel) else model
    return tn.gather_rows(bb.leaves(dtype)["tok_emb"], ids)


def greedy_decode(model, prefix_embeds: Tensor, max_new_tokens: int, end_id: int | None = None,
                  logits_fn=None) -> list[int]:
    """Argmax decoding; ties resolve to the lowest id (``np.argmax``).

    ``logits_fn`` (embeddings -> last-position logits) replaces the model for
    probing the decoding rule itself.
    """
    from .tasks import VOCAB
    end_id = VOCAB.end_id if end_id is None else end_id
    bb = model.backbone if isinstance(model, LoraModel) else model
    out: list[int] = []
    x = prefix_embeds if isinstance(prefix_embeds, Tensor) else Tensor(np.asarray(prefix_embeds))
    with tn.no_tape():
        for _ in range(max_new_tokens):
            if logits_fn is not None:
                last = np.asarray(logits_fn(x))
            else:
                logits, _ = forward_logits(model, x)
                last = logits.data[-1]
            tok = int(np.argmax(last))
            out.append(tok)
            if tok == end_id:
                break
            emb = bb.leaves(x.dtype)["tok_emb"].data[tok][None]
            x = Tensor(np.concatenate([x.data, emb], axis=0))
    return out


# --- warm-up -------------------------------------------------------------------

def lm_loss(model: FrozenBackbone, batch, weights: dict) -> Tensor:
    emb = tn.gather_rows(weights["tok_emb"], batch.index)
    logits, _ = forward_logits(model, emb, weights=weights)
    return tn.cross_entropy_logits(logits, batch.targets, batch.loss_mask)


def init_backbone(config: BackboneConfig, log_every: int = 0, corpus=None) -> FrozenBackbone:
    """Seeded weights, then next-token warm-up on the synthetic corpus.

    Warm-up runs ``warmup_steps`` Adam steps and continues past the budget
    (up to 4x) while the running per-token loss is still above
    ``ln(vocab_size) / 2``.
    """
    from .corpus import WarmupCorpus
    from .optim import Adam
    config.validate()
    weights = random_weights(config)
    shell = FrozenBackbone(config, weights)
    corpus = corpus or WarmupCorpus(seed=config.seed)
    rng = np.random.default_rng([config.seed, 12])
    opt = Adam(lr=config.warmup_lr)
    threshold = math.log(config.vocab_size) / 2
    history, running = [], None
    step = 0
    t0 = time.time()
    while step < config.warmup_steps or (running is not None and running >= threshold and step < 4 * config.warmup_steps):
        batch = corpus.batch(rng, config.warmup_batch)
        lr_scale = min(1.0, (step + 1) / 200) * (0.5 * (1 + math.cos(math.pi * min(step, config.warmup_steps) / config.warmup_steps)) * 0.9 + 0.1)
        opt.lr = config.warmup_lr * lr_scale
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in weights.items()}
        with tn.Tape() as tape:
            loss = lm_loss(shell, batch, leaves)
        grads = tape.backward(loss)
        weights = opt.step(weights, {leaf.name: g for leaf, g in grads.items()})
        running = loss.item() if running is None else 0.98 * running + 0.02 * loss.item()
        history.append(loss.item())
        step += 1
        if log_every and step % log_every == 0:
            print(f"warmup step {step} loss {running:.4f} ({time.time() - t0:.0f}s)", flush=True)
    return FrozenBackbone(config, weights, warmup_log=history)


# --- checkpoints -----------------------------------------------------------------

def save_arrays(path, meta: dict, arrays: dict):
    """Write ``meta`` (JSON) and arrays into one ``.npz`` container."""
    payload = {f"a/{k}": v for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps({"format": CHECKPOINT_FORMAT, **meta}, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path) -> tuple[dict, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        arrays = {k[2:]: z[k] for k in z.files if k.startswith("a/")}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    return meta, arrays


def save_backbone(model: FrozenBackbone, path):
    save_arrays(path, {"kind": "backbone", "config": asdict(model.config)}, model.weights)


def load_backbone(path) -> FrozenBackbone:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "backbone":
        raise ValueError(f"{path} is not a backbone checkpoint")
    return FrozenBackbone(BackboneConfig(**meta["config"]), arrays)
