"""Stage-1 alignment and the five prompt-distillation regimes.

``mapd`` is first-order MAML over meta-tasks with one learnable inner rate
per step; ``multitask_pd`` pools support and query of each task;
``incontext_pd`` trains on support-in-context sequences; ``nometa_pd``
ignores episode boundaries; ``modelavg_pd`` trains one mapper per family and
averages them weighted by family size.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import mapper as mp
from . import tensor as tn
from .backbone import load_arrays, save_arrays
from .layout import pack, qa_chunks
from .mapper import MapperConfig, MapperParams
from .objective import EpisodeBatch, episode_loss, icl_batch, qa_batch
from .optim import Adam, SGD, make_optimizer
from .tasks import (FAMILIES, OPERATORS, VOCAB, MetaTask, caption_words, ground_truth, operator_scene,
                    random_count_question)

METHODS = ("mapd", "multitask_pd", "incontext_pd", "nometa_pd", "modelavg_pd")
RATE_FLOOR = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    method: str = "mapd"
    inner_steps: int = 5
    alpha_init: float = 0.1
    beta: float = 1e-3
    batch_meta_tasks: int = 4
    epochs: int = 1
    seed: int = 0
    outer_optimizer: str = "adam"
    learn_rates: bool = True
    examples_per_step: int = 20
    val_every: int = 0

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if self.method == "mapd" and self.inner_steps < 1:
            raise ValueError("mapd needs inner_steps >= 1")
        if self.alpha_init <= 0:
            raise ValueError("alpha_init must be positive")
        if self.batch_meta_tasks < 1 or self.epochs < 0:
            raise ValueError("batch_meta_tasks must be >= 1 and epochs >= 0")


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _rows(params: MapperParams, batch_groups) -> int:
    return params.config.prompt_rows(batch_groups[0][0].z_v.shape[0])


def loss_and_grad(model, params: MapperParams, batch: EpisodeBatch, want_correct: bool = False, context: str = ""):
    """Loss outcome and ``{name: gradient}`` for every mapper array."""
    leaves = mp.leaves(params)
    try:
        with tn.Tape() as tape:
            out = episode_loss(model, params, leaves, batch, want_correct=want_correct)
        grads = tape.backward(out.loss)
    except tn.NonFiniteError as err:
        raise tn.NonFiniteError(f"{context}: {err}" if context else str(err)) from err
    return out, {leaf.name: g for leaf, g in grads.items()}


def sgd_update(params: MapperParams, grads: dict, rate) -> MapperParams:
    """``θ - rate·g`` as a new object; ``rate`` is a scalar or one value per stacked slice."""
    new = {}
    for k, v in params.arrays.items():
        r = np.asarray(rate, dtype=v.dtype)
        if r.ndim:
            r = r.reshape((-1,) + (1,) * (v.ndim - 1))
        new[k] = v - r * grads[k] if k in grads else v.copy()
    return MapperParams(params.config, new)


# --- stage 1 ----------------------------------------------------------------

def caption_pairs(tasks: Sequence[MetaTask], seed: int = 0) -> list:
    """Alignment items ``(Z_v, question ids, answer ids)`` for every distinct scene.

    Every scene contributes its caption under ``describe``. Scenes whose
    content answers further questions add them too: operator scenes with
    the operator named in the question, count scenes with a count question.
    """
    rng = np.random.default_rng([seed, 43])
    seen, out = set(), []
    describe = VOCAB.encode(["describe"])
    for t in tasks:
        for e in t.support + t.query:
            key = json.dumps(e.scene.payload, sort_keys=True)
            if key in seen:
                continue
            seen.add(key)
            out.append((e.z_v, describe, VOCAB.encode(caption_words(e.scene))))
            if e.scene.family == "operator_induction":
                for op in OPERATORS:
                    scene = operator_scene(e.scene.payload["a"], e.scene.payload["b"], op)
                    out.append((e.z_v, VOCAB.encode(("calc", op)), VOCAB.encode(ground_truth(scene, ()))))
            elif e.scene.family == "count_induction":
                q = random_count_question(rng)
                out.append((e.z_v, VOCAB.encode(q), VOCAB.encode(ground_truth(e.scene, q))))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def caption_batch(items, rows: int, vocab_size: int) -> EpisodeBatch:
    z = np.stack([it[0] for it in items])[None]
    seqs = []
    for n, (_, q, a) in enumerate(items):
        base = vocab_size + n * rows
        seqs.append(qa_chunks(np.arange(base, base + rows), q, a))
    return EpisodeBatch(z, pack(seqs, shape=(1, len(items))), rows, len(items))


def pretrain_align(params: MapperParams, backbone, caption_stream: Sequence, steps: int, lr: float = 0.5,
                   batch_size: int = 32, seed: int = 0, log: Callable | None = None):
    """Plain gradient descent on alignment-item likelihood; returns ``(params, history)``.

    The last 2% of ``caption_stream`` is held out for validation loss.
    """
    params = params.copy()
    history = {"train": [], "val": []}
    if steps == 0:
        return params, history
    pairs = list(caption_stream)
    n_val = max(1, int(round(0.02 * len(pairs))))
    train, val = pairs[:-n_val], pairs[-n_val:]
    rows = params.config.prompt_rows(train[0][0].shape[0])
    V = backbone.config.vocab_size
    rng = np.random.default_rng([seed, 41])
    order: list = []
    for step in range(steps):
        if len(order) < batch_size:
            order += [int(i) for i in rng.permutation(len(train))]
        idx, order = order[:batch_size], order[batch_size:]
        out, g = loss_and_grad(backbone, params, caption_batch([train[i] for i in idx], rows, V),
                               context=f"alignment step {step}")
        params = sgd_update(params, g, lr)
        history["train"].append(out.loss.item())
        if (step + 1) % max(1, steps // 10) == 0 or step == steps - 1:
            with tn.no_tape():
                vl = episode_loss(backbone, params, None, caption_batch(val, rows, V)).loss.item()
            history["val"].append((step + 1, vl))
            if log:
                log({"step": step + 1, "method": "align", "support_loss": out.loss.item(), "query_loss": vl})
    return params, history


# --- inner loop and meta-step ---------------------------------------------------

def inner_loop(model, params: MapperParams, support: EpisodeBatch, rates, steps: int,
               keep_grads: bool = False, context: str = ""):
    """``steps`` SGD steps on the support loss of each stacked slice.

    Returns ``(adapted, support_losses, grads)`` where ``grads`` lists the
    per-step support gradients if ``keep_grads``. The input is not modified.
    """
    rates = np.asarray(rates, dtype=np.float64)
    losses, kept = [], []
    for k in range(steps):
        out, g = loss_and_grad(model, params, support, context=f"{context}inner step {k}")
        losses.append(out.loss.item() / support.groups)
        if keep_grads:
            kept.append(g)
        params = sgd_update(params, g, rates[k])
    return params, losses, kept


def inner_adapt(params: MapperParams, support: Sequence, steps: int, rates, model) -> MapperParams:
    """Adapt on one task's support examples; ``params`` is left untouched."""
    if not support:
        raise ValueError("inner_adapt needs a non-empty support set")
    batch = qa_batch([support], params.config.prompt_rows(support[0].z_v.shape[0]), model.config.vocab_size)
    adapted, _, _ = inner_loop(model, params.stack(1), batch, rates, steps)
    return adapted.select(0)


@dataclass
class StepStats:
    support_loss: float
    query_loss: float
    meta_grad: dict = field(default_factory=dict)
    rate_grad: np.ndarray | None = None


def mapd_meta_grad(model, params: MapperParams, rates, tasks: Sequence[MetaTask], learn_rates: bool = True):
    """First-order meta-gradient summed over ``tasks``.

    Adapted parameters are treated as constants of the initialization, so
    the meta-gradient is the sum of query gradients at the adapted
    parameters. The rate gradient uses the same approximation:
    ``dL_q/dalpha_k = -<grad L_q(theta'), g_k>``.
    """
    if not tasks:
        raise ValueError("meta-batch is empty")
    rows = _rows(params, [tasks[0].support or tasks[0].query])
    V = model.config.vocab_size
    E = len(tasks)
    sup = qa_batch([t.support for t in tasks], rows, V)
    qry = qa_batch([t.query for t in tasks], rows, V)
    steps = len(rates)
    adapted, s_losses, kept = inner_loop(model, params.stack(E), sup, rates, steps, keep_grads=learn_rates)
    try:
        out, gq = loss_and_grad(model, adapted, qry, context="query")
    except tn.NonFiniteError as err:
        raise tn.NonFiniteError(f"query loss of meta-batch tasks {[t.seed for t in tasks]}: {err}") from err
    meta = {k: g.sum(axis=0) for k, g in gq.items()}
    rate_grad = None
    if learn_rates:
        rate_grad = np.array([-sum(float(np.vdot(gq[k], gk[k])) for k in gq) for gk in kept])
    return StepStats(float(np.mean(s_losses)) if s_losses else float("nan"), out.loss.item() / E, meta, rate_grad)


def mapd_meta_step(model, params: MapperParams, rates, tasks, optimizer, learn_rates: bool = True):
    stats = mapd_meta_grad(model, params, rates, tasks, learn_rates)
    state = dict(params.arrays)
    grads = dict(stats.meta_grad)
    if learn_rates:
        state["__alpha__"] = np.asarray(rates, dtype=np.float64)
        grads["__alpha__"] = stats.rate_grad
    new = optimizer.step(state, grads)
    new_rates = np.maximum(new.pop("__alpha__", np.asarray(rates, dtype=np.float64)), RATE_FLOOR)
    return MapperParams(params.config, new), new_rates, stats


def multitask_grad(model, params: MapperParams, tasks):
    groups = [list(t.support) + list(t.query) for t in tasks]
    batch = qa_batch(groups, _rows(params, groups), model.config.vocab_size)
    out, g = loss_and_grad(model, params, batch, context="multitask")
    return out.loss.item() / len(tasks), g


def multitask_step(model, params, tasks, optimizer):
    loss, g = multitask_grad(model, params, tasks)
    return MapperParams(params.config, optimizer.step(params.arrays, g)), loss


def incontext_grad(model, params: MapperParams, tasks):
    rows = _rows(params, [tasks[0].query])
    if len({len(t.support) for t in tasks}) > 1:
        raise ValueError("in-context batches need equal support sizes")
    batch = icl_batch(tasks, rows, model.config.vocab_size, model.config.max_seq_len)
    out, g = loss_and_grad(model, params, batch, context="in-context")
    return out.loss.item() / len(tasks), g


def incontext_step(model, params, tasks, optimizer):
    loss, g = incontext_grad(model, params, tasks)
    return MapperParams(params.config, optimizer.step(params.arrays, g)), loss


def nometa_grad(model, params: MapperParams, examples):
    batch = qa_batch([examples], _rows(params, [examples]), model.config.vocab_size)
    out, g = loss_and_grad(model, params, batch, context="flat batch")
    return out.loss.item(), g


def model_avg(params: Sequence[MapperParams], sizes: Sequence[int]) -> MapperParams:
    """Size-weighted average ``sum_i w_i theta_i`` with ``w_i = |D_i| / |D|``."""
    if not params or len(params) != len(sizes):
        raise ValueError("model_avg needs one size per parameter set")
    if any(s <= 0 for s in sizes):
        raise ValueError("dataset sizes must be positive")
    keys = set(params[0].arrays)
    for p in params[1:]:
        if set(p.arrays) != keys or any(p.arrays[k].shape != params[0].arrays[k].shape for k in keys):
            raise tn.ShapeError("model_avg: parameter sets are not congruent")
    total = float(sum(sizes))
    w = [s / total for s in sizes]
    equal = len(set(sizes)) == 1
    out = {}
    for k in params[0].arrays:
        acc = np.zeros_like(params[0].arrays[k], dtype=np.float64)
        for wi, p in zip(w, params):
            acc += p.arrays[k] if equal else wi * p.arrays[k]
        if equal:
            acc /= len(params)   # plain arithmetic mean, free of 1/n rounding
        out[k] = acc.astype(params[0].arrays[k].dtype)
    return MapperParams(params[0].config, out)


# --- training loop -------------------------------------------------------------

@dataclass
class TrainState:
    params: MapperParams
    rates: np.ndarray
    optimizer: object
    epoch: int = 0
    step: int = 0
    best_val: float = float("inf")
    best_params: MapperParams | None = None
    best_rates: np.ndarray | None = None


def validation_loss(model, params: MapperParams, rates, val_tasks: Sequence[MetaTask], steps: int) -> float:
    """Mean query loss after ``steps`` inner steps, grouped by support size."""
    if not val_tasks:
        return float("nan")
    by_size: dict = {}
    for t in val_tasks:
        by_size.setdefault(len(t.support), []).append(t)
    total, n = 0.0, 0
    rows = _rows(params, [val_tasks[0].query])
    V = model.config.vocab_size
    for size in sorted(by_size):
        tasks = by_size[size]
        p = params.stack(len(tasks))
        if size and steps:
            p, _, _ = inner_loop(model, p, qa_batch([t.support for t in tasks], rows, V), rates, steps)
        with tn.no_tape():
            out = episode_loss(model, p, None, qa_batch([t.query for t in tasks], rows, V))
        total += out.loss.item()
        n += len(tasks)
    return total / n


class Trainer:
    """Resumable training of one method over a fixed list of meta-tasks."""

    def __init__(self, config: TrainerConfig, model, train_tasks: Sequence[MetaTask],
                 val_tasks: Sequence[MetaTask] = (), log: Callable | None = None):
        config.validate()
        self.config, self.model = config, model
        self.train_tasks, self.val_tasks = list(train_tasks), list(val_tasks)
        self.log = log

    def init_state(self, params: MapperParams) -> TrainState:
        c = self.config
        rates = np.full(c.inner_steps, c.alpha_init, dtype=np.float64)
        return TrainState(params.copy(), rates, make_optimizer(c.outer_optimizer, c.beta))

    # units of work are meta-task batches, or example batches for nometa
    def epoch_plan(self, epoch: int) -> list:
        c = self.config
        rng = np.random.default_rng([c.seed, 51, epoch])
        if c.method == "nometa_pd":
            flat = [e for t in self.train_tasks for e in t.support + t.query]
            order = rng.permutation(len(flat))
            k = c.examples_per_step
            return [[flat[i] for i in order[j:j + k]] for j in range(0, len(flat) - k + 1, k)]
        order = rng.permutation(len(self.train_tasks))
        tasks = [self.train_tasks[i] for i in order]
        b = c.batch_meta_tasks
        if c.method == "incontext_pd":
            tasks = [t for t in tasks if t.support]
        return [tasks[j:j + b] for j in range(0, len(tasks) - b + 1, b)]

    def steps_per_epoch(self) -> int:
        return len(self.epoch_plan(0))

    def _val_steps(self) -> int:
        return self.config.inner_steps

    def validate(self, state: TrainState) -> float:
        rates = state.rates if self.config.method == "mapd" else np.full(self._val_steps(), self.config.alpha_init)
        return validation_loss(self.model, state.params, rates, self.val_tasks, len(rates))

    def step(self, state: TrainState, unit) -> dict:
        c, model = self.config, self.model
        t0 = time.perf_counter()
        s_loss = None
        if c.method == "mapd":
            state.params, state.rates, st = mapd_meta_step(model, state.params, state.rates, unit,
                                                           state.optimizer, c.learn_rates)
            s_loss, q_loss = st.support_loss, st.query_loss
        elif c.method in ("multitask_pd", "modelavg_pd") and isinstance(unit[0], MetaTask):
            state.params, q_loss = multitask_step(model, state.params, unit, state.optimizer)
        elif c.method == "incontext_pd":
            state.params, q_loss = incontext_step(model, state.params, unit, state.optimizer)
        else:
            q_loss, g = nometa_grad(model, state.params, unit)
            state.params = MapperParams(state.params.config, state.optimizer.step(state.params.arrays, g))
        state.step += 1
        rec = {"step": state.step, "method": c.method, "support_loss": s_loss, "query_loss": q_loss,
               "alpha_vector": [float(a) for a in state.rates], "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
        if self.log:
            self.log(rec)
        return rec

    def run(self, state: TrainState, max_steps: int | None = None) -> TrainState:
        """Continue training from ``state`` until the epoch budget (or ``max_steps`` more steps)."""
        c = self.config
        done = 0
        per_epoch = self.steps_per_epoch()
        if per_epoch == 0:
            raise TrainingError("training set too small for one batch")
        val_every = c.val_every or per_epoch
        while state.epoch < c.epochs:
            plan = self.epoch_plan(state.epoch)
            while state.step - state.epoch * per_epoch < per_epoch:
                if max_steps is not None and done >= max_steps:
                    return state
                self.step(state, plan[state.step - state.epoch * per_epoch])
                done += 1
                if self.val_tasks and state.step % val_every == 0:
                    self._track_best(state)
            state.epoch += 1
        if state.best_params is None:
            state.best_params, state.best_rates = state.params.copy(), state.rates.copy()
        return state

    def _track_best(self, state: TrainState):
        v = self.validate(state)
        if self.log:
            self.log({"step": state.step, "method": self.config.method, "val_loss": v})
        if v < state.best_val:
            state.best_val = v
            state.best_params, state.best_rates = state.params.copy(), state.rates.copy()


def train(config: TrainerConfig, distribution, model, init: MapperParams, log: Callable | None = None) -> dict:
    """Train one method; returns ``{"params", "rates", "best_val", "family_params"}``.

    ``modelavg_pd`` trains a multi-task mapper per family and averages them
    weighted by family size; its result carries the per-family mappers.
    """
    config.validate()
    if config.method == "modelavg_pd":
        fams = [f for f in FAMILIES if any(t.family == f for t in distribution.train)]
        family_params, sizes = {}, []
        for f in fams:
            tasks = [t for t in distribution.train if t.family == f]
            vals = [t for t in distribution.val if t.family == f]
            sub = Trainer(config, model, tasks, vals, log)
            st = sub.run(sub.init_state(init))
            family_params[f] = st.best_params
            sizes.append(sum(len(t.support) + len(t.query) for t in tasks))
        avg = model_avg([family_params[f] for f in fams], sizes)
        return {"params": avg, "rates": np.full(config.inner_steps, config.alpha_init),
                "family_params": family_params, "sizes": dict(zip(fams, sizes))}
    trainer = Trainer(config, model, distribution.train, distribution.val, log)
    st = trainer.run(trainer.init_state(init))
    return {"params": st.best_params, "rates": st.best_rates, "best_val": st.best_val, "final": st.params}


# --- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, state: TrainState, config: TrainerConfig):
    arrays = {f"p/{k}": v for k, v in state.params.arrays.items()}
    arrays["rates"] = state.rates
    arrays.update({f"o/{k}": np.asarray(v) for k, v in state.optimizer.state().items()})
    if state.best_params is not None:
        arrays.update({f"b/{k}": v for k, v in state.best_params.arrays.items()})
        arrays["best_rates"] = state.best_rates
    meta = {"kind": "trainer", "trainer": asdict(config), "mapper": asdict(state.params.config),
            "epoch": state.epoch, "step": state.step, "best_val": state.best_val,
            "config_hash": config_hash(asdict(config))}
    save_arrays(path, meta, arrays)


def load_checkpoint(path) -> tuple[TrainState, TrainerConfig]:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "trainer":
        raise ValueError(f"{path} is not a trainer checkpoint")
    config = TrainerConfig(**meta["trainer"])
    mcfg = MapperConfig(**meta["mapper"])
    params = MapperParams(mcfg, {k[2:]: v for k, v in arrays.items() if k.startswith("p/")})
    opt = make_optimizer(config.outer_optimizer, config.beta)
    opt.load({k[2:]: v for k, v in arrays.items() if k.startswith("o/")} or {"t": 0})
    best = {k[2:]: v for k, v in arrays.items() if k.startswith("b/")}
    state = TrainState(params, arrays["rates"], opt, meta["epoch"], meta["step"], meta["best_val"],
                       MapperParams(mcfg, best) if best else None, arrays.get("best_rates"))
    return state, config
