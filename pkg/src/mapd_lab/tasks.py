"""Synthetic few-shot task families, scene encoder and meta-task sampling.

Three single-image families are generated from symbolic scenes:

* ``operator_induction``: an image shows ``a ? b``; the hidden operator
  (``+``, ``-`` or ``*``) is shared by every example of an episode.
* ``concept_binding``: 2-way open-ended naming; each episode binds two
  concept classes to two nonsense labels.
* ``count_induction``: count the objects carrying an attribute value.

Scenes are rendered into patch features by :class:`SceneEncoder`, a fixed
seeded random projection standing in for a frozen vision encoder.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

FAMILIES = ("operator_induction", "concept_binding", "count_induction")
OPERATORS = ("+", "-", "*")
ATTRIBUTES = {
    "shape": ("cube", "sphere", "cylinder"),
    "color": ("red", "blue", "green"),
    "size": ("small", "medium", "large"),
    "material": ("rubber", "metal", "glass"),
}
NONSENSE_LABELS = (
    "dax", "blicket", "wug", "fep", "toma", "zup", "kiki", "bouba",
    "gazzer", "modi", "tufa", "pimwit", "zorb", "lorp", "narb", "glorp",
    "fendle", "quib", "snarp", "vonk", "yemp", "drabe", "mib", "plonk",
    "teeb", "jarp", "wox", "flim", "grub", "sklen", "tarn", "bliv",
)


class ConfigurationError(ValueError):
    pass


class SelectionError(ValueError):
    pass


class Vocabulary:
    """Shared token inventory for all families."""

    PAD, END, QUESTION, ANSWER = "<pad>", "<end>", "Question:", "Answer:"

    def __init__(self):
        words = [self.PAD, self.END, self.QUESTION, self.ANSWER,
                 "-", "?", "+", "*", "calc", "name", "describe"]
        words += [str(d) for d in range(10)]
        words += list(ATTRIBUTES)
        words += [v for values in ATTRIBUTES.values() for v in values]
        words += list(NONSENSE_LABELS)
        self.words = tuple(words)
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self):
        return len(self.words)

    def encode(self, words: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.index[w] for w in words)

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.words[i] for i in ids)

    def id(self, word: str) -> int:
        return self.index[word]

    @property
    def pad_id(self) -> int:
        return self.index[self.PAD]

    @property
    def end_id(self) -> int:
        return self.index[self.END]


VOCAB = Vocabulary()


# --- scenes -------------------------------------------------------------------

@dataclass(frozen=True)
class SymbolicScene:
    family: str
    payload: dict

    def to_json(self) -> dict:
        return {"family": self.family, "payload": self.payload}


def apply_operator(op: str, a: int, b: int) -> int:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    raise ConfigurationError(f"unknown operator {op!r}")


def number_words(n: int) -> tuple[str, ...]:
    return (("-",) if n < 0 else ()) + tuple(str(abs(n)))


def class_attributes(class_id: int) -> tuple[str, ...]:
    """Concept classes enumerate the 81 attribute combinations."""
    values = list(itertools.product(*ATTRIBUTES.values()))
    return values[class_id]


N_CLASSES = 3 ** len(ATTRIBUTES)


def validate_scene(scene: SymbolicScene):
    p = scene.payload
    if scene.family == "operator_induction":
        if not (0 <= p["a"] <= 9 and 0 <= p["b"] <= 9) or p["op"] not in OPERATORS:
            raise ConfigurationError(f"invalid operator scene {p}")
    elif scene.family == "concept_binding":
        if not 0 <= p["class_id"] < N_CLASSES or p["label"] not in NONSENSE_LABELS:
            raise ConfigurationError(f"invalid binding scene {p}")
    elif scene.family == "count_induction":
        objs = p["objects"]
        if not 2 <= len(objs) <= 6 or len(set(p["slots"])) != len(objs):
            raise ConfigurationError(f"invalid count scene {p}")
        for obj in objs:
            for (attr, values), v in zip(ATTRIBUTES.items(), obj):
                if v not in values:
                    raise ConfigurationError(f"{v!r} is not a {attr}")
    else:
        raise ConfigurationError(f"unknown family {scene.family!r}")


def ground_truth(scene: SymbolicScene, question: Sequence[str]) -> tuple[str, ...]:
    """Answer words for ``question`` about ``scene`` under the family rule."""
    p = scene.payload
    if scene.family == "operator_induction":
        return number_words(apply_operator(p["op"], p["a"], p["b"]))
    if scene.family == "concept_binding":
        return (p["label"],)
    attr, value = question
    pos = list(ATTRIBUTES).index(attr)
    return number_words(sum(obj[pos] == value for obj in p["objects"]))


def caption_words(scene: SymbolicScene, reveal: bool = False) -> tuple[str, ...]:
    """Text description of what the image shows.

    ``reveal`` adds what a picture cannot show: the operator of an operator
    scene, or the episode label of a binding scene.
    """
    p = scene.payload
    if scene.family == "operator_induction":
        return (str(p["a"]), p["op"] if reveal else "?", str(p["b"]))
    if scene.family == "concept_binding":
        words = class_attributes(p["class_id"])
        return words + ((p["label"],) if reveal else ())
    counts = []
    for pos, values in enumerate(ATTRIBUTES.values()):
        for v in values:
            counts.append(str(sum(obj[pos] == v for obj in p["objects"])))
    return tuple(counts)


def question_words(family: str, attr: str | None = None, value: str | None = None) -> tuple[str, ...]:
    if family == "operator_induction":
        return ("calc",)
    if family == "concept_binding":
        return ("name",)
    return (attr, value)


# --- encoder -----------------------------------------------------------------

@dataclass
class VisualFeatures:
    z_v: np.ndarray
    provenance: str = ""


class SceneEncoder:
    """Deterministic random-projection renderer: scene -> ``[n_patches, d_in]``.

    Each patch row is the sum of a content vector and a fixed spatial code for
    its location, so the features identify where things are even though the
    mapper treats patch rows as an unordered set.
    """

    def __init__(self, d_in: int = 32, n_patches: int = 8, seed: int = 1234, noise: float = 0.05):
        if n_patches < 4:
            raise ConfigurationError("scenes need at least 4 patches")
        self.d_in, self.n_patches, self.seed, self.noise = d_in, n_patches, seed, noise
        rng = np.random.default_rng(seed)
        s = 1.0 / np.sqrt(d_in)
        self.spatial = rng.normal(0, 0.5 * s, (n_patches, d_in))
        self.digits = rng.normal(0, s, (10, d_in))
        self.glyph = rng.normal(0, s, d_in)
        self.background = rng.normal(0, 0.5 * s, d_in)
        self.values = {v: rng.normal(0, s, d_in) for vals in ATTRIBUTES.values() for v in vals}

    def encode(self, scene: SymbolicScene, dtype=np.float32) -> np.ndarray:
        p = scene.payload
        z = np.tile(self.background, (self.n_patches, 1))
        if scene.family == "operator_induction":
            z[0] = self.digits[p["a"]]
            z[1] = self.glyph
            z[2] = self.digits[p["b"]]
        elif scene.family == "concept_binding":
            for i, v in enumerate(class_attributes(p["class_id"])):
                z[i] = self.values[v]
        else:
            for slot, obj in zip(p["slots"], p["objects"]):
                z[slot] = sum(self.values[v] for v in obj)
        z = z + self.spatial
        inst = p.get("instance")
        if inst is not None and self.noise > 0:
            jitter = np.random.default_rng([self.seed, int(inst)]).normal(0, self.noise / np.sqrt(self.d_in), z.shape)
            z = z + jitter
        return z.astype(dtype)


_DEFAULT_ENCODER: SceneEncoder | None = None


def default_encoder() -> SceneEncoder:
    global _DEFAULT_ENCODER
    if _DEFAULT_ENCODER is None:
        _DEFAULT_ENCODER = SceneEncoder()
    return _DEFAULT_ENCODER


def encode_scene(scene: SymbolicScene, encoder: SceneEncoder | None = None) -> VisualFeatures:
    validate_scene(scene)
    enc = encoder or default_encoder()
    return VisualFeatures(enc.encode(scene), provenance=json.dumps(scene.to_json(), sort_keys=True))


# --- examples and episodes ----------------------------------------------------

@dataclass
class ExampleTriple:
    scene: SymbolicScene
    z_v: np.ndarray
    question: tuple[int, ...]
    answer: tuple[int, ...]

    @property
    def question_words(self) -> tuple[str, ...]:
        return VOCAB.decode(self.question)

    @property
    def answer_words(self) -> tuple[str, ...]:
        return VOCAB.decode(self.answer)


def make_example(scene: SymbolicScene, question: Sequence[str], encoder: SceneEncoder | None = None) -> ExampleTriple:
    feats = encode_scene(scene, encoder)
    return ExampleTriple(scene, feats.z_v, VOCAB.encode(question), VOCAB.encode(ground_truth(scene, question)))


@dataclass
class MetaTask:
    family: str
    support: list
    query: list
    seed: int = 0
    rule: dict = field(default_factory=dict)

    @property
    def shots(self) -> int:
        return len(self.support)

    def with_support(self, support: list) -> "MetaTask":
        return replace(self, support=list(support))

    def to_json(self, include_features: bool = False) -> dict:
        def ex(e: ExampleTriple):
            d = {"scene": e.scene.to_json(), "question": list(e.question), "answer": list(e.answer)}
            if include_features:
                d["z_v"] = e.z_v.tolist()
            return d
        return {"family": self.family, "seed": self.seed, "rule": self.rule,
                "support": [ex(e) for e in self.support], "query": [ex(e) for e in self.query]}


def dump_episodes(tasks: Iterable[MetaTask], path, include_features: bool = False):
    with open(path, "w") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_json(include_features), sort_keys=True) + "\n")


def load_episodes(path, encoder: SceneEncoder | None = None) -> list[MetaTask]:
    out = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)

            def ex(e):
                scene = SymbolicScene(e["scene"]["family"], e["scene"]["payload"])
                z = np.asarray(e["z_v"], dtype=np.float32) if "z_v" in e else encode_scene(scene, encoder).z_v
                return ExampleTriple(scene, z, tuple(e["question"]), tuple(e["answer"]))
            out.append(MetaTask(d["family"], [ex(e) for e in d["support"]],
                                [ex(e) for e in d["query"]], d["seed"], d["rule"]))
    return out


def consistent_operators(pairs: Iterable[tuple[int, int, int]]) -> set[str]:
    """Brute-force enumeration of the operators explaining every ``(a, b, result)``."""
    ops = set(OPERATORS)
    for a, b, r in pairs:
        ops = {op for op in ops if apply_operator(op, a, b) == r}
    return ops


def infer_operator(support: Sequence[ExampleTriple]) -> set[str]:
    triples = []
    for e in support:
        words = e.answer_words
        value = -int("".join(words[1:])) if words[0] == "-" else int("".join(words))
        triples.append((e.scene.payload["a"], e.scene.payload["b"], value))
    return consistent_operators(triples)


class Splits:
    """Fixed train/test partitions of operand pairs and concept classes."""

    def __init__(self, seed: int = 7, test_pairs: int = 40, test_classes: int = 21):
        rng = np.random.default_rng(seed)
        pairs = [(a, b) for a in range(10) for b in range(10)]
        order = rng.permutation(len(pairs))
        self.pairs = {"test": [pairs[i] for i in sorted(order[:test_pairs])],
                      "train": [pairs[i] for i in sorted(order[test_pairs:])]}
        classes = rng.permutation(N_CLASSES)
        self.classes = {"test": sorted(int(c) for c in classes[:test_classes]),
                        "train": sorted(int(c) for c in classes[test_classes:])}


SPLITS = Splits()


def _instance(rng) -> int:
    return int(rng.integers(0, 2 ** 31 - 1))


def random_count_scene(rng, n_patches: int = 8) -> SymbolicScene:
    k = int(rng.integers(2, 7))
    slots = sorted(int(s) for s in rng.choice(n_patches, size=k, replace=False))
    objects = [[str(rng.choice(vals)) for vals in ATTRIBUTES.values()] for _ in range(k)]
    return SymbolicScene("count_induction", {"objects": objects, "slots": slots, "instance": _instance(rng)})


def random_count_question(rng, attr: str | None = None, value: str | None = None) -> tuple[str, str]:
    attr = attr or str(rng.choice(list(ATTRIBUTES)))
    value = value or str(rng.choice(ATTRIBUTES[attr]))
    return attr, value


def operator_scene(a: int, b: int, op: str, instance: int | None = None) -> SymbolicScene:
    payload = {"a": int(a), "b": int(b), "op": op}
    if instance is not None:
        payload["instance"] = instance
    return SymbolicScene("operator_induction", payload)


def _operator_support(rng, op: str, shots: int, pool: list, encoder) -> list:
    for _ in range(1000):
        idx = rng.choice(len(pool), size=shots, replace=shots > len(pool))
        pairs = [pool[i] for i in idx]
        if consistent_operators((a, b, apply_operator(op, a, b)) for a, b in pairs) == {op}:
            break
    else:
        raise ConfigurationError("could not draw a disambiguating operator support")
    return [make_example(operator_scene(a, b, op, _instance(rng)), ("calc",), encoder) for a, b in pairs]


def gen_episode(family: str, shots: int, n_query: int, seed: int, split: str = "test",
                encoder: SceneEncoder | None = None, attribute: str | None = None,
                operator: str | None = None) -> MetaTask:
    """Sample one meta-task.

    ``shots`` counts support examples per episode, except for concept
    binding where it counts examples per class (the support holds
    ``2 * shots`` examples). Queries come from ``split``; supports always come
    from the training split.
    """
    if family not in FAMILIES:
        raise ConfigurationError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if shots < 0 or n_query < 0:
        raise ConfigurationError("shots and n_query must be non-negative")
    rng = np.random.default_rng([seed, FAMILIES.index(family)])
    enc = encoder or default_encoder()
    if family == "operator_induction":
        op = operator or str(rng.choice(OPERATORS))
        support = _operator_support(rng, op, shots, SPLITS.pairs["train"], enc) if shots else []
        qpool = SPLITS.pairs[split]
        idx = rng.choice(len(qpool), size=n_query, replace=n_query > len(qpool))
        query = [make_example(operator_scene(*qpool[i], op, _instance(rng)), ("calc",), enc) for i in idx]
        return MetaTask(family, support, query, seed, {"op": op})

    if family == "concept_binding":
        if shots < 1:
            raise ConfigurationError("2-way concept binding needs at least 1 shot per class")
        classes = [int(c) for c in rng.choice(SPLITS.classes[split], size=2, replace=False)]
        support_classes = classes if split == "train" else classes
        labels = [str(x) for x in rng.choice(NONSENSE_LABELS, size=2, replace=False)]

        def ex(k):
            scene = SymbolicScene(family, {"class_id": support_classes[k], "label": labels[k], "instance": _instance(rng)})
            return make_example(scene, ("name",), enc)
        support = [ex(k) for k in range(2) for _ in range(shots)]
        support = [support[i] for i in rng.permutation(len(support))]
        query = [ex(i % 2) for i in range(n_query)]
        return MetaTask(family, support, query, seed, {"classes": classes, "labels": labels})

    attr = attribute or str(rng.choice(list(ATTRIBUTES)))

    def count_ex(a=None, v=None):
        scene = random_count_scene(rng, enc.n_patches)
        return make_example(scene, random_count_question(rng, a, v), enc)
    support = [count_ex() for _ in range(shots)]
    query = [count_ex(attr) for _ in range(n_query)]
    return MetaTask(family, support, query, seed, {"attribute": attr})


def validation_pool(task: MetaTask, size: int, seed: int, encoder: SceneEncoder | None = None) -> list:
    """Training-split examples that share ``task``'s hidden rule.

    Examples identical to a support or query scene are excluded.
    """
    rng = np.random.default_rng([seed, 99])
    enc = encoder or default_encoder()
    seen = {json.dumps(e.scene.payload, sort_keys=True) for e in task.support + task.query}
    out = []
    while len(out) < size:
        if task.family == "operator_induction":
            a, b = SPLITS.pairs["train"][rng.integers(len(SPLITS.pairs["train"]))]
            e = make_example(operator_scene(a, b, task.rule["op"], _instance(rng)), ("calc",), enc)
        elif task.family == "concept_binding":
            k = int(rng.integers(2))
            scene = SymbolicScene(task.family, {"class_id": task.rule["classes"][k],
                                                "label": task.rule["labels"][k], "instance": _instance(rng)})
            e = make_example(scene, ("name",), enc)
        else:
            scene = random_count_scene(rng, enc.n_patches)
            e = make_example(scene, random_count_question(rng, task.rule["attribute"]), enc)
        if json.dumps(e.scene.payload, sort_keys=True) not in seen:
            out.append(e)
    return out


# --- meta-task distribution ---------------------------------------------------

@dataclass
class DistributionConfig:
    families: tuple = FAMILIES
    episodes: dict = field(default_factory=lambda: {f: 140 for f in FAMILIES})
    support: int = 10
    query: int = 10
    val_fraction: float = 0.02
    val_shots: tuple = (1, 2, 4, 5, 8)
    val_query: int = 1
    seed: int = 0


@dataclass
class MetaDistribution:
    train: list
    val: list
    pools: dict

    def examples(self) -> list:
        return [e for t in self.train for e in t.support + t.query]


class _Cycle:
    """Deals items from a pool in shuffled passes so that every item is used."""

    def __init__(self, items: list, rng):
        self.items, self.rng = list(items), rng
        self.order: list = []
        self.used: set = set()

    def take(self) -> object:
        if not self.order:
            self.order = [int(i) for i in self.rng.permutation(len(self.items))]
        i = self.order.pop()
        self.used.add(i)
        return self.items[i]

    @property
    def coverage(self) -> float:
        return len(self.used) / max(len(self.items), 1)


def _family_episodes(family: str, n: int, size: tuple, rng, enc) -> tuple[list, _Cycle]:
    n_support, n_query = size
    tasks = []
    if family == "operator_induction":
        pool = _Cycle(SPLITS.pairs["train"], rng)
        for _ in range(n):
            op = str(rng.choice(OPERATORS))
            pairs = [pool.take() for _ in range(n_support + n_query)]
            sup = pairs[:n_support]
            while sup and consistent_operators((a, b, apply_operator(op, a, b)) for a, b in sup) != {op}:
                sup = sup + [pool.take()]
                sup = sup[1:]
            mk = lambda ab: make_example(operator_scene(ab[0], ab[1], op, _instance(rng)), ("calc",), enc)
            tasks.append(MetaTask(family, [mk(p) for p in sup], [mk(p) for p in pairs[n_support:]],
                                  _instance(rng), {"op": op}))
        return tasks, pool
    if family == "concept_binding":
        pool = _Cycle(SPLITS.classes["train"], rng)
        for _ in range(n):
            c0 = pool.take()
            c1 = pool.take()
            while c1 == c0:
                c1 = pool.take()
            classes = [c0, c1]
            labels = [str(x) for x in rng.choice(NONSENSE_LABELS, size=2, replace=False)]

            def ex(k):
                scene = SymbolicScene(family, {"class_id": classes[k], "label": labels[k], "instance": _instance(rng)})
                return make_example(scene, ("name",), enc)
            sup = [ex(i % 2) for i in range(n_support)]
            qry = [ex(i % 2) for i in range(n_query)]
            sup = [sup[i] for i in rng.permutation(len(sup))]
            tasks.append(MetaTask(family, sup, qry, _instance(rng), {"classes": classes, "labels": labels}))
        return tasks, pool
    scenes = [random_count_scene(rng, enc.n_patches) for _ in range(max(1, n * (n_support + n_query) // 2))]
    pool = _Cycle(scenes, rng)
    for _ in range(n):
        attr = str(rng.choice(list(ATTRIBUTES)))
        sup = [make_example(pool.take(), random_count_question(rng), enc) for _ in range(n_support)]
        qry = [make_example(pool.take(), random_count_question(rng, attr), enc) for _ in range(n_query)]
        tasks.append(MetaTask(family, sup, qry, _instance(rng), {"attribute": attr}))
    return tasks, pool


def build_meta_distribution(config: DistributionConfig, encoder: SceneEncoder | None = None) -> MetaDistribution:
    if not config.families:
        raise ConfigurationError("at least one task family must be enabled")
    enc = encoder or default_encoder()
    rng = np.random.default_rng([config.seed, 2024])
    everything, pools = [], {}
    for family in config.families:
        tasks, pool = _family_episodes(family, int(config.episodes[family]), (config.support, config.query), rng, enc)
        everything.extend(tasks)
        pools[family] = pool
    order = rng.permutation(len(everything))
    everything = [everything[i] for i in order]
    n_val = int(round(config.val_fraction * len(everything)))
    train, val = everything[n_val:], everything[:n_val]
    shots_cycle = itertools.cycle(config.val_shots)
    val = [_as_validation(t, next(shots_cycle), config.val_query) for t in val]
    return MetaDistribution(train, val, pools)


def _as_validation(task: MetaTask, shots: int, n_query: int) -> MetaTask:
    support = task.support[:shots]
    if task.family == "operator_induction":
        # keep the support disambiguating after truncation
        k = shots
        while infer_operator(support) != {task.rule["op"]} and k < len(task.support):
            k += 1
            support = task.support[:k]
    return MetaTask(task.family, support, task.query[:n_query], task.seed, task.rule)


# --- few-shot selection and perturbation --------------------------------------

SELECTION_KINDS = ("random", "same_attribute", "same_pair")


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "random"

    def __post_init__(self):
        if self.kind not in SELECTION_KINDS:
            raise ConfigurationError(f"unknown selection strategy {self.kind!r}")


def select_support(pool: Sequence[ExampleTriple], query: ExampleTriple, strategy: SelectionStrategy,
                   shots: int, seed: int = 0) -> list:
    rng = np.random.default_rng([seed, 31])
    if strategy.kind != "random" and query.scene.family != "count_induction":
        raise ConfigurationError(f"{strategy.kind} selection only applies to count_induction")
    if strategy.kind == "random":
        candidates = list(pool)
    else:
        q_attr, q_value = query.question_words
        if strategy.kind == "same_attribute":
            candidates = [e for e in pool if e.question_words[0] == q_attr]
        else:
            candidates = [e for e in pool if e.question_words == (q_attr, q_value)]
    if len(candidates) < shots:
        raise SelectionError(f"{strategy.kind}: only {len(candidates)} matching examples for {shots} shots")
    idx = rng.permutation(len(candidates))[:shots]
    return [candidates[i] for i in idx]


PERTURBATIONS = ("none", "gaussian_noise", "patch_drop", "patch_shuffle", "feature_mix")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "none"
    magnitude: float = 0.5

    def __post_init__(self):
        if self.kind not in PERTURBATIONS:
            raise ConfigurationError(f"unknown perturbation {self.kind!r}")
        if not 0.0 <= self.magnitude <= 1.0:
            raise ConfigurationError("perturbation magnitude must lie in [0, 1]")


def perturb_support(task: MetaTask, spec: PerturbationSpec, seed: int = 0) -> MetaTask:
    """Feature-space perturbation of support images; queries are untouched."""
    if spec.kind == "none" or (spec.kind in ("gaussian_noise", "patch_drop", "feature_mix") and spec.magnitude == 0):
        return task
    rng = np.random.default_rng([seed, PERTURBATIONS.index(spec.kind)])
    originals = [e.z_v for e in task.support]
    out = []
    for i, e in enumerate(task.support):
        z = e.z_v.copy()
        n = z.shape[0]
        if spec.kind == "gaussian_noise":
            scale = np.sqrt((z ** 2).mean())
            z = z + (spec.magnitude * scale * rng.standard_normal(z.shape)).astype(z.dtype)
        elif spec.kind == "patch_drop":
            k = int(round(spec.magnitude * n))
            z[rng.choice(n, size=k, replace=False)] = 0
        elif spec.kind == "patch_shuffle":
            z = z[rng.permutation(n)]
        else:
            j = int(rng.integers(len(originals) - 1)) if len(originals) > 1 else 0
            j = j + (j >= i) if len(originals) > 1 else i
            lam = rng.uniform(1.0 - spec.magnitude, 1.0)
            z = (lam * z + (1 - lam) * originals[j]).astype(z.dtype)
        out.append(replace(e, z_v=z))
    return task.with_support(out)
