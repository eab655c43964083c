"""Token streams for the backbone warm-up.

Images are replaced by a text region holding the scene caption followed by
padding, laid out exactly where distilled prompts sit later. Three stream
kinds are mixed:

* describe: ``[region] Question: describe Answer: caption <end>``
* qa: a question whose answer is fully determined by region and question:
  the operator or binding label is shown in the region, or the operator is
  named in the question.
* icl: a few examples whose regions hide the operator or label, followed by
  a query; answers of later examples are predictable from earlier ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tasks as tk
from .layout import Chunk, pack, qa_chunks, token_region
from .tasks import VOCAB


@dataclass
class WarmupCorpus:
    seed: int = 0
    region: tuple = (12, 24)
    mix: dict = field(default_factory=lambda: {"describe": 0.3, "qa": 0.5, "icl": 0.2})
    max_icl_examples: int = 4

    def _scene(self, rng, family: str, op=None, binding=None):
        if family == "operator_induction":
            a, b = (int(x) for x in rng.integers(0, 10, 2))
            return tk.operator_scene(a, b, op or str(rng.choice(tk.OPERATORS)))
        if family == "concept_binding":
            cls, label = binding or (int(rng.integers(tk.N_CLASSES)), str(rng.choice(tk.NONSENSE_LABELS)))
            return tk.SymbolicScene(family, {"class_id": cls, "label": label})
        return tk.random_count_scene(rng)

    def _question(self, rng, family, attr=None):
        if family == "count_induction":
            return tk.random_count_question(rng, attr)
        return tk.question_words(family)

    def sequence(self, rng) -> list:
        kinds = list(self.mix)
        kind = kinds[int(rng.choice(len(kinds), p=np.array(list(self.mix.values())) / sum(self.mix.values())))]
        family = str(rng.choice(tk.FAMILIES))
        R = int(rng.integers(self.region[0], self.region[1] + 1))
        if kind == "describe":
            scene = self._scene(rng, family)
            cap = tk.caption_words(scene)
            return [token_region(VOCAB.encode(cap), R)] + qa_chunks(None, VOCAB.encode(["describe"]), VOCAB.encode(cap))
        if kind == "qa":
            scene = self._scene(rng, family)
            if family == "operator_induction" and rng.random() < 0.5:
                # operator named in the question, region shows only "a ? b"
                q = ("calc", scene.payload["op"])
                region = token_region(VOCAB.encode(tk.caption_words(scene)), R)
                return [region] + qa_chunks(None, VOCAB.encode(q), VOCAB.encode(tk.ground_truth(scene, q)))
            q = self._question(rng, family)
            region = token_region(VOCAB.encode(tk.caption_words(scene, reveal=True)), R)
            return [region] + qa_chunks(None, VOCAB.encode(q), VOCAB.encode(tk.ground_truth(scene, q)))
        n = int(rng.integers(2, self.max_icl_examples + 1))
        op = str(rng.choice(tk.OPERATORS))
        labels = [str(x) for x in rng.choice(tk.NONSENSE_LABELS, 2, replace=False)]
        classes = [int(x) for x in rng.choice(tk.N_CLASSES, 2, replace=False)]
        chunks: list[Chunk] = []
        for _ in range(n):
            k = int(rng.integers(2))
            scene = self._scene(rng, family, op=op, binding=(classes[k], labels[k]))
            q = self._question(rng, family)
            chunks.append(token_region(VOCAB.encode(tk.caption_words(scene)), R))
            chunks += qa_chunks(None, VOCAB.encode(q), VOCAB.encode(tk.ground_truth(scene, q)))
        return chunks

    def batch(self, rng, size: int):
        return pack([self.sequence(rng) for _ in range(size)])
