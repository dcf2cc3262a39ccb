"""Synthetic visual question answering task.

An "image" is a grid of ``n_vision`` patches. Every patch has a colour and a
shape; ``k_informative`` of them are objects that also carry a kind, and the
rest are kindless background. The question names a kind present exactly
once; the answer is that object's colour followed by its shape.

Sequence: ``[BOS] [vision x N] [ASK] [kind] [ANS] [colour]`` with targets
``[colour, shape]`` on the two answer rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import SequenceLayout

PAD, BOS, ASK, ANS = 0, 1, 2, 3
N_SPECIAL = 4


class TaskConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    n_vision: int = 36
    k_informative: int = 3
    n_kinds: int = 4
    n_colors: int = 4
    n_shapes: int = 4
    noise_std: float = 0.1

    def __post_init__(self):
        if self.n_vision < 1:
            raise TaskConfigError("n_vision must be positive")
        if not 1 <= self.k_informative <= self.n_vision:
            raise TaskConfigError(f"k_informative={self.k_informative} outside [1, n_vision={self.n_vision}]")
        if self.n_kinds < 2 and self.k_informative > 1:
            raise TaskConfigError("need at least two kinds when several patches are informative")
        if min(self.n_colors, self.n_shapes) < 1:
            raise TaskConfigError("n_colors and n_shapes must be positive")

    @property
    def kind_base(self) -> int:
        return N_SPECIAL

    @property
    def color_base(self) -> int:
        return N_SPECIAL + self.n_kinds

    @property
    def shape_base(self) -> int:
        return N_SPECIAL + self.n_kinds + self.n_colors

    @property
    def vocab_size(self) -> int:
        return N_SPECIAL + self.n_kinds + self.n_colors + self.n_shapes

    @property
    def vision_dim(self) -> int:
        # kind one-hot has an extra "background" slot
        return (self.n_kinds + 1) + self.n_colors + self.n_shapes

    def layout(self) -> SequenceLayout:
        return SequenceLayout(n_system=1, n_vision=self.n_vision, n_question=2, n_answer=2)


@dataclass
class Batch:
    tokens: np.ndarray  # (B, L) int
    vision: np.ndarray  # (B, N, F)
    targets: np.ndarray  # (B, n_answer) int
    target_patch: np.ndarray  # (B,) index of the queried object
    layout: SequenceLayout

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def subset(self, idx) -> "Batch":
        idx = np.atleast_1d(idx)
        return Batch(self.tokens[idx], self.vision[idx], self.targets[idx], self.target_patch[idx], self.layout)


def generate_batch(gen: np.random.Generator, task: TaskConfig, batch_size: int) -> Batch:
    N, K = task.n_vision, task.n_kinds
    layout = task.layout()
    kind = np.full((batch_size, N), K)  # K = background
    color = gen.integers(0, task.n_colors, size=(batch_size, N))
    shape = gen.integers(0, task.n_shapes, size=(batch_size, N))
    query = gen.integers(0, K, size=batch_size)
    target_patch = np.empty(batch_size, dtype=np.int64)
    for b in range(batch_size):
        slots = gen.permutation(N)[: task.k_informative]
        others = np.array([k for k in range(K) if k != query[b]])
        kind[b, slots[0]] = query[b]
        if task.k_informative > 1:
            kind[b, slots[1:]] = gen.choice(others, size=task.k_informative - 1)
        target_patch[b] = slots[0]

    F = task.vision_dim
    vision = gen.normal(0.0, task.noise_std, size=(batch_size, N, F))
    rows = np.arange(batch_size)[:, None]
    cols = np.arange(N)[None, :]
    vision[rows, cols, kind] += 1.0
    vision[rows, cols, K + 1 + color] += 1.0
    vision[rows, cols, K + 1 + task.n_colors + shape] += 1.0

    ans_color = color[np.arange(batch_size), target_patch] + task.color_base
    ans_shape = shape[np.arange(batch_size), target_patch] + task.shape_base
    tokens = np.full((batch_size, layout.length), PAD, dtype=np.int64)
    tokens[:, 0] = BOS
    q = layout.question_span()
    a = layout.answer_span()
    tokens[:, q.start] = ASK
    tokens[:, q.start + 1] = query + task.kind_base
    tokens[:, a.start] = ANS
    tokens[:, a.start + 1] = ans_color
    targets = np.stack([ans_color, ans_shape], axis=1)
    return Batch(tokens, vision, targets, target_patch, layout)


def oracle_answers(tokens: np.ndarray, vision: np.ndarray, task: TaskConfig) -> np.ndarray:
    """Recover the answer tokens from raw patch features and the question token."""
    K = task.n_kinds
    layout = task.layout()
    q = layout.question_span()
    query = tokens[:, q.start + 1] - task.kind_base
    kinds = vision[..., : K + 1].argmax(-1)
    colors = vision[..., K + 1 : K + 1 + task.n_colors].argmax(-1)
    shapes = vision[..., K + 1 + task.n_colors :].argmax(-1)
    out = np.empty((tokens.shape[0], 2), dtype=np.int64)
    for b in range(tokens.shape[0]):
        hits = np.flatnonzero(kinds[b] == query[b])
        if len(hits) != 1:
            raise TaskConfigError(f"example {b}: queried kind appears {len(hits)} times")
        out[b] = colors[b, hits[0]] + task.color_base, shapes[b, hits[0]] + task.shape_base
    return out
