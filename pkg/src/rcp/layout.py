"""Token-sequence segmentation: system, vision, question, answer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LayoutError(ValueError):
    pass


class EmptyRegionError(LayoutError):
    pass


@dataclass(frozen=True)
class SequenceLayout:
    n_system: int
    n_vision: int
    n_question: int
    n_answer: int
    q_effective: int | None = None
    pruned: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.q_effective is None:
            object.__setattr__(self, "q_effective", self.n_question)
        for name in ("n_system", "n_vision", "n_question", "n_answer"):
            if getattr(self, name) < 0:
                raise LayoutError(f"{name} must be non-negative")
        if self.n_vision < 1 and not self.pruned:
            raise LayoutError("vision segment is empty")
        if not 1 <= self.q_effective <= self.n_question:
            raise LayoutError(f"q_effective={self.q_effective} outside [1, n_question={self.n_question}]")

    @property
    def length(self) -> int:
        return self.n_system + self.n_vision + self.n_question + self.n_answer

    def vision_span(self) -> range:
        return range(self.n_system, self.n_system + self.n_vision)

    def question_span(self) -> range:
        start = self.n_system + self.n_vision
        return range(start, start + self.n_question)

    def effective_question_span(self) -> range:
        start = self.n_system + self.n_vision
        return range(start, start + self.q_effective)

    def answer_span(self) -> range:
        start = self.n_system + self.n_vision + self.n_question
        return range(start, start + self.n_answer)

    def with_vision(self, n_vision: int) -> "SequenceLayout":
        """Same layout with the vision segment resized (physically pruned sequences)."""
        return SequenceLayout(self.n_system, n_vision, self.n_question, self.n_answer, self.q_effective, pruned=True)


def build_gate(layout: SequenceLayout) -> np.ndarray:
    """Binary vector over the sequence, 1 exactly on answer positions."""
    if layout.n_answer == 0:
        raise EmptyRegionError("layout has no answer tokens")
    g = np.zeros(layout.length)
    ans = layout.answer_span()
    g[ans.start:ans.stop] = 1.0
    return g


def attention_subblock(attn: np.ndarray, layout: SequenceLayout) -> np.ndarray:
    """Question-to-vision block of ``attn[..., heads, L, L]``.

    Rows are the first ``q_effective`` question positions; columns are the
    vision positions.
    """
    attn = np.asarray(attn)
    if attn.shape[-1] != layout.length or attn.shape[-2] != layout.length:
        raise LayoutError(f"attention of shape {attn.shape} does not match sequence length {layout.length}")
    q = layout.effective_question_span()
    v = layout.vision_span()
    return attn[..., q.start:q.stop, v.start:v.stop]
