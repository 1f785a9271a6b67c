"""Input checks shared by the estimator wrappers and the CLI."""

from __future__ import annotations

import numbers

from essen.data.datasets import EntailExample, PairJudgeExample, RefResExample

EXAMPLE_TYPES = {EntailExample: "entail", PairJudgeExample: "pairjudge", RefResExample: "refres"}


def check_positive_int(value, name: str, allow_zero: bool = False) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value}")
    return int(value)


def check_texts(texts) -> list[str]:
    if isinstance(texts, str):
        raise TypeError("expected a sequence of strings, got a single string")
    texts = list(texts)
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise TypeError(f"item {i} is {type(t).__name__}, expected str")
    return texts


def infer_task(examples) -> str:
    """The single task shared by every example in ``examples``."""
    tasks = {EXAMPLE_TYPES.get(type(ex)) for ex in examples}
    if None in tasks:
        raise TypeError("examples must be EntailExample, PairJudgeExample or RefResExample")
    if len(tasks) != 1:
        raise ValueError(f"examples mix tasks: {sorted(tasks)}")
    return tasks.pop()


def check_examples(examples, task: str | None = None) -> tuple[list, str]:
    examples = list(examples)
    if not examples:
        raise ValueError("expected at least one example")
    found = infer_task(examples)
    if task is not None and found != task:
        raise ValueError(f"expected {task} examples, got {found}")
    return examples, found


def check_targets(examples, y) -> None:
    """``y`` is optional; if given it must agree with the examples' own labels."""
    if y is None:
        return
    y = list(y)
    if len(y) != len(examples):
        raise ValueError(f"y has {len(y)} entries for {len(examples)} examples")
    for i, (ex, t) in enumerate(zip(examples, y)):
        if int(t) != ex.target:
            raise ValueError(f"y[{i}]={t} disagrees with the example label {ex.target}")
