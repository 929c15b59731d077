"""Versioned prompt assets shipped with the package."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

PROMPT_VERSION = "1"

NAMES = (
    "planner_synthesis_plain",
    "planner_synthesis_entity",
    "executor_synthesis",
    "planner_plain",
    "planner_entity",
    "executor",
    "answer_subquestion",
    "decompose",
)


@lru_cache(maxsize=None)
def load(name: str) -> str:
    if name not in NAMES:
        raise KeyError(f"unknown prompt {name!r}")
    text = resources.files("pathsynth.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return text.rstrip("\n")


def planner_synthesis(dialect: str) -> str:
    return load("planner_synthesis_entity" if dialect == "entity_anchored" else "planner_synthesis_plain")


def planner_training(dialect: str) -> str:
    return load("planner_entity" if dialect == "entity_anchored" else "planner_plain")
