"""Random valid ParsedTurns for round-trip checks."""

from __future__ import annotations

import random

from pathsynth.tags import ENTITY, ParsedTurn, SearchCall

WORDS = ("who", "what", "when", "director", "Ek", "Paheli", "born", "1928", "Żuławski", "is",
         "the", "of", "Houston", "Baptist", "University", "magazine", "LaIsha", "founded",
         "(tennis)", "Q63532193", "[0]", "it's", "&", "Condé", "1,000", "x=y", "a:b")
QUOTE_WORDS = ('"For', 'Woman"', "back\\slash")


def _words(rng: random.Random, lo: int, hi: int, extra=()) -> str:
    pool = WORDS + tuple(extra)
    return " ".join(rng.choice(pool) for _ in range(rng.randint(lo, hi)))


def _think(rng: random.Random, multiline: bool) -> str | None:
    if rng.random() < 0.2:
        return None
    lines = [_words(rng, 1, 8) for _ in range(rng.randint(1, 3) if multiline else 1)]
    return "\n".join(lines)


def random_turn(rng: random.Random, dialect: str) -> ParsedTurn:
    kind = rng.choice(("actions", "actions", "final_answer", "select_answer", "no_info"))
    if kind == "actions":
        calls = []
        for _ in range(rng.randint(1, 4)):
            q = _words(rng, 1, 7, QUOTE_WORDS) + "?"
            if dialect == ENTITY:
                # every call in this dialect names an entity, mostly by candidate index
                if rng.random() < 0.8:
                    calls.append(SearchCall(q, entity_ref=rng.randint(0, 12)))
                else:
                    calls.append(SearchCall(q, entity=_words(rng, 1, 3)))
            else:
                calls.append(SearchCall(q))
        return ParsedTurn(think=_think(rng, True), actions=tuple(calls))
    if kind == "final_answer":
        return ParsedTurn(think=_think(rng, True), answer=_words(rng, 1, 4))
    if kind == "select_answer":
        sel = tuple(sorted(rng.sample(range(10), rng.randint(1, 3))))
        return ParsedTurn(think=_think(rng, False), selected=sel, answer=_words(rng, 2, 9) + ".")
    return ParsedTurn(think=_think(rng, False), no_info=True)
