"""Token vocabulary shared by every serialization style.

The vocabulary is closed and versioned: token id = position in the list
returned by `vocabulary()`, and a golden copy lives in docs/vocabulary.txt.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
MASK_TOKENS = ("<mask_0>", "<mask_1>", "<mask_2>")
SEP = "<sep>"
DUTY_OPTIONS_TOKEN = "<duty_options>"
VOLTAGE = "<voltage>"
EFFICIENCY = "<efficiency>"
NUM = "<num>"
SELECT = "<select>"
UNSELECT = "<unselect>"
NO_EDGE = "<no_edge>"
EDGE_1 = "<edge_1>"
EDGE_2 = "<edge_2>"
BOTH_EDGES = "<both_edges>"

EDGE_TOKENS = (NO_EDGE, EDGE_1, EDGE_2, BOTH_EDGES)

PORT_TOKENS = ("VIN", "VOUT", "GND")
DEVICE_TOKENS = tuple(f"{kind}{i}" for kind in ("Sa", "Sb", "C", "L") for i in range(6))
VERTEX_TOKENS = PORT_TOKENS + DEVICE_TOKENS

DIGIT_TOKENS = tuple("0123456789") + (".", "-")

# Frozen instruction words for the text styles (NF/CF/CFDC).
WORD_TOKENS = (
    "generate",
    "a",
    "circuit",
    "with",
    "vertices",
    "that",
    "has",
    "voltage",
    "conversion",
    "ratio",
    "and",
    "efficiency",
    "duty",
    "cycle",
    "connections",
    "(",
    ")",
)


@lru_cache(maxsize=1)
def vocabulary() -> tuple[str, ...]:
    """Deterministic token list; index = token id."""
    vocab = (
        (PAD, BOS, EOS)
        + MASK_TOKENS
        + (
            SEP,
            DUTY_OPTIONS_TOKEN,
            VOLTAGE,
            EFFICIENCY,
            NUM,
            SELECT,
            UNSELECT,
        )
        + EDGE_TOKENS
        + VERTEX_TOKENS
        + DIGIT_TOKENS
        + WORD_TOKENS
    )
    assert len(vocab) == len(set(vocab)), "duplicate token"
    assert len(vocab) < 512
    return vocab


@lru_cache(maxsize=1)
def token_ids() -> dict[str, int]:
    return {tok: i for i, tok in enumerate(vocabulary())}


def vocabulary_hash() -> str:
    return hashlib.sha256("\n".join(vocabulary()).encode()).hexdigest()
