"""Synthetic question-pair generators for smoke tests and desk-scale runs."""

from __future__ import annotations

import numpy as np

from .pipelines import QuestionPair

_POSITIVE_WORDS = ["red", "green", "blue", "yellow", "purple", "orange", "silver", "golden"]
_NEGATIVE_WORDS = ["cat", "dog", "horse", "mouse", "tiger", "camel", "zebra", "otter"]


def separable_pairs(n: int = 32, seed: int = 0) -> list[QuestionPair]:
    """Pairs whose label is readable off the word set: colours -> 1, animals -> 0."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        label = i % 2
        words = _POSITIVE_WORDS if label else _NEGATIVE_WORDS

        def question():
            k = int(rng.integers(3, 6))
            return " ".join(rng.choice(words, size=k)) + " ?"

        pairs.append(QuestionPair(question(), question(), label))
    return pairs


_INTENTS = {
    "become": ["how can i become a good {x} ?", "what should i do to be a great {x} ?",
               "how do i become a successful {x} ?", "what does it take to be a good {x} ?"],
    "learn": ["how do i learn {x} ?", "what is the best way to learn {x} ?",
              "how can i get better at {x} ?", "how should i start learning {x} ?"],
    "recommend": ["what are the best {x} ?", "which {x} are the best ?",
                  "what are some good {x} ?", "can you recommend some good {x} ?"],
    "cost": ["how much does a {x} cost ?", "what is the price of a {x} ?",
             "how expensive is a {x} ?", "what does a {x} usually cost ?"],
}
_SUBJECTS = {
    "become": ["geologist", "doctor", "writer", "teacher", "pilot", "lawyer", "chef", "designer",
               "engineer", "nurse", "painter", "drummer"],
    "learn": ["python", "guitar", "french", "drawing", "chess", "swimming", "calculus", "piano",
              "cooking", "spanish", "drums", "statistics"],
    "recommend": ["rap songs", "movies", "books", "laptops", "podcasts", "games", "novels",
                  "headphones", "restaurants", "phones", "cameras", "albums"],
    "cost": ["car", "house", "wedding", "laptop", "bicycle", "boat", "horse", "camera",
             "watch", "tablet", "sofa", "guitar"],
}


def paraphrase_corpus(n: int, positive_rate: float = 0.37, seed: int = 0) -> list[QuestionPair]:
    """Templated question pairs.

    Duplicates phrase the same intent and subject two different ways.
    Non-duplicates either keep the intent but change the subject, or keep
    the subject but change the intent, so the label depends on matching
    words across the two questions rather than on either one alone.
    """
    rng = np.random.default_rng(seed)
    intents = list(_INTENTS)
    pairs = []
    for _ in range(n):
        intent = intents[rng.integers(len(intents))]
        templates, subjects = _INTENTS[intent], _SUBJECTS[intent]
        x = subjects[rng.integers(len(subjects))]
        ta, tb = rng.choice(len(templates), size=2, replace=False)
        a = templates[ta].format(x=x)
        if rng.random() < positive_rate:
            pairs.append(QuestionPair(a, templates[tb].format(x=x), 1))
        elif rng.random() < 0.5:
            y = subjects[(subjects.index(x) + 1 + rng.integers(len(subjects) - 1)) % len(subjects)]
            pairs.append(QuestionPair(a, templates[tb].format(x=y), 0))
        else:
            other = intents[(intents.index(intent) + 1 + rng.integers(len(intents) - 1)) % len(intents)]
            t2 = _INTENTS[other]
            pairs.append(QuestionPair(a, t2[rng.integers(len(t2))].format(x=x), 0))
    return pairs
