import numpy as np
import pytest

from qpi import QuestionPair, build_vocab

SAMPLE_PAIRS = [
    QuestionPair("How can I be a good geologist?", "What should I do to be a great geologist?", 1),
    QuestionPair("What are some good rap songs to dance to?", "What are some of the best rap songs?", 0),
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sample_pairs():
    return list(SAMPLE_PAIRS)


@pytest.fixture
def sample_vocab():
    return build_vocab(q for p in SAMPLE_PAIRS for q in (p.question_a, p.question_b))


def synthetic_vocab():
    from qpi.synthetic import paraphrase_corpus, separable_pairs

    texts = [q for p in paraphrase_corpus(400, seed=7) + separable_pairs(64) for q in (p.question_a, p.question_b)]
    texts += [q for p in SAMPLE_PAIRS for q in (p.question_a, p.question_b)]
    return build_vocab(texts)


def tiny_model(setup="ma", head="cnn", seed=0, vocab=None, **overrides):
    from qpi.config import tiny_config
    from qpi.pipelines import ParaphraseModel

    vocab = vocab or synthetic_vocab()
    cfg = tiny_config(setup, head, vocab_size=len(vocab), **overrides)
    return ParaphraseModel(cfg, vocab, seed=seed).eval()


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, title, ok, detail="", informational=False):
    """Print a one-line verdict and keep it for the end-of-run summary."""
    verdict = "INFO" if informational else ("PASS" if ok else "FAIL")
    line = f"[{verdict}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
