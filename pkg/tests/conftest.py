import random

import pytest

from rule_kit.preference import PredictionRecord

# Answer vocabulary with the label a human reads off each string; lets the
# naive oracles below score answers without calling normalize_answer.
ANSWER_LABELS = {
    "Yes": "yes",
    "yes.": "yes",
    "Yes, there is a nodule.": "yes",
    "YES": "yes",
    "I think yes": "yes",
    "No": "no",
    "no": "no",
    "No, the lungs are clear.": "no",
    "Definitely no.": "no",
    "The image is unclear.": "unknown",
    "Maybe yes, maybe no.": "unknown",
    "": "unknown",
}


def random_records(n, ks=(1, 2, 3, 4, 5), seed=0):
    rng = random.Random(seed)
    vocab = list(ANSWER_LABELS)
    out = []
    for i in range(n):
        out.append(PredictionRecord(
            id=f"r{i}",
            question=f"question {i}",
            ground_truth=rng.choice(["yes", "no"]),
            base_answer=rng.choice(vocab),
            rag_answers={k: rng.choice(vocab) for k in ks},
            context=tuple(f"ctx{i}-{j}" for j in range(rng.randint(0, 6))),
        ))
    return out


@pytest.fixture
def records_1000():
    return random_records(1000, seed=1234)


# One line per acceptance criterion, filled in by tests/test_acceptance.py.
ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
