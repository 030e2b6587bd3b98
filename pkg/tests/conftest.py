import json

import pytest

ACCEPTANCE_LINES = {
    "test_criterion_1_cost_table_reproduction":
        "published (tokens, price) pairs reproduce within $0.02",
    "test_criterion_2_breakeven":
        "breakeven_columns(0, 0.007, 47.4, 0.002) == 9480",
    "test_criterion_3_metric_oracle_equivalence":
        "score() matches the brute-force confusion oracle on 50 fixtures",
    "test_criterion_4_majority_vote_oracle":
        "self-consistency vote matches brute force on all 27 outcome triples",
    "test_criterion_5_refinement_loop":
        "refinement is a fixpoint without errors and targets confused labels",
    "test_criterion_6_self_correction_safety":
        "identity review preserves metrics; gold review recovers exactly",
    "test_criterion_7_serialization_golden":
        "fixture table serializes byte-identically to the golden files",
    "test_criterion_8_finetune_set_counts":
        "698 train tables + 50 labels yield 748 multitask records",
    "test_criterion_9_end_to_end_replay":
        "recorded pipeline replays to byte-identical artifacts twice",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            if getattr(report, "when", "call") != "call":
                continue
            name = report.nodeid.split("::")[-1]
            if name in ACCEPTANCE_LINES:
                verdict = "PASS" if report.passed else "FAIL"
                lines.append(f"{verdict} {name}: {ACCEPTANCE_LINES[name]}")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: l.split(":")[0].split("_")[2]):
            terminalreporter.write_line(line)

from coltype.corpus import Corpus, TableDoc, Vocabulary
from coltype.prompts import extract_json
from coltype.serialize import SerializationOptions, column_name, serialize_table


def make_table(table_id, rows, roles, gold, split, domain="Recipe", headers=None):
    return TableDoc(
        table_id=table_id,
        cells=[list(r) for r in rows],
        column_roles=list(roles),
        gold={k: tuple(v) for k, v in gold.items()},
        domain=domain,
        split=split,
        original_headers=headers,
    )


def recipe_tables():
    return [
        make_table(
            "t1",
            [["Pasta Carbonara", "30 min"], ["Miso Soup", "15 min"]],
            ["target", "target"],
            {0: ["RecipeName"], 1: ["Duration"]},
            "train",
        ),
        make_table(
            "t2",
            [
                ["Apple Pie", "A sweet baked dessert with apples"],
                ["Green Salad", "Fresh crisp vegetables tossed lightly"],
            ],
            ["target", "target"],
            {0: ["RecipeName"], 1: ["RecipeDescription"]},
            "train",
        ),
        make_table(
            "t3",
            [["Delicious and easy to make", "45 min"], ["Too salty for my taste", "25 min"]],
            ["target", "target"],
            {0: ["Review"], 1: ["Duration"]},
            "train",
        ),
        make_table(
            "t4",
            [["Slow braised beef with red wine", "Loved it, will cook again"]],
            ["target", "target"],
            {0: ["RecipeDescription"], 1: ["Review"]},
            "train",
        ),
        make_table(
            "v1",
            [["Loved this recipe"], ["Would definitely cook again"]],
            ["target"],
            {0: ["Review"]},
            "validation",
        ),
        make_table(
            "v2",
            [["Slow cooked stew with root vegetables"]],
            ["target"],
            {0: ["RecipeDescription"]},
            "validation",
        ),
        make_table(
            "s1",
            [["Lemon Tart", "50 min"], ["Beef Stew", "120 min"]],
            ["target", "target"],
            {0: ["RecipeName"], 1: ["Duration"]},
            "test",
        ),
        make_table(
            "s2",
            [["Absolutely wonderful dish"], ["Not worth the effort"]],
            ["target"],
            {0: ["Review"]},
            "test",
        ),
    ]


@pytest.fixture
def recipe_corpus():
    vocab = Vocabulary(
        labels=("Duration", "RecipeDescription", "RecipeName", "Review")
    )
    return Corpus(name="recipes", vocabulary=vocab, tables=recipe_tables())


@pytest.fixture
def multi_corpus():
    vocab = Vocabulary(labels=("A", "B", "C"), multi_label=True)
    tables = [
        make_table(
            "m1",
            [["alpha one", "beta two"], ["alpha three", "beta four"]],
            ["target", "target"],
            {0: ["A", "B"], 1: ["B"]},
            "train",
            domain="Demo",
        ),
        make_table(
            "m2",
            [["gamma five"]],
            ["target"],
            {0: ["C"]},
            "test",
            domain="Demo",
        ),
        make_table(
            "m3",
            [["alpha beta", "gamma"]],
            ["target", "target"],
            {0: ["A"], 1: ["B", "C"]},
            "test",
            domain="Demo",
        ),
    ]
    return Corpus(name="multi", vocabulary=vocab, tables=tables)


def gold_review_rule(corpus, opts=SerializationOptions()):
    """Reviewer mock that flips every prior label to gold."""
    serialized = {serialize_table(t, opts): t for t in corpus.tables}

    def rule(messages, temperature):
        user = messages[-1].content
        best, best_pos = None, -1
        for text, table in serialized.items():
            pos = user.find(text)
            if pos > best_pos:
                best_pos, best = pos, table
        assert best is not None, "no known table in reviewer prompt"
        payload = {}
        for index in best.target_columns():
            key = column_name(best, index, opts.mask_headers)
            labels = list(best.gold[index])
            head = labels if corpus.vocabulary.multi_label else labels[0]
            payload[key] = [head, "corrected to the right label"]
        return json.dumps(payload, ensure_ascii=False)

    return rule


def identity_review_rule():
    """Reviewer mock that confirms whatever the first model predicted."""

    def rule(messages, temperature):
        prior = extract_json(messages[-1].content)
        return json.dumps(
            {key: [value, "confirmed"] for key, value in prior.items()},
            ensure_ascii=False,
        )

    return rule
