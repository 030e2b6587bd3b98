"""A deterministic offline stand-in model for demos and dry runs.

Covers every prompt shape the pipeline produces: annotation prompts are
answered with gold labels, definition-generation prompts with a canned
definition of the requested term, and review prompts confirm the prior
classification. Useful behind the mock backend for end-to-end runs without
network access.
"""

from __future__ import annotations

import json
import re

from .corpus import Corpus
from .errors import GatewayError
from .prompts import extract_json
from .runner import make_gold_rule
from .serialize import SerializationOptions

_TERM = re.compile(r'the term "([^"]+)"', re.IGNORECASE)
_TIPS_LABEL = re.compile(r'distinguish the label "([^"]+)"')


def make_offline_rule(corpus: Corpus, opts: SerializationOptions = SerializationOptions()):
    gold = make_gold_rule(corpus, opts)

    def rule(messages, temperature):
        user = messages[-1].content
        if "Previous classification:" in user:
            prior = extract_json(user)
            review = {key: [value, "confirmed"] for key, value in prior.items()}
            return json.dumps(review, ensure_ascii=False)
        tips = _TIPS_LABEL.search(user)
        if tips:
            label = tips.group(1)
            return (
                f'To assign "{label}", check that the column values are instances '
                f'of {label} rather than of the labels it was confused with.'
            )
        term = _TERM.search(user)
        if term:
            label = term.group(1)
            prefix = "Updated: " if "Update the definition" in user else ""
            return (
                f'{prefix}The label "{label}" annotates columns whose values '
                f"are instances of {label}."
            )
        try:
            return gold(messages, temperature)
        except GatewayError:
            raise GatewayError("offline model: unrecognized prompt shape")

    return rule
