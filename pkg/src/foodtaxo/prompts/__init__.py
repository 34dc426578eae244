"""Versioned prompt templates.

Templates are plain text files rendered with literal string replacement;
JSON braces in them are never interpreted.
"""

import re
from functools import lru_cache
from importlib import resources

TEMPLATE_VERSION = "v1"

STAGE_TEMPLATES = {1: "stage1.txt", 2: "stage2.txt", 3: "stage3.txt"}

# Line prefixes that identify appended recovery and mode instructions.
STRICT_FORMAT_MARKER = "Format:"
CONSTRAINED_CHOICE_MARKER = "Choice:"
MIXED_MARKER = "Items:"
ONE_SHOT_HEADER = "One-shot:"
CANDIDATES_PREFIX = "Valid labels: "


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    text = resources.files(__name__).joinpath(name).read_text(encoding="utf-8")
    return text.rstrip("\n")


def render(template: str, **values: str) -> str:
    if not values:
        return template
    pattern = re.compile("|".join(re.escape("{" + key + "}") for key in values))
    return pattern.sub(lambda m: values[m.group(0)[1:-1]], template)
