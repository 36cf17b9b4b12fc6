"""Map tensor names to (layer index, category) via regex rules.

A rules file has one rule per line: a regular expression, whitespace,
then a category.  The expression is matched against the full tensor
name; its first capturing group, when present and participating in the
match, is the decimal layer index.  The first matching rule decides the
category.  Names matching no rule become globals with category
``other``.  Two matching rules that capture different layer indices for
the same name are an error.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ..errors import AmbiguousRule, NonContiguousLayers
from ..tensor_store import Checkpoint

SENTINEL_GLOBAL = -1

CATEGORIES = ("attention", "mlp", "embedding", "norm", "head", "other")

DEFAULT_RULES_RESOURCE = "llama_qwen.rules"


@dataclass(frozen=True)
class _Rule:
    pattern: re.Pattern
    category: str


class PartitionRules:
    """An ordered list of name-matching rules."""

    def __init__(self, rules: list[_Rule]):
        self.rules = rules

    @classmethod
    def from_text(cls, text: str) -> "PartitionRules":
        rules = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.rsplit(None, 1)
            if len(parts) != 2:
                raise ValueError(f"rules line {lineno}: expected '<regex> <category>'")
            pattern, category = parts
            if category not in CATEGORIES:
                raise ValueError(
                    f"rules line {lineno}: unknown category {category!r}; "
                    f"expected one of {', '.join(CATEGORIES)}"
                )
            rules.append(_Rule(re.compile(pattern), category))
        return cls(rules)

    @classmethod
    def from_file(cls, path: str | Path) -> "PartitionRules":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "PartitionRules":
        text = resources.files(__package__).joinpath(DEFAULT_RULES_RESOURCE).read_text("utf-8")
        return cls.from_text(text)


@dataclass
class LayerMap:
    """Total assignment of tensor names to (layer, category).

    Globals carry the layer index ``SENTINEL_GLOBAL``; real layer
    indices form a contiguous 0..L-1 range.
    """

    entries: dict[str, tuple[int, str]]

    def __post_init__(self) -> None:
        seen = sorted({layer for layer, _ in self.entries.values() if layer != SENTINEL_GLOBAL})
        if seen and seen != list(range(seen[-1] + 1)):
            raise NonContiguousLayers(
                f"layer indices {seen} do not form a contiguous range starting at 0"
            )
        self._layers = seen

    @property
    def n_layers(self) -> int:
        return len(self._layers)

    def layer(self, name: str) -> int:
        return self.entries[name][0]

    def category(self, name: str) -> str:
        return self.entries[name][1]

    def names_for_layer(self, layer: int) -> list[str]:
        return sorted(n for n, (l, _) in self.entries.items() if l == layer)

    @property
    def global_names(self) -> list[str]:
        return self.names_for_layer(SENTINEL_GLOBAL)


def partition_layers(ckpt: Checkpoint, rules: PartitionRules) -> LayerMap:
    """Assign every tensor in the checkpoint a (layer, category) pair."""
    entries: dict[str, tuple[int, str]] = {}
    for name in sorted(ckpt.tensors):
        indices: set[int] = set()
        category: str | None = None
        for rule in rules.rules:
            m = rule.pattern.fullmatch(name)
            if m is None:
                continue
            if category is None:
                category = rule.category
            if m.lastindex:
                group = m.group(1)
                if group is not None:
                    indices.add(int(group))
        if len(indices) > 1:
            raise AmbiguousRule(
                f"tensor {name!r} matches rules with conflicting layer indices {sorted(indices)}"
            )
        layer = indices.pop() if indices else SENTINEL_GLOBAL
        entries[name] = (layer, category or "other")
    return LayerMap(entries)
