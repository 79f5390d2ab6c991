"""Deterministic string transducer that maps text into a related variety.

A variety is described by an ordered list of rewrite rules plus a whole-word
lexicon. Transduction runs in two stages:

  1. every maximal alphanumeric run that matches a lexicon key is replaced;
  2. one left-to-right pass applies rewrite rules to the result. At each
     position the longest matching rule wins, ties going to the earliest
     listed rule; the cursor then skips past the consumed input, so emitted
     replacements are never rescanned.

Word boundaries are transitions between alphanumeric and non-alphanumeric
codepoints (or the ends of the string), the same notion the lexical
analyzer uses to split tokens.

Rule file grammar (one declaration per line, '#' starts a comment):

    ruleset <id> family <family_id>
    rule "<lhs>" -> "<rhs>" [initial|final|word]
    lex <word> -> <word>
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .corpus import Query, QuerySet
from .errors import (
    DuplicateLexiconKey,
    EmptyLhs,
    EmptyPool,
    IoFailure,
    RuleSyntaxError,
)


class Scope(str, Enum):
    ANYWHERE = "anywhere"
    WORD_INITIAL = "word-initial"
    WORD_FINAL = "word-final"
    WHOLE_WORD = "whole-word"


_SCOPE_KEYWORDS = {
    "initial": Scope.WORD_INITIAL,
    "final": Scope.WORD_FINAL,
    "word": Scope.WHOLE_WORD,
}


@dataclass(frozen=True)
class RewriteRule:
    lhs: str
    rhs: str
    scope: Scope = Scope.ANYWHERE

    def __post_init__(self) -> None:
        if not self.lhs:
            raise EmptyLhs("rewrite rule with empty lhs")
        if self.scope == Scope.ANYWHERE and self.lhs == self.rhs:
            raise ValueError(f"no-op rule {self.lhs!r} -> {self.rhs!r}")


@dataclass(frozen=True)
class VarietyRuleSet:
    ruleset_id: str
    family_id: str
    rules: tuple[RewriteRule, ...] = ()
    lexicon: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class FamilySpec:
    """Recipe for a family of varieties drawn from one shared rule pool."""

    family_id: str
    shared_rule_pool: tuple[RewriteRule, ...]
    sampling_fraction: float
    seed: int
    variety_count: int = 2


_HEADER_RE = re.compile(r"^ruleset\s+(\S+)\s+family\s+(\S+)$")
_RULE_RE = re.compile(r'^rule\s+"([^"]*)"\s*->\s*"([^"]*)"(?:\s+(initial|final|word))?$')
_LEX_RE = re.compile(r"^lex\s+(\S+)\s*->\s*(\S+)$")


def _strip_comment(line: str) -> str:
    # A '#' outside double quotes starts a comment.
    in_quotes = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_quotes = not in_quotes
        elif ch == "#" and not in_quotes:
            return line[:i]
    return line


def parse_ruleset(text: str) -> VarietyRuleSet:
    """Parse rule-file text into a VarietyRuleSet, preserving rule order."""
    header: tuple[str, str] | None = None
    rules: list[RewriteRule] = []
    lexicon: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if m := _HEADER_RE.match(line):
            if header is not None:
                raise RuleSyntaxError(f"line {lineno}: duplicate ruleset header")
            header = (m.group(1), m.group(2))
            continue
        if header is None:
            raise RuleSyntaxError(f"line {lineno}: 'ruleset <id> family <id>' must come first")
        if m := _RULE_RE.match(line):
            lhs, rhs, scope_kw = m.group(1), m.group(2), m.group(3)
            if not lhs:
                raise EmptyLhs(f"line {lineno}: empty lhs")
            scope = _SCOPE_KEYWORDS[scope_kw] if scope_kw else Scope.ANYWHERE
            if scope == Scope.ANYWHERE and lhs == rhs:
                raise RuleSyntaxError(f"line {lineno}: no-op rule {lhs!r} -> {rhs!r}")
            rules.append(RewriteRule(lhs, rhs, scope))
            continue
        if m := _LEX_RE.match(line):
            src, dst = m.group(1), m.group(2)
            if src in lexicon:
                raise DuplicateLexiconKey(f"line {lineno}: duplicate lexicon key {src!r}")
            lexicon[src] = dst
            continue
        raise RuleSyntaxError(f"line {lineno}: unrecognized declaration {line!r}")
    if header is None:
        raise RuleSyntaxError("missing 'ruleset <id> family <id>' header")
    return VarietyRuleSet(header[0], header[1], tuple(rules), lexicon)


def load_ruleset(path: str | Path) -> VarietyRuleSet:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise IoFailure(f"{path} is not valid UTF-8: {e}") from e
    return parse_ruleset(text)


def _apply_lexicon(text: str, lexicon: dict[str, str]) -> str:
    if not lexicon:
        return text
    out: list[str] = []
    i, n = 0, len(text)
    while i < n:
        if text[i].isalnum():
            j = i
            while j < n and text[j].isalnum():
                j += 1
            word = text[i:j]
            out.append(lexicon.get(word, word))
            i = j
        else:
            out.append(text[i])
            i += 1
    return "".join(out)


def _scope_ok(s: str, start: int, end: int, scope: Scope) -> bool:
    if scope == Scope.ANYWHERE:
        return True
    at_initial = start == 0 or not s[start - 1].isalnum()
    at_final = end == len(s) or not s[end].isalnum()
    if scope == Scope.WORD_INITIAL:
        return at_initial
    if scope == Scope.WORD_FINAL:
        return at_final
    return at_initial and at_final


def _apply_rules(s: str, rules: tuple[RewriteRule, ...]) -> str:
    if not rules:
        return s
    out: list[str] = []
    i, n = 0, len(s)
    while i < n:
        best_len = 0
        best_rhs = ""
        for rule in rules:
            length = len(rule.lhs)
            if length <= best_len:
                continue  # earlier rule of the same length keeps priority
            if s.startswith(rule.lhs, i) and _scope_ok(s, i, i + length, rule.scope):
                best_len = length
                best_rhs = rule.rhs
        if best_len == 0:
            out.append(s[i])
            i += 1
        else:
            out.append(best_rhs)
            i += best_len
    return "".join(out)


def transduce(text: str, ruleset: VarietyRuleSet) -> str:
    """Map text into the variety: lexicon pass, then one rewrite pass."""
    return _apply_rules(_apply_lexicon(text, ruleset.lexicon), ruleset.rules)


def transduce_queryset(queries: QuerySet, ruleset: VarietyRuleSet) -> QuerySet:
    """Transduce every query text; ids and order are preserved and the
    language tag is set to the ruleset id."""
    return QuerySet(
        Query(q.query_id, transduce(q.text, ruleset), ruleset.ruleset_id)
        for q in queries
    )


def generate_family(spec: FamilySpec) -> list[VarietyRuleSet]:
    """Generate sibling varieties by sampling the family's shared rule pool.

    Every sibling includes the pool's first rule, which guarantees any two
    siblings overlap in at least one rule at any sampling fraction; the rest
    of each sample is drawn with the seeded generator. Pool order is kept
    within each sibling.
    """
    pool = spec.shared_rule_pool
    if not pool:
        raise EmptyPool(f"family {spec.family_id}: empty rule pool")
    if not 0.0 < spec.sampling_fraction <= 1.0:
        raise ValueError(f"sampling_fraction {spec.sampling_fraction} not in (0, 1]")
    if spec.variety_count < 1:
        raise ValueError("variety_count must be >= 1")
    rng = random.Random(spec.seed)
    n = len(pool)
    size = min(n, max(1, round(spec.sampling_fraction * n)))
    out: list[VarietyRuleSet] = []
    for v in range(spec.variety_count):
        if size == n:
            chosen = list(range(n))
        else:
            chosen = sorted([0] + rng.sample(range(1, n), size - 1))
        out.append(
            VarietyRuleSet(
                ruleset_id=f"{spec.family_id}-v{v}",
                family_id=spec.family_id,
                rules=tuple(pool[i] for i in chosen),
            )
        )
    return out
