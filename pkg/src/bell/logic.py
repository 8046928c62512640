"""Tiny propositional logic: parser, inference-rule closure, English rendering.

Backs the logic-injection technique's local extension phase. The grammar is

    expr     := 'if' expr 'then' expr | or_expr ('->' expr)?
    or_expr  := and_expr (('|' | 'or') and_expr)*
    and_expr := neg_expr (('&' | 'and') neg_expr)*
    neg_expr := ('~' | 'not') neg_expr | atom | '(' expr ')'

with '->' right-associative, precedence ~ > & > | > ->, expressions
separated by ';'. Word connectives (if/then, not, and, or) are accepted so
that the English rendering produced by translate() parses back to the same
propositions. Atoms match [a-zA-Z_][a-zA-Z0-9_]* and may not be keywords.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Union

MAX_PARSE_DEPTH = 32
MAX_ORACLE_ATOMS = 16
DEFAULT_EXTENSION_BUDGET = 16

_KEYWORDS = ("if", "then", "not", "and", "or")
_ATOM_RE = re.compile(r"[a-zA-Z_][a-zA-Z0-9_]*")


@dataclass(frozen=True)
class Atom:
    name: str


@dataclass(frozen=True)
class Not:
    operand: "Proposition"


@dataclass(frozen=True)
class And:
    left: "Proposition"
    right: "Proposition"


@dataclass(frozen=True)
class Or:
    left: "Proposition"
    right: "Proposition"


@dataclass(frozen=True)
class Implies:
    antecedent: "Proposition"
    consequent: "Proposition"


Proposition = Union[Atom, Not, And, Or, Implies]


@dataclass(frozen=True)
class ParseError:
    position: int
    message: str

    def __str__(self) -> str:
        return f"at {self.position}: {self.message}"


@dataclass(frozen=True)
class ParseResult:
    propositions: tuple[Proposition, ...]
    errors: tuple[ParseError, ...]


def normalize(prop: Proposition) -> Proposition:
    """Eliminate double negation everywhere, giving the canonical form used
    for syntactic deduplication."""
    if isinstance(prop, Atom):
        return prop
    if isinstance(prop, Not):
        inner = normalize(prop.operand)
        if isinstance(inner, Not):
            return inner.operand
        return Not(inner)
    if isinstance(prop, And):
        return And(normalize(prop.left), normalize(prop.right))
    if isinstance(prop, Or):
        return Or(normalize(prop.left), normalize(prop.right))
    return Implies(normalize(prop.antecedent), normalize(prop.consequent))


def negate(prop: Proposition) -> Proposition:
    return normalize(Not(prop))


class _Token:
    __slots__ = ("kind", "text", "pos")

    def __init__(self, kind: str, text: str, pos: int):
        self.kind = kind
        self.text = text
        self.pos = pos


def _tokenize(text: str) -> tuple[list[_Token], list[ParseError]]:
    tokens: list[_Token] = []
    errors: list[ParseError] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if text.startswith("->", i):
            tokens.append(_Token("->", "->", i))
            i += 2
            continue
        if ch in "~&|();":
            tokens.append(_Token(ch, ch, i))
            i += 1
            continue
        m = _ATOM_RE.match(text, i)
        if m:
            word = m.group(0)
            kind = word.lower() if word.lower() in _KEYWORDS else "atom"
            tokens.append(_Token(kind, word, i))
            i = m.end()
            continue
        errors.append(ParseError(i, f"unexpected character {ch!r}"))
        i += 1
    return tokens, errors


class _SyntaxError(Exception):
    def __init__(self, position: int, message: str):
        super().__init__(message)
        self.position = position
        self.message = message


class _Parser:
    def __init__(self, tokens: list[_Token], end_pos: int):
        self.tokens = tokens
        self.i = 0
        self.end_pos = end_pos

    def peek(self) -> _Token | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def next(self) -> _Token:
        tok = self.peek()
        if tok is None:
            raise _SyntaxError(self.end_pos, "unexpected end of expression")
        self.i += 1
        return tok

    def expect(self, kind: str) -> _Token:
        tok = self.peek()
        if tok is None or tok.kind != kind:
            pos = tok.pos if tok else self.end_pos
            found = repr(tok.text) if tok else "end of expression"
            raise _SyntaxError(pos, f"expected {kind!r}, found {found}")
        return self.next()

    def parse_expression(self, depth: int = 0) -> Proposition:
        if depth > MAX_PARSE_DEPTH:
            tok = self.peek()
            raise _SyntaxError(tok.pos if tok else self.end_pos, "expression nested too deeply")
        tok = self.peek()
        if tok is not None and tok.kind == "if":
            self.next()
            antecedent = self.parse_expression(depth + 1)
            self.expect("then")
            consequent = self.parse_expression(depth + 1)
            return Implies(antecedent, consequent)
        left = self.parse_or(depth + 1)
        tok = self.peek()
        if tok is not None and tok.kind == "->":
            self.next()
            right = self.parse_expression(depth + 1)  # right-associative
            return Implies(left, right)
        return left

    def parse_or(self, depth: int) -> Proposition:
        if depth > MAX_PARSE_DEPTH:
            tok = self.peek()
            raise _SyntaxError(tok.pos if tok else self.end_pos, "expression nested too deeply")
        node = self.parse_and(depth + 1)
        while True:
            tok = self.peek()
            if tok is None or tok.kind not in ("|", "or"):
                return node
            self.next()
            node = Or(node, self.parse_and(depth + 1))

    def parse_and(self, depth: int) -> Proposition:
        if depth > MAX_PARSE_DEPTH:
            tok = self.peek()
            raise _SyntaxError(tok.pos if tok else self.end_pos, "expression nested too deeply")
        node = self.parse_negation(depth + 1)
        while True:
            tok = self.peek()
            if tok is None or tok.kind not in ("&", "and"):
                return node
            self.next()
            node = And(node, self.parse_negation(depth + 1))

    def parse_negation(self, depth: int) -> Proposition:
        if depth > MAX_PARSE_DEPTH:
            tok = self.peek()
            raise _SyntaxError(tok.pos if tok else self.end_pos, "expression nested too deeply")
        tok = self.peek()
        if tok is not None and tok.kind in ("~", "not"):
            self.next()
            return Not(self.parse_negation(depth + 1))
        return self.parse_primary(depth + 1)

    def parse_primary(self, depth: int) -> Proposition:
        tok = self.next()
        if tok.kind == "atom":
            return Atom(tok.text)
        if tok.kind == "(":
            inner = self.parse_expression(depth + 1)
            self.expect(")")
            return inner
        if tok.kind == "if":
            # 'if' handled in parse_expression; reaching it here means an
            # implication appeared where a tighter-binding operand belongs.
            raise _SyntaxError(tok.pos, "'if' expression must be parenthesized here")
        raise _SyntaxError(tok.pos, f"unexpected token {tok.text!r}")


def _split_segments(text: str) -> list[tuple[int, str]]:
    segments = []
    offset = 0
    for part in text.split(";"):
        segments.append((offset, part))
        offset += len(part) + 1
    return segments


def parse(text: str) -> ParseResult:
    """Parse ';'-separated expressions. Segments that fail to parse are
    skipped and reported with their character position in the input."""
    propositions: list[Proposition] = []
    errors: list[ParseError] = []
    for offset, segment in _split_segments(text):
        if not segment.strip():
            continue
        tokens, token_errors = _tokenize(segment)
        if token_errors:
            errors.extend(ParseError(offset + e.position, e.message) for e in token_errors)
            continue
        parser = _Parser(tokens, end_pos=len(segment))
        try:
            prop = parser.parse_expression()
            trailing = parser.peek()
            if trailing is not None:
                raise _SyntaxError(trailing.pos, f"unexpected token {trailing.text!r}")
        except _SyntaxError as exc:
            errors.append(ParseError(offset + exc.position, exc.message))
            continue
        propositions.append(normalize(prop))
    return ParseResult(tuple(propositions), tuple(errors))


def extend(
    props: Iterable[Proposition], max_new: int = DEFAULT_EXTENSION_BUDGET
) -> list[Proposition]:
    """Close the input under contraposition and hypothetical syllogism.

    From a->b derive ~b->~a; from a->b and b->c derive a->c. Rules are
    applied breadth-first until fixpoint or until max_new propositions have
    been added. Output preserves the input order, deduplicated modulo
    syntactic equality after double-negation elimination.
    """
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    out: list[Proposition] = []
    seen: set[Proposition] = set()
    for prop in props:
        canon = normalize(prop)
        if canon not in seen:
            seen.add(canon)
            out.append(canon)
    added = 0
    while added < max_new:
        candidates: list[Proposition] = []
        for prop in out:
            if isinstance(prop, Implies):
                candidates.append(Implies(negate(prop.consequent), negate(prop.antecedent)))
        for first, second in itertools.product(out, out):
            if (
                isinstance(first, Implies)
                and isinstance(second, Implies)
                and first.consequent == second.antecedent
            ):
                candidates.append(Implies(first.antecedent, second.consequent))
        grew = False
        for candidate in candidates:
            if candidate in seen:
                continue
            seen.add(candidate)
            out.append(candidate)
            added += 1
            grew = True
            if added >= max_new:
                break
        if not grew:
            break
    return out


def _render(prop: Proposition) -> str:
    if isinstance(prop, Atom):
        return prop.name
    if isinstance(prop, Not):
        inner = _render(prop.operand)
        if isinstance(prop.operand, (Atom, Not)):
            return f"not {inner}"
        return f"not ({inner})"
    if isinstance(prop, And):
        return f"{_render_tight(prop.left, (Or, Implies))} and {_render_tight(prop.right, (Or, Implies))}"
    if isinstance(prop, Or):
        return f"{_render_tight(prop.left, (Implies,))} or {_render_tight(prop.right, (Implies,))}"
    antecedent = _render_tight(prop.antecedent, (Implies,))
    return f"if {antecedent} then {_render(prop.consequent)}"


def _render_tight(prop: Proposition, parenthesize: tuple[type, ...]) -> str:
    rendered = _render(prop)
    if isinstance(prop, parenthesize):
        return f"({rendered})"
    return rendered


def translate(props: Iterable[Proposition]) -> str:
    """Render propositions as English clauses joined by '; '. The output
    parses back to the same propositions (whitespace aside)."""
    return "; ".join(_render(p) for p in props)


def atoms_of(prop: Proposition) -> frozenset[str]:
    if isinstance(prop, Atom):
        return frozenset((prop.name,))
    if isinstance(prop, Not):
        return atoms_of(prop.operand)
    if isinstance(prop, Implies):
        return atoms_of(prop.antecedent) | atoms_of(prop.consequent)
    return atoms_of(prop.left) | atoms_of(prop.right)


def evaluate(prop: Proposition, assignment: Mapping[str, bool]) -> bool:
    if isinstance(prop, Atom):
        return assignment[prop.name]
    if isinstance(prop, Not):
        return not evaluate(prop.operand, assignment)
    if isinstance(prop, And):
        return evaluate(prop.left, assignment) and evaluate(prop.right, assignment)
    if isinstance(prop, Or):
        return evaluate(prop.left, assignment) or evaluate(prop.right, assignment)
    return (not evaluate(prop.antecedent, assignment)) or evaluate(prop.consequent, assignment)


def entails(premises: Iterable[Proposition], conclusion: Proposition) -> bool:
    """Brute-force truth-table entailment check, limited to 16 atoms."""
    premises = list(premises)
    names = sorted(frozenset().union(atoms_of(conclusion), *(atoms_of(p) for p in premises)))
    if len(names) > MAX_ORACLE_ATOMS:
        raise ValueError(f"entailment oracle supports at most {MAX_ORACLE_ATOMS} atoms")
    for values in itertools.product((False, True), repeat=len(names)):
        assignment = dict(zip(names, values))
        if all(evaluate(p, assignment) for p in premises) and not evaluate(
            conclusion, assignment
        ):
            return False
    return True
