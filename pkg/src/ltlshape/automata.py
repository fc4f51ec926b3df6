"""Atomic propositions, safety DFAs and the invariant-formula front end.

Letters are subsets of the proposition registry encoded as integer bitsets:
bit ``i`` is set when proposition ``registry.names[i]`` holds.
Formulas use ``G <expr>`` where ``expr`` combines atoms with ``! & | ( )``
and the constants ``true`` / ``false``.
"""

from __future__ import annotations

import json
import re
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import NonTotalTransition, ParseError, UnknownAtom


@dataclass(frozen=True)
class ApRegistry:
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValueError("proposition names must be unique")

    @property
    def width(self) -> int:
        return len(self.names)

    @property
    def n_letters(self) -> int:
        return 1 << len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownAtom(f"proposition {name!r} is not registered") from None

    def letter(self, props: Iterable[str] = ()) -> int:
        bits = 0
        for p in props:
            bits |= 1 << self.index(p)
        return bits

    def props(self, letter: int) -> frozenset:
        return frozenset(p for i, p in enumerate(self.names) if letter >> i & 1)


# propositional expressions --------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(?P<op>[!&|()~])|(?P<atom>[A-Za-z_][A-Za-z0-9_.\-]*))")


class Expr:
    """Propositional formula tree: ('atom', name) | ('const', bool) | ('not', e) | ('and'|'or', a, b)."""

    def __init__(self, node):
        self.node = node

    def atoms(self) -> set:
        out = set()
        stack = [self.node]
        while stack:
            n = stack.pop()
            if n[0] == "atom":
                out.add(n[1])
            elif n[0] != "const":
                stack.extend(n[1:])
        return out

    def evaluate(self, props: frozenset | set) -> bool:
        return _eval(self.node, props)

    def truth_table(self, registry: ApRegistry) -> np.ndarray:
        """Boolean array over all ``2**width`` letters."""
        unknown = self.atoms() - set(registry.names)
        if unknown:
            raise UnknownAtom(f"unregistered propositions: {sorted(unknown)}")
        return np.array([_eval_bits(self.node, registry, w) for w in range(registry.n_letters)], dtype=bool)

    def __str__(self):
        return _fmt(self.node)

    def __repr__(self):
        return f"Expr({self})"


def _eval(n, props):
    kind = n[0]
    if kind == "atom":
        return n[1] in props
    if kind == "const":
        return n[1]
    if kind == "not":
        return not _eval(n[1], props)
    if kind == "and":
        return _eval(n[1], props) and _eval(n[2], props)
    return _eval(n[1], props) or _eval(n[2], props)


def _eval_bits(n, registry, letter):
    kind = n[0]
    if kind == "atom":
        return bool(letter >> registry.index(n[1]) & 1)
    if kind == "const":
        return n[1]
    if kind == "not":
        return not _eval_bits(n[1], registry, letter)
    if kind == "and":
        return _eval_bits(n[1], registry, letter) and _eval_bits(n[2], registry, letter)
    return _eval_bits(n[1], registry, letter) or _eval_bits(n[2], registry, letter)


def _fmt(n):
    kind = n[0]
    if kind == "atom":
        return n[1]
    if kind == "const":
        return "true" if n[1] else "false"
    if kind == "not":
        return f"!{_fmt(n[1])}"
    sym = " & " if kind == "and" else " | "
    return f"({_fmt(n[1])}{sym}{_fmt(n[2])})"


def _tokenize(text: str) -> list[str]:
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character at {pos}: {text[pos:pos + 10]!r}")
        out.append(m.group("op") or m.group("atom"))
        pos = m.end()
    return out


def parse_expr(text: str) -> Expr:
    """Parse a propositional expression (``!`` binds tighter than ``&``, then ``|``)."""
    tokens = _tokenize(text)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def take():
        nonlocal pos
        tok = peek()
        pos += 1
        return tok

    def disj():
        node = conj()
        while peek() == "|":
            take()
            node = ("or", node, conj())
        return node

    def conj():
        node = unary()
        while peek() == "&":
            take()
            node = ("and", node, unary())
        return node

    def unary():
        tok = take()
        if tok is None:
            raise ParseError("unexpected end of formula")
        if tok in ("!", "~"):
            return ("not", unary())
        if tok == "(":
            node = disj()
            if take() != ")":
                raise ParseError("missing ')'")
            return node
        if tok in (")", "&", "|"):
            raise ParseError(f"unexpected {tok!r}")
        if tok == "true":
            return ("const", True)
        if tok == "false":
            return ("const", False)
        return ("atom", tok)

    node = disj()
    if pos != len(tokens):
        raise ParseError(f"trailing input after formula: {tokens[pos:]}")
    return Expr(node)


@dataclass(frozen=True)
class InvariantFormula:
    """``G body``: the propositional ``body`` must hold at every step."""

    body: Expr

    def __str__(self):
        return f"G {self.body}"


def parse_formula(text: str) -> InvariantFormula:
    stripped = text.strip()
    m = re.match(r"^(G|\[\]|□)\s*(.*)$", stripped, re.DOTALL)
    if not m:
        raise ParseError("only invariant formulas 'G <expr>' are supported")
    return InvariantFormula(parse_expr(m.group(2)))


# automata -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SafetyAutomaton:
    """Total DFA over ``2**AP``; a run is accepted while every visited state is in ``accepting``."""

    registry: ApRegistry
    delta: np.ndarray  # [n_states, n_letters] -> state
    initial: int
    accepting: np.ndarray  # bool [n_states]
    state_names: tuple = ()

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=np.int64)
        acc = np.asarray(self.accepting, dtype=bool)
        if delta.ndim != 2 or delta.shape[1] != self.registry.n_letters:
            raise NonTotalTransition("transition table must cover every letter")
        if np.any((delta < 0) | (delta >= delta.shape[0])):
            raise NonTotalTransition("transition target out of range")
        if acc.shape != (delta.shape[0],):
            raise ValueError("accepting mask has wrong length")
        delta.setflags(write=False)
        acc.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "accepting", acc)
        if not self.state_names:
            object.__setattr__(self, "state_names", tuple(f"q{i}" for i in range(delta.shape[0])))

    @property
    def n_states(self) -> int:
        return self.delta.shape[0]

    def step(self, q: int, letter: int) -> int:
        return int(self.delta[q, letter])

    def canonical(self):
        """Reachable part relabelled in BFS order from the initial state (letters ascending)."""
        order = {self.initial: 0}
        queue = deque([self.initial])
        while queue:
            q = queue.popleft()
            for w in range(self.registry.n_letters):
                nq = int(self.delta[q, w])
                if nq not in order:
                    order[nq] = len(order)
                    queue.append(nq)
        inv = sorted(order, key=order.get)
        delta = np.array([[order[int(self.delta[q, w])] for w in range(self.registry.n_letters)] for q in inv])
        return self.registry.names, delta, self.accepting[inv]


def same_structure(a: SafetyAutomaton, b: SafetyAutomaton) -> bool:
    """Isomorphism of the reachable parts (state names ignored)."""
    ra, da, aa = a.canonical()
    rb, db, ab = b.canonical()
    return ra == rb and da.shape == db.shape and bool(np.all(da == db)) and bool(np.all(aa == ab))


def compile_invariant(formula: InvariantFormula | str, registry: ApRegistry) -> SafetyAutomaton:
    """Canonical DFA for ``G phi``: a safe state and an absorbing rejecting sink.

    When ``phi`` holds for every letter the sink is unreachable and is dropped,
    leaving a single accepting state.
    """
    if isinstance(formula, str):
        formula = parse_formula(formula)
    table = formula.body.truth_table(registry)
    if table.all():
        return SafetyAutomaton(registry, np.zeros((1, registry.n_letters)), 0, np.array([True]), ("safe",))
    delta = np.empty((2, registry.n_letters), dtype=np.int64)
    delta[0] = np.where(table, 0, 1)
    delta[1] = 1
    return SafetyAutomaton(registry, delta, 0, np.array([True, False]), ("safe", "sink"))


def dfa_run(aut: SafetyAutomaton, word: Sequence[int]) -> tuple[int, bool]:
    """Final state and acceptance of the run over ``word`` (letters as bitsets)."""
    q = aut.initial
    ok = bool(aut.accepting[q])
    limit = aut.registry.n_letters
    for w in word:
        w = int(w)
        if not 0 <= w < limit:
            raise ValueError(f"letter {w} outside the registry alphabet")
        q = int(aut.delta[q, w])
        ok = ok and bool(aut.accepting[q])
    return q, ok


# file format ----------------------------------------------------------------


def _pattern_letters(pattern, registry: ApRegistry) -> np.ndarray:
    """Letters matched by a ``when`` pattern.

    Accepted forms: ``"*"`` (any letter), a cube string over the registry order
    using ``0``/``1``/``-`` (e.g. ``"1-0"``), or a propositional expression.
    """
    if isinstance(pattern, bool):
        return np.full(registry.n_letters, pattern)
    text = str(pattern).strip()
    if text in ("*", ""):
        return np.ones(registry.n_letters, dtype=bool)
    if registry.width and len(text) == registry.width and set(text) <= set("01-"):
        mask = np.ones(registry.n_letters, dtype=bool)
        letters = np.arange(registry.n_letters)
        for i, ch in enumerate(text):
            if ch != "-":
                mask &= (letters >> i & 1) == int(ch)
        return mask
    return parse_expr(text).truth_table(registry)


def dfa_from_dict(data: dict) -> SafetyAutomaton:
    try:
        registry = ApRegistry(tuple(data.get("ap", [])))
        states = data["states"]
        names = [st["name"] for st in states]
        accepting = [bool(st.get("accepting", False)) for st in states]
        initial_name = data["initial"]
        rows = data["transitions"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed DFA document: {exc}") from exc
    if len(set(names)) != len(names):
        raise ParseError("duplicate state name")
    index = {n: i for i, n in enumerate(names)}
    if initial_name not in index:
        raise ParseError(f"unknown initial state {initial_name!r}")
    delta = np.full((len(names), registry.n_letters), -1, dtype=np.int64)
    for row in rows:
        try:
            src, dst, when = index[row["from"]], index[row["to"]], row.get("when", "*")
        except KeyError as exc:
            raise ParseError(f"transition refers to unknown state {exc}") from exc
        letters = np.flatnonzero(_pattern_letters(when, registry))
        clash = (delta[src, letters] >= 0) & (delta[src, letters] != dst)
        if clash.any():
            raise ParseError(f"nondeterministic transitions from {row['from']!r}")
        delta[src, letters] = dst
    missing = np.argwhere(delta < 0)
    if len(missing):
        q, w = missing[0]
        raise NonTotalTransition(
            f"state {names[q]!r} has no transition for letter {sorted(registry.props(int(w)))}"
        )
    return SafetyAutomaton(registry, delta, index[initial_name], np.array(accepting), tuple(names))


def dfa_to_dict(aut: SafetyAutomaton) -> dict:
    width = aut.registry.width
    rows = []
    for q in range(aut.n_states):
        for w in range(aut.registry.n_letters):
            cube = "".join("1" if w >> i & 1 else "0" for i in range(width)) or "*"
            rows.append({"from": aut.state_names[q], "when": cube, "to": aut.state_names[int(aut.delta[q, w])]})
    return {
        "ap": list(aut.registry.names),
        "states": [{"name": n, "accepting": bool(a)} for n, a in zip(aut.state_names, aut.accepting)],
        "initial": aut.state_names[aut.initial],
        "transitions": rows,
    }


def load_dfa(path) -> SafetyAutomaton:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc)) from exc
    return dfa_from_dict(data)


def save_dfa(aut: SafetyAutomaton, path):
    with open(path, "w") as fh:
        json.dump(dfa_to_dict(aut), fh, indent=1)
