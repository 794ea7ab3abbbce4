"""A minimal arithmetic expression language for scenario files.

Grammar (``^`` binds tighter than unary minus and is right associative)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Evaluation is vectorised: variables may be numpy arrays of any common shape.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

__all__ = ["ExpressionError", "Expression", "parse_expression", "FUNCTIONS"]

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^()]))"
)


class ExpressionError(ValueError):
    """Raised for malformed expressions; ``offset`` is a 0-based character index."""

    def __init__(self, message, offset=None, text=None):
        self.offset = offset
        self.text = text
        where = f" at offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}" + (f" in {text!r}" if text is not None else ""))


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExpressionError(f"unexpected character {text[bad]!r}", bad, text)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


# AST nodes are plain tuples: ("num", value) | ("var", name) | ("call", fn, arg)
# | ("neg", arg) | ("bin", op, lhs, rhs)


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, msg, tok=None):
        tok = tok or self.peek()
        raise ExpressionError(msg, tok[2], self.text)

    def parse(self):
        if self.peek()[0] == "end":
            self.error("empty expression")
        node = self.expr()
        if self.peek()[0] != "end":
            self.error(f"unexpected token {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = ("bin", op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = ("bin", op, node, self.unary())
        return node

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] in ("-", "+"):
            self.take()
            arg = self.unary()
            return ("neg", arg) if tok[1] == "-" else arg
        return self.power()

    def power(self):
        node = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            node = ("bin", "^", node, self.unary())
        return node

    def atom(self):
        tok = self.take()
        kind, val, _ = tok
        if kind == "num":
            return ("num", float(val))
        if kind == "name":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if val not in FUNCTIONS:
                    self.error(f"unknown function {val!r}", tok)
                self.take()
                arg = self.expr()
                if self.peek()[1] != ")":
                    self.error("expected ')'")
                self.take()
                return ("call", val, arg)
            if val in FUNCTIONS:
                self.error(f"function {val!r} needs an argument", tok)
            return ("var", val)
        if kind == "op" and val == "(":
            node = self.expr()
            if self.peek()[1] != ")":
                self.error("expected ')'")
            self.take()
            return node
        self.error(f"unexpected token {val!r}" if kind != "end" else "unexpected end of expression", tok)


def _names(node, acc):
    kind = node[0]
    if kind == "var":
        acc.add(node[1])
    elif kind == "call" or kind == "neg":
        _names(node[-1], acc)
    elif kind == "bin":
        _names(node[2], acc)
        _names(node[3], acc)
    return acc


def _eval(node, env):
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        return env[node[1]]
    if kind == "neg":
        return -_eval(node[1], env)
    if kind == "call":
        return FUNCTIONS[node[1]](_eval(node[2], env))
    op, a, b = node[1], _eval(node[2], env), _eval(node[3], env)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    return np.power(a, b)


@dataclass(frozen=True)
class Expression:
    text: str
    tree: tuple
    names: frozenset

    def __call__(self, **env):
        missing = self.names - env.keys()
        if missing:
            raise ExpressionError(f"undefined variable(s) {sorted(missing)}", None, self.text)
        return _eval(self.tree, env)

    def check_names(self, allowed):
        bad = sorted(self.names - set(allowed))
        if bad:
            raise ExpressionError(
                f"undefined variable {bad[0]!r}", self.text.find(bad[0]), self.text
            )


def parse_expression(text, allowed=None):
    """Parse ``text``; if ``allowed`` is given, reject any other variable name."""
    if not isinstance(text, str):
        text = repr(float(text))
    tree = _Parser(text).parse()
    expr = Expression(text, tree, frozenset(_names(tree, set())))
    if allowed is not None:
        expr.check_names(allowed)
    return expr
