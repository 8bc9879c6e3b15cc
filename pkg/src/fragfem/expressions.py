"""Small arithmetic expression language for kernels and exact solutions.

Grammar (EBNF, also documented in docs/expression_grammar.md):

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := '-' factor | power
    power  := base ('^' factor)?
    base   := NUMBER | IDENT | '(' expr ')' | 'exp' '(' expr ')'

Identifiers are limited to x1, x2, x3, y1, y2, y3 and t.  Binary
+ - * / associate to the left, ^ to the right, and ^ binds tighter
than unary minus (so -x1^2 means -(x1^2)).

Trees are plain nested tuples: ("num", v), ("var", name), ("neg", a),
("exp", a) and ("add"|"sub"|"mul"|"div"|"pow", a, b).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError

IDENTIFIERS = ("x1", "x2", "x3", "y1", "y2", "y3", "t")

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(source):
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            if source[pos:].strip() == "":
                break
            raise ParseError(f"unexpected character {source[pos]!r}", column=pos + 1)
        pos = m.end()
        col = m.start(m.lastgroup) + 1
        if m.lastgroup == "num":
            tokens.append(("num", m.group("num"), col))
        elif m.lastgroup == "name":
            name = m.group("name")
            if name == "exp":
                tokens.append(("func", name, col))
            elif name in IDENTIFIERS:
                tokens.append(("ident", name, col))
            else:
                raise ParseError(f"unknown identifier {name!r}", column=col)
        else:
            tokens.append(("op", m.group("op"), col))
    tokens.append(("end", "", len(source) + 1))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op):
        kind, val, col = self.take()
        if kind != "op" or val != op:
            raise ParseError(f"expected {op!r}, found {val or 'end of input'!r}",
                             column=col)

    def expr(self):
        node = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.take()
                rhs = self.term()
                node = ("add" if val == "+" else "sub", node, rhs)
            else:
                return node

    def term(self):
        node = self.factor()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "*/":
                self.take()
                rhs = self.factor()
                node = ("mul" if val == "*" else "div", node, rhs)
            else:
                return node

    def factor(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return ("neg", self.factor())
        return self.power()

    def power(self):
        node = self.base()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.take()
            return ("pow", node, self.factor())
        return node

    def base(self):
        kind, val, col = self.take()
        if kind == "num":
            return ("num", float(val))
        if kind == "ident":
            return ("var", val)
        if kind == "func":
            self.expect_op("(")
            inner = self.expr()
            self.expect_op(")")
            return ("exp", inner)
        if kind == "op" and val == "(":
            inner = self.expr()
            self.expect_op(")")
            return inner
        raise ParseError(f"unexpected token {val or 'end of input'!r}", column=col)


def _eval(node, env, expfn):
    op = node[0]
    if op == "num":
        return node[1]
    if op == "var":
        try:
            return env[node[1]]
        except KeyError:
            raise ValidationError(f"expression needs a value for {node[1]!r}") from None
    if op == "neg":
        return -_eval(node[1], env, expfn)
    if op == "exp":
        return expfn(_eval(node[1], env, expfn))
    a = _eval(node[1], env, expfn)
    b = _eval(node[2], env, expfn)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        return a / b
    return a ** b


# precedence levels used by the printer; a child is parenthesized when
# its own level is below what its position requires
_LEVEL = {"add": 1, "sub": 1, "mul": 2, "div": 2, "neg": 3, "pow": 4,
          "num": 5, "var": 5, "exp": 5}


def _fmt_num(v):
    if v == math.floor(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def _print(node, need):
    op = node[0]
    lvl = _LEVEL[op]
    if op == "num":
        s = _fmt_num(node[1])
    elif op == "var":
        s = node[1]
    elif op == "exp":
        s = f"exp({_print(node[1], 1)})"
    elif op == "neg":
        s = "-" + _print(node[1], 3)
    elif op == "pow":
        s = _print(node[1], 5) + "^" + _print(node[2], 3)
    else:
        sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[op]
        # left associativity: a right-nested operand needs parens to
        # reparse into the same tree
        s = _print(node[1], lvl) + sym + _print(node[2], lvl + 1)
    if lvl < need:
        return "(" + s + ")"
    return s


def _is_const(node, value=None):
    if node[0] != "num":
        return False
    return value is None or node[1] == value


def _num(v):
    if v < 0:
        return ("neg", ("num", -v))
    return ("num", float(v))


def _add(a, b):
    if _is_const(a) and _is_const(b):
        return _num(a[1] + b[1])
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return ("add", a, b)


def _sub(a, b):
    if _is_const(a) and _is_const(b):
        return _num(a[1] - b[1])
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return ("neg", b)
    return ("sub", a, b)


def _mul(a, b):
    if _is_const(a) and _is_const(b):
        return _num(a[1] * b[1])
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ("num", 0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return ("mul", a, b)


def _div(a, b):
    if _is_const(a, 0.0):
        return ("num", 0.0)
    if _is_const(b, 1.0):
        return a
    return ("div", a, b)


def _diff(node, var):
    op = node[0]
    if op == "num":
        return ("num", 0.0)
    if op == "var":
        return ("num", 1.0) if node[1] == var else ("num", 0.0)
    if op == "neg":
        d = _diff(node[1], var)
        return ("num", 0.0) if _is_const(d, 0.0) else ("neg", d)
    if op == "exp":
        return _mul(("exp", node[1]), _diff(node[1], var))
    a, b = node[1], node[2]
    da, db = _diff(a, var), _diff(b, var)
    if op == "add":
        return _add(da, db)
    if op == "sub":
        return _sub(da, db)
    if op == "mul":
        return _add(_mul(da, b), _mul(a, db))
    if op == "div":
        return _div(_sub(_mul(da, b), _mul(a, db)), ("pow", b, ("num", 2.0)))
    # power: only constant exponents are differentiable in this grammar
    # (there is no log), which covers every bundled expression
    if not _is_const(db, 0.0):
        raise ValidationError("cannot differentiate a^b with a non-constant exponent")
    expo = _eval(b, {}, math.exp)
    return _mul(_mul(("num", float(expo)), ("pow", a, _num(expo - 1.0))), da)


def _subs(node, mapping):
    op = node[0]
    if op == "num":
        return node
    if op == "var":
        return mapping.get(node[1], node)
    if op in ("neg", "exp"):
        return (op, _subs(node[1], mapping))
    return (op, _subs(node[1], mapping), _subs(node[2], mapping))


def _free(node, out):
    op = node[0]
    if op == "var":
        out.add(node[1])
    elif op in ("neg", "exp"):
        _free(node[1], out)
    elif op != "num":
        _free(node[1], out)
        _free(node[2], out)


def _source(node):
    """Overparenthesized Python source, valid for scalars and arrays."""
    op = node[0]
    if op == "num":
        return repr(node[1])
    if op == "var":
        return node[1]
    if op == "neg":
        return f"(-{_source(node[1])})"
    if op == "exp":
        return f"exp({_source(node[1])})"
    sym = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "**"}[op]
    return f"({_source(node[1])}{sym}{_source(node[2])})"


@dataclass(frozen=True)
class KernelExpression:
    """Parsed expression over x1..x3, y1..y3 and t."""

    tree: tuple

    def __call__(self, **env):
        return self.evaluate(env)

    def evaluate(self, env):
        """Evaluate with a dict of scalars or numpy arrays."""
        expfn = np.exp if any(isinstance(v, np.ndarray) for v in env.values()) else math.exp
        return _eval(self.tree, env, expfn)

    def to_string(self):
        return _print(self.tree, 1)

    def diff(self, var: str) -> "KernelExpression":
        if var not in IDENTIFIERS:
            raise ValidationError(f"cannot differentiate with respect to {var!r}")
        return KernelExpression(_diff(self.tree, var))

    def subs(self, mapping: dict) -> "KernelExpression":
        """Substitute identifiers by identifiers or whole expressions."""
        m = {}
        for k, v in mapping.items():
            if isinstance(v, KernelExpression):
                m[k] = v.tree
            elif isinstance(v, str):
                m[k] = ("var", v)
            else:
                m[k] = _num(float(v))
        return KernelExpression(_subs(self.tree, m))

    def free_identifiers(self):
        out = set()
        _free(self.tree, out)
        return out

    def to_python_source(self):
        """Expression body as Python source (uses ``exp`` and ``**``)."""
        return _source(self.tree)

    def __str__(self):
        return self.to_string()


def parse_expression(source: str) -> KernelExpression:
    """Parse ``source`` into a :class:`KernelExpression`.

    Raises :class:`~fragfem.errors.ParseError` with a 1-based column on
    malformed input or unknown identifiers.  parse -> print -> parse is
    a fixed point of the tree.
    """
    if not isinstance(source, str) or source.strip() == "":
        raise ParseError("empty expression")
    parser = _Parser(_tokenize(source))
    tree = parser.expr()
    kind, val, col = parser.peek()
    if kind != "end":
        raise ParseError(f"trailing input starting at {val!r}", column=col)
    return KernelExpression(tree)
