"""Expression DSL: AST, parser, evaluator and symbolic differentiation.

The node set is deliberately small: constants (exact rationals or decimals),
variables, sums, products, nonnegative integer powers, sin, cos, and exp.
Every node is entire as a function of its (complexified) variables, and the
trig/exp nodes have closed-form derivatives inside the same node set, so
exact first partials are always available.

Graphing functions reject ``exp`` (its derivative growth is not polynomially
bounded); test functions in the zeta/eta variables accept it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Union

import numpy as np

Number = Union[int, float, complex, np.ndarray]


class DslError(ValueError):
    """Malformed DSL source; ``pos`` is the character offset of the fault."""

    def __init__(self, message: str, pos: int | None = None):
        if pos is not None:
            message = f"{message} (at position {pos})"
        super().__init__(message)
        self.pos = pos


def int_pow(base: Number, k: int) -> Number:
    """Binary exponentiation, exact for k == 0 and stable for complex bases."""
    if k < 0:
        raise ValueError("negative exponent")
    result = None
    acc = base
    while k:
        if k & 1:
            result = acc if result is None else result * acc
        acc = acc * acc
        k >>= 1
    if result is None:
        return np.ones_like(base) if isinstance(base, np.ndarray) else 1.0
    return result


# ---------------------------------------------------------------------------
# AST nodes
# ---------------------------------------------------------------------------

class Node:
    def eval(self, env: dict[str, Number]) -> Number:
        raise NotImplementedError

    def diff(self, var: str) -> "Node":
        raise NotImplementedError

    def variables(self) -> set[str]:
        raise NotImplementedError

    def to_source(self) -> str:
        raise NotImplementedError

    # precedence used only for printing
    _prec = 3

    def _paren(self, inner: "Node", min_prec: int) -> str:
        s = inner.to_source()
        return f"({s})" if inner._prec < min_prec else s


@dataclass(frozen=True)
class Const(Node):
    value: Fraction | float

    _prec = 3

    def eval(self, env):
        return float(self.value)

    def diff(self, var):
        return Const(Fraction(0))

    def variables(self):
        return set()

    def to_source(self):
        if isinstance(self.value, Fraction):
            if self.value.denominator == 1:
                return str(self.value.numerator)
            return f"{self.value.numerator}/{self.value.denominator}"
        return repr(float(self.value))

    @property
    def is_zero(self):
        return self.value == 0

    @property
    def is_one(self):
        return self.value == 1


@dataclass(frozen=True)
class Var(Node):
    name: str

    _prec = 3

    def eval(self, env):
        try:
            return env[self.name]
        except KeyError:
            raise KeyError(f"no value bound for variable '{self.name}'") from None

    def diff(self, var):
        return Const(Fraction(1 if var == self.name else 0))

    def variables(self):
        return {self.name}

    def to_source(self):
        return self.name


@dataclass(frozen=True)
class Add(Node):
    terms: tuple[Node, ...]

    _prec = 1

    def eval(self, env):
        acc = self.terms[0].eval(env)
        for t in self.terms[1:]:
            acc = acc + t.eval(env)
        return acc

    def diff(self, var):
        return add(*[t.diff(var) for t in self.terms])

    def variables(self):
        out: set[str] = set()
        for t in self.terms:
            out |= t.variables()
        return out

    def to_source(self):
        return " + ".join(self._paren(t, 1) for t in self.terms)


@dataclass(frozen=True)
class Mul(Node):
    factors: tuple[Node, ...]

    _prec = 2

    def eval(self, env):
        acc = self.factors[0].eval(env)
        for f in self.factors[1:]:
            acc = acc * f.eval(env)
        return acc

    def diff(self, var):
        # product rule over all factors
        parts = []
        for i, f in enumerate(self.factors):
            df = f.diff(var)
            if isinstance(df, Const) and df.is_zero:
                continue
            others = self.factors[:i] + self.factors[i + 1:]
            parts.append(mul(df, *others))
        return add(*parts) if parts else Const(Fraction(0))

    def variables(self):
        out: set[str] = set()
        for f in self.factors:
            out |= f.variables()
        return out

    def to_source(self):
        return "*".join(self._paren(f, 2) for f in self.factors)


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: int

    _prec = 3

    def __post_init__(self):
        if self.exponent < 0:
            raise DslError("integer powers must be nonnegative")

    def eval(self, env):
        return int_pow(self.base.eval(env), self.exponent)

    def diff(self, var):
        k = self.exponent
        if k == 0:
            return Const(Fraction(0))
        db = self.base.diff(var)
        if k == 1:
            return db
        return mul(Const(Fraction(k)), Pow(self.base, k - 1), db)

    def variables(self):
        return self.base.variables()

    def to_source(self):
        return f"{self._paren(self.base, 3)}^{self.exponent}"


@dataclass(frozen=True)
class Call(Node):
    fn: str  # 'sin' | 'cos' | 'exp'
    arg: Node

    _prec = 3
    _impl = {"sin": np.sin, "cos": np.cos, "exp": np.exp}

    def eval(self, env):
        return self._impl[self.fn](self.arg.eval(env))

    def diff(self, var):
        da = self.arg.diff(var)
        if self.fn == "sin":
            outer: Node = Call("cos", self.arg)
        elif self.fn == "cos":
            outer = mul(Const(Fraction(-1)), Call("sin", self.arg))
        else:
            outer = Call("exp", self.arg)
        return mul(outer, da)

    def variables(self):
        return self.arg.variables()

    def to_source(self):
        return f"{self.fn}({self.arg.to_source()})"


def add(*terms: Node) -> Node:
    """n-ary sum with zero folding."""
    kept = [t for t in terms if not (isinstance(t, Const) and t.is_zero)]
    if not kept:
        return Const(Fraction(0))
    if len(kept) == 1:
        return kept[0]
    flat: list[Node] = []
    for t in kept:
        flat.extend(t.terms) if isinstance(t, Add) else flat.append(t)
    return Add(tuple(flat))


def mul(*factors: Node) -> Node:
    """n-ary product with zero/one folding."""
    for f in factors:
        if isinstance(f, Const) and f.is_zero:
            return Const(Fraction(0))
    kept = [f for f in factors if not (isinstance(f, Const) and f.is_one)]
    if not kept:
        return Const(Fraction(1))
    if len(kept) == 1:
        return kept[0]
    flat: list[Node] = []
    for f in kept:
        flat.extend(f.factors) if isinstance(f, Mul) else flat.append(f)
    return Mul(tuple(flat))


# ---------------------------------------------------------------------------
# Tokenizer / parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z]+\d*)"
    r"|(?P<op>[-+*^()/=;]))"
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int


def tokenize(src: str) -> list[_Token]:
    out: list[_Token] = []
    i = 0
    while i < len(src):
        m = _TOKEN_RE.match(src, i)
        if m is None:
            if src[i:].strip() == "":
                break
            raise DslError(f"unexpected character {src[i]!r}", i)
        if m.lastgroup is None:
            break
        out.append(_Token(m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
        i = m.end()
    return out


class _Parser:
    """Recursive descent over the expression grammar.

    expr   := ['-'] term (('+'|'-') term)*
    term   := factor ('*' factor)*
    factor := base ('^' INT)?
    base   := NUMBER | VAR | '(' expr ')' | ('sin'|'cos'|'exp') '(' expr ')'

    NUMBER is a decimal or a rational p/q.  The leading unary minus is
    accepted as sugar for multiplication by -1.
    """

    def __init__(self, tokens: list[_Token], allowed_vars: set[str],
                 allow_exp: bool, src_len: int):
        self.toks = tokens
        self.k = 0
        self.allowed = allowed_vars
        self.allow_exp = allow_exp
        self.src_len = src_len

    def peek(self) -> _Token | None:
        return self.toks[self.k] if self.k < len(self.toks) else None

    def next(self) -> _Token:
        tok = self.peek()
        if tok is None:
            raise DslError("unexpected end of input", self.src_len)
        self.k += 1
        return tok

    def expect_op(self, op: str) -> _Token:
        tok = self.next()
        if tok.kind != "op" or tok.text != op:
            raise DslError(f"expected {op!r}, found {tok.text!r}", tok.pos)
        return tok

    def parse_expr(self) -> Node:
        tok = self.peek()
        negate = False
        if tok is not None and tok.kind == "op" and tok.text == "-":
            self.next()
            negate = True
        node = self.parse_term()
        if negate:
            node = mul(Const(Fraction(-1)), node)
        while True:
            tok = self.peek()
            if tok is None or tok.kind != "op" or tok.text not in "+-":
                return node
            self.next()
            rhs = self.parse_term()
            if tok.text == "-":
                rhs = mul(Const(Fraction(-1)), rhs)
            node = add(node, rhs)

    def parse_term(self) -> Node:
        node = self.parse_factor()
        while True:
            tok = self.peek()
            if tok is None or tok.kind != "op" or tok.text != "*":
                return node
            self.next()
            node = mul(node, self.parse_factor())

    def parse_factor(self) -> Node:
        node = self.parse_base()
        tok = self.peek()
        if tok is not None and tok.kind == "op" and tok.text == "^":
            self.next()
            etok = self.next()
            if etok.kind != "number" or not etok.text.isdigit():
                raise DslError("exponent must be a nonnegative integer", etok.pos)
            node = Pow(node, int(etok.text))
        return node

    def parse_base(self) -> Node:
        tok = self.next()
        if tok.kind == "number":
            return self._finish_number(tok)
        if tok.kind == "op" and tok.text == "(":
            inner = self.parse_expr()
            self.expect_op(")")
            return inner
        if tok.kind == "name":
            if tok.text in ("sin", "cos", "exp"):
                if tok.text == "exp" and not self.allow_exp:
                    raise DslError(
                        "exp is not allowed in graphing functions", tok.pos)
                self.expect_op("(")
                arg = self.parse_expr()
                self.expect_op(")")
                return Call(tok.text, arg)
            if tok.text in self.allowed:
                return Var(tok.text)
            raise DslError(f"unknown variable {tok.text!r}", tok.pos)
        raise DslError(f"unexpected token {tok.text!r}", tok.pos)

    def _finish_number(self, tok: _Token) -> Const:
        nxt = self.peek()
        if (nxt is not None and nxt.kind == "op" and nxt.text == "/"
                and tok.text.isdigit()):
            # rational p/q
            self.next()
            dtok = self.next()
            if dtok.kind != "number" or not dtok.text.isdigit():
                raise DslError("rational constant needs integer denominator",
                               dtok.pos)
            if int(dtok.text) == 0:
                raise DslError("zero denominator", dtok.pos)
            return Const(Fraction(int(tok.text), int(dtok.text)))
        if tok.text.isdigit():
            return Const(Fraction(int(tok.text)))
        return Const(float(tok.text))


# ---------------------------------------------------------------------------
# Public expression object
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Expression:
    """Parsed expression plus its declared variable namespace."""

    node: Node
    namespace: tuple[str, ...]

    def eval(self, env: dict[str, Number]) -> Number:
        return self.node.eval(env)

    def diff(self, var: str) -> "Expression":
        if var not in self.namespace:
            raise KeyError(f"variable {var!r} not in namespace")
        return Expression(self.node.diff(var), self.namespace)

    def variables(self) -> set[str]:
        return self.node.variables()

    def to_source(self) -> str:
        return self.node.to_source()


def parse_expression(src: str, namespace: tuple[str, ...],
                     allow_exp: bool = False) -> Expression:
    """Parse one expression over the given variable namespace."""
    tokens = tokenize(src)
    if not tokens:
        raise DslError("empty expression", 0)
    parser = _Parser(tokens, set(namespace), allow_exp, len(src))
    node = parser.parse_expr()
    tok = parser.peek()
    if tok is not None:
        raise DslError(f"trailing input {tok.text!r}", tok.pos)
    return Expression(node, namespace)
