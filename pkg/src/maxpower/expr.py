"""Scalar math expressions over state and input variables, with exact first
and second derivatives via forward-mode dual numbers.

Grammar (full EBNF in docs/expression_grammar.md):

    expr   : term (("+" | "-") term)*
    term   : unary (("*" | "/") unary)*
    unary  : "-" unary | power
    power  : atom ("^" unary)?          ; right-associative, binds tightest
    atom   : NUMBER | IDENT | IDENT "(" expr ")" | "(" expr ")"

Variables are ``x0..x{n-1}`` and ``u0..u{m-1}``.  Named constants are inlined
at parse time, so evaluation needs no environment lookups.  Exponents of
``^`` must fold to a numeric constant at parse time; a negative base with a
non-integer exponent is a domain error.  Supported functions: sin, cos,
tanh, exp, log, sqrt.  Domain violations (log of nonpositive, sqrt of
negative, division by zero) raise eagerly instead of producing NaN.

Second derivatives are computed by forward-over-forward dual numbers
(nested duals), never by symbolic manipulation of the tree; the symbolic
`differentiate` below only builds first-derivative trees for lowering
structured systems.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Expr",
    "Dual2",
    "parse",
    "differentiate",
    "rebind",
    "free_variables",
    "ExprError",
    "ExprSyntaxError",
    "UnknownIdentifierError",
    "VariableIndexError",
    "ExprDomainError",
]

FUNCTIONS = ("sin", "cos", "tanh", "exp", "log", "sqrt")

_VAR_RE = re.compile(r"^([xu])(\d+)$")


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message, position):
        super().__init__(f"syntax error at position {position}: {message}")
        self.position = position


class UnknownIdentifierError(ExprSyntaxError):
    def __init__(self, name, position):
        ExprError.__init__(self, f"unknown identifier '{name}' at position {position}")
        self.position = position
        self.name = name


class VariableIndexError(ExprSyntaxError):
    def __init__(self, name, bound, position):
        ExprError.__init__(
            self,
            f"variable '{name}' out of range at position {position} "
            f"(declared dimension {bound})",
        )
        self.position = position
        self.name = name


class ExprDomainError(ExprError):
    """Evaluation hit a domain violation; carries the offending subexpression."""

    def __init__(self, subexpression, reason):
        super().__init__(f"{reason} in '{subexpression}'")
        self.subexpression = subexpression
        self.reason = reason


# --------------------------------------------------------------------------
# AST nodes (immutable).

@dataclass(frozen=True, slots=True)
class Num:
    value: float


@dataclass(frozen=True, slots=True)
class Var:
    kind: str  # 'x' or 'u'
    index: int


@dataclass(frozen=True, slots=True)
class BinOp:
    op: str  # '+', '-', '*', '/'
    left: object
    right: object


@dataclass(frozen=True, slots=True)
class Neg:
    operand: object


@dataclass(frozen=True, slots=True)
class Pow:
    base: object
    exponent: float  # constant, folded at parse time


@dataclass(frozen=True, slots=True)
class Call:
    fn: str
    arg: object


# --------------------------------------------------------------------------
# Dual numbers.  Components may themselves be duals (forward-over-forward).

class Dual:
    __slots__ = ("a", "b")

    def __init__(self, a, b):
        self.a = a
        self.b = b

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.a + o.a, self.b + o.b)
        return Dual(self.a + o, self.b)

    def __radd__(self, o):
        return Dual(self.a + o, self.b)

    def __sub__(self, o):
        if isinstance(o, Dual):
            return Dual(self.a - o.a, self.b - o.b)
        return Dual(self.a - o, self.b)

    def __rsub__(self, o):
        return Dual(o - self.a, -self.b)

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.a * o.a, self.a * o.b + self.b * o.a)
        return Dual(self.a * o, self.b * o)

    def __rmul__(self, o):
        return Dual(self.a * o, self.b * o)

    def __truediv__(self, o):
        if isinstance(o, Dual):
            return Dual(self.a / o.a, (self.b * o.a - self.a * o.b) / (o.a * o.a))
        return Dual(self.a / o, self.b / o)

    def __rtruediv__(self, o):
        return Dual(o / self.a, (-o * self.b) / (self.a * self.a))

    def __neg__(self):
        return Dual(-self.a, -self.b)

    def __repr__(self):
        return f"Dual({self.a!r}, {self.b!r})"


def _first_parts(r):
    """Split a scalar-or-dual into (value part, derivative part)."""
    if isinstance(r, Dual):
        return r.a, r.b
    return r, 0.0


def _deep_value(r):
    while isinstance(r, Dual):
        r = r.a
    return r


# Scalar kernels, closed over float | Dual.

def _sin(v):
    if isinstance(v, Dual):
        return Dual(_sin(v.a), _cos(v.a) * v.b)
    return math.sin(v)


def _cos(v):
    if isinstance(v, Dual):
        return Dual(_cos(v.a), (-_sin(v.a)) * v.b)
    return math.cos(v)


def _tanh(v):
    if isinstance(v, Dual):
        t = _tanh(v.a)
        return Dual(t, (1.0 - t * t) * v.b)
    return math.tanh(v)


def _exp(v):
    if isinstance(v, Dual):
        e = _exp(v.a)
        return Dual(e, e * v.b)
    return math.exp(v)


def _log(v):
    if isinstance(v, Dual):
        return Dual(_log(v.a), v.b / v.a)
    if v <= 0.0:
        raise ValueError("log of nonpositive value")
    return math.log(v)


def _sqrt(v):
    if isinstance(v, Dual):
        s = _sqrt(v.a)
        return Dual(s, v.b / (2.0 * s))
    if v < 0.0:
        raise ValueError("sqrt of negative value")
    return math.sqrt(v)


def _pow_const(v, c):
    if isinstance(v, Dual):
        if c == 0.0:
            return v * 0.0 + 1.0
        return Dual(_pow_const(v.a, c), (c * _pow_const(v.a, c - 1.0)) * v.b)
    if c == 0.0:
        return 1.0
    if v == 0.0 and c < 0.0:
        raise ZeroDivisionError("zero base with negative exponent")
    if v < 0.0 and not float(c).is_integer():
        raise ValueError("negative base with non-integer exponent")
    return math.pow(v, c)


_FUNCS = {
    "sin": _sin,
    "cos": _cos,
    "tanh": _tanh,
    "exp": _exp,
    "log": _log,
    "sqrt": _sqrt,
}


# --------------------------------------------------------------------------
# Evaluation.

def _ev(node, xs, us):
    t = type(node)
    if t is Num:
        return node.value
    if t is Var:
        return xs[node.index] if node.kind == "x" else us[node.index]
    if t is BinOp:
        a = _ev(node.left, xs, us)
        b = _ev(node.right, xs, us)
        op = node.op
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        try:
            return a / b
        except ZeroDivisionError:
            raise ExprDomainError(to_string(node), "division by zero") from None
    if t is Neg:
        return -_ev(node.operand, xs, us)
    if t is Pow:
        try:
            return _pow_const(_ev(node.base, xs, us), node.exponent)
        except (ValueError, ZeroDivisionError, OverflowError) as e:
            raise ExprDomainError(to_string(node), str(e)) from None
    # Call
    a = _ev(node.arg, xs, us)
    try:
        return _FUNCS[node.fn](a)
    except (ValueError, ZeroDivisionError, OverflowError) as e:
        raise ExprDomainError(to_string(node), str(e)) from None


# --------------------------------------------------------------------------
# Pretty printing (minimal parentheses; parse . to_string . parse is the
# identity on parsed trees).

_PREC_ADD, _PREC_MUL, _PREC_UNARY, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5
_BINOP_PREC = {"+": _PREC_ADD, "-": _PREC_ADD, "*": _PREC_MUL, "/": _PREC_MUL}


def _prec(node):
    t = type(node)
    if t is Num:
        return _PREC_ATOM if node.value >= 0.0 else _PREC_UNARY
    if t is Var or t is Call:
        return _PREC_ATOM
    if t is BinOp:
        return _BINOP_PREC[node.op]
    if t is Neg:
        return _PREC_UNARY
    return _PREC_POW  # Pow


def _fmt_num(v):
    return repr(float(v))


def to_string(node):
    t = type(node)
    if t is Num:
        return _fmt_num(node.value)
    if t is Var:
        return f"{node.kind}{node.index}"
    if t is BinOp:
        prec = _BINOP_PREC[node.op]
        left = to_string(node.left)
        if _prec(node.left) < prec:
            left = f"({left})"
        right = to_string(node.right)
        if _prec(node.right) <= prec:
            right = f"({right})"
        sep = f" {node.op} " if prec == _PREC_ADD else node.op
        return f"{left}{sep}{right}"
    if t is Neg:
        inner = to_string(node.operand)
        if _prec(node.operand) < _PREC_UNARY:
            inner = f"({inner})"
        return f"-{inner}"
    if t is Pow:
        base = to_string(node.base)
        if _prec(node.base) < _PREC_ATOM:
            base = f"({base})"
        return f"{base}^{_fmt_num(node.exponent)}"
    return f"{node.fn}({to_string(node.arg)})"


# --------------------------------------------------------------------------
# Folding constructors.  Used by the parser and by derivative construction;
# they keep trees small and make unary minus of literals a literal.

def mk_add(a, b):
    if type(a) is Num and type(b) is Num:
        return Num(a.value + b.value)
    if type(a) is Num and a.value == 0.0:
        return b
    if type(b) is Num and b.value == 0.0:
        return a
    return BinOp("+", a, b)


def mk_sub(a, b):
    if type(a) is Num and type(b) is Num:
        return Num(a.value - b.value)
    if type(b) is Num and b.value == 0.0:
        return a
    if type(a) is Num and a.value == 0.0:
        return mk_neg(b)
    return BinOp("-", a, b)


def mk_mul(a, b):
    if type(a) is Num and type(b) is Num:
        return Num(a.value * b.value)
    if type(a) is Num:
        if a.value == 0.0:
            return Num(0.0)
        if a.value == 1.0:
            return b
    if type(b) is Num:
        if b.value == 0.0:
            return Num(0.0)
        if b.value == 1.0:
            return a
    return BinOp("*", a, b)


def mk_div(a, b):
    if type(b) is Num:
        if b.value == 0.0:
            raise ExprDomainError(to_string(BinOp("/", a, b)), "division by zero")
        if type(a) is Num:
            return Num(a.value / b.value)
        if b.value == 1.0:
            return a
    if type(a) is Num and a.value == 0.0:
        return Num(0.0)
    return BinOp("/", a, b)


def mk_neg(a):
    if type(a) is Num:
        return Num(-a.value)
    if type(a) is Neg:
        return a.operand
    return Neg(a)


def mk_pow(base, exponent):
    exponent = float(exponent)
    if exponent == 1.0:
        return base
    if exponent == 0.0:
        return Num(1.0)
    if type(base) is Num:
        node = Pow(base, exponent)
        try:
            return Num(_pow_const(base.value, exponent))
        except (ValueError, ZeroDivisionError, OverflowError) as e:
            raise ExprDomainError(to_string(node), str(e)) from None
    return Pow(base, exponent)


def mk_call(fn, arg):
    if type(arg) is Num:
        node = Call(fn, arg)
        try:
            return Num(_FUNCS[fn](arg.value))
        except (ValueError, ZeroDivisionError, OverflowError) as e:
            raise ExprDomainError(to_string(node), str(e)) from None
    return Call(fn, arg)


# --------------------------------------------------------------------------
# Tokenizer / recursive-descent parser.

_NUM_RE = r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_TOKEN_RE = re.compile(
    rf"(?P<num>{_NUM_RE})|(?P<ident>[A-Za-z_]\w*)|(?P<op>[-+*/^()])|(?P<bad>\S)"
)


def _tokenize(source):
    tokens = []
    for match in _TOKEN_RE.finditer(source):
        kind = match.lastgroup
        if kind == "bad":
            raise ExprSyntaxError(f"unexpected character {match.group()!r}", match.start())
        tokens.append((kind, match.group(), match.start()))
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, tokens, n, m, constants):
        self.tokens = tokens
        self.pos = 0
        self.n = n
        self.m = m
        self.constants = constants

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, op):
        kind, text, pos = self.peek()
        if kind != "op" or text != op:
            raise ExprSyntaxError(f"expected '{op}'", pos)
        return self.advance()

    def parse(self):
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {text!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.advance()
                rhs = self.term()
                node = mk_add(node, rhs) if text == "+" else mk_sub(node, rhs)
            else:
                return node

    def term(self):
        node = self.unary()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.advance()
                rhs = self.unary()
                node = mk_mul(node, rhs) if text == "*" else mk_div(node, rhs)
            else:
                return node

    def unary(self):
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return mk_neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        kind, text, pos = self.peek()
        if kind == "op" and text == "^":
            self.advance()
            exponent = self.unary()
            if type(exponent) is not Num:
                raise ExprSyntaxError("exponent must fold to a numeric constant", pos)
            return mk_pow(base, exponent.value)
        return base

    def atom(self):
        kind, text, pos = self.advance()
        if kind == "num":
            return Num(float(text))
        if kind == "ident":
            return self.ident(text, pos)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        if kind == "end":
            raise ExprSyntaxError("unexpected end of input", pos)
        raise ExprSyntaxError(f"unexpected token {text!r}", pos)

    def ident(self, text, pos):
        if text in _FUNCS:
            self.expect_op("(")
            arg = self.expr()
            self.expect_op(")")
            return mk_call(text, arg)
        var = _VAR_RE.match(text)
        if var is not None:
            kind, index = var.group(1), int(var.group(2))
            bound = self.n if kind == "x" else self.m
            if index >= bound:
                raise VariableIndexError(text, bound, pos)
            return Var(kind, index)
        if text in self.constants:
            return Num(float(self.constants[text]))
        raise UnknownIdentifierError(text, pos)


# --------------------------------------------------------------------------
# Public expression object.

@dataclass(frozen=True)
class Dual2:
    """Value, gradient and (exactly symmetric) Hessian w.r.t. active variables."""

    value: float
    grad: np.ndarray
    hess: np.ndarray


@dataclass(frozen=True)
class Expr:
    """Immutable expression bound to state dimension n and input dimension m."""

    root: object
    n: int
    m: int

    def __str__(self):
        return to_string(self.root)

    def _floats(self, x, u):
        if len(x) != self.n:
            raise ValueError(f"state has length {len(x)}, expected n={self.n}")
        if len(u) != self.m:
            raise ValueError(f"input has length {len(u)}, expected m={self.m}")
        return [float(v) for v in x], [float(v) for v in u]

    def eval(self, x=(), u=()):
        """Value at (x, u).  Raises ExprDomainError on domain violations."""
        xs, us = self._floats(x, u)
        return _ev(self.root, xs, us)

    def eval_d1(self, x=(), u=(), active=()):
        """Value and gradient w.r.t. the ordered active variables."""
        active = _normalize_active(active, self.n, self.m)
        xs, us = self._floats(x, u)
        k = len(active)
        grad = np.empty(k)
        value = None
        for i, (kind, idx) in enumerate(active):
            value_i, grad[i] = _first_parts(_seeded_eval(self.root, xs, us, kind, idx))
            if value is None:
                value = _deep_value(value_i)
        if value is None:
            value = _ev(self.root, xs, us)
        return value, grad

    def eval_d2(self, x=(), u=(), active=()):
        """Value, gradient and Hessian w.r.t. the ordered active variables.

        Exact up to rounding: forward-over-forward nested duals, one pass per
        Hessian entry of the upper triangle, mirrored so hess == hess.T holds
        bit-exactly.
        """
        active = _normalize_active(active, self.n, self.m)
        xs, us = self._floats(x, u)
        k = len(active)
        value, grad = self.eval_d1(x, u, active)
        hess = np.empty((k, k))
        for i in range(k):
            for j in range(i, k):
                d2 = _nested_eval(self.root, xs, us, active[i], active[j])
                hess[i, j] = d2
                hess[j, i] = d2
        return Dual2(value, grad, hess)


def _seeded_eval(root, xs, us, kind, idx):
    xs2 = list(xs)
    us2 = list(us)
    target = xs2 if kind == "x" else us2
    target[idx] = Dual(target[idx], 1.0)
    return _ev(root, xs2, us2)


def _nested_eval(root, xs, us, vi, vj):
    xs2 = list(xs)
    us2 = list(us)

    def _slot(kind, idx):
        return (xs2 if kind == "x" else us2), idx

    same = vi == vj
    seq_i, idx_i = _slot(*vi)
    seq_i[idx_i] = Dual(Dual(seq_i[idx_i], 1.0), Dual(1.0 if same else 0.0, 0.0))
    if not same:
        seq_j, idx_j = _slot(*vj)
        seq_j[idx_j] = Dual(Dual(seq_j[idx_j], 0.0), Dual(1.0, 0.0))
    r = _ev(root, xs2, us2)
    if not isinstance(r, Dual):
        return 0.0
    rb = r.b
    if not isinstance(rb, Dual):
        return 0.0
    return _deep_value(rb.b)


def _normalize_active(active, n, m):
    out = []
    for item in active:
        if isinstance(item, str):
            match = _VAR_RE.match(item)
            if match is None:
                raise ValueError(f"invalid active variable {item!r}")
            kind, idx = match.group(1), int(match.group(2))
        else:
            kind, idx = item
        bound = n if kind == "x" else m
        if not 0 <= idx < bound:
            raise ValueError(f"active variable {kind}{idx} out of range (bound {bound})")
        out.append((kind, idx))
    return tuple(out)


def free_variables(node):
    """Set of (kind, index) variables appearing in the tree."""
    t = type(node)
    if t is Num:
        return set()
    if t is Var:
        return {(node.kind, node.index)}
    if t is BinOp:
        return free_variables(node.left) | free_variables(node.right)
    if t is Neg:
        return free_variables(node.operand)
    if t is Pow:
        return free_variables(node.base)
    return free_variables(node.arg)


def parse(source, n, m, constants=None):
    """Parse an expression over x0..x{n-1}, u0..u{m-1} with inlined constants."""
    if not source or not source.strip():
        raise ExprSyntaxError("empty expression", 0)
    constants = dict(constants or {})
    for name in constants:
        if _VAR_RE.match(name) or name in _FUNCS or not re.match(r"^[A-Za-z_]\w*$", name):
            raise ValueError(f"invalid constant name {name!r}")
    parser = _Parser(_tokenize(source), n, m, constants)
    return Expr(parser.parse(), n, m)


def rebind(e, n, m):
    """Rebind an expression to new dimensions (free variables must fit)."""
    for kind, idx in free_variables(e.root):
        bound = n if kind == "x" else m
        if idx >= bound:
            raise ValueError(f"cannot rebind: {kind}{idx} exceeds dimension {bound}")
    return Expr(e.root, n, m)


# --------------------------------------------------------------------------
# First-derivative tree construction (used to lower structured systems whose
# vector fields are gradients of an energy or potential expression).

_DERIV_BUILDERS = {
    "sin": lambda a, da: mk_mul(mk_call("cos", a), da),
    "cos": lambda a, da: mk_neg(mk_mul(mk_call("sin", a), da)),
    "tanh": lambda a, da: mk_mul(mk_sub(Num(1.0), mk_pow(mk_call("tanh", a), 2.0)), da),
    "exp": lambda a, da: mk_mul(mk_call("exp", a), da),
    "log": lambda a, da: mk_div(da, a),
    "sqrt": lambda a, da: mk_div(da, mk_mul(Num(2.0), mk_call("sqrt", a))),
}


def _d(node, kind, index):
    t = type(node)
    if t is Num:
        return Num(0.0)
    if t is Var:
        return Num(1.0 if (node.kind, node.index) == (kind, index) else 0.0)
    if t is Neg:
        return mk_neg(_d(node.operand, kind, index))
    if t is BinOp:
        da = _d(node.left, kind, index)
        db = _d(node.right, kind, index)
        if node.op == "+":
            return mk_add(da, db)
        if node.op == "-":
            return mk_sub(da, db)
        if node.op == "*":
            return mk_add(mk_mul(da, node.right), mk_mul(node.left, db))
        return mk_sub(
            mk_div(da, node.right),
            mk_div(mk_mul(node.left, db), mk_mul(node.right, node.right)),
        )
    if t is Pow:
        base_d = _d(node.base, kind, index)
        factor = mk_mul(Num(node.exponent), mk_pow(node.base, node.exponent - 1.0))
        return mk_mul(factor, base_d)
    da = _d(node.arg, kind, index)
    return _DERIV_BUILDERS[node.fn](node.arg, da)


def differentiate(e, var):
    """Exact first-derivative expression of e w.r.t. one variable ('x3', 'u0', ...)."""
    if isinstance(var, str):
        match = _VAR_RE.match(var)
        if match is None:
            raise ValueError(f"invalid variable {var!r}")
        kind, index = match.group(1), int(match.group(2))
    else:
        kind, index = var
    return Expr(_d(e.root, kind, index), e.n, e.m)
