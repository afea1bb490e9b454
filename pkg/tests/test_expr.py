import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maxpower import expr as ex
from maxpower.expr import (
    BinOp,
    Call,
    ExprDomainError,
    ExprSyntaxError,
    Num,
    Pow,
    UnknownIdentifierError,
    Var,
    VariableIndexError,
    parse,
)

from util import fd_gradient, fd_hessian, random_expr_source


class TestParse:
    def test_grammar_sum_of_power_and_product(self):
        e = parse("u0^2 + 2*u0", n=0, m=1)
        assert e.root == BinOp("+", Pow(Var("u", 0), 2.0), BinOp("*", Num(2.0), Var("u", 0)))

    def test_grammar_product_with_call(self):
        e = parse("sin(x0)*u1", n=1, m=2)
        assert e.root == BinOp("*", Call("sin", Var("x", 0)), Var("u", 1))

    def test_trailing_operator_is_syntax_error(self):
        with pytest.raises(ExprSyntaxError, match="end of input"):
            parse("x0 +", n=1, m=0)

    def test_unknown_identifier(self):
        with pytest.raises(UnknownIdentifierError):
            parse("x0 + foo", n=1, m=0)

    def test_variable_index_out_of_range(self):
        with pytest.raises(VariableIndexError):
            parse("x2", n=2, m=0)
        with pytest.raises(VariableIndexError):
            parse("u0", n=1, m=0)

    def test_constants_are_inlined(self):
        e = parse("2*pi", n=0, m=0, constants={"pi": math.pi})
        assert e.root == Num(2.0 * math.pi)

    def test_power_is_right_associative_and_tightest(self):
        assert parse("2^3^2", n=0, m=0).root == Num(512.0)
        # unary minus binds looser than ^
        assert parse("-2^2", n=0, m=0).root == Num(-4.0)
        e = parse("-x0^2", n=1, m=0)
        assert e.root == ex.Neg(Pow(Var("x", 0), 2.0))

    def test_non_constant_exponent_rejected(self):
        with pytest.raises(ExprSyntaxError, match="constant"):
            parse("x0^u0", n=1, m=1)

    def test_constant_exponent_expression_folds(self):
        assert parse("u0^(2*2)", n=0, m=1).root == Pow(Var("u", 0), 4.0)

    def test_unexpected_character(self):
        with pytest.raises(ExprSyntaxError):
            parse("x0 ? 1", n=1, m=0)

    def test_empty_source(self):
        with pytest.raises(ExprSyntaxError):
            parse("   ", n=0, m=0)

    def test_function_requires_parentheses(self):
        with pytest.raises(ExprSyntaxError):
            parse("sin x0", n=1, m=0)

    def test_bad_constant_name_rejected(self):
        with pytest.raises(ValueError):
            parse("1.0", n=0, m=0, constants={"x0": 3.0})
        with pytest.raises(ValueError):
            parse("1.0", n=0, m=0, constants={"sin": 3.0})


class TestEval:
    def test_arithmetic(self):
        e = parse("x0*u0 + 2", n=1, m=1)
        assert e.eval([3.0], [4.0]) == 14.0

    def test_sin_at_zero(self):
        assert parse("sin(x0)", n=1, m=0).eval([0.0], []) == 0.0

    def test_log_domain_error(self):
        e = parse("log(x0)", n=1, m=0)
        with pytest.raises(ExprDomainError, match="log"):
            e.eval([-1.0], [])

    def test_sqrt_domain_error(self):
        with pytest.raises(ExprDomainError, match="sqrt"):
            parse("sqrt(x0)", n=1, m=0).eval([-4.0], [])

    def test_division_by_zero(self):
        e = parse("1/x0", n=1, m=0)
        with pytest.raises(ExprDomainError, match="division by zero"):
            e.eval([0.0], [])
        # numpy scalars are converted, so this still raises instead of inf
        with pytest.raises(ExprDomainError):
            e.eval(np.array([0.0]), [])

    def test_negative_base_non_integer_exponent(self):
        e = parse("x0^0.5", n=1, m=0)
        with pytest.raises(ExprDomainError, match="non-integer"):
            e.eval([-2.0], [])
        assert e.eval([4.0], []) == 2.0

    def test_negative_base_integer_exponent_ok(self):
        assert parse("x0^3", n=1, m=0).eval([-2.0], []) == -8.0

    def test_domain_error_reports_subexpression(self):
        e = parse("1 + log(x0*u0)", n=1, m=1)
        with pytest.raises(ExprDomainError) as err:
            e.eval([1.0], [0.0])
        assert "log(x0*u0)" in str(err.value)

    def test_dimension_mismatch(self):
        e = parse("x0", n=1, m=0)
        with pytest.raises(ValueError, match="state"):
            e.eval([1.0, 2.0], [])

    def test_determinism(self):
        rng = np.random.default_rng(7)
        e = parse(random_expr_source(rng, 2, 2), n=2, m=2)
        x, u = [0.3, -0.4], [0.1, 0.9]
        assert e.eval(x, u) == e.eval(x, u)


class TestDerivatives:
    def test_quadratic(self):
        d = parse("u0^2", n=0, m=1).eval_d2([], [3.0], active=("u0",))
        assert d.value == 9.0
        assert d.grad.tolist() == [6.0]
        assert d.hess.tolist() == [[2.0]]

    def test_sin_at_zero(self):
        d = parse("sin(x0)", n=1, m=0).eval_d2([0.0], [], active=("x0",))
        assert d.value == 0.0
        assert d.grad.tolist() == [1.0]
        assert d.hess.tolist() == [[0.0]]

    def test_random_exprs_match_finite_differences(self):
        rng = np.random.default_rng(11)
        active = ("x0", "x1", "u0")
        for _ in range(20):
            e = parse(random_expr_source(rng, 2, 1, terms=4), n=2, m=1)
            z0 = rng.uniform(-0.8, 0.8, size=3)

            def f(z):
                return e.eval([z[0], z[1]], [z[2]])

            d = e.eval_d2([z0[0], z0[1]], [z0[2]], active=active)
            gerr = np.max(np.abs(d.grad - fd_gradient(f, z0))) / max(1.0, np.max(np.abs(d.grad)))
            herr = np.max(np.abs(d.hess - fd_hessian(f, z0))) / max(1.0, np.max(np.abs(d.hess)))
            assert gerr < 1e-6
            assert herr < 1e-6

    @pytest.mark.parametrize(
        "fn,lo,hi",
        [
            ("sin", -2.0, 2.0),
            ("cos", -2.0, 2.0),
            ("tanh", -2.0, 2.0),
            ("exp", -1.5, 1.5),
            ("log", 0.3, 3.0),
            ("sqrt", 0.3, 3.0),
        ],
    )
    def test_every_function_gradient_matches_fd_at_100_points(self, fn, lo, hi):
        e = parse(f"{fn}(x0)", n=1, m=0)
        rng = np.random.default_rng(hash(fn) % 2**32)
        for _ in range(100):
            z = rng.uniform(lo, hi)
            _, grad = e.eval_d1([z], [], active=("x0",))
            fd = fd_gradient(lambda v: e.eval([v[0]], []), np.array([z]))
            assert abs(grad[0] - fd[0]) <= 1e-6 * max(1.0, abs(grad[0]))

    def test_hessian_symmetry_exact(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            e = parse(random_expr_source(rng, 3, 2, terms=5), n=3, m=2)
            d = e.eval_d2(
                rng.uniform(-0.5, 0.5, 3),
                rng.uniform(-0.5, 0.5, 2),
                active=("x0", "x1", "x2", "u0", "u1"),
            )
            assert np.max(np.abs(d.hess - d.hess.T)) == 0.0

    def test_gradient_of_value_only_expression(self):
        # seeded variable absent from the tree: zero derivative, same value
        e = parse("u0 + 1", n=1, m=1)
        value, grad = e.eval_d1([5.0], [2.0], active=("x0", "u0"))
        assert value == 3.0
        assert grad.tolist() == [0.0, 1.0]

    def test_mixed_partial(self):
        e = parse("x0^2*u0 + tanh(x0*u0)", n=1, m=1)
        d = e.eval_d2([0.7], [-0.4], active=("x0", "u0"))
        xv, uv = 0.7, -0.4
        sech2 = 1.0 - math.tanh(xv * uv) ** 2
        want = 2.0 * xv + sech2 + (xv * uv) * (-2.0 * math.tanh(xv * uv) * sech2)
        assert d.hess[0, 1] == pytest.approx(want, rel=1e-12)

    def test_eager_domain_error_in_derivative(self):
        # sqrt has an unbounded derivative at 0; erroring beats returning NaN
        e = parse("sqrt(x0)", n=1, m=0)
        assert e.eval([0.0], []) == 0.0
        with pytest.raises(ExprDomainError):
            e.eval_d1([0.0], [], active=("x0",))


class TestSymbolicDerivative:
    def test_matches_dual_gradient(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            e = parse(random_expr_source(rng, 2, 1, terms=4), n=2, m=1)
            de = ex.differentiate(e, "x1")
            x = rng.uniform(-0.7, 0.7, 2)
            u = rng.uniform(-0.7, 0.7, 1)
            _, grad = e.eval_d1(x, u, active=("x1",))
            assert de.eval(x, u) == pytest.approx(grad[0], rel=1e-12, abs=1e-14)

    def test_simple_rules(self):
        e = parse("sin(x0)*u0", n=1, m=1)
        de = ex.differentiate(e, "x0")
        assert str(de) == "cos(x0)*u0"


# ---------------------------------------------------------------------------
# Round-trip property: parse . to_string . parse is the identity on parsed ASTs.

_identifier_pool = ["x0", "x1", "u0", "u1"]


@st.composite
def expression_sources(draw, depth=0):
    if depth > 3:
        choice = draw(st.integers(0, 1))
    else:
        choice = draw(st.integers(0, 6))
    if choice == 0:
        return str(draw(st.floats(min_value=0.0, max_value=9.0, allow_nan=False).map(lambda v: round(v, 3))))
    if choice == 1:
        return draw(st.sampled_from(_identifier_pool))
    a = draw(expression_sources(depth=depth + 1))
    b = draw(expression_sources(depth=depth + 1))
    if choice == 2:
        op = draw(st.sampled_from([" + ", " - ", "*", "/"]))
        return f"({a}){op}({b})"
    if choice == 3:
        return f"-({a})"
    if choice == 4:
        fn = draw(st.sampled_from(["sin", "cos", "tanh"]))
        return f"{fn}({a})"
    if choice == 5:
        p = draw(st.sampled_from(["2", "3", "-1", "0.5"]))
        return f"({a})^{p}"
    return f"({a})"


@given(expression_sources())
@settings(max_examples=150, deadline=None)
def test_parse_print_parse_idempotent(source):
    try:
        e1 = parse(source, n=2, m=2)
    except ExprDomainError:
        return  # constant folding hit a domain violation; not a round-trip case
    e2 = parse(str(e1), n=2, m=2)
    assert e1.root == e2.root
