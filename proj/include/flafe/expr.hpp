#pragma once

// Feature expression language. This is the wire format features travel in
// between clients and server, so parsing and printing have to be bit-exact:
// two expressions are "the same feature" iff their canonical strings are
// byte-equal.
//
// Grammar (operators left-associative, ** binds tightest and is not
// chainable):
//
//   expr := add
//   add  := mul (('+' | '-') mul)*
//   mul  := pow (('*' | '/') pow)*
//   pow  := atom ('**' int)?
//   atom := column | number | func '(' expr ')' | '(' expr ')'
//
// Columns are X000..X999 (printed zero-padded to three digits), functions
// are {log, sqrt, abs, exp, sin, cos}, power exponents must lie in [2,4],
// and tree depth is capped at 12. Canonical form sorts the operands of the
// commutative operators (+ and *) lexicographically by canonical string.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"

namespace flafe {

enum class ExprKind { Column, Literal, Call, Binary, Power };
enum class BinOp { Add, Sub, Mul, Div };
enum class Func { Log, Sqrt, Abs, Exp, Sin, Cos };

inline constexpr int kMaxColumnIndex = 999;
inline constexpr int kMaxExprDepth = 12;
inline constexpr double kDivisionGuard = 1e-12;

struct FeatureExpr;
using ExprPtr = std::shared_ptr<const FeatureExpr>;

// Immutable after construction; nodes are shared freely across threads.
struct FeatureExpr {
    ExprKind kind;
    int column = -1;      // Column
    double value = 0.0;   // Literal
    Func func{};          // Call
    BinOp op{};           // Binary
    int exponent = 0;     // Power
    ExprPtr lhs, rhs;     // Call/Power use lhs only
    int depth = 1;        // 1 for leaves, 1 + max(children) otherwise
};

inline const char* func_name(Func f) {
    switch (f) {
        case Func::Log: return "log";
        case Func::Sqrt: return "sqrt";
        case Func::Abs: return "abs";
        case Func::Exp: return "exp";
        case Func::Sin: return "sin";
        case Func::Cos: return "cos";
    }
    return "?";
}

inline char binop_char(BinOp op) {
    switch (op) {
        case BinOp::Add: return '+';
        case BinOp::Sub: return '-';
        case BinOp::Mul: return '*';
        case BinOp::Div: return '/';
    }
    return '?';
}

namespace exprs {

inline ExprPtr column(int index) {
    if (index < 0 || index > kMaxColumnIndex)
        throw LimitError("column index " + std::to_string(index) + " outside X000..X999");
    auto n = std::make_shared<FeatureExpr>();
    n->kind = ExprKind::Column;
    n->column = index;
    return n;
}

inline ExprPtr literal(double v) {
    if (!std::isfinite(v) || v < 0.0)
        throw LimitError("literals must be finite and non-negative");
    auto n = std::make_shared<FeatureExpr>();
    n->kind = ExprKind::Literal;
    n->value = v;
    return n;
}

inline ExprPtr call(Func f, ExprPtr arg) {
    auto n = std::make_shared<FeatureExpr>();
    n->kind = ExprKind::Call;
    n->func = f;
    n->lhs = std::move(arg);
    n->depth = n->lhs->depth + 1;
    if (n->depth > kMaxExprDepth) throw LimitError("expression depth exceeds 12");
    return n;
}

inline ExprPtr binary(BinOp op, ExprPtr a, ExprPtr b) {
    auto n = std::make_shared<FeatureExpr>();
    n->kind = ExprKind::Binary;
    n->op = op;
    n->lhs = std::move(a);
    n->rhs = std::move(b);
    n->depth = 1 + std::max(n->lhs->depth, n->rhs->depth);
    if (n->depth > kMaxExprDepth) throw LimitError("expression depth exceeds 12");
    return n;
}

inline ExprPtr power(ExprPtr base, int exponent) {
    if (exponent < 2 || exponent > 4)
        throw LimitError("power exponent " + std::to_string(exponent) + " outside [2,4]");
    auto n = std::make_shared<FeatureExpr>();
    n->kind = ExprKind::Power;
    n->exponent = exponent;
    n->lhs = std::move(base);
    n->depth = n->lhs->depth + 1;
    if (n->depth > kMaxExprDepth) throw LimitError("expression depth exceeds 12");
    return n;
}

}  // namespace exprs

inline bool expr_equal(const ExprPtr& a, const ExprPtr& b) {
    if (a.get() == b.get()) return true;
    if (!a || !b || a->kind != b->kind) return false;
    switch (a->kind) {
        case ExprKind::Column: return a->column == b->column;
        case ExprKind::Literal: return a->value == b->value;
        case ExprKind::Call: return a->func == b->func && expr_equal(a->lhs, b->lhs);
        case ExprKind::Binary:
            return a->op == b->op && expr_equal(a->lhs, b->lhs) && expr_equal(a->rhs, b->rhs);
        case ExprKind::Power:
            return a->exponent == b->exponent && expr_equal(a->lhs, b->lhs);
    }
    return false;
}

inline int max_column(const ExprPtr& e) {
    switch (e->kind) {
        case ExprKind::Column: return e->column;
        case ExprKind::Literal: return -1;
        case ExprKind::Call:
        case ExprKind::Power: return max_column(e->lhs);
        case ExprKind::Binary: return std::max(max_column(e->lhs), max_column(e->rhs));
    }
    return -1;
}

// ---- printing ----

namespace detail {

// precedence for parenthesization: atoms 4, ** 3, * / 2, + - 1
inline int precedence(const FeatureExpr& e) {
    switch (e.kind) {
        case ExprKind::Column:
        case ExprKind::Literal:
        case ExprKind::Call: return 4;
        case ExprKind::Power: return 3;
        case ExprKind::Binary:
            return (e.op == BinOp::Add || e.op == BinOp::Sub) ? 1 : 2;
    }
    return 4;
}

inline void print_node(const FeatureExpr& e, std::string& out) {
    switch (e.kind) {
        case ExprKind::Column: {
            char buf[5];
            std::snprintf(buf, sizeof(buf), "X%03d", e.column);
            out += buf;
            return;
        }
        case ExprKind::Literal:
            out += format_double(e.value);
            return;
        case ExprKind::Call:
            out += func_name(e.func);
            out += '(';
            print_node(*e.lhs, out);
            out += ')';
            return;
        case ExprKind::Power: {
            // grammar only allows an atom as the base
            bool parens = precedence(*e.lhs) < 4;
            if (parens) out += '(';
            print_node(*e.lhs, out);
            if (parens) out += ')';
            out += "**";
            out += std::to_string(e.exponent);
            return;
        }
        case ExprKind::Binary: {
            int p = precedence(e);
            // left-associative grammar: the right child needs parentheses at
            // equal precedence too or reparsing would rebuild a different tree
            bool lp = precedence(*e.lhs) < p;
            bool rp = precedence(*e.rhs) <= p;
            if (lp) out += '(';
            print_node(*e.lhs, out);
            if (lp) out += ')';
            out += binop_char(e.op);
            if (rp) out += '(';
            print_node(*e.rhs, out);
            if (rp) out += ')';
            return;
        }
    }
}

}  // namespace detail

// Prints the tree as-is (structure preserving, minimal parentheses).
inline std::string print_expr(const ExprPtr& e) {
    std::string out;
    detail::print_node(*e, out);
    return out;
}

// ---- canonicalization ----

inline ExprPtr canonicalize(const ExprPtr& e);

namespace detail {

inline std::string canonical_text(const ExprPtr& e) { return print_expr(canonicalize(e)); }

}  // namespace detail

// Sorts the two operands of + and * by their canonical strings, bottom-up.
// No algebraic rewriting happens here: a*a stays a*a, 0+x stays 0+x. The
// only goal is that commutative reorderings of the same feature print to
// identical bytes.
inline ExprPtr canonicalize(const ExprPtr& e) {
    switch (e->kind) {
        case ExprKind::Column:
        case ExprKind::Literal: return e;
        case ExprKind::Call: {
            ExprPtr a = canonicalize(e->lhs);
            if (a.get() == e->lhs.get()) return e;
            return exprs::call(e->func, std::move(a));
        }
        case ExprKind::Power: {
            ExprPtr a = canonicalize(e->lhs);
            if (a.get() == e->lhs.get()) return e;
            return exprs::power(std::move(a), e->exponent);
        }
        case ExprKind::Binary: {
            ExprPtr a = canonicalize(e->lhs);
            ExprPtr b = canonicalize(e->rhs);
            if (e->op == BinOp::Add || e->op == BinOp::Mul) {
                std::string sa = print_expr(a), sb = print_expr(b);
                if (sb < sa) std::swap(a, b);
            }
            if (a.get() == e->lhs.get() && b.get() == e->rhs.get()) return e;
            return exprs::binary(e->op, std::move(a), std::move(b));
        }
    }
    return e;
}

struct CanonicalString {
    std::string text;
    bool operator==(const CanonicalString&) const = default;
    auto operator<=>(const CanonicalString&) const = default;
};

inline std::string print_canonical(const ExprPtr& e) { return print_expr(canonicalize(e)); }

inline CanonicalString canonical_string(const ExprPtr& e) {
    return CanonicalString{print_canonical(e)};
}

// ---- parsing ----

namespace detail {

enum class Tok { Column, Number, Func, Plus, Minus, Star, Slash, Pow, LParen, RParen, End };

struct Token {
    Tok kind;
    std::size_t pos = 0;
    int column = 0;
    double number = 0.0;
    bool number_is_int = false;
    long long int_value = 0;
    Func func{};
};

class Lexer {
public:
    explicit Lexer(std::string_view s) : s_(s) {}

    Token next() {
        while (i_ < s_.size() && (s_[i_] == ' ' || s_[i_] == '\t')) ++i_;
        std::size_t start = i_;
        if (i_ >= s_.size()) return {Tok::End, start};
        char c = s_[i_];
        switch (c) {
            case '+': ++i_; return {Tok::Plus, start};
            case '-': ++i_; return {Tok::Minus, start};
            case '/': ++i_; return {Tok::Slash, start};
            case '(': ++i_; return {Tok::LParen, start};
            case ')': ++i_; return {Tok::RParen, start};
            case '*':
                ++i_;
                if (i_ < s_.size() && s_[i_] == '*') { ++i_; return {Tok::Pow, start}; }
                return {Tok::Star, start};
            default: break;
        }
        if (c == 'X' && i_ + 1 < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_ + 1]))) {
            ++i_;
            int idx = 0;
            std::size_t digits = 0;
            while (i_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_]))) {
                idx = idx * 10 + (s_[i_] - '0');
                ++i_;
                if (++digits > 3) throw SyntaxError(start, "column index outside X000..X999");
            }
            Token t{Tok::Column, start};
            t.column = idx;
            return t;
        }
        if (std::isalpha(static_cast<unsigned char>(c))) {
            std::size_t j = i_;
            while (j < s_.size() && std::isalpha(static_cast<unsigned char>(s_[j]))) ++j;
            std::string_view word = s_.substr(i_, j - i_);
            i_ = j;
            Token t{Tok::Func, start};
            if (word == "log") t.func = Func::Log;
            else if (word == "sqrt") t.func = Func::Sqrt;
            else if (word == "abs") t.func = Func::Abs;
            else if (word == "exp") t.func = Func::Exp;
            else if (word == "sin") t.func = Func::Sin;
            else if (word == "cos") t.func = Func::Cos;
            else throw SyntaxError(start, "unknown function '" + std::string(word) + "'");
            return t;
        }
        if (std::isdigit(static_cast<unsigned char>(c))) {
            std::size_t j = i_;
            bool is_int = true;
            while (j < s_.size() && std::isdigit(static_cast<unsigned char>(s_[j]))) ++j;
            if (j < s_.size() && s_[j] == '.') {
                is_int = false;
                ++j;
                while (j < s_.size() && std::isdigit(static_cast<unsigned char>(s_[j]))) ++j;
            }
            if (j < s_.size() && (s_[j] == 'e' || s_[j] == 'E')) {
                is_int = false;
                std::size_t k = j + 1;
                if (k < s_.size() && (s_[k] == '+' || s_[k] == '-')) ++k;
                if (k < s_.size() && std::isdigit(static_cast<unsigned char>(s_[k]))) {
                    j = k;
                    while (j < s_.size() && std::isdigit(static_cast<unsigned char>(s_[j]))) ++j;
                }
            }
            Token t{Tok::Number, start};
            t.number_is_int = is_int;
            auto text = s_.substr(i_, j - i_);
            auto res = std::from_chars(text.data(), text.data() + text.size(), t.number);
            if (res.ec != std::errc{}) throw SyntaxError(start, "malformed number");
            if (is_int) {
                t.int_value = 0;
                for (char d : text) t.int_value = t.int_value * 10 + (d - '0');
            }
            i_ = j;
            return t;
        }
        throw SyntaxError(start, std::string("unexpected character '") + c + "'");
    }

private:
    std::string_view s_;
    std::size_t i_ = 0;
};

class Parser {
public:
    explicit Parser(std::string_view s) : lex_(s) { advance(); }

    ExprPtr parse() {
        ExprPtr e = parse_add();
        if (cur_.kind != Tok::End)
            throw SyntaxError(cur_.pos, "expected end of expression");
        return e;
    }

private:
    void advance() { cur_ = lex_.next(); }

    ExprPtr parse_add() {
        ExprPtr e = parse_mul();
        while (cur_.kind == Tok::Plus || cur_.kind == Tok::Minus) {
            BinOp op = cur_.kind == Tok::Plus ? BinOp::Add : BinOp::Sub;
            advance();
            e = exprs::binary(op, e, parse_mul());
        }
        return e;
    }

    ExprPtr parse_mul() {
        ExprPtr e = parse_pow();
        while (cur_.kind == Tok::Star || cur_.kind == Tok::Slash) {
            BinOp op = cur_.kind == Tok::Star ? BinOp::Mul : BinOp::Div;
            advance();
            e = exprs::binary(op, e, parse_pow());
        }
        return e;
    }

    ExprPtr parse_pow() {
        ExprPtr e = parse_atom();
        if (cur_.kind == Tok::Pow) {
            advance();
            if (cur_.kind != Tok::Number || !cur_.number_is_int)
                throw SyntaxError(cur_.pos, "expected integer exponent");
            long long k = cur_.int_value;
            if (k < 2 || k > 4)
                throw LimitError("power exponent " + std::to_string(k) + " outside [2,4]");
            advance();
            e = exprs::power(e, int(k));
        }
        return e;
    }

    ExprPtr parse_atom() {
        switch (cur_.kind) {
            case Tok::Column: {
                ExprPtr e = exprs::column(cur_.column);
                advance();
                return e;
            }
            case Tok::Number: {
                ExprPtr e = exprs::literal(cur_.number);
                advance();
                return e;
            }
            case Tok::Func: {
                Func f = cur_.func;
                advance();
                if (cur_.kind != Tok::LParen) throw SyntaxError(cur_.pos, "expected '('");
                advance();
                ExprPtr arg = parse_add();
                if (cur_.kind != Tok::RParen) throw SyntaxError(cur_.pos, "expected ')'");
                advance();
                return exprs::call(f, arg);
            }
            case Tok::LParen: {
                advance();
                ExprPtr e = parse_add();
                if (cur_.kind != Tok::RParen) throw SyntaxError(cur_.pos, "expected ')'");
                advance();
                return e;
            }
            default:
                throw SyntaxError(cur_.pos, "expected expression");
        }
    }

    Lexer lex_;
    Token cur_;
};

}  // namespace detail

inline ExprPtr parse_expr(std::string_view text) { return detail::Parser(text).parse(); }

// ---- evaluation ----
//
// Element-wise over columns of equal length. Domain violations produce NaN
// at the offending element instead of throwing: log/sqrt of non-positive
// input, |denominator| < 1e-12, and any non-finite intermediate (e.g. exp
// overflow). Referencing a column the matrix does not have throws
// UnknownColumn. Pure: equal inputs give bit-identical outputs.

using ColumnLookup = std::function<const std::vector<double>*(int)>;

namespace detail {

inline double sanitize(double v) { return std::isfinite(v) ? v : std::numeric_limits<double>::quiet_NaN(); }

inline void eval_node(const FeatureExpr& e, const ColumnLookup& lookup, std::size_t rows,
                      std::vector<double>& out) {
    switch (e.kind) {
        case ExprKind::Column: {
            const std::vector<double>* col = lookup(e.column);
            if (col == nullptr)
                throw UnknownColumn("expression references column X" + std::to_string(e.column) +
                                    " beyond matrix width");
            out.assign(col->begin(), col->end());
            return;
        }
        case ExprKind::Literal:
            out.assign(rows, e.value);
            return;
        case ExprKind::Call: {
            eval_node(*e.lhs, lookup, rows, out);
            for (double& v : out) {
                switch (e.func) {
                    case Func::Log: v = v > 0.0 ? std::log(v) : std::numeric_limits<double>::quiet_NaN(); break;
                    case Func::Sqrt: v = v >= 0.0 ? std::sqrt(v) : std::numeric_limits<double>::quiet_NaN(); break;
                    case Func::Abs: v = std::fabs(v); break;
                    case Func::Exp: v = sanitize(std::exp(v)); break;
                    case Func::Sin: v = std::sin(v); break;
                    case Func::Cos: v = std::cos(v); break;
                }
                v = sanitize(v);
            }
            return;
        }
        case ExprKind::Power: {
            eval_node(*e.lhs, lookup, rows, out);
            for (double& v : out) {
                double r = v;
                for (int k = 1; k < e.exponent; ++k) r *= v;
                v = sanitize(r);
            }
            return;
        }
        case ExprKind::Binary: {
            eval_node(*e.lhs, lookup, rows, out);
            std::vector<double> rhs;
            eval_node(*e.rhs, lookup, rows, rhs);
            for (std::size_t i = 0; i < out.size(); ++i) {
                double a = out[i], b = rhs[i];
                double r;
                switch (e.op) {
                    case BinOp::Add: r = a + b; break;
                    case BinOp::Sub: r = a - b; break;
                    case BinOp::Mul: r = a * b; break;
                    case BinOp::Div:
                        r = std::fabs(b) < kDivisionGuard ? std::numeric_limits<double>::quiet_NaN()
                                                          : a / b;
                        break;
                }
                out[i] = sanitize(r);
            }
            return;
        }
    }
}

}  // namespace detail

inline std::vector<double> evaluate(const ExprPtr& e, const ColumnLookup& lookup, std::size_t rows) {
    std::vector<double> out;
    detail::eval_node(*e, lookup, rows, out);
    return out;
}

inline std::vector<double> evaluate(const ExprPtr& e,
                                    const std::vector<std::vector<double>>& columns) {
    std::size_t rows = columns.empty() ? 0 : columns.front().size();
    ColumnLookup lookup = [&](int idx) -> const std::vector<double>* {
        if (idx < 0 || std::size_t(idx) >= columns.size()) return nullptr;
        return &columns[std::size_t(idx)];
    };
    return evaluate(e, lookup, rows);
}

}  // namespace flafe
