#include "ldm/formula.hpp"

#include <algorithm>
#include <cctype>

#include "ldm/error.hpp"

namespace ldm {

namespace {

struct Parser {
    const std::string& s;
    const std::vector<std::string>& names;
    std::size_t pos = 0;

    void skip_ws()
    {
        while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos])))
            ++pos;
    }

    bool accept(char c)
    {
        skip_ws();
        if (pos < s.size() && s[pos] == c) {
            ++pos;
            return true;
        }
        return false;
    }

    [[noreturn]] void fail(const std::string& what) const
    {
        throw FormatError("formula '" + s + "': " + what + " at offset " + std::to_string(pos));
    }
};

} // namespace

Formula::Formula(const std::string& text, const std::vector<std::string>& names) : text_(text)
{
    Parser p{text, names};

    struct Impl {
        Parser& p;
        std::vector<Node>& nodes;
        bool& disj;

        int push(Node n)
        {
            nodes.push_back(n);
            return static_cast<int>(nodes.size()) - 1;
        }

        int expr()
        {
            int lhs = term();
            while (p.accept('|'))
                lhs = push(Node{Op::or_, -1, lhs, term()});
            return lhs;
        }
        int term()
        {
            int lhs = factor();
            while (p.accept('&')) {
                disj = false;
                lhs = push(Node{Op::and_, -1, lhs, factor()});
            }
            return lhs;
        }
        int factor()
        {
            if (p.accept('(')) {
                int inner = expr();
                if (!p.accept(')'))
                    p.fail("expected ')'");
                return inner;
            }
            p.skip_ws();
            const auto start = p.pos;
            while (p.pos < p.s.size()
                   && (std::isalnum(static_cast<unsigned char>(p.s[p.pos])) || p.s[p.pos] == '_'))
                ++p.pos;
            if (start == p.pos)
                p.fail("expected a blob name");
            const auto name = p.s.substr(start, p.pos - start);
            const auto it = std::find(p.names.begin(), p.names.end(), name);
            if (it == p.names.end())
                p.fail("unknown blob '" + name + "'");
            return push(Node{Op::var, static_cast<int>(it - p.names.begin()), -1, -1});
        }
    } impl{p, nodes_, disjunction_only_};

    root_ = impl.expr();
    p.skip_ws();
    if (p.pos != text.size())
        p.fail("unexpected trailing input");
}

bool Formula::evaluate(std::span<const bool> membership) const
{
    return eval_node(root_, membership);
}

bool Formula::eval_node(int node, std::span<const bool> membership) const
{
    const auto& n = nodes_[static_cast<std::size_t>(node)];
    switch (n.op) {
    case Op::var:
        return membership[static_cast<std::size_t>(n.var)];
    case Op::and_:
        return eval_node(n.lhs, membership) && eval_node(n.rhs, membership);
    case Op::or_:
        return eval_node(n.lhs, membership) || eval_node(n.rhs, membership);
    }
    return false;
}

} // namespace ldm
