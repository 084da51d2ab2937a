#pragma once

#include <span>
#include <string>
#include <vector>

namespace ldm {

/// Boolean dependence formula over blob names.
///
/// Grammar: expr := term ('|' term)* ; term := factor ('&' factor)* ;
/// factor := name | '(' expr ')'. '&' binds tighter than '|'.
class Formula {
public:
    /// Throws FormatError on syntax errors or names not in `names`.
    Formula(const std::string& text, const std::vector<std::string>& names);

    /// `membership[i]` is the truth value of names[i].
    bool evaluate(std::span<const bool> membership) const;

    /// True when the formula uses only '|' (ground truth is the blob union).
    bool disjunction_only() const { return disjunction_only_; }
    const std::string& text() const { return text_; }

private:
    enum class Op { var, and_, or_ };
    struct Node {
        Op op;
        int var = -1;
        int lhs = -1;
        int rhs = -1;
    };

    bool eval_node(int node, std::span<const bool> membership) const;

    std::string text_;
    std::vector<Node> nodes_;
    int root_ = -1;
    bool disjunction_only_ = true;
};

} // namespace ldm
