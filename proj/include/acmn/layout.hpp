#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "acmn/common.hpp"
#include "acmn/conllu.hpp"

// Turns a dependency parse into the network layout: relations are classified
// into the two composition-relevant categories (everything else is neutral),
// non-noun leaves are pruned away, and the remaining tree is flattened into a
// bottom-up execution plan with a height annotation per node.

namespace acmn {

enum class RelationClass { ClausalPredicate, Modifier, Neutral };

// Short codes used in serialized plans: P, M, N.
inline const char* relation_code(RelationClass c) {
  switch (c) {
    case RelationClass::ClausalPredicate: return "P";
    case RelationClass::Modifier: return "M";
    default: return "N";
  }
}

inline const char* relation_name(RelationClass c) {
  switch (c) {
    case RelationClass::ClausalPredicate: return "ClausalPredicate";
    case RelationClass::Modifier: return "Modifier";
    default: return "Neutral";
  }
}

// Total over all labels; expects normalized deprels (see normalize_deprel).
inline RelationClass classify_relation(std::string_view deprel) {
  static const std::array<std::string_view, 8> kClausal = {
      "NSUBJ", "NSUBJPASS", "CSUBJ", "CSUBJPASS",
      "DOBJ",  "IOBJ",      "CCOMP", "XCOMP"};
  static const std::array<std::string_view, 9> kModifier = {
      "NMOD", "AMOD", "NUMMOD", "ADVMOD", "APPOS",
      "ACL",  "DET",  "CASE",   "COMPOUND"};
  for (auto s : kClausal)
    if (s == deprel) return RelationClass::ClausalPredicate;
  for (auto s : kModifier)
    if (s == deprel) return RelationClass::Modifier;
  return RelationClass::Neutral;
}

struct DepTree {
  std::vector<Token> tokens;            // sorted by token index
  int root = 0;                         // token index of the root
  std::map<int, std::vector<int>> children;  // token index -> dependents, ascending

  const Token& token(int index) const {
    for (const Token& t : tokens)
      if (t.index == index) return t;
    throw ContractError("DepTree: no token with index " + std::to_string(index));
  }
};

// Validates single-rootedness, head resolution, and reachability (which,
// with one head per non-root node, rules out cycles).
inline DepTree build_tree(const std::vector<Token>& tokens) {
  if (tokens.empty()) throw ContractError("build_tree: empty token list");
  DepTree tree;
  tree.tokens = tokens;
  std::sort(tree.tokens.begin(), tree.tokens.end(),
            [](const Token& a, const Token& b) { return a.index < b.index; });
  std::map<int, const Token*> by_index;
  for (const Token& t : tree.tokens) {
    if (!by_index.emplace(t.index, &t).second)
      throw ContractError("build_tree: duplicate token index " + std::to_string(t.index));
  }
  int root = 0;
  for (const Token& t : tree.tokens) {
    if (t.head == 0) {
      if (root != 0) throw ContractError("build_tree: multiple roots (" + std::to_string(root) +
                                         " and " + std::to_string(t.index) + ")");
      root = t.index;
    } else {
      if (!by_index.count(t.head))
        throw ContractError("build_tree: token " + std::to_string(t.index) +
                            " has head " + std::to_string(t.head) + " which does not exist");
      tree.children[t.head].push_back(t.index);
    }
  }
  if (root == 0) throw ContractError("build_tree: no root token");
  tree.root = root;
  for (auto& [h, kids] : tree.children) std::sort(kids.begin(), kids.end());

  std::vector<int> stack = {root};
  std::size_t seen = 0;
  while (!stack.empty()) {
    int n = stack.back();
    stack.pop_back();
    ++seen;
    auto it = tree.children.find(n);
    if (it != tree.children.end())
      for (int c : it->second) stack.push_back(c);
  }
  if (seen != tree.tokens.size())
    throw ContractError("build_tree: " + std::to_string(tree.tokens.size() - seen) +
                        " token(s) unreachable from the root (cycle or disconnected)");
  return tree;
}

inline bool is_noun_upos(std::string_view upos) {
  return upos == "NOUN" || upos == "PROPN" || upos == "PRON";
}

// Removes every leaf whose UPOS is not nominal; the root always survives.
// Leaves are identified on the tree as it stood at the start of the pass, so
// a node exposed by this pass is only removed when fixed_point is set.
inline DepTree prune_tree(const DepTree& tree, bool fixed_point = false) {
  std::vector<Token> alive = tree.tokens;
  bool again = true;
  while (again) {
    again = false;
    std::map<int, int> child_count;
    for (const Token& t : alive)
      if (t.head != 0) ++child_count[t.head];
    std::vector<Token> kept;
    kept.reserve(alive.size());
    for (const Token& t : alive) {
      bool leaf = child_count.find(t.index) == child_count.end();
      bool removable = leaf && t.index != tree.root && !is_noun_upos(t.upos);
      if (removable)
        again = fixed_point;
      else
        kept.push_back(t);
    }
    if (kept.size() == alive.size()) again = false;
    alive = std::move(kept);
  }
  return build_tree(alive);
}

struct PlanStep {
  int node = 0;           // token index in the pruned tree
  int word_position = 0;  // 0-based position in the original sentence
  std::string form;
  int height = 0;         // longest path down to a leaf
  std::vector<std::pair<int, RelationClass>> children;  // (step index, class)
};

struct ExecutionPlan {
  std::vector<PlanStep> steps;  // post-order; root last
  int max_height = 0;
};

// Deterministic post-order flattening; children are visited in ascending
// token index.  Revalidates the tree so malformed input fails loudly.
inline ExecutionPlan compile_plan(const DepTree& input) {
  DepTree tree = build_tree(input.tokens);
  ExecutionPlan plan;
  plan.steps.reserve(tree.tokens.size());
  auto visit = [&](auto&& self, int node) -> int {
    PlanStep step;
    step.node = node;
    const Token& tok = tree.token(node);
    step.word_position = tok.index - 1;
    step.form = tok.form;
    auto it = tree.children.find(node);
    if (it != tree.children.end()) {
      for (int c : it->second) {
        int child_step = self(self, c);
        step.children.emplace_back(child_step,
                                   classify_relation(tree.token(c).deprel));
        step.height = std::max(step.height, plan.steps[child_step].height + 1);
      }
    }
    plan.steps.push_back(std::move(step));
    return int(plan.steps.size()) - 1;
  };
  visit(visit, tree.root);
  plan.max_height = plan.steps.back().height;
  return plan;
}

struct RelationStats {
  std::map<std::string, long> deprel_counts;
  std::array<long, 3> class_counts{};  // indexed by RelationClass
  long edges = 0;

  void add(const DepTree& tree) {
    for (const Token& t : tree.tokens) {
      if (t.head == 0) continue;  // the root has no incoming edge
      ++deprel_counts[t.deprel];
      ++class_counts[std::size_t(classify_relation(t.deprel))];
      ++edges;
    }
  }
};

inline RelationStats relation_stats(const std::vector<DepTree>& corpus) {
  RelationStats stats;
  for (const DepTree& t : corpus) stats.add(t);
  return stats;
}

inline nlohmann::json plan_to_json(const ExecutionPlan& plan) {
  nlohmann::json steps = nlohmann::json::array();
  for (const PlanStep& s : plan.steps) {
    nlohmann::json kids = nlohmann::json::array();
    for (auto [idx, cls] : s.children)
      kids.push_back(nlohmann::json::array({idx, relation_code(cls)}));
    steps.push_back({{"node", s.node},
                     {"word_position", s.word_position},
                     {"form", s.form},
                     {"height", s.height},
                     {"children", std::move(kids)}});
  }
  return {{"steps", std::move(steps)}, {"max_height", plan.max_height}};
}

inline nlohmann::json stats_to_json(const RelationStats& stats) {
  nlohmann::json deprels = nlohmann::json::object();
  for (const auto& [label, count] : stats.deprel_counts) deprels[label] = count;
  return {{"deprels", std::move(deprels)},
          {"classes",
           {{"ClausalPredicate", stats.class_counts[0]},
            {"Modifier", stats.class_counts[1]},
            {"Neutral", stats.class_counts[2]}}},
          {"edges", stats.edges}};
}

}  // namespace acmn
