#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>
#include <string>
#include <vector>

#include "acmn/layout.hpp"
#include "acmn/rng.hpp"

using acmn::build_tree;
using acmn::classify_relation;
using acmn::compile_plan;
using acmn::DepTree;
using acmn::ExecutionPlan;
using acmn::parse_conllu;
using acmn::prune_tree;
using acmn::RelationClass;
using acmn::Rng;
using acmn::Token;

namespace {

Token tok(int index, std::string form, std::string upos, int head,
          std::string deprel) {
  return Token{index, std::move(form), std::move(upos), head, std::move(deprel)};
}

// "Are there any other things that are the same material as the purple
// object?" with "there" as the sentence root.
const char* kThereFixture =
    "# text = Are there any other things that are the same material as the purple object ?\n"
    "1\tAre\tbe\tAUX\tVBP\t_\t2\tcop\t_\t_\n"
    "2\tthere\tthere\tPRON\tEX\t_\t0\troot\t_\t_\n"
    "3\tany\tany\tDET\tDT\t_\t5\tdet\t_\t_\n"
    "4\tother\tother\tADJ\tJJ\t_\t5\tamod\t_\t_\n"
    "5\tthings\tthing\tNOUN\tNNS\t_\t2\tnsubj\t_\t_\n"
    "6\tthat\tthat\tPRON\tWDT\t_\t10\tnsubj\t_\t_\n"
    "7\tare\tbe\tAUX\tVBP\t_\t10\tcop\t_\t_\n"
    "8\tthe\tthe\tDET\tDT\t_\t10\tdet\t_\t_\n"
    "9\tsame\tsame\tADJ\tJJ\t_\t10\tamod\t_\t_\n"
    "10\tmaterial\tmaterial\tNOUN\tNN\t_\t5\tacl:relcl\t_\t_\n"
    "11\tas\tas\tADP\tIN\t_\t14\tcase\t_\t_\n"
    "12\tthe\tthe\tDET\tDT\t_\t14\tdet\t_\t_\n"
    "13\tpurple\tpurple\tADJ\tJJ\t_\t14\tamod\t_\t_\n"
    "14\tobject\tobject\tNOUN\tNN\t_\t10\tnmod\t_\t_\n"
    "15\t?\t?\tPUNCT\t.\t_\t2\tpunct\t_\t_\n";

}  // namespace

TEST_CASE("relation classification matches the category table exhaustively") {
  const std::vector<std::string> clausal = {"NSUBJ", "NSUBJPASS", "CSUBJ",
                                            "CSUBJPASS", "DOBJ", "IOBJ",
                                            "CCOMP", "XCOMP"};
  const std::vector<std::string> modifier = {"NMOD", "AMOD", "NUMMOD",
                                             "ADVMOD", "APPOS", "ACL",
                                             "DET", "CASE", "COMPOUND"};
  CHECK(clausal.size() + modifier.size() == 17);
  for (const auto& d : clausal)
    CHECK(classify_relation(d) == RelationClass::ClausalPredicate);
  for (const auto& d : modifier)
    CHECK(classify_relation(d) == RelationClass::Modifier);
  for (const auto* d : {"ROOT", "PUNCT", "COP", "CONJ", "CC", "MARK", "AUX",
                        "EXPL", "PARATAXIS", "DEP", ""})
    CHECK(classify_relation(d) == RelationClass::Neutral);
}

TEST_CASE("conllu parsing maps fields and normalizes deprels") {
  auto sentences = parse_conllu(kThereFixture);
  REQUIRE(sentences.size() == 1);
  const auto& s = sentences[0];
  CHECK(s.text ==
        "Are there any other things that are the same material as the purple object ?");
  REQUIRE(s.tokens.size() == 15);
  const Token& t4 = s.tokens[3];
  CHECK(t4.index == 4);
  CHECK(t4.form == "other");
  CHECK(t4.upos == "ADJ");
  CHECK(t4.head == 5);
  CHECK(t4.deprel == "AMOD");
  CHECK(s.tokens[9].deprel == "ACL");  // acl:relcl, subtype stripped
}

TEST_CASE("conllu parsing skips ranges and empty nodes, splits sentences") {
  std::string text =
      "1\tHe\the\tPRON\t_\t_\t2\tnsubj\t_\t_\n"
      "2\truns\trun\tVERB\t_\t_\t0\troot\t_\t_\n"
      "\n"
      "# comment\n"
      "1-2\tit's\t_\t_\t_\t_\t_\t_\t_\t_\n"
      "1\tit\tit\tPRON\t_\t_\t2\tnsubj\t_\t_\n"
      "2\tis\tbe\tAUX\t_\t_\t0\troot\t_\t_\n"
      "2.1\tghost\t_\t_\t_\t_\t_\t_\t_\t_\n";
  auto sentences = parse_conllu(text);
  REQUIRE(sentences.size() == 2);
  CHECK(sentences[0].tokens.size() == 2);
  CHECK(sentences[1].tokens.size() == 2);
  CHECK(sentences[1].tokens[0].form == "it");
}

TEST_CASE("conllu format errors carry line numbers") {
  CHECK_THROWS_MATCHES(
      parse_conllu("1\tonly\tthree\n"), acmn::FormatError,
      Catch::Matchers::MessageMatches(
          Catch::Matchers::ContainsSubstring("line 1")));
  std::string bad_head =
      "1\tok\tok\tNOUN\t_\t_\t0\troot\t_\t_\n"
      "2\tbad\tbad\tNOUN\t_\t_\tx\tnmod\t_\t_\n";
  CHECK_THROWS_MATCHES(
      parse_conllu(bad_head), acmn::FormatError,
      Catch::Matchers::MessageMatches(
          Catch::Matchers::ContainsSubstring("line 2") &&
          Catch::Matchers::ContainsSubstring("HEAD")));
}

TEST_CASE("tree building validates structure") {
  CHECK_THROWS_AS(build_tree({}), acmn::ContractError);

  // two roots
  CHECK_THROWS_AS(build_tree({tok(1, "a", "NOUN", 0, "ROOT"),
                              tok(2, "b", "NOUN", 0, "ROOT")}),
                  acmn::ContractError);
  // no root, cycle between 1 and 2
  CHECK_THROWS_AS(build_tree({tok(1, "a", "NOUN", 2, "NMOD"),
                              tok(2, "b", "NOUN", 1, "NMOD")}),
                  acmn::ContractError);
  // cycle unreachable from the root
  CHECK_THROWS_AS(build_tree({tok(1, "a", "NOUN", 2, "NMOD"),
                              tok(2, "b", "NOUN", 1, "NMOD"),
                              tok(3, "c", "NOUN", 0, "ROOT")}),
                  acmn::ContractError);
  // dangling head
  CHECK_THROWS_AS(build_tree({tok(1, "a", "NOUN", 9, "NMOD"),
                              tok(2, "b", "NOUN", 0, "ROOT")}),
                  acmn::ContractError);
  // duplicate index
  CHECK_THROWS_AS(build_tree({tok(1, "a", "NOUN", 0, "ROOT"),
                              tok(1, "b", "NOUN", 1, "NMOD")}),
                  acmn::ContractError);

  DepTree t = build_tree({tok(2, "b", "NOUN", 1, "NMOD"),
                          tok(1, "a", "NOUN", 0, "ROOT"),
                          tok(3, "c", "NOUN", 1, "NMOD")});
  CHECK(t.root == 1);
  CHECK(t.children.at(1) == std::vector<int>{2, 3});
}

TEST_CASE("non-projective trees are accepted") {
  // Crossing arcs: 1->3 and 2->4 cross, but it is still a tree.
  DepTree t = build_tree({tok(1, "a", "NOUN", 0, "ROOT"),
                          tok(2, "b", "NOUN", 4, "NMOD"),
                          tok(3, "c", "NOUN", 1, "NMOD"),
                          tok(4, "d", "NOUN", 1, "NMOD")});
  CHECK(t.tokens.size() == 4);
  CHECK(compile_plan(t).steps.size() == 4);
}

TEST_CASE("pruning removes non-noun leaves only, one pass by default") {
  SECTION("determiner under a noun goes away") {
    DepTree t = build_tree({tok(1, "object", "NOUN", 0, "ROOT"),
                            tok(2, "the", "DET", 1, "DET")});
    DepTree p = prune_tree(t);
    REQUIRE(p.tokens.size() == 1);
    CHECK(p.tokens[0].form == "object");
  }
  SECTION("noun leaves survive") {
    DepTree t = build_tree({tok(1, "shape", "NOUN", 0, "ROOT"),
                            tok(2, "object", "NOUN", 1, "NMOD")});
    CHECK(prune_tree(t).tokens.size() == 2);
  }
  SECTION("single pass exposes but keeps a new non-noun leaf") {
    DepTree t = build_tree({tok(1, "what", "PRON", 0, "ROOT"),
                            tok(2, "is", "VERB", 1, "COP"),
                            tok(3, "red", "ADJ", 2, "AMOD")});
    DepTree p = prune_tree(t);
    REQUIRE(p.tokens.size() == 2);
    CHECK(p.tokens[1].form == "is");

    DepTree fixed = prune_tree(t, true);
    REQUIRE(fixed.tokens.size() == 1);
    CHECK(fixed.tokens[0].form == "what");
  }
  SECTION("a non-noun root is never removed") {
    DepTree t = build_tree({tok(1, "have", "VERB", 0, "ROOT")});
    CHECK(prune_tree(t).tokens.size() == 1);
    CHECK(prune_tree(t, true).tokens.size() == 1);
  }
  SECTION("original positions survive pruning") {
    auto sentences = parse_conllu(kThereFixture);
    DepTree p = prune_tree(build_tree(sentences[0].tokens));
    for (const Token& t : p.tokens) CHECK(t.index >= 1);
    std::set<int> kept;
    for (const Token& t : p.tokens) kept.insert(t.index);
    CHECK(kept == std::set<int>{2, 5, 6, 10, 14});
  }
}

TEST_CASE("pruning never grows the tree and leaves no removable leaf behind") {
  Rng rng = Rng::stream(23, "prune-prop");
  const std::vector<std::string> upos_pool = {"NOUN", "VERB", "ADJ",
                                              "DET",  "ADP",  "PRON"};
  for (int it = 0; it < 200; ++it) {
    int n = rng.uniform_int(1, 14);
    std::vector<Token> tokens;
    for (int i = 1; i <= n; ++i) {
      int head = (i == 1) ? 0 : rng.uniform_int(1, i - 1);
      tokens.push_back(tok(i, "w" + std::to_string(i),
                           upos_pool[rng.uniform_int(0, int(upos_pool.size()) - 1)],
                           head, "NMOD"));
    }
    DepTree t = build_tree(tokens);
    DepTree p = prune_tree(t);
    CHECK(p.tokens.size() <= t.tokens.size());
    CHECK(p.root == t.root);

    // No kept node may be a leaf of the *input* tree that was removable.
    std::set<int> kept;
    for (const Token& k : p.tokens) kept.insert(k.index);
    for (const Token& k : t.tokens) {
      bool input_leaf = t.children.find(k.index) == t.children.end();
      if (input_leaf && k.index != t.root && !acmn::is_noun_upos(k.upos))
        CHECK_FALSE(kept.count(k.index));
    }

    // Fixed point: afterwards every removable leaf is gone.
    DepTree fp = prune_tree(t, true);
    for (const Token& k : fp.tokens) {
      bool leaf = fp.children.find(k.index) == fp.children.end();
      if (leaf && k.index != fp.root) CHECK(acmn::is_noun_upos(k.upos));
    }
  }
}

TEST_CASE("plan compilation: base cases") {
  SECTION("single node") {
    ExecutionPlan p = compile_plan(build_tree({tok(3, "what", "PRON", 0, "ROOT")}));
    REQUIRE(p.steps.size() == 1);
    CHECK(p.steps[0].node == 3);
    CHECK(p.steps[0].word_position == 2);
    CHECK(p.steps[0].height == 0);
    CHECK(p.steps[0].children.empty());
    CHECK(p.max_height == 0);
  }
  SECTION("root with two leaves") {
    ExecutionPlan p = compile_plan(build_tree({tok(1, "side", "NOUN", 0, "ROOT"),
                                               tok(2, "object", "NOUN", 1, "NSUBJ"),
                                               tok(3, "image", "NOUN", 1, "NMOD")}));
    REQUIRE(p.steps.size() == 3);
    CHECK(p.steps[2].node == 1);
    CHECK(p.steps[2].height == 1);
    CHECK(p.max_height == 1);
    REQUIRE(p.steps[2].children.size() == 2);
    CHECK(p.steps[2].children[0] ==
          std::make_pair(0, RelationClass::ClausalPredicate));
    CHECK(p.steps[2].children[1] == std::make_pair(1, RelationClass::Modifier));
  }
}

TEST_CASE("compiled schedule equals an independent recursive traversal") {
  Rng rng = Rng::stream(23, "plan-prop");
  const std::vector<std::string> deprels = {"NSUBJ", "NMOD", "AMOD", "COP",
                                            "DOBJ", "PUNCT", "ACL", "DET"};
  for (int it = 0; it < 200; ++it) {
    int n = rng.uniform_int(1, 16);
    std::vector<Token> tokens;
    for (int i = 1; i <= n; ++i) {
      int head = (i == 1) ? 0 : rng.uniform_int(1, i - 1);
      tokens.push_back(tok(i, "w" + std::to_string(i), "NOUN", head,
                           i == 1 ? "ROOT" : deprels[rng.uniform_int(0, 7)]));
    }
    DepTree t = build_tree(tokens);

    // Reference: direct recursion over the adjacency, children ascending.
    std::vector<int> ref_order;
    std::map<int, int> ref_height;
    auto walk = [&](auto&& self, int node) -> int {
      int h = 0;
      auto it2 = t.children.find(node);
      if (it2 != t.children.end())
        for (int c : it2->second) h = std::max(h, self(self, c) + 1);
      ref_order.push_back(node);
      ref_height[node] = h;
      return h;
    };
    walk(walk, t.root);

    ExecutionPlan plan = compile_plan(t);
    REQUIRE(plan.steps.size() == ref_order.size());
    for (std::size_t i = 0; i < plan.steps.size(); ++i) {
      const auto& s = plan.steps[i];
      CHECK(s.node == ref_order[i]);
      CHECK(s.height == ref_height[s.node]);
      CHECK(s.word_position == s.node - 1);
      for (auto [child, cls] : s.children) {
        CHECK(child < int(i));
        CHECK(cls == classify_relation(t.token(plan.steps[child].node).deprel));
      }
    }
    CHECK(plan.max_height == ref_height[t.root]);
    if (n == 1) CHECK(plan.max_height == 0);
  }
}

TEST_CASE("the existential-root fixture compiles with 'there' on top") {
  auto sentences = parse_conllu(kThereFixture);
  DepTree pruned = prune_tree(build_tree(sentences[0].tokens));
  ExecutionPlan plan = compile_plan(pruned);
  REQUIRE(plan.steps.size() == 5);
  CHECK(plan.steps.back().form == "there");
  CHECK(plan.steps.back().word_position == 1);
  CHECK(plan.max_height == 3);

  // things <- (nsubj) there; material <- (acl) things; object <- (nmod) material
  const acmn::PlanStep& root = plan.steps.back();
  REQUIRE(root.children.size() == 1);
  CHECK(plan.steps[root.children[0].first].form == "things");
  CHECK(root.children[0].second == RelationClass::ClausalPredicate);
}

TEST_CASE("relation stats count edges and are additive") {
  DepTree t = build_tree({tok(1, "runs", "VERB", 0, "ROOT"),
                          tok(2, "dog", "NOUN", 1, "NSUBJ"),
                          tok(3, "the", "DET", 2, "DET")});
  acmn::RelationStats one = acmn::relation_stats({t});
  CHECK(one.edges == 2);
  CHECK(one.deprel_counts.at("NSUBJ") == 1);
  CHECK(one.deprel_counts.at("DET") == 1);
  CHECK(one.class_counts[std::size_t(RelationClass::ClausalPredicate)] == 1);
  CHECK(one.class_counts[std::size_t(RelationClass::Modifier)] == 1);
  CHECK(one.class_counts[std::size_t(RelationClass::Neutral)] == 0);

  acmn::RelationStats two = acmn::relation_stats({t, t});
  CHECK(two.edges == 4);
  CHECK(two.deprel_counts.at("NSUBJ") == 2);

  long total = 0;
  for (auto& [label, c] : two.deprel_counts) total += c;
  long by_class = two.class_counts[0] + two.class_counts[1] + two.class_counts[2];
  CHECK(total == two.edges);
  CHECK(by_class == two.edges);

  CHECK(acmn::relation_stats({}).edges == 0);
}

TEST_CASE("plan serialization uses the documented schema") {
  ExecutionPlan p = compile_plan(build_tree({tok(1, "side", "NOUN", 0, "ROOT"),
                                             tok(2, "object", "NOUN", 1, "NSUBJ"),
                                             tok(3, "image", "NOUN", 1, "NMOD")}));
  nlohmann::json j = acmn::plan_to_json(p);
  REQUIRE(j.contains("steps"));
  CHECK(j["max_height"] == 1);
  REQUIRE(j["steps"].size() == 3);
  CHECK(j["steps"][2]["form"] == "side");
  CHECK(j["steps"][2]["children"][0][0] == 0);
  CHECK(j["steps"][2]["children"][0][1] == "P");
  CHECK(j["steps"][2]["children"][1][1] == "M");
  CHECK(j["steps"][0]["children"].is_array());
  CHECK(j["steps"][0]["children"].empty());
}
