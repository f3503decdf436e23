#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "acmn/checkpoint.hpp"
#include "acmn/conllu.hpp"
#include "acmn/dataset.hpp"
#include "acmn/image.hpp"
#include "acmn/layout.hpp"
#include "acmn/model.hpp"
#include "acmn/trainer.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw acmn::IoError("cannot open: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<acmn::DepTree> trees_from_conllu_text(const std::string& text) {
  std::vector<acmn::DepTree> trees;
  for (const acmn::Sentence& s : acmn::parse_conllu(text))
    trees.push_back(acmn::build_tree(s.tokens));
  return trees;
}

// Every dependency tree in a dataset directory, read from its manifests.
std::vector<acmn::DepTree> trees_from_dataset(const std::string& dir) {
  std::vector<acmn::DepTree> trees;
  for (const char* split : {"train", "test"}) {
    std::string path = dir + "/" + split + ".jsonl";
    std::ifstream is(path);
    if (!is) throw acmn::IoError("cannot open: " + path);
    std::string line;
    long line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw acmn::FormatError(std::string(split) + ".jsonl line " +
                                std::to_string(line_no) + ": " + e.what());
      }
      for (acmn::DepTree& t :
           trees_from_conllu_text(j.at("conllu").get<std::string>()))
        trees.push_back(std::move(t));
    }
  }
  return trees;
}

int env_workers(int fallback) {
  const char* env = std::getenv("ACMN_THREADS");
  if (!env || !*env) return fallback;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1)
    throw acmn::FormatError("ACMN_THREADS must be a positive integer, got '" +
                            std::string(env) + "'");
  return int(v);
}

struct ModelFlags {
  int grid = 8;
  int c_vis = 24;
  int d_word = 300;
  int d_hidden = 256;
  int d_fuse = 512;
  int d_att = 128;
  int heights = 5;
  std::vector<int> mlp = {256, 256};
  std::string variant = "full";
  bool coords = false;
  bool child_context = false;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--grid", grid, "attention grid side; images are grid*16");
    cmd->add_option("--c-vis", c_vis, "visual feature channels");
    cmd->add_option("--d-word", d_word, "word encoding width (even)");
    cmd->add_option("--d-hidden", d_hidden, "module hidden state width");
    cmd->add_option("--d-fuse", d_fuse, "composition fusion width");
    cmd->add_option("--d-att", d_att, "attention scoring width");
    cmd->add_option("--heights", heights, "module weight sets before clamping");
    cmd->add_option("--mlp", mlp, "answer head hidden sizes")->expected(2);
    cmd->add_option("--variant", variant, "model variant")
        ->check(CLI::IsMember({"full", "noresidual", "concat"}));
    cmd->add_flag("--coords", coords, "append coordinate channels to features");
    cmd->add_flag("--child-context", child_context,
                  "condition attention scores on child-attended features");
  }

  acmn::ModelConfig config(const acmn::LoadedDataset& data) const {
    acmn::ModelConfig cfg;
    cfg.grid_h = cfg.grid_w = grid;
    cfg.image_size = grid * 16;
    cfg.c_vis = c_vis;
    cfg.d_word = d_word;
    cfg.d_hidden = d_hidden;
    cfg.d_fuse = d_fuse;
    cfg.d_att = d_att;
    cfg.heights = heights;
    cfg.mlp_sizes = mlp;
    cfg.variant = acmn::variant_from_string(variant);
    cfg.use_coords = coords;
    cfg.attention_child_context = child_context;
    cfg.vocab = int(data.vocab.size());
    cfg.n_answers = int(data.answers.size());
    cfg.validate();
    return cfg;
  }
};

void check_compatible(const acmn::ModelConfig& cfg,
                      const acmn::LoadedDataset& data) {
  if (cfg.vocab != int(data.vocab.size()))
    throw acmn::FormatError("checkpoint vocabulary size " +
                            std::to_string(cfg.vocab) +
                            " does not match dataset vocabulary " +
                            std::to_string(data.vocab.size()));
  if (cfg.n_answers != int(data.answers.size()))
    throw acmn::FormatError("checkpoint answer count does not match dataset");
}

const acmn::LoadedSplit& pick_split(const acmn::LoadedDataset& data,
                                    const std::string& name) {
  return name == "train" ? data.train : data.test;
}

nlohmann::json eval_json(const acmn::EvalResult& r) {
  return {{"overall", r.overall()},
          {"relational", r.relational()},
          {"non_relational", r.non_relational()},
          {"n", r.n},
          {"n_rel", r.n_rel},
          {"n_nonrel", r.n_nonrel}};
}

void cmd_dump_attention(const std::string& ckpt_path, const std::string& dataset,
                        const std::string& split_name, bool fixed_point,
                        long scene, int question, const std::string& out_dir) {
  acmn::Checkpoint ck = acmn::read_checkpoint(ckpt_path);
  acmn::LoadedDataset data = acmn::load_dataset(dataset, fixed_point);
  check_compatible(ck.params.cfg, data);
  const acmn::LoadedSplit& split = pick_split(data, split_name);
  const acmn::ModelConfig& cfg = ck.params.cfg;

  std::vector<std::size_t> group;
  for (std::size_t i = 0; i < split.qa.size(); ++i)
    if (split.qa[i].image == scene) group.push_back(i);
  if (group.empty())
    throw acmn::ContractError("no scene with index " + std::to_string(scene) +
                              " in the " + split_name + " split");
  if (question < 0 || std::size_t(question) >= group.size())
    throw acmn::ContractError("question index out of range; scene has " +
                              std::to_string(group.size()) + " questions");
  const acmn::LoadedQA& qa = split.qa[group[std::size_t(question)]];

  std::filesystem::create_directories(out_dir);
  int s = cfg.image_size;
  std::vector<float> input(std::size_t(3) * s * s);
  acmn::image_to_input(split.images[std::size_t(qa.image)], s, input.data());

  acmn::Tape<float> tape(false);
  acmn::BoundModel<float> m = acmn::bind_model(tape, ck.params);
  acmn::Var<float> x = tape.constant_view({3, s, s}, input.data());
  acmn::Var<float> v = acmn::encode_image(tape, m, x);
  acmn::ForwardResult<float> fr =
      acmn::forward(tape, m, qa.plan, qa.token_ids, v, true);
  int pred = acmn::argmax(fr.logits.node->values, cfg.n_answers);

  nlohmann::json nodes = nlohmann::json::array();
  std::vector<float> up(std::size_t(s) * s);
  for (std::size_t step = 0; step < qa.plan.steps.size(); ++step) {
    const acmn::PlanStep& ps = qa.plan.steps[step];
    const float* att = fr.exec.att[step].node->values;
    std::vector<float> att_vec(att, att + cfg.cells());
    nodes.push_back(
        {{"form", ps.form}, {"height", ps.height}, {"att", att_vec}});

    acmn::resize_bilinear(att, cfg.grid_w, cfg.grid_h, up.data(), s, s);
    float mx = 0;
    for (float p : up) mx = std::max(mx, p);
    std::vector<std::uint8_t> gray(up.size());
    for (std::size_t i = 0; i < up.size(); ++i)
      gray[i] = std::uint8_t(
          std::min(255.0f, std::max(0.0f, up[i] / mx * 255.0f)) + 0.5f);
    std::string name = std::to_string(scene) + "_" + std::to_string(question) +
                       "_" + std::to_string(step) + "_" + ps.form + ".pgm";
    acmn::write_pgm((std::filesystem::path(out_dir) / name).string(), s, s,
                    gray);
  }

  nlohmann::json record = {{"question", qa.tokens},
                           {"answer", data.answers[std::size_t(qa.answer)]},
                           {"predicted", data.answers[std::size_t(pred)]},
                           {"nodes", std::move(nodes)}};
  std::string jname =
      std::to_string(scene) + "_" + std::to_string(question) + ".json";
  std::ofstream js(std::filesystem::path(out_dir) / jname);
  if (!js) throw acmn::IoError("cannot write attention record in " + out_dir);
  js << record.dump(2) << "\n";
  std::cout << record["predicted"].get<std::string>() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tree-structured visual question answering toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a scene/question corpus");
  std::string gen_out;
  acmn::DatasetOptions gen_opt;
  bool gen_no_count = false;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--train", gen_opt.n_train, "training scenes");
  gen->add_option("--test", gen_opt.n_test, "test scenes");
  gen->add_option("--seed", gen_opt.seed, "generator seed");
  gen->add_flag("--no-count", gen_no_count, "skip counting questions");
  gen->callback([&] {
    gen_opt.with_count = !gen_no_count;
    acmn::write_dataset(gen_out, gen_opt);
  });

  // compile
  auto* comp = app.add_subcommand(
      "compile", "compile dependency parses into execution plans");
  std::string comp_conllu;
  bool comp_fixed = false;
  comp->add_option("--conllu", comp_conllu, "CoNLL-U file")->required();
  comp->add_flag("--fixed-point", comp_fixed, "prune leaves to a fixed point");
  comp->callback([&] {
    nlohmann::json plans = nlohmann::json::array();
    for (const acmn::DepTree& t : trees_from_conllu_text(read_file(comp_conllu)))
      plans.push_back(
          acmn::plan_to_json(acmn::compile_plan(acmn::prune_tree(t, comp_fixed))));
    std::cout << plans.dump(2) << "\n";
  });

  // stats
  auto* stats = app.add_subcommand(
      "stats", "relation histogram over parses or a dataset");
  std::string stats_conllu, stats_dataset;
  auto* src = stats->add_option_group("source");
  src->add_option("--conllu", stats_conllu, "CoNLL-U file");
  src->add_option("--dataset", stats_dataset, "dataset directory");
  src->require_option(1);
  stats->callback([&] {
    std::vector<acmn::DepTree> trees =
        stats_conllu.empty() ? trees_from_dataset(stats_dataset)
                             : trees_from_conllu_text(read_file(stats_conllu));
    std::cout << acmn::stats_to_json(acmn::relation_stats(trees)).dump(2)
              << "\n";
  });

  // train
  auto* tr = app.add_subcommand("train", "train a model on a dataset");
  std::string tr_dataset, tr_out;
  ModelFlags tr_model;
  acmn::TrainOptions tr_opt;
  bool tr_resume = false, tr_fixed = false, tr_eval_debug = false;
  std::uint64_t tr_seed = 0;
  tr->add_option("--dataset", tr_dataset, "dataset directory")->required();
  tr->add_option("--out", tr_out, "run directory for checkpoints and metrics")
      ->required();
  tr->add_option("--epochs", tr_opt.epochs, "epochs to train");
  tr->add_option("--batch", tr_opt.batch_size, "batch size");
  tr->add_option("--workers", tr_opt.n_workers,
                 "data-parallel workers (ACMN_THREADS overrides)");
  tr->add_option("--seed", tr_seed, "initialization and shuffling seed");
  tr->add_option("--lr", tr_opt.adam.lr, "Adam learning rate");
  tr->add_option("--clip", tr_opt.adam.clip, "gradient norm cap, 0 disables");
  tr->add_option("--time-budget", tr_opt.time_budget_s,
                 "stop after this many seconds, 0 disables");
  tr->add_flag("--resume", tr_resume, "continue from <out>/latest.ckpt");
  tr->add_flag("--fixed-point", tr_fixed, "prune parses to a fixed point");
  tr->add_flag("--eval-debug", tr_eval_debug,
               "check attention distributions during evaluation");
  tr_model.add_to(tr);
  tr->callback([&] {
    acmn::LoadedDataset data = acmn::load_dataset(tr_dataset, tr_fixed);
    tr_opt.seed = tr_seed;
    tr_opt.out_dir = tr_out;
    tr_opt.n_workers = env_workers(tr_opt.n_workers);
    tr_opt.eval_debug = tr_eval_debug;

    acmn::ParamSet<float> params;
    acmn::AdamState<float> adam;
    int start_epoch = 0;
    std::string latest = tr_out + "/latest.ckpt";
    if (tr_resume && std::filesystem::exists(latest)) {
      start_epoch = acmn::resume_from(latest, params, adam);
      check_compatible(params.cfg, data);
    } else {
      acmn::ModelConfig cfg = tr_model.config(data);
      params = acmn::ParamSet<float>::init(cfg, tr_seed);
      adam = acmn::AdamState<float>(params);
    }
    acmn::EpochMetrics last = acmn::train(data, params, adam, start_epoch, tr_opt);
    std::cout << last.to_json().dump() << "\n";
  });

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_dataset, ev_split = "test";
  bool ev_debug = false, ev_fixed = false;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--dataset", ev_dataset, "dataset directory")->required();
  ev->add_option("--split", ev_split, "split to evaluate")
      ->check(CLI::IsMember({"train", "test"}));
  ev->add_flag("--debug", ev_debug, "check attention distributions");
  ev->add_flag("--fixed-point", ev_fixed, "prune parses to a fixed point");
  ev->callback([&] {
    acmn::Checkpoint ck = acmn::read_checkpoint(ev_ckpt);
    acmn::LoadedDataset data = acmn::load_dataset(ev_dataset, ev_fixed);
    check_compatible(ck.params.cfg, data);
    acmn::EvalResult r =
        acmn::evaluate(ck.params, pick_split(data, ev_split), ev_debug);
    std::cout << eval_json(r).dump() << "\n";
  });

  // dump-attention
  auto* da = app.add_subcommand(
      "dump-attention", "write per-node attention maps for one question");
  std::string da_ckpt, da_dataset, da_out, da_split = "test";
  long da_scene = 0;
  int da_question = 0;
  bool da_fixed = false;
  da->add_option("--checkpoint", da_ckpt, "checkpoint file")->required();
  da->add_option("--dataset", da_dataset, "dataset directory")->required();
  da->add_option("--out", da_out, "output directory")->required();
  da->add_option("--scene", da_scene, "scene index within the split");
  da->add_option("--question", da_question, "question index within the scene");
  da->add_option("--split", da_split, "split to read")
      ->check(CLI::IsMember({"train", "test"}));
  da->add_flag("--fixed-point", da_fixed, "prune parses to a fixed point");
  da->callback([&] {
    cmd_dump_attention(da_ckpt, da_dataset, da_split, da_fixed, da_scene,
                       da_question, da_out);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const acmn::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
