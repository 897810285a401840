// Command-line pipeline: sample a walk corpus, pre-train, fine-tune,
// evaluate, run the verification oracles, and count prompt tokens.
//
// Exit codes: 0 success, 1 usage/config error, 2 runtime/data error,
// 3 numerical failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "gdl/config.hpp"
#include "gdl/corpus.hpp"
#include "gdl/graph.hpp"
#include "gdl/model.hpp"
#include "gdl/tokens.hpp"
#include "gdl/train.hpp"
#include "gdl/verify.hpp"
#include "gdl/vocab.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace gdl;

namespace {

struct CliState {
  RunConfig cfg;
  bool dry_run = false;
  std::string eval_split = "test";
};

std::string out_path(const RunConfig& cfg, const std::string& name) {
  return (fs::path(cfg.out) / name).string();
}

void require_input_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " path is required");
  if (!fs::exists(path)) throw ConfigError(what + " file does not exist: " + path);
}

Graph load_graph_from_cfg(const RunConfig& cfg) {
  require_input_file(cfg.edges, "edges");
  if (!cfg.labels.empty()) require_input_file(cfg.labels, "labels");
  if (!cfg.attrs.empty()) require_input_file(cfg.attrs, "attrs");
  return load_graph(cfg.edges, cfg.labels, cfg.attrs);
}

json config_echo(const RunConfig& cfg) {
  json j = json::object();
  for (const auto& [k, v] : cfg.as_map()) j[k] = v;
  return j;
}

void write_json(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << j.dump(2) << "\n";
}

json train_report_json(const RunConfig& cfg, const TrainReport& r) {
  json j;
  j["config"] = config_echo(cfg);
  j["train_loss"] = r.train_loss;
  j["train_acc"] = r.train_acc;
  j["val_loss"] = r.val_loss;
  j["val_acc"] = r.val_acc;
  j["best_epoch"] = r.best_epoch;
  j["epochs_run"] = r.epochs_run;
  j["stop"] = r.stop_reason;
  return j;
}

Vocab build_vocab_from_cfg(const Graph& g, const RunConfig& cfg) {
  return Vocab::build(g, cfg.with_attrs, cfg.min_word_freq);
}

Model load_checkpoint_for(const RunConfig& cfg, const std::string& fallback, Stage want,
                          const char* cmd) {
  std::string path = cfg.checkpoint_path.empty() ? fallback : cfg.checkpoint_path;
  if (!fs::exists(path)) throw DataError(std::string(cmd) + ": missing checkpoint: " + path);
  Model m = Model::load_checkpoint(path);
  if (want != Stage::None && m.stage != want) {
    auto stage_name = [](Stage s) {
      return s == Stage::Pretrain ? "pretrain" : s == Stage::Finetune ? "finetune" : "none";
    };
    throw DataError(std::string(cmd) + ": stage mismatch: checkpoint " + path + " is '" +
                    stage_name(m.stage) + "', expected '" + stage_name(want) + "'");
  }
  return m;
}

const std::vector<NodeId>& split_part(const Split& split, const std::string& name) {
  if (name == "train") return split.train;
  if (name == "val") return split.val;
  if (name == "test") return split.test;
  throw ConfigError("unknown split part '" + name + "' (use train|val|test)");
}

// ---- commands ----

int cmd_sample(CliState& st) {
  const RunConfig& cfg = st.cfg;
  const Graph g = load_graph_from_cfg(cfg);
  cfg.walk_config().validate();
  if (st.dry_run) {
    std::cout << "dry-run ok\n";
    return 0;
  }
  std::cout << g.summary() << "\n";
  const Corpus corpus = build_pretrain_corpus(g, cfg.walk_config(), cfg.workers);
  fs::create_directories(cfg.out);
  write_corpus(corpus, cfg.corpus_path);
  std::cout << "sentences=" << corpus.sentences.size() << " file=" << cfg.corpus_path << "\n";
  return 0;
}

int cmd_pretrain(CliState& st) {
  const RunConfig& cfg = st.cfg;
  const Graph g = load_graph_from_cfg(cfg);
  if (!fs::exists(cfg.corpus_path))
    throw DataError("pretrain: missing corpus: " + cfg.corpus_path + " (run `gdl sample` first)");
  const Corpus corpus = read_corpus(cfg.corpus_path);
  const Vocab vocab = build_vocab_from_cfg(g, cfg);
  cfg.model_config().validate();
  cfg.optim_config(false).validate();
  cfg.lora_config(false).validate();
  if (st.dry_run) {
    std::cout << "dry-run ok\n";
    return 0;
  }
  Model model = Model::init(g, vocab, cfg.model_config(), cfg.seed_model);
  model.attach_adapter(cfg.lora_config(false), cfg.seed_model);
  model.set_stage(Stage::Pretrain);
  const TrainReport report =
      pretrain(model, corpus, vocab, cfg.optim_config(false), cfg.learn_start_token);

  fs::create_directories(cfg.out);
  vocab.save(out_path(cfg, "vocab.tsv"));
  model.save_checkpoint(out_path(cfg, "pretrain.ckpt"));
  write_train_report(report, out_path(cfg, "pretrain_report.txt"));
  write_json(train_report_json(cfg, report), out_path(cfg, "pretrain_report.json"));
  std::fprintf(stderr, "pretrain wall=%.1fs\n", report.wall_seconds);
  std::printf("pretrain best_epoch=%d val_loss=%.6f stop=%s\n", report.best_epoch,
              report.val_loss[static_cast<std::size_t>(report.best_epoch)],
              report.stop_reason.c_str());
  return 0;
}

int cmd_finetune(CliState& st) {
  const RunConfig& cfg = st.cfg;
  const Graph g = load_graph_from_cfg(cfg);
  if (!g.has_labels()) throw ConfigError("finetune requires a labels file");
  const Vocab vocab = build_vocab_from_cfg(g, cfg);
  cfg.optim_config(true).validate();
  Model model = load_checkpoint_for(cfg, out_path(cfg, "pretrain.ckpt"), Stage::Pretrain,
                                    "finetune");
  if (model.cfg.vocab_size != static_cast<int>(vocab.size()))
    throw DataError("finetune: vocabulary size mismatch with checkpoint (got " +
                    std::to_string(vocab.size()) + ", checkpoint has " +
                    std::to_string(model.cfg.vocab_size) + "); use the same with_attrs setting");
  const Split split = make_split(g, cfg.train_frac, cfg.val_frac, cfg.test_frac, cfg.seed_corpus);
  if (st.dry_run) {
    std::cout << "dry-run ok\n";
    return 0;
  }
  model.cfg.class_count = static_cast<int>(g.class_count());
  if (model.head_cls.val.cols != static_cast<int>(g.class_count())) {
    model.head_cls = Param("head_cls", model.cfg.embed_dim, static_cast<int>(g.class_count()));
    model.cls_bias = Param("cls_bias", 1, static_cast<int>(g.class_count()));
    model.cls_bias.is_bias = true;
  }
  model.attach_adapter(cfg.lora_config(true), cfg.seed_model);
  model.set_stage(Stage::Finetune);

  FinetuneConfig fcfg;
  fcfg.walk = cfg.walk_config();
  fcfg.with_attrs = cfg.with_attrs;
  fcfg.fixed_contexts = cfg.fixed_contexts;
  fcfg.max_attr_tokens = cfg.max_attr_tokens;
  fcfg.eval_seed = cfg.seed_eval;
  const TrainReport report = finetune(model, g, split, vocab, cfg.optim_config(true), fcfg);

  fs::create_directories(cfg.out);
  model.save_checkpoint(out_path(cfg, "finetune.ckpt"));
  write_train_report(report, out_path(cfg, "finetune_report.txt"));
  write_json(train_report_json(cfg, report), out_path(cfg, "finetune_report.json"));
  std::fprintf(stderr, "finetune wall=%.1fs\n", report.wall_seconds);
  std::printf("finetune best_epoch=%d val_acc=%.6f stop=%s\n", report.best_epoch,
              report.val_acc[static_cast<std::size_t>(report.best_epoch)],
              report.stop_reason.c_str());
  return 0;
}

int cmd_eval(CliState& st) {
  const RunConfig& cfg = st.cfg;
  const Graph g = load_graph_from_cfg(cfg);
  const Vocab vocab = build_vocab_from_cfg(g, cfg);
  Model model = load_checkpoint_for(cfg, out_path(cfg, "finetune.ckpt"), Stage::Finetune, "eval");
  const Split split = make_split(g, cfg.train_frac, cfg.val_frac, cfg.test_frac, cfg.seed_corpus);
  const auto& nodes = split_part(split, st.eval_split);
  if (st.dry_run) {
    std::cout << "dry-run ok\n";
    return 0;
  }
  FinetuneConfig fcfg;
  fcfg.walk = cfg.walk_config();
  fcfg.with_attrs = cfg.with_attrs;
  fcfg.max_attr_tokens = cfg.max_attr_tokens;
  fcfg.eval_seed = cfg.seed_eval;
  const double acc = evaluate(model, g, nodes, vocab, fcfg);

  fs::create_directories(cfg.out);
  json j;
  j["config"] = config_echo(cfg);
  j["split"] = st.eval_split;
  j["nodes"] = nodes.size();
  j["accuracy"] = acc;
  write_json(j, out_path(cfg, "eval_report.json"));
  std::printf("accuracy=%.6f\n", acc);
  return 0;
}

int cmd_verify(CliState& st) {
  const RunConfig& cfg = st.cfg;
  const Graph g = load_graph_from_cfg(cfg);
  const Vocab vocab = build_vocab_from_cfg(g, cfg);
  Model model =
      load_checkpoint_for(cfg, out_path(cfg, "pretrain.ckpt"), Stage::None, "verify-theorem");
  if (model.cfg.vocab_size != static_cast<int>(vocab.size()))
    throw DataError("verify-theorem: vocabulary size mismatch with checkpoint");
  if (st.dry_run) {
    std::cout << "dry-run ok\n";
    return 0;
  }
  const KlSummary kl = kl_vs_oracle(model, g, vocab);
  const Theorem1Report t1 = theorem1_check(model, g, vocab, cfg.perm_count, cfg.seed_eval);

  fs::create_directories(cfg.out);
  json j;
  j["config"] = config_echo(cfg);
  j["kl"]["mean"] = kl.mean;
  j["kl"]["max"] = kl.max;
  json per_node = json::array();
  for (std::size_t i = 0; i < kl.nodes.size(); ++i)
    per_node.push_back({{"node", kl.nodes[i]}, {"kl", kl.kl[i]}});
  j["kl"]["per_node"] = per_node;
  json t;
  t["edges_evaluated"] = t1.edges_evaluated;
  t["degenerate"] = t1.degenerate;
  if (t1.degenerate) t["degenerate_reason"] = t1.degenerate_reason;
  auto opt_num = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  t["spearman_dq"] = opt_num(t1.spearman_dq);
  t["pearson_dq"] = opt_num(t1.pearson_dq);
  t["perm_p_dq"] = opt_num(t1.perm_p_dq);
  t["spearman_dq_dq1"] = opt_num(t1.spearman_dq_dq1);
  t["pearson_dq_dq1"] = opt_num(t1.pearson_dq_dq1);
  t["perm_p_dq_dq1"] = opt_num(t1.perm_p_dq_dq1);
  t["edge_mean_inner"] = t1.edge_mean_inner;
  t["nonedge_mean_inner"] = t1.nonedge_mean_inner;
  j["theorem1"] = t;
  write_json(j, out_path(cfg, "verify_report.json"));
  write_theorem1_table(t1, out_path(cfg, "theorem1.tsv"));

  if (t1.degenerate)
    std::printf("kl_mean=%.6f theorem1=%s\n", kl.mean, t1.degenerate_reason.c_str());
  else
    std::printf("kl_mean=%.6f spearman_dq=%.4f perm_p_dq=%.4f spearman_dqdq1=%.4f\n", kl.mean,
                *t1.spearman_dq, *t1.perm_p_dq,
                t1.spearman_dq_dq1 ? *t1.spearman_dq_dq1 : 0.0);
  return 0;
}

int cmd_tokens(CliState& st) {
  const RunConfig& cfg = st.cfg;
  const Graph g = load_graph_from_cfg(cfg);
  const Vocab vocab = build_vocab_from_cfg(g, cfg);
  if (st.dry_run) {
    std::cout << "dry-run ok\n";
    return 0;
  }
  std::vector<NodeId> nodes(g.node_count());
  for (NodeId v = 0; v < g.node_count(); ++v) nodes[v] = v;
  const TokenReport rep =
      token_report(g, nodes, cfg.walk_config(), cfg.order, vocab, cfg.neighbor_cap);

  fs::create_directories(cfg.out);
  write_token_report(rep, out_path(cfg, "token_report.tsv"));
  json j;
  j["config"] = config_echo(cfg);
  j["mean_gdl"] = rep.mean_gdl;
  j["mean_desc"] = rep.mean_desc;
  j["reduction_pct"] = rep.reduction;
  j["order"] = rep.order;
  write_json(j, out_path(cfg, "token_report.json"));
  std::printf("mean_gdl=%.2f mean_desc=%.2f reduction_pct=%.2f order=%u\n", rep.mean_gdl,
              rep.mean_desc, rep.reduction, rep.order);
  return 0;
}

void add_common_options(CLI::App* sub, CliState& st, std::string& config_file) {
  RunConfig& cfg = st.cfg;
  sub->add_option("--config", config_file, "flat key=value config file");
  sub->add_option("--edges", cfg.edges, "edge list file");
  sub->add_option("--labels", cfg.labels, "labels file (node_id<TAB>class_id)");
  sub->add_option("--attrs", cfg.attrs, "attributes file (node_id<TAB>text)");
  sub->add_option("--out", cfg.out, "output directory");
  sub->add_option("--corpus", cfg.corpus_path, "corpus file path");
  sub->add_option("--checkpoint", cfg.checkpoint_path, "checkpoint path");
  sub->add_option("--k", cfg.k, "walks per node");
  sub->add_option("--l", cfg.l, "walk length in tokens");
  sub->add_option("--embed-dim", cfg.embed_dim);
  sub->add_option("--layers", cfg.layers);
  sub->add_option("--heads", cfg.heads);
  sub->add_option("--ff-dim", cfg.ff_dim);
  sub->add_option("--max-seq-len", cfg.max_seq_len);
  sub->add_option("--rank", cfg.rank);
  sub->add_option("--alpha", cfg.alpha);
  sub->add_option("--lora-dropout", cfg.lora_dropout);
  sub->add_option("--lr", cfg.lr);
  sub->add_option("--batch-size", cfg.batch_size);
  sub->add_option("--weight-decay", cfg.weight_decay);
  sub->add_option("--pretrain-epochs", cfg.pretrain_epochs);
  sub->add_option("--pretrain-patience", cfg.pretrain_patience);
  sub->add_option("--finetune-epochs", cfg.finetune_epochs);
  sub->add_option("--finetune-patience", cfg.finetune_patience);
  sub->add_flag("--with-attrs", cfg.with_attrs, "include attribute text in contexts");
  sub->add_flag("--fixed-contexts", cfg.fixed_contexts, "disable per-epoch context resampling");
  sub->add_flag("--learn-start-token", cfg.learn_start_token);
  sub->add_option("--min-word-freq", cfg.min_word_freq);
  sub->add_option("--max-attr-tokens", cfg.max_attr_tokens);
  sub->add_option("--train-frac", cfg.train_frac);
  sub->add_option("--val-frac", cfg.val_frac);
  sub->add_option("--test-frac", cfg.test_frac);
  sub->add_option("--order", cfg.order, "description order (hops)");
  sub->add_option("--neighbor-cap", cfg.neighbor_cap);
  sub->add_option("--perm-count", cfg.perm_count);
  sub->add_option("--seed-corpus,--seed", cfg.seed_corpus);
  sub->add_option("--seed-model", cfg.seed_model);
  sub->add_option("--seed-train", cfg.seed_train);
  sub->add_option("--seed-eval", cfg.seed_eval);
  sub->add_option("--workers", cfg.workers, "parallel corpus workers (1 = serial)");
  sub->add_flag("--dry-run", st.dry_run, "validate config and exit");
}

}  // namespace

int main(int argc, char** argv) {
  CliState st;

  // Config file values load first so command-line flags override them.
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") {
      try {
        load_config_file(st.cfg, argv[i + 1]);
      } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
      }
      break;
    }
  }

  CLI::App app{"graph-defined-language pipeline"};
  app.require_subcommand(1);
  std::string config_file;

  CLI::App* sample = app.add_subcommand("sample", "sample the pre-training walk corpus");
  CLI::App* pretrain_cmd = app.add_subcommand("pretrain", "next-token pre-training on the corpus");
  CLI::App* finetune_cmd = app.add_subcommand("finetune", "node-classification fine-tuning");
  CLI::App* eval_cmd = app.add_subcommand("eval", "micro accuracy on a split part");
  CLI::App* verify_cmd =
      app.add_subcommand("verify-theorem", "kernel KL and degree-law correlation checks");
  CLI::App* tokens_cmd = app.add_subcommand("tokens", "prompt token accounting");
  for (CLI::App* sub : {sample, pretrain_cmd, finetune_cmd, eval_cmd, verify_cmd, tokens_cmd})
    add_common_options(sub, st, config_file);
  eval_cmd->add_option("--split", st.eval_split, "split part to evaluate (train|val|test)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (const char* env_out = std::getenv("GDL_OUT"); env_out && *env_out) st.cfg.out = env_out;
    if (st.cfg.corpus_path.empty())
      st.cfg.corpus_path = (fs::path(st.cfg.out) / "corpus.txt").string();

    if (sample->parsed()) return cmd_sample(st);
    if (pretrain_cmd->parsed()) return cmd_pretrain(st);
    if (finetune_cmd->parsed()) return cmd_finetune(st);
    if (eval_cmd->parsed()) return cmd_eval(st);
    if (verify_cmd->parsed()) return cmd_verify(st);
    if (tokens_cmd->parsed()) return cmd_tokens(st);
    std::cerr << "error: no command\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
