#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <string>

#include "gdl/common.hpp"
#include "gdl/corpus.hpp"
#include "gdl/model.hpp"
#include "gdl/train.hpp"

namespace gdl {

/// Resolved run configuration for the CLI pipeline. Values mirror a flat
/// key=value config file; command-line flags override file values and the
/// GDL_OUT environment variable overrides the output directory last.
struct RunConfig {
  // paths
  std::string edges, labels, attrs;
  std::string out = "gdl_out";
  std::string corpus_path;      // defaults to <out>/corpus.txt
  std::string checkpoint_path;  // defaults per command

  // walk config
  std::uint32_t k = 10;
  std::uint32_t l = 5;

  // model config
  int embed_dim = 64;
  int layers = 2;
  int heads = 2;
  int ff_dim = 0;
  int max_seq_len = 0;  // 0 -> derived from k, l and attribute budget

  // lora config
  int rank = 8;
  double alpha = 16.0;
  double lora_dropout = 0.2;

  // optimization
  double lr = 1e-4;
  std::size_t batch_size = 32;
  double weight_decay = 1e-2;
  int pretrain_epochs = 50;
  int pretrain_patience = 3;
  int finetune_epochs = 50;
  int finetune_patience = 5;

  // flags
  bool with_attrs = false;
  bool fixed_contexts = false;
  bool learn_start_token = false;

  // text handling
  std::size_t min_word_freq = 2;
  std::size_t max_attr_tokens = 16;

  // split fractions (stratified; split rng derives from seed_corpus)
  double train_frac = 0.6;
  double val_frac = 0.2;
  double test_frac = 0.2;

  // token accounting
  std::uint32_t order = 4;
  std::size_t neighbor_cap = 10;

  // verification
  std::size_t perm_count = 10000;

  // seeds: all randomness flows from these four
  std::uint64_t seed_corpus = 1;
  std::uint64_t seed_model = 2;
  std::uint64_t seed_train = 3;
  std::uint64_t seed_eval = 4;

  unsigned workers = 1;

  WalkConfig walk_config() const { return WalkConfig{k, l, seed_corpus}; }

  ModelConfig model_config() const {
    ModelConfig m;
    m.embed_dim = embed_dim;
    m.layers = layers;
    m.heads = heads;
    m.ff_dim = ff_dim;
    m.max_seq_len = max_seq_len > 0 ? max_seq_len : derived_max_seq_len();
    return m;
  }

  int derived_max_seq_len() const {
    const std::size_t pretrain_need = static_cast<std::size_t>(l) + (learn_start_token ? 1 : 0);
    const std::size_t per_token = 1 + (with_attrs ? max_attr_tokens : 0);
    const std::size_t finetune_need =
        static_cast<std::size_t>(k) * l * per_token + (k - 1) + 1;
    return static_cast<int>(std::max(pretrain_need, finetune_need));
  }

  LoraConfig lora_config(bool include_projector) const {
    LoraConfig c;
    c.rank = rank;
    c.alpha = alpha;
    c.dropout = lora_dropout;
    c.targets = {AdapterTarget::Attention, AdapterTarget::FeedForward};
    if (include_projector) c.targets.insert(AdapterTarget::Projector);
    return c;
  }

  OptimConfig optim_config(bool finetune_stage) const {
    OptimConfig o;
    o.lr = lr;
    o.batch_size = batch_size;
    o.weight_decay = weight_decay;
    o.max_epochs = finetune_stage ? finetune_epochs : pretrain_epochs;
    o.patience = finetune_stage ? finetune_patience : pretrain_patience;
    o.seed = seed_train;
    return o;
  }

  // Flat deterministic key -> value view, used for config echo in reports.
  std::map<std::string, std::string> as_map() const {
    std::map<std::string, std::string> m;
    auto num = [](auto v) { return std::to_string(v); };
    char fbuf[32];
    auto flt = [&](double v) {
      std::snprintf(fbuf, sizeof(fbuf), "%g", v);
      return std::string(fbuf);
    };
    m["edges"] = edges;
    m["labels"] = labels;
    m["attrs"] = attrs;
    m["out"] = out;
    m["corpus"] = corpus_path;
    m["checkpoint"] = checkpoint_path;
    m["k"] = num(k);
    m["l"] = num(l);
    m["embed_dim"] = num(embed_dim);
    m["layers"] = num(layers);
    m["heads"] = num(heads);
    m["ff_dim"] = num(ff_dim);
    m["max_seq_len"] = num(max_seq_len);
    m["rank"] = num(rank);
    m["alpha"] = flt(alpha);
    m["lora_dropout"] = flt(lora_dropout);
    m["lr"] = flt(lr);
    m["batch_size"] = num(batch_size);
    m["weight_decay"] = flt(weight_decay);
    m["pretrain_epochs"] = num(pretrain_epochs);
    m["pretrain_patience"] = num(pretrain_patience);
    m["finetune_epochs"] = num(finetune_epochs);
    m["finetune_patience"] = num(finetune_patience);
    m["with_attrs"] = with_attrs ? "true" : "false";
    m["fixed_contexts"] = fixed_contexts ? "true" : "false";
    m["learn_start_token"] = learn_start_token ? "true" : "false";
    m["min_word_freq"] = num(min_word_freq);
    m["max_attr_tokens"] = num(max_attr_tokens);
    m["train_frac"] = flt(train_frac);
    m["val_frac"] = flt(val_frac);
    m["test_frac"] = flt(test_frac);
    m["order"] = num(order);
    m["neighbor_cap"] = num(neighbor_cap);
    m["perm_count"] = num(perm_count);
    m["seed_corpus"] = num(seed_corpus);
    m["seed_model"] = num(seed_model);
    m["seed_train"] = num(seed_train);
    m["seed_eval"] = num(seed_eval);
    m["workers"] = num(workers);
    return m;
  }

  void apply(const std::string& key, const std::string& value);
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected boolean, got '" + v + "'");
}

template <typename T>
T parse_num(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    if constexpr (std::is_floating_point_v<T>) {
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return static_cast<T>(d);
    } else {
      const long long d = std::stoll(v, &pos);
      if (pos != v.size() || d < 0) throw std::invalid_argument(v);
      return static_cast<T>(d);
    }
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  }
}

}  // namespace detail

inline void RunConfig::apply(const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_num;
  if (key == "edges") edges = value;
  else if (key == "labels") labels = value;
  else if (key == "attrs") attrs = value;
  else if (key == "out") out = value;
  else if (key == "corpus") corpus_path = value;
  else if (key == "checkpoint") checkpoint_path = value;
  else if (key == "k") k = parse_num<std::uint32_t>(value, key);
  else if (key == "l") l = parse_num<std::uint32_t>(value, key);
  else if (key == "embed_dim") embed_dim = parse_num<int>(value, key);
  else if (key == "layers") layers = parse_num<int>(value, key);
  else if (key == "heads") heads = parse_num<int>(value, key);
  else if (key == "ff_dim") ff_dim = parse_num<int>(value, key);
  else if (key == "max_seq_len") max_seq_len = parse_num<int>(value, key);
  else if (key == "rank") rank = parse_num<int>(value, key);
  else if (key == "alpha") alpha = parse_num<double>(value, key);
  else if (key == "lora_dropout") lora_dropout = parse_num<double>(value, key);
  else if (key == "lr") lr = parse_num<double>(value, key);
  else if (key == "batch_size") batch_size = parse_num<std::size_t>(value, key);
  else if (key == "weight_decay") weight_decay = parse_num<double>(value, key);
  else if (key == "pretrain_epochs") pretrain_epochs = parse_num<int>(value, key);
  else if (key == "pretrain_patience") pretrain_patience = parse_num<int>(value, key);
  else if (key == "finetune_epochs") finetune_epochs = parse_num<int>(value, key);
  else if (key == "finetune_patience") finetune_patience = parse_num<int>(value, key);
  else if (key == "with_attrs") with_attrs = parse_bool(value, key);
  else if (key == "fixed_contexts") fixed_contexts = parse_bool(value, key);
  else if (key == "learn_start_token") learn_start_token = parse_bool(value, key);
  else if (key == "min_word_freq") min_word_freq = parse_num<std::size_t>(value, key);
  else if (key == "max_attr_tokens") max_attr_tokens = parse_num<std::size_t>(value, key);
  else if (key == "train_frac") train_frac = parse_num<double>(value, key);
  else if (key == "val_frac") val_frac = parse_num<double>(value, key);
  else if (key == "test_frac") test_frac = parse_num<double>(value, key);
  else if (key == "order") order = parse_num<std::uint32_t>(value, key);
  else if (key == "neighbor_cap") neighbor_cap = parse_num<std::size_t>(value, key);
  else if (key == "perm_count") perm_count = parse_num<std::size_t>(value, key);
  else if (key == "seed_corpus") seed_corpus = parse_num<std::uint64_t>(value, key);
  else if (key == "seed_model") seed_model = parse_num<std::uint64_t>(value, key);
  else if (key == "seed_train") seed_train = parse_num<std::uint64_t>(value, key);
  else if (key == "seed_eval") seed_eval = parse_num<std::uint64_t>(value, key);
  else if (key == "workers") workers = parse_num<unsigned>(value, key);
  else throw ConfigError("unknown config key '" + key + "'");
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    cfg.apply(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
}

}  // namespace gdl
