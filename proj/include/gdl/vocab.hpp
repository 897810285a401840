#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "gdl/common.hpp"
#include "gdl/corpus.hpp"
#include "gdl/graph.hpp"

namespace gdl {

enum class TokenKind : std::uint8_t { Graph, Text, Special };

struct TokenSeq {
  std::vector<TokenId> ids;
  std::vector<TokenKind> kinds;

  std::size_t size() const { return ids.size(); }
  void push(TokenId id, TokenKind k) {
    ids.push_back(id);
    kinds.push_back(k);
  }
};

inline std::vector<std::string> split_words_lower(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// Token/id bijection: 4 specials, then one graph token per node in node
/// order, then text tokens in sorted order.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kSep = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr TokenId kNumSpecials = 4;

  Vocab() = default;

  NodeId graph_token_count() const { return graph_count_; }
  std::size_t text_token_count() const { return text_tokens_.size(); }
  std::size_t special_count() const { return kNumSpecials; }
  std::size_t size() const { return kNumSpecials + graph_count_ + text_tokens_.size(); }

  TokenId graph_token(NodeId v) const {
    if (v >= graph_count_)
      throw DataError("no graph token for node " + std::to_string(v));
    return kNumSpecials + v;
  }

  bool is_graph(TokenId id) const { return id >= kNumSpecials && id < kNumSpecials + graph_count_; }
  bool is_special(TokenId id) const { return id < kNumSpecials; }
  bool is_text(TokenId id) const { return id >= kNumSpecials + graph_count_ && id < size(); }

  NodeId node_of(TokenId id) const {
    if (!is_graph(id)) throw DataError("token id " + std::to_string(id) + " is not a graph token");
    return id - kNumSpecials;
  }

  // Text word -> id, or UNK if the word is not in the vocabulary.
  TokenId text_or_unk(const std::string& word) const {
    auto it = text_index_.find(word);
    return it == text_index_.end() ? kUnk : it->second;
  }

  std::string token_string(TokenId id) const {
    switch (id) {
      case kPad: return "<pad>";
      case kSep: return "<sep>";
      case kCls: return "<cls>";
      case kUnk: return "<unk>";
      default: break;
    }
    if (is_graph(id)) return "<node_" + std::to_string(node_of(id)) + ">";
    if (is_text(id)) return text_tokens_[id - kNumSpecials - graph_count_];
    throw DataError("token id " + std::to_string(id) + " out of range");
  }

  static Vocab build(const Graph& g, bool with_text, std::size_t min_word_freq = 2) {
    Vocab v;
    v.graph_count_ = g.node_count();
    if (with_text && g.has_attributes()) {
      std::map<std::string, std::size_t> freq;
      for (const auto& [node, text] : g.attributes())
        for (const auto& w : split_words_lower(text)) ++freq[w];
      for (const auto& [word, n] : freq)
        if (n >= min_word_freq) v.text_tokens_.push_back(word);
      // std::map iteration is already sorted; keep explicit for clarity
      std::sort(v.text_tokens_.begin(), v.text_tokens_.end());
      for (std::size_t i = 0; i < v.text_tokens_.size(); ++i)
        v.text_index_[v.text_tokens_[i]] = static_cast<TokenId>(kNumSpecials + v.graph_count_ + i);
    }
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write file: " + path);
    for (TokenId id = 0; id < size(); ++id)
      out << token_string(id) << "\t" << id << "\n";
  }

  const std::vector<std::string>& text_tokens() const { return text_tokens_; }

 private:
  NodeId graph_count_ = 0;
  std::vector<std::string> text_tokens_;
  std::unordered_map<std::string, TokenId> text_index_;
};

inline TokenSeq encode_sentence(const Vocab& v, const GraphSentence& s) {
  TokenSeq seq;
  seq.ids.reserve(s.size());
  for (NodeId node : s) seq.push(v.graph_token(node), TokenKind::Graph);
  return seq;
}

inline GraphSentence decode_sentence(const Vocab& v, const TokenSeq& seq) {
  GraphSentence s;
  s.reserve(seq.size());
  for (TokenId id : seq.ids) s.push_back(v.node_of(id));
  return s;
}

/// Encodes a fine-tuning context: sentences joined by SEP, optional
/// attribute text after each graph token (composite document), CLS last so
/// a causal reader's final position sees the whole context.
inline TokenSeq encode_context(const Vocab& v, const std::vector<GraphSentence>& ctx,
                               const std::map<NodeId, std::string>* attrs = nullptr,
                               std::size_t max_attr_tokens = 16) {
  if (ctx.empty()) throw DataError("encode_context: empty context");
  TokenSeq seq;
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    if (i) seq.push(Vocab::kSep, TokenKind::Special);
    for (NodeId node : ctx[i]) {
      seq.push(v.graph_token(node), TokenKind::Graph);
      if (attrs) {
        auto it = attrs->find(node);
        if (it == attrs->end()) continue;
        std::size_t emitted = 0;
        for (const auto& w : split_words_lower(it->second)) {
          if (emitted++ >= max_attr_tokens) break;
          seq.push(v.text_or_unk(w), TokenKind::Text);
        }
      }
    }
  }
  seq.push(Vocab::kCls, TokenKind::Special);
  return seq;
}

}  // namespace gdl
