#include "ctarnn/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ctarnn/errors.hpp"
#include "ctarnn/fusion.hpp"
#include "ctarnn/layers.hpp"

namespace ctarnn {

const char* model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::rnn:
      return "rnn";
    case ModelKind::wf:
      return "wf";
    case ModelKind::ef:
      return "ef";
    case ModelKind::lf:
      return "lf";
    case ModelKind::cta:
      return "cta";
    case ModelKind::cta_nornn:
      return "cta_nornn";
  }
  return "?";
}

std::optional<ModelKind> parse_model_kind(const std::string& name) {
  for (ModelKind k : {ModelKind::rnn, ModelKind::wf, ModelKind::ef, ModelKind::lf, ModelKind::cta,
                      ModelKind::cta_nornn}) {
    if (name == model_kind_name(k)) return k;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// ModelConfig

std::vector<std::size_t> ModelConfig::selected_blocks() const {
  std::vector<std::size_t> out;
  if (blocks.empty()) {
    for (std::size_t i = 0; i < n_blocks; ++i) out.push_back(i);
  } else {
    for (std::size_t b : blocks) out.push_back(b - 1);
  }
  return out;
}

std::size_t ModelConfig::stream_dim(StreamKind kind) const {
  switch (kind) {
    case StreamKind::spectrogram:
      return spectrogram_dim;
    case StreamKind::embeddings:
      return embedding_dim;
    case StreamKind::text:
      return text_dim;
  }
  return 0;
}

bool ModelConfig::uses(StreamKind kind) const {
  return std::find(streams.begin(), streams.end(), kind) != streams.end();
}

void ModelConfig::validate(bool resolved) const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (streams.empty()) fail("no input streams");
  if (std::set<StreamKind>(streams.begin(), streams.end()).size() != streams.size()) {
    fail("duplicate stream");
  }
  if (n_classes < 2) fail("n_classes must be at least 2");
  if (hidden == 0 || rnn_layers == 0 || heads == 0 || head_dim == 0) {
    fail("hidden, rnn_layers, heads and head_dim must be positive");
  }
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
  std::set<std::size_t> seen;
  for (std::size_t b : blocks) {
    if (b == 0) fail("block indices are 1-based");
    if (n_blocks != 0 && b > n_blocks) {
      fail("block " + std::to_string(b) + " exceeds n_blocks " + std::to_string(n_blocks));
    }
    if (!seen.insert(b).second) fail("duplicate block " + std::to_string(b));
  }
  const bool stacked = kind == ModelKind::wf || kind == ModelKind::ef || kind == ModelKind::cta ||
                       kind == ModelKind::cta_nornn;
  if (stacked && (streams.size() != 1 || streams[0] != StreamKind::embeddings)) {
    fail(std::string(model_kind_name(kind)) + " takes exactly the embeddings stream");
  }
  if (kind == ModelKind::rnn && streams.size() != 1) fail("rnn takes exactly one stream");
  if (attention == AttentionMode::uniform && kind != ModelKind::cta && kind != ModelKind::cta_nornn) {
    fail("uniform attention applies to cta models only");
  }
  if (!resolved) return;
  for (StreamKind s : streams) {
    if (stream_dim(s) == 0) fail(std::string("unresolved input dim for ") + stream_key(s));
  }
  if (uses(StreamKind::embeddings)) {
    if (n_blocks == 0) fail("unresolved n_blocks");
    const std::size_t n = channels();
    if (kind == ModelKind::rnn && n != 1) fail("rnn on embeddings needs exactly one block");
  }
  if (kind == ModelKind::lf) {
    std::size_t branches = 0;
    for (StreamKind s : streams) branches += s == StreamKind::embeddings ? channels() : 1;
    if (branches < 2) fail("lf needs at least two streams");
  }
}

const std::vector<std::string>& ModelConfig::keys() {
  static const std::vector<std::string> k{
      "model",   "streams", "blocks",    "n_blocks",  "spectrogram_dim", "text_dim",
      "embedding_dim", "n_classes", "hidden", "rnn_layers", "dropout", "heads",
      "head_dim", "share_rnn", "attention"};
  return k;
}

namespace {

std::size_t positive_or_zero(const KeyValueConfig& cfg, const std::string& key, std::size_t fallback) {
  const long long v = cfg.get_int(key, static_cast<long long>(fallback));
  if (v < 0) throw ConfigError("key '" + key + "' must not be negative");
  return static_cast<std::size_t>(v);
}

std::vector<std::string> stream_names(const std::vector<StreamKind>& streams) {
  std::vector<std::string> out;
  for (StreamKind s : streams) out.emplace_back(stream_key(s));
  return out;
}

std::vector<StreamKind> parse_streams(const std::vector<std::string>& names) {
  std::vector<StreamKind> out;
  for (const auto& n : names) {
    auto k = parse_stream_kind(n);
    if (!k) throw ConfigError("unknown stream '" + n + "'");
    out.push_back(*k);
  }
  return out;
}

std::vector<std::size_t> parse_blocks(const std::vector<std::string>& items) {
  std::vector<std::size_t> out;
  if (items.size() == 1 && items[0] == "all") return out;
  for (const auto& s : items) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(s, &used);
      if (used != s.size() || v <= 0) throw std::invalid_argument(s);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("blocks: expected 'all' or positive indices, got '" + s + "'");
    }
  }
  return out;
}

const char* attention_name(AttentionMode m) { return m == AttentionMode::learned ? "learned" : "uniform"; }

AttentionMode parse_attention(const std::string& s) {
  if (s == "learned") return AttentionMode::learned;
  if (s == "uniform") return AttentionMode::uniform;
  throw ConfigError("attention must be 'learned' or 'uniform', got '" + s + "'");
}

}  // namespace

ModelConfig ModelConfig::from_config(const KeyValueConfig& cfg) {
  ModelConfig m;
  const std::string kind = cfg.get_string("model", model_kind_name(m.kind));
  auto k = parse_model_kind(kind);
  if (!k) throw ConfigError("unknown model '" + kind + "'");
  m.kind = *k;
  m.streams = parse_streams(cfg.get_list("streams", stream_names(m.streams)));
  m.blocks = parse_blocks(cfg.get_list("blocks", {"all"}));
  m.n_blocks = positive_or_zero(cfg, "n_blocks", m.n_blocks);
  m.spectrogram_dim = positive_or_zero(cfg, "spectrogram_dim", m.spectrogram_dim);
  m.text_dim = positive_or_zero(cfg, "text_dim", m.text_dim);
  m.embedding_dim = positive_or_zero(cfg, "embedding_dim", m.embedding_dim);
  m.n_classes = positive_or_zero(cfg, "n_classes", m.n_classes);
  m.hidden = positive_or_zero(cfg, "hidden", m.hidden);
  m.rnn_layers = positive_or_zero(cfg, "rnn_layers", m.rnn_layers);
  m.dropout = cfg.get_double("dropout", m.dropout);
  m.heads = positive_or_zero(cfg, "heads", m.heads);
  m.head_dim = positive_or_zero(cfg, "head_dim", m.head_dim);
  m.share_rnn = cfg.get_bool("share_rnn", m.share_rnn);
  m.attention = parse_attention(cfg.get_string("attention", attention_name(m.attention)));
  m.validate(false);
  return m;
}

void ModelConfig::write_to(KeyValueConfig& cfg) const {
  cfg.set("model", model_kind_name(kind));
  cfg.set("streams", "[" + join_list(stream_names(streams)) + "]");
  std::vector<std::string> b;
  for (std::size_t i : blocks) b.push_back(std::to_string(i));
  cfg.set("blocks", blocks.empty() ? "all" : "[" + join_list(b) + "]");
  cfg.set("n_blocks", std::to_string(n_blocks));
  cfg.set("spectrogram_dim", std::to_string(spectrogram_dim));
  cfg.set("text_dim", std::to_string(text_dim));
  cfg.set("embedding_dim", std::to_string(embedding_dim));
  cfg.set("n_classes", std::to_string(n_classes));
  cfg.set("hidden", std::to_string(hidden));
  cfg.set("rnn_layers", std::to_string(rnn_layers));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", dropout);
  cfg.set("dropout", buf);
  cfg.set("heads", std::to_string(heads));
  cfg.set("head_dim", std::to_string(head_dim));
  cfg.set("share_rnn", share_rnn ? "true" : "false");
  cfg.set("attention", attention_name(attention));
}

nlohmann::json ModelConfig::to_json() const {
  return {{"model", model_kind_name(kind)},
          {"streams", stream_names(streams)},
          {"blocks", blocks},
          {"n_blocks", n_blocks},
          {"spectrogram_dim", spectrogram_dim},
          {"text_dim", text_dim},
          {"embedding_dim", embedding_dim},
          {"n_classes", n_classes},
          {"hidden", hidden},
          {"rnn_layers", rnn_layers},
          {"dropout", dropout},
          {"heads", heads},
          {"head_dim", head_dim},
          {"share_rnn", share_rnn},
          {"attention", attention_name(attention)},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  try {
    ModelConfig m;
    auto k = parse_model_kind(j.at("model").get<std::string>());
    if (!k) throw ConfigError("unknown model " + j.at("model").dump());
    m.kind = *k;
    m.streams = parse_streams(j.at("streams").get<std::vector<std::string>>());
    m.blocks = j.at("blocks").get<std::vector<std::size_t>>();
    m.n_blocks = j.at("n_blocks").get<std::size_t>();
    m.spectrogram_dim = j.at("spectrogram_dim").get<std::size_t>();
    m.text_dim = j.at("text_dim").get<std::size_t>();
    m.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    m.n_classes = j.at("n_classes").get<std::size_t>();
    m.hidden = j.at("hidden").get<std::size_t>();
    m.rnn_layers = j.at("rnn_layers").get<std::size_t>();
    m.dropout = j.at("dropout").get<double>();
    m.heads = j.at("heads").get<std::size_t>();
    m.head_dim = j.at("head_dim").get<std::size_t>();
    m.share_rnn = j.at("share_rnn").get<bool>();
    m.attention = parse_attention(j.at("attention").get<std::string>());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.validate(false);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config json: ") + e.what());
  }
}

const StreamBatch& Batch::stream(StreamKind kind) const {
  auto it = streams.find(kind);
  if (it == streams.end()) {
    throw DimensionError(std::string("batch has no ") + stream_key(kind) + " stream");
  }
  return it->second;
}

ParamList Model::parameters() const {
  ParamList out;
  collect(out);
  return out;
}

Tensor Model::probabilities(const Batch& batch) const {
  NoGradGuard guard;
  return softmax(forward(batch, false, nullptr).logits);
}

// ---------------------------------------------------------------------------
// Concrete models

namespace {

void check_width(const Tensor& x, std::size_t axis, std::size_t expected, const char* what) {
  if (x.size(axis) != expected) {
    throw DimensionError(std::string(what) + ": feature dim " + std::to_string(x.size(axis)) +
                         ", model expects " + std::to_string(expected));
  }
}

const StreamBatch& stacked_input(const Batch& batch, const ModelConfig& cfg) {
  const StreamBatch& s = batch.stream(StreamKind::embeddings);
  if (s.x.dim() != 4) throw DimensionError("embeddings batch must be [B x N x m x d]");
  if (s.x.size(1) != cfg.channels()) {
    throw DimensionError("embeddings batch has " + std::to_string(s.x.size(1)) +
                         " channels, model expects " + std::to_string(cfg.channels()));
  }
  check_width(s.x, 3, cfg.embedding_dim, "embeddings");
  return s;
}

// BiGRU stack followed by attention pooling.
struct Encoder {
  BiGruStack rnn;
  MhsaParams att;

  Encoder(std::size_t input_dim, const ModelConfig& cfg, Rng& rng)
      : rnn({input_dim, cfg.hidden, cfg.rnn_layers, cfg.dropout}, rng),
        att({2 * cfg.hidden, cfg.heads, cfg.head_dim}, rng) {}

  Tensor encode(const Tensor& x, const Mask& mask, bool training, Rng* rng) const {
    return mhsa_pool(rnn.forward(x, mask, training, rng), mask, att).v;
  }
  std::size_t output_dim() const { return att.output_dim(); }
  void collect(ParamList& out, const std::string& prefix) const {
    rnn.collect(out, prefix + ".rnn");
    att.collect(out, prefix + ".att");
  }
};

struct Branch {
  StreamKind kind;
  std::size_t channel;  // position among the selected blocks; embeddings only
};

// Sequence input of one branch: [B x len x d].
Tensor branch_input(const Batch& batch, const Branch& br, const ModelConfig& cfg) {
  if (br.kind == StreamKind::embeddings) return select(stacked_input(batch, cfg).x, 1, br.channel);
  const StreamBatch& s = batch.stream(br.kind);
  if (s.x.dim() != 3) throw DimensionError(std::string(stream_key(br.kind)) + " batch must be [B x len x d]");
  check_width(s.x, 2, cfg.stream_dim(br.kind), stream_key(br.kind));
  return s.x;
}

class RnnModel final : public Model {
 public:
  explicit RnnModel(const ModelConfig& cfg) : Model(cfg) {
    Rng rng(cfg.seed);
    enc_.emplace(cfg.stream_dim(cfg.streams[0]), cfg, rng);
    head_ = ClassifierHead(enc_->output_dim(), cfg.n_classes, rng);
  }
  ForwardResult forward(const Batch& batch, bool training, Rng* rng) const override {
    const Branch br{config().streams[0], 0};
    const Tensor x = branch_input(batch, br, config());
    return {head_.logits(enc_->encode(x, batch.stream(br.kind).mask, training, rng)), std::nullopt};
  }
  void collect(ParamList& out) const override {
    enc_->collect(out, "enc");
    head_.collect(out, "head");
  }

 private:
  std::optional<Encoder> enc_;
  ClassifierHead head_;
};

class WfModel final : public Model {
 public:
  explicit WfModel(const ModelConfig& cfg) : Model(cfg), wf_(WfParams::init(cfg.channels())) {
    Rng rng(cfg.seed);
    enc_.emplace(cfg.embedding_dim, cfg, rng);
    head_ = ClassifierHead(enc_->output_dim(), cfg.n_classes, rng);
  }
  ForwardResult forward(const Batch& batch, bool training, Rng* rng) const override {
    const StreamBatch& s = stacked_input(batch, config());
    return {head_.logits(enc_->encode(wf_fuse(s.x, wf_), s.mask, training, rng)), std::nullopt};
  }
  void collect(ParamList& out) const override {
    wf_.collect(out, "wf");
    enc_->collect(out, "enc");
    head_.collect(out, "head");
  }
  void check_invariants() const override {
    NoGradGuard guard;
    const auto w = wf_.weights().values();
    double total = 0.0;
    for (double x : w) {
      if (!(x >= 0.0)) throw CheckFailure("wf weights must be non-negative");
      total += x;
    }
    if (std::abs(total - 1.0) > 1e-5) throw CheckFailure("wf weights sum to " + std::to_string(total));
  }

 private:
  WfParams wf_;
  std::optional<Encoder> enc_;
  ClassifierHead head_;
};

class EfModel final : public Model {
 public:
  explicit EfModel(const ModelConfig& cfg) : Model(cfg) {
    Rng rng(cfg.seed);
    enc_.emplace(cfg.channels() * cfg.embedding_dim, cfg, rng);
    head_ = ClassifierHead(enc_->output_dim(), cfg.n_classes, rng);
  }
  ForwardResult forward(const Batch& batch, bool training, Rng* rng) const override {
    const StreamBatch& s = stacked_input(batch, config());
    return {head_.logits(enc_->encode(ef_fuse(s.x), s.mask, training, rng)), std::nullopt};
  }
  void collect(ParamList& out) const override {
    enc_->collect(out, "enc");
    head_.collect(out, "head");
  }

 private:
  std::optional<Encoder> enc_;
  ClassifierHead head_;
};

class LfModel final : public Model {
 public:
  explicit LfModel(const ModelConfig& cfg) : Model(cfg) {
    Rng rng(cfg.seed);
    for (StreamKind s : cfg.streams) {
      if (s == StreamKind::embeddings) {
        for (std::size_t c = 0; c < cfg.channels(); ++c) branches_.push_back({s, c});
      } else {
        branches_.push_back({s, 0});
      }
    }
    std::size_t width = 0;
    for (const Branch& br : branches_) {
      encoders_.emplace_back(cfg.stream_dim(br.kind), cfg, rng);
      width += encoders_.back().output_dim();
    }
    head_ = ClassifierHead(width, cfg.n_classes, rng);
  }
  ForwardResult forward(const Batch& batch, bool training, Rng* rng) const override {
    std::vector<Tensor> pooled;
    for (std::size_t i = 0; i < branches_.size(); ++i) {
      const Tensor x = branch_input(batch, branches_[i], config());
      pooled.push_back(encoders_[i].encode(x, batch.stream(branches_[i].kind).mask, training, rng));
    }
    return {head_.logits(concat(pooled, 1)), std::nullopt};
  }
  void collect(ParamList& out) const override {
    for (std::size_t i = 0; i < encoders_.size(); ++i) {
      encoders_[i].collect(out, "branch" + std::to_string(i));
    }
    head_.collect(out, "head");
  }

 private:
  std::vector<Branch> branches_;
  std::vector<Encoder> encoders_;
  ClassifierHead head_;
};

class CtaRnnModel final : public Model {
 public:
  explicit CtaRnnModel(const ModelConfig& cfg) : Model(cfg) {
    Rng rng(cfg.seed);
    const std::size_t n = cfg.share_rnn ? 1 : cfg.channels();
    for (std::size_t c = 0; c < n; ++c) {
      rnns_.emplace_back(BiGruConfig{cfg.embedding_dim, cfg.hidden, cfg.rnn_layers, cfg.dropout}, rng);
    }
    cta_ = CtaParams({2 * cfg.hidden, cfg.heads, cfg.head_dim, cfg.attention}, rng);
    head_ = ClassifierHead(cta_.output_dim(), cfg.n_classes, rng);
  }
  ForwardResult forward(const Batch& batch, bool training, Rng* rng) const override {
    const StreamBatch& s = stacked_input(batch, config());
    const std::size_t b = s.x.size(0), n = s.x.size(1), m = s.x.size(2), d = s.x.size(3);
    Tensor h;
    if (config().share_rnn) {
      // One stack over all channels at once: fold channels into the batch.
      const Mask tiled = tile_mask(s.mask, n);
      const Tensor folded = reshape(s.x, {b * n, m, d});
      const Tensor out = rnns_[0].forward(folded, Mask{{b * n, m}, tiled.valid}, training, rng);
      h = reshape(out, {b, n, m, out.size(2)});
    } else {
      std::vector<Tensor> per_channel;
      for (std::size_t c = 0; c < n; ++c) {
        per_channel.push_back(rnns_[c].forward(select(s.x, 1, c), s.mask, training, rng));
      }
      h = stack(per_channel, 1);
    }
    CtaAttentionOutput att = cta_attend(h, s.mask, cta_);
    Tensor logits = head_.logits(att.v);
    return {logits, std::move(att)};
  }
  void collect(ParamList& out) const override {
    for (std::size_t c = 0; c < rnns_.size(); ++c) rnns_[c].collect(out, "rnn" + std::to_string(c));
    cta_.collect(out, "cta");
    head_.collect(out, "head");
  }

 private:
  std::vector<BiGruStack> rnns_;
  CtaParams cta_;
  ClassifierHead head_;
};

class CtaDirectModel final : public Model {
 public:
  explicit CtaDirectModel(const ModelConfig& cfg) : Model(cfg) {
    Rng rng(cfg.seed);
    cta_ = CtaParams({cfg.embedding_dim, cfg.heads, cfg.head_dim, cfg.attention}, rng);
    head_ = ClassifierHead(cta_.output_dim(), cfg.n_classes, rng);
  }
  ForwardResult forward(const Batch& batch, bool, Rng*) const override {
    const StreamBatch& s = stacked_input(batch, config());
    CtaAttentionOutput att = cta_attend(s.x, s.mask, cta_);
    Tensor logits = head_.logits(att.v);
    return {logits, std::move(att)};
  }
  void collect(ParamList& out) const override {
    cta_.collect(out, "cta");
    head_.collect(out, "head");
  }

 private:
  CtaParams cta_;
  ClassifierHead head_;
};

}  // namespace

std::unique_ptr<Model> make_model(const ModelConfig& cfg) {
  cfg.validate(true);
  switch (cfg.kind) {
    case ModelKind::rnn:
      return std::make_unique<RnnModel>(cfg);
    case ModelKind::wf:
      return std::make_unique<WfModel>(cfg);
    case ModelKind::ef:
      return std::make_unique<EfModel>(cfg);
    case ModelKind::lf:
      return std::make_unique<LfModel>(cfg);
    case ModelKind::cta:
      return std::make_unique<CtaRnnModel>(cfg);
    case ModelKind::cta_nornn:
      return std::make_unique<CtaDirectModel>(cfg);
  }
  throw ConfigError("unknown model kind");
}

ModelConfig bimodal_config(const ModelConfig& base, StreamKind x, StreamKind y) {
  if (x == y) throw ConfigError("bimodal: the two streams must differ");
  ModelConfig cfg = base;
  cfg.kind = ModelKind::lf;
  cfg.streams = {x, y};
  if ((x == StreamKind::embeddings || y == StreamKind::embeddings) && cfg.blocks.size() != 1) {
    throw ConfigError("bimodal: the embeddings stream must select exactly one block");
  }
  cfg.validate(false);
  return cfg;
}

}  // namespace ctarnn
