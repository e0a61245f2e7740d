#pragma once

// Pre-LayerNorm GPT-style decoder used as the model substrate.
//
//   x0      = E[token] + P[position]
//   x_mid   = x + sum_h head_h(LN1(x)) + b_o       head_h = softmax(q_h k_h^T / sqrt(d_head)) v_h W_o[h]
//   x_next  = x_mid + W_out gelu(W_in LN2(x_mid))
//   logits  = LNf(x_L) U
//
// The attention output bias b_o belongs to the layer, not to any head, so the
// per-head outputs of a layer plus b_o add up to the attention block output.
// Edits (head patches, residual additions) only touch the final position.

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fvlab/error.hpp"
#include "fvlab/random.hpp"
#include "fvlab/tokenizer.hpp"

namespace fvlab {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 32;
  int d_mlp = 128;
  int max_context = 256;
  int vocab_size = 0;

  int d_head() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_mlp < 1 || max_context < 2 || vocab_size < 1)
      throw ConfigError("model config has a non-positive dimension");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},       {"d_model", c.d_model},
       {"d_mlp", c.d_mlp},       {"max_context", c.max_context}, {"vocab_size", c.vocab_size}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_model").get_to(c.d_model);
  j.at("d_mlp").get_to(c.d_mlp);
  j.at("max_context").get_to(c.max_context);
  j.at("vocab_size").get_to(c.vocab_size);
}

template <typename Scalar>
struct TransformerWeights {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  struct Block {
    Vector ln1_gain, ln1_bias;
    Matrix w_q, w_k, w_v;  // d_model x d_model, head h owns columns [h*d_head, (h+1)*d_head)
    Vector b_q, b_k, b_v;
    Matrix w_o;  // d_model x d_model, head h owns rows [h*d_head, (h+1)*d_head)
    Vector b_o;
    Vector ln2_gain, ln2_bias;
    Matrix w_in;  // d_model x d_mlp
    Vector b_in;
    Matrix w_out;  // d_mlp x d_model
    Vector b_out;
  };

  Matrix token_embedding;     // vocab x d_model
  Matrix position_embedding;  // max_context x d_model
  std::vector<Block> blocks;
  Vector lnf_gain, lnf_bias;
  Matrix unembed;  // d_model x vocab

  static TransformerWeights zeros(const ModelConfig& c) {
    TransformerWeights w;
    const int d = c.d_model;
    w.token_embedding = Matrix::Zero(c.vocab_size, d);
    w.position_embedding = Matrix::Zero(c.max_context, d);
    w.blocks.resize(static_cast<std::size_t>(c.n_layers));
    for (auto& b : w.blocks) {
      b.ln1_gain = Vector::Zero(d);
      b.ln1_bias = Vector::Zero(d);
      b.w_q = Matrix::Zero(d, d);
      b.w_k = Matrix::Zero(d, d);
      b.w_v = Matrix::Zero(d, d);
      b.b_q = Vector::Zero(d);
      b.b_k = Vector::Zero(d);
      b.b_v = Vector::Zero(d);
      b.w_o = Matrix::Zero(d, d);
      b.b_o = Vector::Zero(d);
      b.ln2_gain = Vector::Zero(d);
      b.ln2_bias = Vector::Zero(d);
      b.w_in = Matrix::Zero(d, c.d_mlp);
      b.b_in = Vector::Zero(c.d_mlp);
      b.w_out = Matrix::Zero(c.d_mlp, d);
      b.b_out = Vector::Zero(d);
    }
    w.lnf_gain = Vector::Zero(d);
    w.lnf_bias = Vector::Zero(d);
    w.unembed = Matrix::Zero(d, c.vocab_size);
    return w;
  }

  // Seeded initialization. `scale` multiplies the fan-in normalized std;
  // 1.0 gives O(1) logits so untrained models have non-degenerate outputs.
  static TransformerWeights random(const ModelConfig& c, std::uint64_t seed, double scale = 1.0) {
    TransformerWeights w = zeros(c);
    Rng rng(seed);
    auto fill = [&](auto& t, double stddev) {
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(rng.normal() * stddev);
    };
    const double d = c.d_model;
    fill(w.token_embedding, 1.0);
    fill(w.position_embedding, 0.5);
    for (auto& b : w.blocks) {
      b.ln1_gain.setOnes();
      b.ln2_gain.setOnes();
      fill(b.w_q, scale / std::sqrt(d));
      fill(b.w_k, scale / std::sqrt(d));
      fill(b.w_v, scale / std::sqrt(d));
      fill(b.w_o, scale / std::sqrt(d));
      fill(b.b_o, 0.1 * scale);
      fill(b.w_in, scale / std::sqrt(d));
      fill(b.b_in, 0.1 * scale);
      fill(b.w_out, scale / std::sqrt(static_cast<double>(c.d_mlp)));
    }
    w.lnf_gain.setOnes();
    fill(w.unembed, scale / std::sqrt(d));
    return w;
  }

  // Visits every parameter tensor with a stable name, in a fixed order.
  template <typename Self, typename F>
  static void visit_impl(Self& self, F&& f) {
    f("token_embedding", self.token_embedding);
    f("position_embedding", self.position_embedding);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      f(p + "ln1_gain", b.ln1_gain);
      f(p + "ln1_bias", b.ln1_bias);
      f(p + "w_q", b.w_q);
      f(p + "w_k", b.w_k);
      f(p + "w_v", b.w_v);
      f(p + "b_q", b.b_q);
      f(p + "b_k", b.b_k);
      f(p + "b_v", b.b_v);
      f(p + "w_o", b.w_o);
      f(p + "b_o", b.b_o);
      f(p + "ln2_gain", b.ln2_gain);
      f(p + "ln2_bias", b.ln2_bias);
      f(p + "w_in", b.w_in);
      f(p + "b_in", b.b_in);
      f(p + "w_out", b.w_out);
      f(p + "b_out", b.b_out);
    }
    f("lnf_gain", self.lnf_gain);
    f("lnf_bias", self.lnf_bias);
    f("unembed", self.unembed);
  }
  template <typename F> void visit(F&& f) { visit_impl(*this, std::forward<F>(f)); }
  template <typename F> void visit(F&& f) const { visit_impl(*this, std::forward<F>(f)); }

  template <typename Other>
  TransformerWeights<Other> cast() const {
    TransformerWeights<Other> out;
    out.blocks.resize(blocks.size());
    std::vector<const Scalar*> src;
    std::vector<Eigen::Index> rows, cols;
    visit([&](const std::string&, const auto& t) {
      src.push_back(t.data());
      rows.push_back(t.rows());
      cols.push_back(t.cols());
    });
    std::size_t i = 0;
    out.visit([&](const std::string&, auto& t) {
      t.resize(rows[i], cols[i]);
      for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = static_cast<Other>(src[i][k]);
      ++i;
    });
    return out;
  }
};

template <typename Scalar>
class Transformer {
 public:
  using Matrix = typename TransformerWeights<Scalar>::Matrix;
  using Vector = typename TransformerWeights<Scalar>::Vector;
  using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

  static constexpr double kLayerNormEps = 1e-5;

  struct HeadPatch {
    int layer;
    int head;
    Vector value;  // d_model, replaces the head's final-position output
  };
  struct ResidualAddition {
    int layer;
    Vector value;  // d_model, added to the residual after `layer` at the final position
  };
  struct Edits {
    std::vector<HeadPatch> patches;
    std::vector<ResidualAddition> additions;
    bool empty() const { return patches.empty() && additions.empty(); }
  };

  // Final-position observations requested by the caller.
  struct Trace {
    bool heads = false;
    bool hidden = false;
    std::vector<Vector> head_outputs;       // [layer * n_heads + head]
    std::vector<Vector> attention_outputs;  // [layer], includes b_o
    std::vector<Vector> hidden_states;      // [layer], residual after the block and its additions
  };

  // Per-block activations kept for backpropagation.
  struct BlockCache {
    Matrix x_in, ln1_hat, h1, q, k, v, z, x_mid, ln2_hat, h2, pre, act;
    Vector ln1_rstd, ln2_rstd;
    std::vector<Matrix> attn;
  };
  struct Cache {
    std::vector<TokenId> tokens;
    std::vector<BlockCache> blocks;
    Matrix x_final, lnf_hat, hf;
    Vector lnf_rstd;
  };

  Transformer(ModelConfig config, TransformerWeights<Scalar> weights)
      : config_(config), weights_(std::move(weights)) {
    config_.validate();
  }

  const ModelConfig& config() const { return config_; }
  const TransformerWeights<Scalar>& weights() const { return weights_; }
  TransformerWeights<Scalar>& mutable_weights() { return weights_; }

  // Logits for every position (T x vocab), or only the final row.
  Matrix forward(std::span<const TokenId> tokens, const Edits* edits = nullptr, Trace* trace = nullptr,
                 Cache* cache = nullptr, bool final_only = false) const {
    const int T = static_cast<int>(tokens.size());
    if (T == 0) throw PreconditionError("forward on an empty token sequence");
    if (T > config_.max_context)
      throw LengthError("sequence of " + std::to_string(T) + " tokens exceeds context length " +
                            std::to_string(config_.max_context),
                        tokens.size());
    const int d = config_.d_model;
    const int H = config_.n_heads;
    const int dh = config_.d_head();
    const int L = config_.n_layers;
    const int last = T - 1;
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

    if (edits) validate_edits(*edits);
    if (trace) {
      trace->head_outputs.assign(trace->heads ? static_cast<std::size_t>(L * H) : 0, Vector());
      trace->attention_outputs.assign(trace->heads ? static_cast<std::size_t>(L) : 0, Vector());
      trace->hidden_states.assign(trace->hidden ? static_cast<std::size_t>(L) : 0, Vector());
    }
    if (cache) {
      cache->tokens.assign(tokens.begin(), tokens.end());
      cache->blocks.assign(static_cast<std::size_t>(L), BlockCache{});
    }

    Matrix x(T, d);
    for (int t = 0; t < T; ++t) {
      const TokenId id = tokens[static_cast<std::size_t>(t)];
      if (id < 0 || id >= config_.vocab_size)
        throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(config_.vocab_size));
      x.row(t) = weights_.token_embedding.row(id) + weights_.position_embedding.row(t);
    }

    for (int l = 0; l < L; ++l) {
      const auto& b = weights_.blocks[static_cast<std::size_t>(l)];
      BlockCache local;
      BlockCache& bc = cache ? cache->blocks[static_cast<std::size_t>(l)] : local;
      if (cache) bc.x_in = x;

      layer_norm(x, b.ln1_gain, b.ln1_bias, bc.ln1_hat, bc.ln1_rstd, bc.h1);
      bc.q = (bc.h1 * b.w_q).rowwise() + b.b_q.transpose();
      bc.k = (bc.h1 * b.w_k).rowwise() + b.b_k.transpose();
      bc.v = (bc.h1 * b.w_v).rowwise() + b.b_v.transpose();
      bc.z.resize(T, d);
      if (cache) bc.attn.resize(static_cast<std::size_t>(H));
      for (int h = 0; h < H; ++h) {
        Matrix scores = (bc.q.middleCols(h * dh, dh) * bc.k.middleCols(h * dh, dh).transpose()) * scale;
        causal_softmax(scores);
        bc.z.middleCols(h * dh, dh) = scores * bc.v.middleCols(h * dh, dh);
        if (cache) bc.attn[static_cast<std::size_t>(h)] = std::move(scores);
      }
      Matrix attn_out = (bc.z * b.w_o).rowwise() + b.b_o.transpose();

      const bool want_heads = (trace && trace->heads) || (edits && has_patch(*edits, l));
      if (want_heads) {
        for (int h = 0; h < H; ++h) {
          RowVector contribution = bc.z.row(last).segment(h * dh, dh) * b.w_o.middleRows(h * dh, dh);
          if (trace && trace->heads)
            trace->head_outputs[static_cast<std::size_t>(l * H + h)] = contribution.transpose();
          if (edits) {
            for (const auto& p : edits->patches)
              if (p.layer == l && p.head == h) attn_out.row(last) += p.value.transpose() - contribution;
          }
        }
        if (trace && trace->heads) trace->attention_outputs[static_cast<std::size_t>(l)] = attn_out.row(last).transpose();
      }

      x += attn_out;
      if (cache) bc.x_mid = x;
      layer_norm(x, b.ln2_gain, b.ln2_bias, bc.ln2_hat, bc.ln2_rstd, bc.h2);
      bc.pre = (bc.h2 * b.w_in).rowwise() + b.b_in.transpose();
      bc.act = gelu(bc.pre);
      x += (bc.act * b.w_out).rowwise() + b.b_out.transpose();

      if (edits)
        for (const auto& a : edits->additions)
          if (a.layer == l) x.row(last) += a.value.transpose();
      if (trace && trace->hidden) trace->hidden_states[static_cast<std::size_t>(l)] = x.row(last).transpose();
    }

    Matrix lnf_hat, hf;
    Vector lnf_rstd;
    if (final_only) {
      Matrix x_last = x.row(last);
      layer_norm(x_last, weights_.lnf_gain, weights_.lnf_bias, lnf_hat, lnf_rstd, hf);
    } else {
      layer_norm(x, weights_.lnf_gain, weights_.lnf_bias, lnf_hat, lnf_rstd, hf);
    }
    Matrix logits = hf * weights_.unembed;
    if (cache) {
      cache->x_final = std::move(x);
      cache->lnf_hat = std::move(lnf_hat);
      cache->lnf_rstd = std::move(lnf_rstd);
      cache->hf = std::move(hf);
    }
    return logits;
  }

  // Tanh-approximate GELU and its derivative, elementwise.
  static Matrix gelu(const Matrix& m) {
    constexpr Scalar c = static_cast<Scalar>(0.7978845608028654);  // sqrt(2/pi)
    const auto a = m.array();
    return (Scalar(0.5) * a * (Scalar(1) + (c * (a + Scalar(0.044715) * a.cube())).tanh())).matrix();
  }
  static Matrix gelu_grad(const Matrix& m) {
    constexpr Scalar c = static_cast<Scalar>(0.7978845608028654);
    const auto a = m.array();
    const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> t = (c * (a + Scalar(0.044715) * a.cube())).tanh();
    return (Scalar(0.5) * (Scalar(1) + t) +
            Scalar(0.5) * a * (Scalar(1) - t.square()) * c * (Scalar(1) + Scalar(3 * 0.044715) * a.square()))
        .matrix();
  }

  static void layer_norm(const Matrix& x, const Vector& gain, const Vector& bias, Matrix& hat, Vector& rstd,
                         Matrix& out) {
    const Eigen::Index n = x.cols();
    hat.resize(x.rows(), n);
    rstd.resize(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const Scalar mean = x.row(r).mean();
      const Scalar var = (x.row(r).array() - mean).square().sum() / static_cast<Scalar>(n);
      rstd(r) = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kLayerNormEps));
      hat.row(r) = (x.row(r).array() - mean) * rstd(r);
    }
    out = (hat.array().rowwise() * gain.transpose().array()).rowwise() + bias.transpose().array();
  }

 private:
  static void causal_softmax(Matrix& s) {
    s.template triangularView<Eigen::StrictlyUpper>().setConstant(-std::numeric_limits<Scalar>::infinity());
    const Vector mx = s.rowwise().maxCoeff();
    s = (s.colwise() - mx).array().exp().matrix();
    const Vector total = s.rowwise().sum();
    s.array().colwise() /= total.array();
  }

  static bool has_patch(const Edits& e, int layer) {
    for (const auto& p : e.patches)
      if (p.layer == layer) return true;
    return false;
  }

  void validate_edits(const Edits& e) const {
    for (const auto& p : e.patches) {
      if (p.layer < 0 || p.layer >= config_.n_layers || p.head < 0 || p.head >= config_.n_heads)
        throw PlanError("head patch targets L" + std::to_string(p.layer) + "H" + std::to_string(p.head) +
                        " outside the model");
      if (p.value.size() != config_.d_model) throw PlanError("head patch vector has the wrong dimension");
    }
    for (const auto& a : e.additions) {
      if (a.layer < 0 || a.layer >= config_.n_layers)
        throw PlanError("residual addition after layer " + std::to_string(a.layer) + " outside the model");
      if (a.value.size() != config_.d_model) throw PlanError("residual addition vector has the wrong dimension");
    }
  }

  ModelConfig config_;
  TransformerWeights<Scalar> weights_;
};

// A model checkpoint: architecture, vocabulary and weights (stored in 64-bit).
struct Checkpoint {
  std::string model_id;
  ModelConfig config;
  Tokenizer tokenizer;
  TransformerWeights<double> weights;
};

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  nlohmann::json j;
  j["format"] = "fvlab-checkpoint";
  j["version"] = 1;
  j["model_id"] = ck.model_id;
  j["config"] = ck.config;
  j["vocabulary"] = ck.tokenizer.to_json();
  nlohmann::json tensors = nlohmann::json::object();
  ck.weights.visit([&](const std::string& name, const auto& t) {
    std::vector<double> data(t.data(), t.data() + t.size());
    tensors[name] = {{"rows", t.rows()}, {"cols", t.cols()}, {"data", std::move(data)}};
  });
  j["weights"] = std::move(tensors);
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path);
  out << j.dump();
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path + ": " + e.what());
  }
  if (j.value("format", "") != "fvlab-checkpoint") throw FormatError(path + " is not an fvlab checkpoint");
  Checkpoint ck;
  ck.model_id = j.at("model_id").get<std::string>();
  ck.config = j.at("config").get<ModelConfig>();
  ck.tokenizer = Tokenizer::from_json(j.at("vocabulary"));
  if (static_cast<int>(ck.tokenizer.size()) != ck.config.vocab_size)
    throw FormatError(path + ": vocabulary size does not match config");
  ck.weights = TransformerWeights<double>::zeros(ck.config);
  const auto& tensors = j.at("weights");
  ck.weights.visit([&](const std::string& name, auto& t) {
    const auto& entry = tensors.at(name);
    if (entry.at("rows").get<Eigen::Index>() != t.rows() || entry.at("cols").get<Eigen::Index>() != t.cols())
      throw FormatError(path + ": tensor " + name + " has the wrong shape");
    const auto& data = entry.at("data");
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = data[static_cast<std::size_t>(i)].get<double>();
  });
  return ck;
}

}  // namespace fvlab
