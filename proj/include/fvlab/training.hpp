#pragma once

// Backpropagation and Adam for Transformer<Scalar>. Used to fine-tune the
// bundled toy checkpoints; the interpretability pipeline itself never trains.

#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "fvlab/transformer.hpp"

namespace fvlab {

// `targets` pairs a position with the token its logits should predict.
struct TrainingExample {
  std::vector<TokenId> tokens;
  std::vector<std::pair<int, TokenId>> targets;
};

namespace detail {

template <typename Matrix, typename Vector>
Matrix layer_norm_backward(const Matrix& dy, const Matrix& hat, const Vector& rstd, const Vector& gain,
                           Vector& dgain, Vector& dbias) {
  using Scalar = typename Matrix::Scalar;
  dgain += (dy.array() * hat.array()).colwise().sum().matrix().transpose();
  dbias += dy.colwise().sum().transpose();
  Matrix dhat = dy.array().rowwise() * gain.transpose().array();
  Matrix dx(dy.rows(), dy.cols());
  const Scalar n = static_cast<Scalar>(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Scalar mean_dhat = dhat.row(r).sum() / n;
    const Scalar mean_dhat_hat = dhat.row(r).dot(hat.row(r)) / n;
    dx.row(r) = rstd(r) * (dhat.row(r).array() - mean_dhat - hat.row(r).array() * mean_dhat_hat).matrix();
  }
  return dx;
}

}  // namespace detail

// Mean cross-entropy over the example's targets. Gradients (scaled by
// `weight`) are accumulated into `grad`.
template <typename Scalar>
double accumulate_gradient(const Transformer<Scalar>& model, const TrainingExample& ex,
                           TransformerWeights<Scalar>& grad, double weight = 1.0) {
  using Matrix = typename Transformer<Scalar>::Matrix;
  using Vector = typename Transformer<Scalar>::Vector;
  if (ex.targets.empty()) return 0.0;

  const auto& cfg = model.config();
  const auto& W = model.weights();
  const int T = static_cast<int>(ex.tokens.size());
  const int H = cfg.n_heads;
  const int dh = cfg.d_head();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  typename Transformer<Scalar>::Cache cache;
  Matrix logits = model.forward(ex.tokens, nullptr, nullptr, &cache);

  // Only target rows carry loss, so the unembedding backward runs on those rows.
  const int n_targets = static_cast<int>(ex.targets.size());
  Matrix dlogits(n_targets, cfg.vocab_size);
  Matrix hf_rows(n_targets, cfg.d_model);
  double loss = 0.0;
  const Scalar per_target = static_cast<Scalar>(weight / static_cast<double>(n_targets));
  for (int r = 0; r < n_targets; ++r) {
    const auto [pos, target] = ex.targets[static_cast<std::size_t>(r)];
    auto row = logits.row(pos);
    const Scalar mx = row.maxCoeff();
    Eigen::Matrix<Scalar, 1, Eigen::Dynamic> p = (row.array() - mx).exp();
    const Scalar total = p.sum();
    p /= total;
    loss -= std::log(static_cast<double>(p(target)));
    p(target) -= Scalar(1);
    dlogits.row(r) = p * per_target;
    hf_rows.row(r) = cache.hf.row(pos);
  }
  loss /= static_cast<double>(n_targets);

  grad.unembed.noalias() += hf_rows.transpose() * dlogits;
  Matrix dhf = Matrix::Zero(T, cfg.d_model);
  const Matrix dhf_rows = dlogits * W.unembed.transpose();
  for (int r = 0; r < n_targets; ++r) dhf.row(ex.targets[static_cast<std::size_t>(r)].first) += dhf_rows.row(r);
  Matrix dx = detail::layer_norm_backward(dhf, cache.lnf_hat, cache.lnf_rstd, W.lnf_gain, grad.lnf_gain, grad.lnf_bias);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& bc = cache.blocks[static_cast<std::size_t>(l)];
    const auto& b = W.blocks[static_cast<std::size_t>(l)];
    auto& gb = grad.blocks[static_cast<std::size_t>(l)];

    // MLP
    gb.w_out.noalias() += bc.act.transpose() * dx;
    gb.b_out += dx.colwise().sum().transpose();
    Matrix dpre = (dx * b.w_out.transpose()).cwiseProduct(Transformer<Scalar>::gelu_grad(bc.pre));
    gb.w_in.noalias() += bc.h2.transpose() * dpre;
    gb.b_in += dpre.colwise().sum().transpose();
    dx += detail::layer_norm_backward(Matrix(dpre * b.w_in.transpose()), bc.ln2_hat, bc.ln2_rstd, b.ln2_gain,
                                      gb.ln2_gain, gb.ln2_bias);

    // Attention
    gb.w_o.noalias() += bc.z.transpose() * dx;
    gb.b_o += dx.colwise().sum().transpose();
    Matrix dz = dx * b.w_o.transpose();
    Matrix dq(T, cfg.d_model), dk(T, cfg.d_model), dv(T, cfg.d_model);
    for (int h = 0; h < H; ++h) {
      const Matrix& A = bc.attn[static_cast<std::size_t>(h)];
      Matrix dA = dz.middleCols(h * dh, dh) * bc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = A.transpose() * dz.middleCols(h * dh, dh);
      Vector row_dot = (dA.array() * A.array()).rowwise().sum();
      Matrix dS = (A.array() * (dA.array().colwise() - row_dot.array())) * scale;
      dq.middleCols(h * dh, dh) = dS * bc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = dS.transpose() * bc.q.middleCols(h * dh, dh);
    }
    gb.w_q.noalias() += bc.h1.transpose() * dq;
    gb.w_k.noalias() += bc.h1.transpose() * dk;
    gb.w_v.noalias() += bc.h1.transpose() * dv;
    gb.b_q += dq.colwise().sum().transpose();
    gb.b_k += dk.colwise().sum().transpose();
    gb.b_v += dv.colwise().sum().transpose();
    Matrix dh1 = dq * b.w_q.transpose() + dk * b.w_k.transpose() + dv * b.w_v.transpose();
    dx += detail::layer_norm_backward(dh1, bc.ln1_hat, bc.ln1_rstd, b.ln1_gain, gb.ln1_gain, gb.ln1_bias);
  }

  for (int t = 0; t < T; ++t) {
    grad.token_embedding.row(ex.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
    grad.position_embedding.row(t) += dx.row(t);
  }
  return loss * weight;
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

template <typename Scalar>
class Adam {
 public:
  Adam(const ModelConfig& config, AdamOptions options = {})
      : options_(options),
        m_(TransformerWeights<Scalar>::zeros(config)),
        v_(TransformerWeights<Scalar>::zeros(config)) {}

  // Applies one update and returns the pre-clipping gradient norm.
  double step(TransformerWeights<Scalar>& weights, const TransformerWeights<Scalar>& grad, double lr) {
    ++t_;
    std::vector<Scalar*> w, m, v;
    std::vector<const Scalar*> g;
    std::vector<Eigen::Index> sizes;
    weights.visit([&](const std::string&, auto& x) { w.push_back(x.data()); sizes.push_back(x.size()); });
    grad.visit([&](const std::string&, const auto& x) { g.push_back(x.data()); });
    m_.visit([&](const std::string&, auto& x) { m.push_back(x.data()); });
    v_.visit([&](const std::string&, auto& x) { v.push_back(x.data()); });

    double norm2 = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i)
      for (Eigen::Index k = 0; k < sizes[i]; ++k) norm2 += static_cast<double>(g[i][k]) * g[i][k];
    const double norm = std::sqrt(norm2);
    const double clip = (options_.clip_norm > 0 && norm > options_.clip_norm) ? options_.clip_norm / norm : 1.0;

    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < w.size(); ++i) {
      for (Eigen::Index k = 0; k < sizes[i]; ++k) {
        const double gk = static_cast<double>(g[i][k]) * clip;
        const double mk = options_.beta1 * m[i][k] + (1.0 - options_.beta1) * gk;
        const double vk = options_.beta2 * v[i][k] + (1.0 - options_.beta2) * gk * gk;
        m[i][k] = static_cast<Scalar>(mk);
        v[i][k] = static_cast<Scalar>(vk);
        w[i][k] -= static_cast<Scalar>(lr * (mk / bc1) / (std::sqrt(vk / bc2) + options_.eps));
      }
    }
    return norm;
  }

 private:
  AdamOptions options_;
  TransformerWeights<Scalar> m_, v_;
  long t_ = 0;
};

}  // namespace fvlab
