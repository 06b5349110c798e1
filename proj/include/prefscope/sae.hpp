#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "prefscope/error.hpp"
#include "prefscope/rng.hpp"

namespace prefscope {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct DiffRecord {
  std::string pair_id;
  VectorXd e_delta;
};

struct SaeConfig {
  int input_dim = 0;        // d
  int latent_dim = 32;      // M
  int sparsity_k = 4;       // K
  int matryoshka_prefix = 8;
  int batch_size = 256;
  double learning_rate = 1e-3;
  int epochs = 200;
  uint64_t seed = 0;
  // When set, the coarse reconstruction term selects its own top activations
  // within the prefix block instead of reusing the full-width selection.
  bool topk_per_prefix_group = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (input_dim <= 0) fail(ErrorKind::validation, "sae: input_dim must be positive");
    if (latent_dim <= 0) fail(ErrorKind::validation, "sae: latent_dim must be positive");
    if (sparsity_k <= 0) fail(ErrorKind::validation, "sae: sparsity_k must be positive");
    if (batch_size <= 0) fail(ErrorKind::validation, "sae: batch_size must be positive");
    if (epochs <= 0) fail(ErrorKind::validation, "sae: epochs must be positive");
    if (learning_rate <= 0) fail(ErrorKind::validation, "sae: learning_rate must be positive");
    if (!(sparsity_k <= matryoshka_prefix && matryoshka_prefix <= latent_dim)) {
      fail(ErrorKind::validation,
           "sae: need sparsity_k <= matryoshka_prefix <= latent_dim");
    }
  }
};

// Bias-free linear encoder/decoder pair. Decoder columns stay unit norm; the
// inference threshold theta is calibrated during training.
struct SaeModel {
  MatrixXd w_enc;  // M x d
  MatrixXd w_dec;  // d x M
  double theta = -1.0;  // negative = not yet calibrated
  SaeConfig config;
  std::vector<double> train_loss_trace;  // epoch-averaged
  double max_decoder_norm_deviation = 0.0;  // observed across all steps
  double input_variance = 0.0;              // per-run metadata

  bool has_threshold() const { return theta >= 0.0; }
};

struct LatentMatrix {
  std::vector<std::string> pair_ids;
  MatrixXd z;  // N x M, signed
};

namespace sae_detail {

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

// Retains the n_keep largest-|value| entries of the first `cols` columns.
// Ties break by (|a| desc, flat row-major index asc) so runs reproduce.
inline Mask batch_topk_mask(const MatrixXd& acts, long n_keep, long cols) {
  const long rows = acts.rows();
  struct Entry { double mag; long flat; long r; long c; };
  std::vector<Entry> entries;
  entries.reserve(static_cast<size_t>(rows * cols));
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      entries.push_back({std::abs(acts(r, c)), r * cols + c, r, c});
    }
  }
  n_keep = std::min<long>(n_keep, static_cast<long>(entries.size()));
  std::nth_element(entries.begin(), entries.begin() + n_keep, entries.end(),
                   [](const Entry& a, const Entry& b) {
                     if (a.mag != b.mag) return a.mag > b.mag;
                     return a.flat < b.flat;
                   });
  Mask mask = Mask::Constant(rows, acts.cols(), false);
  for (long i = 0; i < n_keep; ++i) {
    mask(entries[static_cast<size_t>(i)].r, entries[static_cast<size_t>(i)].c) = true;
  }
  return mask;
}

struct BatchForward {
  MatrixXd acts;      // pre-selection activations, B x M
  MatrixXd z_full;    // post-TopK latents
  MatrixXd z_prefix;  // latents feeding the coarse reconstruction
  Mask support_full;
  Mask support_prefix;
  double loss = 0.0;
  double min_retained_abs = 0.0;
  long retained_count = 0;
};

inline double mse(const MatrixXd& x, const MatrixXd& x_hat) {
  return (x - x_hat).squaredNorm() /
         static_cast<double>(x.rows() * x.cols());
}

inline BatchForward forward_batch(const MatrixXd& x, const MatrixXd& w_enc,
                                  const MatrixXd& w_dec, const SaeConfig& cfg) {
  BatchForward f;
  const long rows = x.rows();
  const long m = w_enc.rows();
  const long n_keep = rows * cfg.sparsity_k;
  f.acts = x * w_enc.transpose();
  f.support_full = batch_topk_mask(f.acts, n_keep, m);
  f.z_full = f.support_full.select(f.acts, MatrixXd::Zero(rows, m));
  if (cfg.topk_per_prefix_group) {
    f.support_prefix = batch_topk_mask(f.acts, n_keep, cfg.matryoshka_prefix);
  } else {
    f.support_prefix = f.support_full;
    for (long c = cfg.matryoshka_prefix; c < m; ++c) {
      f.support_prefix.col(c).setConstant(false);
    }
  }
  f.z_prefix = f.support_prefix.select(f.acts, MatrixXd::Zero(rows, m));

  f.loss = mse(x, f.z_prefix * w_dec.transpose()) +
           mse(x, f.z_full * w_dec.transpose());

  f.min_retained_abs = std::numeric_limits<double>::infinity();
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < m; ++c) {
      if (f.support_full(r, c)) {
        ++f.retained_count;
        f.min_retained_abs = std::min(f.min_retained_abs, std::abs(f.acts(r, c)));
      }
    }
  }
  if (f.retained_count == 0) f.min_retained_abs = 0.0;
  return f;
}

struct BatchGradients {
  double loss = 0.0;
  MatrixXd g_enc;  // M x d
  MatrixXd g_dec;  // d x M
};

// Analytic gradients of L = MSE(X, dec(Z_prefix)) + MSE(X, dec(Z_full)) with
// the TopK supports treated as constants (straight-through on the support).
inline BatchGradients gradients_with_support(const MatrixXd& x,
                                             const MatrixXd& w_enc,
                                             const MatrixXd& w_dec,
                                             const Mask& support_full,
                                             const Mask& support_prefix) {
  const long rows = x.rows();
  const long m = w_enc.rows();
  const double scale = 2.0 / static_cast<double>(rows * x.cols());
  MatrixXd acts = x * w_enc.transpose();
  MatrixXd zf = support_full.select(acts, MatrixXd::Zero(rows, m));
  MatrixXd zp = support_prefix.select(acts, MatrixXd::Zero(rows, m));
  MatrixXd rf = zf * w_dec.transpose() - x;
  MatrixXd rp = zp * w_dec.transpose() - x;

  BatchGradients g;
  g.loss = rf.squaredNorm() / static_cast<double>(rows * x.cols()) +
           rp.squaredNorm() / static_cast<double>(rows * x.cols());
  g.g_dec = scale * (rf.transpose() * zf + rp.transpose() * zp);
  MatrixXd gz_full = (scale * (rf * w_dec)).cwiseProduct(
      support_full.cast<double>().matrix());
  MatrixXd gz_prefix = (scale * (rp * w_dec)).cwiseProduct(
      support_prefix.cast<double>().matrix());
  g.g_enc = (gz_full + gz_prefix).transpose() * x;
  return g;
}

inline double loss_with_support(const MatrixXd& x, const MatrixXd& w_enc,
                                const MatrixXd& w_dec, const Mask& support_full,
                                const Mask& support_prefix) {
  const long rows = x.rows();
  const long m = w_enc.rows();
  MatrixXd acts = x * w_enc.transpose();
  MatrixXd zf = support_full.select(acts, MatrixXd::Zero(rows, m));
  MatrixXd zp = support_prefix.select(acts, MatrixXd::Zero(rows, m));
  return mse(x, zp * w_dec.transpose()) + mse(x, zf * w_dec.transpose());
}

}  // namespace sae_detail

// Training-mode encoder: keeps the batch's rows*K largest-magnitude
// activations, zeroes the rest.
inline MatrixXd encode_batch_train(const MatrixXd& x, const SaeModel& model) {
  if (!x.allFinite()) fail(ErrorKind::numeric, "encode_batch_train: non-finite input");
  if (x.cols() != model.w_enc.cols()) {
    fail(ErrorKind::validation, "encode_batch_train: input dim mismatch");
  }
  return sae_detail::forward_batch(x, model.w_enc, model.w_dec, model.config).z_full;
}

// Inference-mode encoder: magnitude threshold calibrated at train time.
inline VectorXd encode_inference(const VectorXd& x, const SaeModel& model) {
  if (!model.has_threshold()) {
    fail(ErrorKind::model_state,
         "encode_inference: model has no calibrated threshold (train first)");
  }
  if (x.size() != model.w_enc.cols()) {
    fail(ErrorKind::validation, "encode_inference: input dim mismatch");
  }
  VectorXd a = model.w_enc * x;
  for (long j = 0; j < a.size(); ++j) {
    if (std::abs(a[j]) < model.theta) a[j] = 0.0;
  }
  return a;
}

inline VectorXd decode(const VectorXd& z, const SaeModel& model) {
  if (z.size() != model.w_dec.cols()) {
    fail(ErrorKind::validation, "decode: latent dim mismatch");
  }
  return model.w_dec * z;
}

inline double sae_loss(const MatrixXd& x, const SaeModel& model) {
  if (!x.allFinite()) fail(ErrorKind::numeric, "sae_loss: non-finite input");
  return sae_detail::forward_batch(x, model.w_enc, model.w_dec, model.config).loss;
}

inline SaeModel init_sae(const SaeConfig& cfg) {
  cfg.validate();
  SaeModel model;
  model.config = cfg;
  Rng rng(cfg.seed);
  model.w_dec = MatrixXd(cfg.input_dim, cfg.latent_dim);
  for (long c = 0; c < cfg.latent_dim; ++c) {
    for (long r = 0; r < cfg.input_dim; ++r) model.w_dec(r, c) = rng.normal();
    model.w_dec.col(c).normalize();
  }
  model.w_enc = model.w_dec.transpose();
  return model;
}

struct TrainStats {
  long steps = 0;
  double final_epoch_loss = 0.0;
};

inline SaeModel train_sae(const std::vector<DiffRecord>& diffs, SaeConfig cfg,
                          TrainStats* stats = nullptr) {
  if (diffs.empty()) fail(ErrorKind::validation, "train_sae: no input records");
  if (cfg.input_dim == 0) cfg.input_dim = static_cast<int>(diffs.front().e_delta.size());
  cfg.validate();
  const long n = static_cast<long>(diffs.size());
  const long d = cfg.input_dim;
  if (n < cfg.batch_size) {
    fail(ErrorKind::validation,
         "train_sae: need at least batch_size (" + std::to_string(cfg.batch_size) +
             ") records, got " + std::to_string(n));
  }
  MatrixXd x(n, d);
  for (long i = 0; i < n; ++i) {
    if (diffs[static_cast<size_t>(i)].e_delta.size() != d) {
      fail(ErrorKind::validation, "train_sae: inconsistent input dimension at row " +
                                      std::to_string(i));
    }
    x.row(i) = diffs[static_cast<size_t>(i)].e_delta.transpose();
  }
  if (!x.allFinite()) fail(ErrorKind::numeric, "train_sae: non-finite input");

  SaeModel model = init_sae(cfg);
  model.input_variance = (x.array() - x.mean()).square().sum() /
                         static_cast<double>(n * d);

  MatrixXd m_enc = MatrixXd::Zero(cfg.latent_dim, d);
  MatrixXd v_enc = MatrixXd::Zero(cfg.latent_dim, d);
  MatrixXd m_dec = MatrixXd::Zero(d, cfg.latent_dim);
  MatrixXd v_dec = MatrixXd::Zero(d, cfg.latent_dim);
  long step = 0;

  Rng shuffle_rng(splitmix64(cfg.seed ^ 0x5ca1ab1eull));
  std::vector<long> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0L);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    const bool final_epoch = (epoch == cfg.epochs - 1);
    double epoch_loss = 0.0;
    double theta_sum = 0.0;
    long n_batches = 0;
    for (long start = 0; start < n; start += cfg.batch_size) {
      const long rows = std::min<long>(cfg.batch_size, n - start);
      MatrixXd xb(rows, d);
      for (long r = 0; r < rows; ++r) {
        xb.row(r) = x.row(order[static_cast<size_t>(start + r)]);
      }
      auto fwd = sae_detail::forward_batch(xb, model.w_enc, model.w_dec, cfg);
      auto grads = sae_detail::gradients_with_support(
          xb, model.w_enc, model.w_dec, fwd.support_full, fwd.support_prefix);
      if (!std::isfinite(grads.loss)) {
        fail(ErrorKind::numeric,
             "train_sae: non-finite loss at step " + std::to_string(step) +
                 " (encoder norm " + std::to_string(model.w_enc.norm()) +
                 ", decoder norm " + std::to_string(model.w_dec.norm()) + ")");
      }
      ++step;
      const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
      auto adam_update = [&](MatrixXd& w, MatrixXd& m1, MatrixXd& m2,
                             const MatrixXd& g) {
        m1 = cfg.adam_beta1 * m1 + (1.0 - cfg.adam_beta1) * g;
        m2 = cfg.adam_beta2 * m2 + (1.0 - cfg.adam_beta2) * g.cwiseProduct(g);
        w.array() -= cfg.learning_rate * (m1.array() / bc1) /
                     ((m2.array() / bc2).sqrt() + cfg.adam_eps);
      };
      adam_update(model.w_enc, m_enc, v_enc, grads.g_enc);
      adam_update(model.w_dec, m_dec, v_dec, grads.g_dec);
      for (long c = 0; c < cfg.latent_dim; ++c) {
        double norm = model.w_dec.col(c).norm();
        if (norm < 1e-12) {
          fail(ErrorKind::numeric, "train_sae: decoder column " + std::to_string(c) +
                                       " collapsed at step " + std::to_string(step));
        }
        model.w_dec.col(c) /= norm;
        model.max_decoder_norm_deviation = std::max(
            model.max_decoder_norm_deviation,
            std::abs(model.w_dec.col(c).norm() - 1.0));
      }
      epoch_loss += grads.loss;
      ++n_batches;
      if (final_epoch) theta_sum += fwd.min_retained_abs;
    }
    model.train_loss_trace.push_back(epoch_loss / static_cast<double>(n_batches));
    if (final_epoch) {
      model.theta = theta_sum / static_cast<double>(n_batches);
    }
  }
  if (stats) {
    stats->steps = step;
    stats->final_epoch_loss = model.train_loss_trace.back();
  }
  return model;
}

inline LatentMatrix transform(const std::vector<DiffRecord>& diffs,
                              const SaeModel& model) {
  LatentMatrix out;
  out.pair_ids.reserve(diffs.size());
  out.z = MatrixXd(static_cast<long>(diffs.size()), model.config.latent_dim);
  for (size_t i = 0; i < diffs.size(); ++i) {
    out.pair_ids.push_back(diffs[i].pair_id);
    out.z.row(static_cast<long>(i)) = encode_inference(diffs[i].e_delta, model).transpose();
  }
  return out;
}

// ---- checkpoint io (versioned binary container, byte-exact round trip) ----

namespace sae_detail {

inline void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_f64(std::ostream& out, double v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_matrix(std::ostream& out, const MatrixXd& m) {
  write_u64(out, static_cast<uint64_t>(m.rows()));
  write_u64(out, static_cast<uint64_t>(m.cols()));
  for (long r = 0; r < m.rows(); ++r) {
    for (long c = 0; c < m.cols(); ++c) write_f64(out, m(r, c));
  }
}
inline uint32_t read_u32(std::istream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
inline uint64_t read_u64(std::istream& in) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
inline double read_f64(std::istream& in) {
  double v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
inline MatrixXd read_matrix(std::istream& in) {
  uint64_t rows = read_u64(in), cols = read_u64(in);
  MatrixXd m(static_cast<long>(rows), static_cast<long>(cols));
  for (long r = 0; r < m.rows(); ++r) {
    for (long c = 0; c < m.cols(); ++c) m(r, c) = read_f64(in);
  }
  return m;
}

constexpr uint32_t kSaeMagic = 0x45415357;  // "WSAE"
constexpr uint32_t kSaeVersion = 1;

}  // namespace sae_detail

inline void save_sae(const SaeModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write checkpoint: " + path.string());
  using namespace sae_detail;
  write_u32(out, kSaeMagic);
  write_u32(out, kSaeVersion);
  const auto& c = model.config;
  write_u32(out, static_cast<uint32_t>(c.input_dim));
  write_u32(out, static_cast<uint32_t>(c.latent_dim));
  write_u32(out, static_cast<uint32_t>(c.sparsity_k));
  write_u32(out, static_cast<uint32_t>(c.matryoshka_prefix));
  write_u32(out, static_cast<uint32_t>(c.batch_size));
  write_u32(out, static_cast<uint32_t>(c.epochs));
  write_u32(out, c.topk_per_prefix_group ? 1u : 0u);
  write_u64(out, c.seed);
  write_f64(out, c.learning_rate);
  write_f64(out, c.adam_beta1);
  write_f64(out, c.adam_beta2);
  write_f64(out, c.adam_eps);
  write_f64(out, model.theta);
  write_f64(out, model.max_decoder_norm_deviation);
  write_f64(out, model.input_variance);
  write_matrix(out, model.w_enc);
  write_matrix(out, model.w_dec);
  write_u64(out, static_cast<uint64_t>(model.train_loss_trace.size()));
  for (double v : model.train_loss_trace) write_f64(out, v);
}

inline SaeModel load_sae(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open checkpoint: " + path.string());
  using namespace sae_detail;
  if (read_u32(in) != kSaeMagic) {
    fail(ErrorKind::parse, "not a model checkpoint: " + path.string());
  }
  uint32_t version = read_u32(in);
  if (version != kSaeVersion) {
    fail(ErrorKind::parse, "unsupported checkpoint version " + std::to_string(version));
  }
  SaeModel model;
  auto& c = model.config;
  c.input_dim = static_cast<int>(read_u32(in));
  c.latent_dim = static_cast<int>(read_u32(in));
  c.sparsity_k = static_cast<int>(read_u32(in));
  c.matryoshka_prefix = static_cast<int>(read_u32(in));
  c.batch_size = static_cast<int>(read_u32(in));
  c.epochs = static_cast<int>(read_u32(in));
  c.topk_per_prefix_group = read_u32(in) != 0;
  c.seed = read_u64(in);
  c.learning_rate = read_f64(in);
  c.adam_beta1 = read_f64(in);
  c.adam_beta2 = read_f64(in);
  c.adam_eps = read_f64(in);
  model.theta = read_f64(in);
  model.max_decoder_norm_deviation = read_f64(in);
  model.input_variance = read_f64(in);
  model.w_enc = read_matrix(in);
  model.w_dec = read_matrix(in);
  uint64_t trace_len = read_u64(in);
  model.train_loss_trace.resize(trace_len);
  for (uint64_t i = 0; i < trace_len; ++i) model.train_loss_trace[i] = read_f64(in);
  if (!in) fail(ErrorKind::parse, "truncated checkpoint: " + path.string());
  return model;
}

}  // namespace prefscope
