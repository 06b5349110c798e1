#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

#include "prefscope/rng.hpp"
#include "prefscope/sae.hpp"

using namespace prefscope;

namespace {

SaeModel tiny_model(int d, int m, int k, int prefix, double theta = -1.0) {
  SaeConfig cfg;
  cfg.input_dim = d;
  cfg.latent_dim = m;
  cfg.sparsity_k = k;
  cfg.matryoshka_prefix = prefix;
  cfg.batch_size = 2;
  SaeModel model = init_sae(cfg);
  model.theta = theta;
  return model;
}

// Orthonormal columns from seeded Gram-Schmidt; independent of the library's
// QR-based generator.
MatrixXd orthonormal_directions(int d, int k, uint64_t seed) {
  Rng rng(seed);
  MatrixXd dirs(d, k);
  for (int c = 0; c < k; ++c) {
    VectorXd v(d);
    for (int r = 0; r < d; ++r) v[r] = rng.normal();
    for (int prev = 0; prev < c; ++prev) {
      v -= dirs.col(prev).dot(v) * dirs.col(prev);
    }
    dirs.col(c) = v.normalized();
  }
  return dirs;
}

std::vector<DiffRecord> planted_diffs(const MatrixXd& dirs, long n, int active,
                                      double noise_sd, uint64_t seed) {
  Rng rng(seed);
  const int d = static_cast<int>(dirs.rows());
  const int f = static_cast<int>(dirs.cols());
  std::vector<DiffRecord> out;
  out.reserve(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) {
    VectorXd x = VectorXd::Zero(d);
    auto chosen = rng.sample_indices(static_cast<size_t>(f), static_cast<size_t>(active));
    for (size_t j : chosen) {
      double mag = rng.uniform(0.5, 1.5) * (rng.coin() ? 1.0 : -1.0);
      x += mag * dirs.col(static_cast<long>(j));
    }
    for (int r = 0; r < d; ++r) x[r] += noise_sd * rng.normal();
    out.push_back({"s" + std::to_string(i), x});
  }
  return out;
}

double greedy_recovery(const MatrixXd& dirs, const MatrixXd& w_dec) {
  MatrixXd cos = (dirs.transpose() * w_dec).cwiseAbs();
  const long f = dirs.cols();
  std::vector<bool> dir_used(static_cast<size_t>(f), false);
  std::vector<bool> col_used(static_cast<size_t>(w_dec.cols()), false);
  double total = 0.0;
  for (long pick = 0; pick < f; ++pick) {
    double best = -1.0;
    long bi = -1, bj = -1;
    for (long i = 0; i < f; ++i) {
      if (dir_used[static_cast<size_t>(i)]) continue;
      for (long j = 0; j < cos.cols(); ++j) {
        if (col_used[static_cast<size_t>(j)]) continue;
        if (cos(i, j) > best) {
          best = cos(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    dir_used[static_cast<size_t>(bi)] = true;
    col_used[static_cast<size_t>(bj)] = true;
    total += best;
  }
  return total / static_cast<double>(f);
}

}  // namespace

TEST_CASE("training encoder maps zero to zero") {
  auto model = tiny_model(3, 3, 1, 2);
  MatrixXd x = MatrixXd::Zero(2, 3);
  CHECK(encode_batch_train(x, model).norm() == 0.0);
}

TEST_CASE("training encoder is odd") {
  auto model = tiny_model(5, 4, 2, 3);
  Rng rng(11);
  MatrixXd x(6, 5);
  for (long i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  MatrixXd pos = encode_batch_train(x, model);
  MatrixXd neg = encode_batch_train(-x, model);
  CHECK((pos + neg).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("batch topk matches a brute-force sort oracle") {
  SaeConfig cfg;
  cfg.input_dim = 3;
  cfg.latent_dim = 3;
  cfg.sparsity_k = 1;
  cfg.matryoshka_prefix = 2;
  cfg.batch_size = 2;
  SaeModel model = init_sae(cfg);
  model.w_enc << 1.0, 0.0, 0.0,
                 0.0, -1.0, 0.0,
                 0.0, 0.0, 0.5;
  MatrixXd x(2, 3);
  x << 0.3, -0.7, 0.9,
       -0.2, 0.4, 1.9;
  MatrixXd z = encode_batch_train(x, model);

  // Oracle: compute all 6 activations by hand, keep the top B*K = 2 by |value|.
  struct Act { double v; long r, c; };
  std::vector<Act> acts;
  for (long r = 0; r < 2; ++r) {
    for (long c = 0; c < 3; ++c) {
      double v = 0;
      for (long i = 0; i < 3; ++i) v += x(r, i) * model.w_enc(c, i);
      acts.push_back({v, r, c});
    }
  }
  std::sort(acts.begin(), acts.end(),
            [](const Act& a, const Act& b) { return std::abs(a.v) > std::abs(b.v); });
  MatrixXd expected = MatrixXd::Zero(2, 3);
  for (int i = 0; i < 2; ++i) expected(acts[i].r, acts[i].c) = acts[i].v;
  CHECK((z - expected).lpNorm<Eigen::Infinity>() < 1e-15);
  CHECK((z.array() != 0.0).count() == 2);
}

TEST_CASE("inference thresholding") {
  auto model = tiny_model(3, 3, 1, 2, 0.0);
  model.w_enc = MatrixXd::Identity(3, 3);
  VectorXd x(3);
  x << 0.5, -0.2, 0.05;
  SECTION("theta zero keeps the dense activations") {
    VectorXd z = encode_inference(x, model);
    CHECK((z - x).lpNorm<Eigen::Infinity>() < 1e-15);
  }
  SECTION("theta above the max suppresses everything") {
    model.theta = 10.0;
    CHECK(encode_inference(x, model).norm() == 0.0);
  }
  SECTION("unset theta is a model-state error") {
    model.theta = -1.0;
    try {
      encode_inference(x, model);
      FAIL("expected model-state error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::model_state);
    }
  }
  SECTION("inference encoder is odd") {
    model.theta = 0.1;
    VectorXd zp = encode_inference(x, model);
    VectorXd zn = encode_inference(VectorXd(-x), model);
    CHECK((zp + zn).lpNorm<Eigen::Infinity>() == 0.0);
  }
}

TEST_CASE("decode basics") {
  auto model = tiny_model(4, 3, 1, 2);
  CHECK(decode(VectorXd::Zero(3), model).norm() == 0.0);
  VectorXd e1 = VectorXd::Zero(3);
  e1[1] = 1.0;
  VectorXd col = decode(e1, model);
  CHECK((col - model.w_dec.col(1)).norm() < 1e-15);
  CHECK(col.norm() == Catch::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("loss matches a scalar-arithmetic oracle") {
  SaeConfig cfg;
  cfg.input_dim = 2;
  cfg.latent_dim = 2;
  cfg.sparsity_k = 1;
  cfg.matryoshka_prefix = 1;
  cfg.batch_size = 2;
  SaeModel model = init_sae(cfg);
  model.w_enc = MatrixXd::Identity(2, 2);
  model.w_dec = MatrixXd::Identity(2, 2);
  MatrixXd x(2, 2);
  x << 2.0, 0.5,
       0.25, -1.0;
  // By hand: activations equal X; keep |2| and |-1|.
  // Full recon = [[2,0],[0,-1]]; MSE = (0.5^2 + 0.25^2)/4 = 0.078125
  // Prefix recon keeps latent 0 only = [[2,0],[0,0]];
  //   MSE = (0.5^2 + 0.25^2 + 1)/4 = 0.328125
  double expected = 0.078125 + 0.328125;
  CHECK(sae_loss(x, model) == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("perfect reconstruction gives zero loss") {
  SaeConfig cfg;
  cfg.input_dim = 2;
  cfg.latent_dim = 2;
  cfg.sparsity_k = 2;
  cfg.matryoshka_prefix = 2;
  cfg.batch_size = 2;
  SaeModel model = init_sae(cfg);
  model.w_enc = MatrixXd::Identity(2, 2);
  model.w_dec = MatrixXd::Identity(2, 2);
  MatrixXd x(2, 2);
  x << 1.0, -0.5, 0.25, 2.0;
  CHECK(sae_loss(x, model) < 1e-24);
}

TEST_CASE("loss dominates the full-width reconstruction error") {
  auto model = tiny_model(6, 4, 2, 3);
  Rng rng(3);
  MatrixXd x(8, 6);
  for (long i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  auto fwd =
      sae_detail::forward_batch(x, model.w_enc, model.w_dec, model.config);
  double full_mse = sae_detail::mse(x, fwd.z_full * model.w_dec.transpose());
  CHECK(fwd.loss >= full_mse - 1e-15);
}

TEST_CASE("analytic gradients match central finite differences") {
  SaeConfig cfg;
  cfg.input_dim = 4;
  cfg.latent_dim = 3;
  cfg.sparsity_k = 2;
  cfg.matryoshka_prefix = 2;
  cfg.batch_size = 5;
  cfg.seed = 17;
  SaeModel model = init_sae(cfg);
  Rng rng(23);
  MatrixXd x(5, 4);
  for (long i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  auto fwd = sae_detail::forward_batch(x, model.w_enc, model.w_dec, cfg);
  auto grads = sae_detail::gradients_with_support(
      x, model.w_enc, model.w_dec, fwd.support_full, fwd.support_prefix);

  const double h = 1e-5;
  auto fd_check = [&](MatrixXd& w, const MatrixXd& analytic) {
    MatrixXd fd = MatrixXd::Zero(w.rows(), w.cols());
    for (long r = 0; r < w.rows(); ++r) {
      for (long c = 0; c < w.cols(); ++c) {
        double orig = w(r, c);
        w(r, c) = orig + h;
        double up = sae_detail::loss_with_support(x, model.w_enc, model.w_dec,
                                                  fwd.support_full,
                                                  fwd.support_prefix);
        w(r, c) = orig - h;
        double dn = sae_detail::loss_with_support(x, model.w_enc, model.w_dec,
                                                  fwd.support_full,
                                                  fwd.support_prefix);
        w(r, c) = orig;
        fd(r, c) = (up - dn) / (2 * h);
      }
    }
    double rel = (analytic - fd).norm() / std::max(fd.norm(), 1e-12);
    CHECK(rel < 1e-4);
  };
  fd_check(model.w_enc, grads.g_enc);
  fd_check(model.w_dec, grads.g_dec);
}

TEST_CASE("training is deterministic per seed") {
  auto dirs = orthonormal_directions(8, 3, 2);
  auto diffs = planted_diffs(dirs, 300, 1, 0.02, 5);
  SaeConfig cfg;
  cfg.latent_dim = 6;
  cfg.sparsity_k = 2;
  cfg.matryoshka_prefix = 3;
  cfg.batch_size = 64;
  cfg.epochs = 5;
  cfg.seed = 99;
  auto m1 = train_sae(diffs, cfg);
  auto m2 = train_sae(diffs, cfg);
  REQUIRE(m1.w_enc.size() == m2.w_enc.size());
  CHECK(std::memcmp(m1.w_enc.data(), m2.w_enc.data(),
                    sizeof(double) * static_cast<size_t>(m1.w_enc.size())) == 0);
  CHECK(m1.theta == m2.theta);
}

TEST_CASE("training recovers a planted dictionary") {
  auto dirs = orthonormal_directions(32, 8, 7);
  auto diffs = planted_diffs(dirs, 6000, 2, 0.03, 13);
  SaeConfig cfg;
  cfg.latent_dim = 16;
  cfg.sparsity_k = 3;
  cfg.matryoshka_prefix = 8;
  cfg.batch_size = 256;
  cfg.epochs = 120;
  cfg.learning_rate = 2e-3;
  cfg.seed = 4;
  auto model = train_sae(diffs, cfg);

  CHECK(model.max_decoder_norm_deviation < 1e-6);
  CHECK(model.train_loss_trace.back() <= model.train_loss_trace.front());
  double recovery = greedy_recovery(dirs, model.w_dec);
  INFO("recovery=" << recovery);
  CHECK(recovery >= 0.9);

  // Reconstruction dominance over the zero-prediction baseline.
  MatrixXd x(static_cast<long>(diffs.size()), 32);
  for (size_t i = 0; i < diffs.size(); ++i) x.row(static_cast<long>(i)) = diffs[i].e_delta;
  auto lat = transform(diffs, model);
  double recon_mse = (x - lat.z * model.w_dec.transpose()).squaredNorm() /
                     static_cast<double>(x.size());
  double baseline = (x.array() - x.mean()).square().sum() / static_cast<double>(x.size());
  CHECK(recon_mse < 0.5 * baseline);

  // Threshold calibration keeps mean row sparsity near K.
  double avg_nnz = static_cast<double>((lat.z.array() != 0.0).count()) /
                   static_cast<double>(lat.z.rows());
  CHECK(avg_nnz >= 0.8 * cfg.sparsity_k);
  CHECK(avg_nnz <= 1.2 * cfg.sparsity_k);

  // Duplicate diff rows produce identical latent rows; negated rows negate.
  VectorXd z0 = encode_inference(diffs[0].e_delta, model);
  VectorXd z0b = encode_inference(diffs[0].e_delta, model);
  CHECK((z0 - z0b).norm() == 0.0);
  VectorXd zneg = encode_inference(VectorXd(-diffs[0].e_delta), model);
  CHECK((z0 + zneg).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("per-prefix-group selection trains with invariants intact") {
  auto dirs = orthonormal_directions(16, 4, 21);
  auto diffs = planted_diffs(dirs, 1000, 1, 0.05, 22);
  SaeConfig cfg;
  cfg.latent_dim = 8;
  cfg.sparsity_k = 2;
  cfg.matryoshka_prefix = 4;
  cfg.batch_size = 128;
  cfg.epochs = 20;
  cfg.seed = 3;
  cfg.topk_per_prefix_group = true;
  auto model = train_sae(diffs, cfg);
  CHECK(model.max_decoder_norm_deviation < 1e-6);
  CHECK(model.has_threshold());
}

TEST_CASE("non-finite input aborts training") {
  std::vector<DiffRecord> diffs;
  for (int i = 0; i < 8; ++i) {
    VectorXd v = VectorXd::Ones(4);
    diffs.push_back({"a" + std::to_string(i), v});
  }
  diffs[3].e_delta[2] = std::numeric_limits<double>::quiet_NaN();
  SaeConfig cfg;
  cfg.latent_dim = 4;
  cfg.sparsity_k = 1;
  cfg.matryoshka_prefix = 2;
  cfg.batch_size = 8;
  cfg.epochs = 2;
  try {
    train_sae(diffs, cfg);
    FAIL("expected numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numeric);
  }
}

TEST_CASE("checkpoint round trip is byte exact") {
  auto dirs = orthonormal_directions(8, 2, 31);
  auto diffs = planted_diffs(dirs, 200, 1, 0.05, 32);
  SaeConfig cfg;
  cfg.latent_dim = 4;
  cfg.sparsity_k = 1;
  cfg.matryoshka_prefix = 2;
  cfg.batch_size = 64;
  cfg.epochs = 3;
  auto model = train_sae(diffs, cfg);
  auto path1 = std::filesystem::temp_directory_path() / "sae_ckpt1.bin";
  auto path2 = std::filesystem::temp_directory_path() / "sae_ckpt2.bin";
  save_sae(model, path1);
  auto loaded = load_sae(path1);
  save_sae(loaded, path2);
  std::ifstream f1(path1, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);
  CHECK(loaded.theta == model.theta);
  CHECK((loaded.w_enc - model.w_enc).norm() == 0.0);
  CHECK(loaded.train_loss_trace == model.train_loss_trace);
}
