#include "vseg/pggan.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "vseg/checkpoint.hpp"
#include "vseg/common.hpp"
#include "vseg/kernels.hpp"

namespace vseg::pggan {

namespace k = vseg::kernels;

// ---- Schedule ----------------------------------------------------------------

void GrowthSchedule::validate() const {
  check_arg(!stages.empty(), "schedule: no stages");
  check_arg((stages[0] == std::array<int64_t, 3>{4, 4, 4}),
            "schedule: first stage must be 4x4x4 (generated from 2x2x2 noise)");
  for (size_t s = 1; s < stages.size(); ++s) {
    const auto& prev = stages[s - 1];
    const auto& cur = stages[s];
    const bool iso = cur[0] == 2 * prev[0] && cur[1] == 2 * prev[1] && cur[2] == 2 * prev[2];
    const bool aniso = cur[0] == prev[0] && cur[1] == 2 * prev[1] && cur[2] == 2 * prev[2];
    if (s + 1 < stages.size()) {
      check_arg(iso, "schedule: non-final stages must double every dim");
    } else {
      check_arg(iso || aniso,
                "schedule: final stage must double all dims or hold depth and double H,W");
    }
  }
  check_arg(iterations_per_stage >= 0, "schedule: negative iteration count");
  check_arg(fade_iterations >= 0, "schedule: negative fade window");
}

std::array<int, 3> GrowthSchedule::factors(int stage) const {
  check_arg(stage >= 0 && stage < num_stages(), "schedule: stage out of range");
  if (stage == 0) return {2, 2, 2};  // 2x2x2 noise -> 4x4x4
  return {int(stages[size_t(stage)][0] / stages[size_t(stage) - 1][0]),
          int(stages[size_t(stage)][1] / stages[size_t(stage) - 1][1]),
          int(stages[size_t(stage)][2] / stages[size_t(stage) - 1][2])};
}

GrowthSchedule GrowthSchedule::desk_default() {
  GrowthSchedule s;
  s.stages = {{4, 4, 4}, {8, 8, 8}, {16, 16, 16}, {16, 32, 32}};
  s.iterations_per_stage = 2000;
  s.fade_iterations = 1000;
  return s;
}

GrowthSchedule GrowthSchedule::full_default() {
  GrowthSchedule s;
  s.stages = {{4, 4, 4},    {8, 8, 8},    {16, 16, 16},
              {32, 32, 32}, {64, 64, 64}, {64, 128, 128}};
  s.iterations_per_stage = 2000;
  s.fade_iterations = 1000;
  return s;
}

FadeState FadeState::at_iteration(const GrowthSchedule& s, int stage, int64_t iteration) {
  FadeState f;
  f.stage_index = stage;
  if (stage == 0 || s.fade_iterations == 0) {
    f.alpha = 1.0;
  } else {
    f.alpha = std::min(1.0, double(iteration) / double(s.fade_iterations));
  }
  return f;
}

void PgganConfig::finalize() {
  schedule.validate();
  check_arg(latent_channels >= 1, "pggan: latent_channels must be positive");
  check_arg(batch_size >= 1, "pggan: batch_size must be positive");
  if (stage_channels.empty()) {
    for (int s = 0; s < schedule.num_stages(); ++s)
      stage_channels.push_back(std::max<int64_t>(8, 64 >> s));
  }
  check_arg(int(stage_channels.size()) == schedule.num_stages(),
            "pggan: stage_channels must match the schedule length");
}

// ---- Generator ---------------------------------------------------------------

template <typename T>
Generator<T>::Generator(const PgganConfig& cfg)
    : cfg_(cfg), init_rng_(Rng::derive(cfg.seed, 0x9e4)) {
  cfg_.finalize();
  grow();  // stage 0
}

template <typename T>
void Generator<T>::grow() {
  const int s = built_stages();
  check_arg(s < cfg_.schedule.num_stages(), "generator: cannot grow past the final stage");
  const int64_t ci = s == 0 ? cfg_.latent_channels : cfg_.stage_channels[size_t(s) - 1];
  const int64_t co = cfg_.stage_channels[size_t(s)];
  const std::string base = "g.stage" + std::to_string(s);
  Block b;
  b.up_factors = cfg_.schedule.factors(s);
  b.conv1 = nn::Conv3dLayer<T>(params_, base + ".conv1", ci, co, 3, 1, 1, init_rng_);
  b.norm1 = nn::InstanceNormLayer<T>(params_, base + ".norm1", co);
  b.conv2 = nn::Conv3dLayer<T>(params_, base + ".conv2", co, co, 3, 1, 1, init_rng_);
  b.norm2 = nn::InstanceNormLayer<T>(params_, base + ".norm2", co);
  blocks_.push_back(std::move(b));
  Head h;
  h.to_vol = nn::Conv3dLayer<T>(params_, base + ".to_vol", co, 1, 1, 1, 0, init_rng_);
  heads_.push_back(std::move(h));
}

template <typename T>
Var<T> Generator<T>::stage_features(Tape<T>& tape, Var<T> z, int stage,
                                    std::vector<Var<T>>* all) const {
  Var<T> h = z;
  for (int s = 0; s <= stage; ++s) {
    const Block& b = blocks_[size_t(s)];
    h = ad::upsample3d(h, b.up_factors);
    h = ad::leaky_relu(b.norm1.forward(tape, b.conv1.forward(tape, h)), T(0.2));
    h = ad::leaky_relu(b.norm2.forward(tape, b.conv2.forward(tape, h)), T(0.2));
    if (all) all->push_back(h);
  }
  return h;
}

template <typename T>
Var<T> Generator<T>::forward(Tape<T>& tape, Var<T> z, const FadeState& fade) const {
  const int stage = fade.stage_index;
  check_arg(stage >= 0 && stage < built_stages(), "generator: stage out of range");
  const Tensor<T>& zv = z.value();
  check_arg(zv.rank() == 5 && zv.dim(1) == 2 && zv.dim(2) == 2 && zv.dim(3) == 2 &&
                zv.dim(4) == cfg_.latent_channels,
            "generator: noise must be (N,2,2,2,latent)");

  std::vector<Var<T>> feats;
  stage_features(tape, z, stage, &feats);
  Var<T> out = ad::sigmoid(heads_[size_t(stage)].to_vol.forward(tape, feats.back()));
  if (stage > 0 && fade.alpha < 1.0) {
    Var<T> prev_vol =
        ad::sigmoid(heads_[size_t(stage) - 1].to_vol.forward(tape, feats[size_t(stage) - 1]));
    Var<T> up_prev = ad::upsample3d(prev_vol, cfg_.schedule.factors(stage));
    out = ad::linear_comb(T(fade.alpha), out, T(1.0 - fade.alpha), up_prev);
  }
  return out;
}

// ---- Critic layers -----------------------------------------------------------

template <typename T>
struct Critic<T>::Layer {
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> backward(const Tensor<T>& gy, bool accum, bool save_adj) = 0;
  virtual Tensor<T> gp_second(const Tensor<T>& s) = 0;
};

namespace {

template <typename T>
std::vector<int64_t> conv_out_shape(const Tensor<T>& in, const Tensor<T>& w, int stride,
                                    int pad) {
  const int64_t kk = w.dim(0);
  std::vector<int64_t> s = {in.dim(0), 0, 0, 0, w.dim(4)};
  for (int ax = 0; ax < 3; ++ax) s[size_t(1 + ax)] = (in.dim(1 + ax) + 2 * pad - kk) / stride + 1;
  return s;
}

}  // namespace

template <typename T>
struct ConvLayer final : Critic<T>::Layer {
  ad::Param<T>* w;
  ad::Param<T>* b;
  int stride, pad;
  Tensor<T> saved_x, saved_gy;

  ConvLayer(ad::Param<T>* w_, ad::Param<T>* b_, int stride_, int pad_)
      : w(w_), b(b_), stride(stride_), pad(pad_) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    saved_x = x;
    Tensor<T> out(conv_out_shape(x, w->value, stride, pad));
    k::conv3d_forward(x, w->value, &b->value, stride, pad, out);
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gy, bool accum, bool save_adj) override {
    if (accum) k::conv3d_backward_weights(saved_x, gy, stride, pad, w->grad, &b->grad);
    if (save_adj) saved_gy = gy;
    Tensor<T> gx(saved_x.shape());
    k::conv3d_backward_data(gy, w->value, stride, pad, gx);
    return gx;
  }

  // The adjoint step was u_x = W^T u_y: its derivative w.r.t. u_y is the
  // forward convolution (bias-free), and w.r.t. W the usual bilinear term
  // pairing s (input side) with the saved adjoint u_y (output side).
  Tensor<T> gp_second(const Tensor<T>& s) override {
    k::conv3d_backward_weights(s, saved_gy, stride, pad, w->grad,
                               static_cast<Tensor<T>*>(nullptr));
    Tensor<T> out(conv_out_shape(s, w->value, stride, pad));
    k::conv3d_forward(s, w->value, static_cast<const Tensor<T>*>(nullptr), stride, pad, out);
    return out;
  }
};

template <typename T>
struct LeakyLayer final : Critic<T>::Layer {
  T slope;
  Tensor<T> saved_x;

  explicit LeakyLayer(T slope_) : slope(slope_) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    saved_x = x;
    Tensor<T> out(x.shape());
    k::leaky_relu_forward(x, slope, out);
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gy, bool, bool) override {
    Tensor<T> gx(saved_x.shape());
    k::leaky_relu_backward(saved_x, slope, gy, gx);
    return gx;
  }

  Tensor<T> gp_second(const Tensor<T>& s) override {
    // Same activation mask in both directions.
    Tensor<T> out(saved_x.shape());
    k::leaky_relu_backward(saved_x, slope, s, out);
    return out;
  }
};

template <typename T>
struct DownLayer final : Critic<T>::Layer {
  std::array<int, 3> f;
  std::vector<int64_t> in_shape;

  explicit DownLayer(std::array<int, 3> f_) : f(f_) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    in_shape = x.shape();
    Tensor<T> out({x.dim(0), x.dim(1) / f[0], x.dim(2) / f[1], x.dim(3) / f[2], x.dim(4)});
    k::avgpool3d_forward(x, f, out);
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gy, bool, bool) override {
    Tensor<T> gx(in_shape);
    k::avgpool3d_backward(gy, f, gx);
    return gx;
  }

  Tensor<T> gp_second(const Tensor<T>& s) override {
    Tensor<T> out({s.dim(0), s.dim(1) / f[0], s.dim(2) / f[1], s.dim(3) / f[2], s.dim(4)});
    k::avgpool3d_forward(s, f, out);
    return out;
  }
};

// ---- Critic pipeline ----------------------------------------------------------

template <typename T>
struct Critic<T>::Pipeline {
  std::vector<std::shared_ptr<Layer>> new_path;  // non-empty only while fading
  std::vector<std::shared_ptr<Layer>> old_path;
  double alpha = 1.0;
  bool blended = false;
  std::vector<std::shared_ptr<Layer>> trunk;

  static Tensor<T> run_forward(std::vector<std::shared_ptr<Layer>>& seq, Tensor<T> x) {
    for (auto& l : seq) x = l->forward(x);
    return x;
  }
  static Tensor<T> run_backward(std::vector<std::shared_ptr<Layer>>& seq, Tensor<T> g,
                                bool accum, bool save) {
    for (auto it = seq.rbegin(); it != seq.rend(); ++it) g = (*it)->backward(g, accum, save);
    return g;
  }
  static Tensor<T> run_gp(std::vector<std::shared_ptr<Layer>>& seq, Tensor<T> s) {
    for (auto& l : seq) s = l->gp_second(s);
    return s;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> h;
    if (blended) {
      Tensor<T> hn = run_forward(new_path, x);
      Tensor<T> ho = run_forward(old_path, x);
      h = Tensor<T>(hn.shape());
      const T a = T(alpha);
      const T* __restrict np = hn.data();
      const T* __restrict op = ho.data();
      T* __restrict hp = h.data();
      const int64_t nn = h.size();
#pragma omp parallel for simd schedule(static)
      for (int64_t i = 0; i < nn; ++i) hp[i] = a * np[i] + (T(1) - a) * op[i];
    } else {
      h = run_forward(new_path, x);
    }
    return run_forward(trunk, h);
  }

  Tensor<T> backward(const Tensor<T>& seed, bool accum, bool save) {
    Tensor<T> g = run_backward(trunk, seed, accum, save);
    if (!blended) return run_backward(new_path, g, accum, save);
    Tensor<T> gn = g, go = g;
    {
      T* __restrict a = gn.data();
      T* __restrict b = go.data();
      const int64_t nn = g.size();
      const T al = T(alpha);
#pragma omp parallel for simd schedule(static)
      for (int64_t i = 0; i < nn; ++i) {
        a[i] *= al;
        b[i] *= (T(1) - al);
      }
    }
    Tensor<T> gx = run_backward(new_path, gn, accum, save);
    Tensor<T> gxo = run_backward(old_path, go, accum, save);
    k::axpy(T(1), gxo, gx);
    return gx;
  }

  void gp_second(const Tensor<T>& s0) {
    if (!blended) {
      Tensor<T> s = run_gp(new_path, s0);
      run_gp(trunk, s);
      return;
    }
    Tensor<T> sn = run_gp(new_path, s0);
    Tensor<T> so = run_gp(old_path, s0);
    Tensor<T> s(sn.shape());
    const T a = T(alpha);
    const T* __restrict np = sn.data();
    const T* __restrict op = so.data();
    T* __restrict sp = s.data();
    const int64_t nn = s.size();
#pragma omp parallel for simd schedule(static)
    for (int64_t i = 0; i < nn; ++i) sp[i] = a * np[i] + (T(1) - a) * op[i];
    run_gp(trunk, s);
  }
};

// ---- Critic ------------------------------------------------------------------

template <typename T>
Critic<T>::~Critic() = default;

template <typename T>
Critic<T>::Critic(const PgganConfig& cfg)
    : cfg_(cfg), init_rng_(Rng::derive(cfg.seed, 0xc417)) {
  cfg_.finalize();
  const int64_t ch0 = cfg_.stage_channels[0];
  auto conv = [&](const std::string& name, int64_t ci, int64_t co, int kk, int stride, int pad) {
    auto& w = params_.create(name + ".w", {kk, kk, kk, ci, co});
    auto& b = params_.create(name + ".b", {co});
    nn::he_normal_init(w, ci * kk * kk * kk, init_rng_);
    return std::make_shared<ConvLayer<T>>(&w, &b, stride, pad);
  };
  head_.push_back(conv("d.head.conv1", ch0, ch0, 3, 1, 1));
  head_.push_back(std::make_shared<LeakyLayer<T>>(T(0.2)));
  head_.push_back(conv("d.head.conv2", ch0, ch0, 4, 1, 0));  // 4^3 -> 1^3
  head_.push_back(std::make_shared<LeakyLayer<T>>(T(0.2)));
  head_.push_back(conv("d.head.out", ch0, 1, 1, 1, 0));
  grow();  // stage 0
}

template <typename T>
void Critic<T>::grow() {
  const int s = stages_built_;
  check_arg(s < cfg_.schedule.num_stages(), "critic: cannot grow past the final stage");
  const int64_t ch = cfg_.stage_channels[size_t(s)];
  const int64_t ch_prev = s == 0 ? cfg_.stage_channels[0] : cfg_.stage_channels[size_t(s) - 1];
  const std::string base = "d.stage" + std::to_string(s);
  auto conv = [&](const std::string& name, int64_t ci, int64_t co, int kk, int stride, int pad) {
    auto& w = params_.create(name + ".w", {kk, kk, kk, ci, co});
    auto& b = params_.create(name + ".b", {co});
    nn::he_normal_init(w, ci * kk * kk * kk, init_rng_);
    return std::make_shared<ConvLayer<T>>(&w, &b, stride, pad);
  };
  StageLayers sl;
  sl.from_vol.push_back(conv(base + ".from_vol", 1, ch, 1, 1, 0));
  sl.from_vol.push_back(std::make_shared<LeakyLayer<T>>(T(0.2)));
  if (s > 0) {
    sl.block.push_back(conv(base + ".conv1", ch, ch, 3, 1, 1));
    sl.block.push_back(std::make_shared<LeakyLayer<T>>(T(0.2)));
    sl.block.push_back(conv(base + ".conv2", ch, ch_prev, 3, 1, 1));
    sl.block.push_back(std::make_shared<LeakyLayer<T>>(T(0.2)));
    sl.block.push_back(std::make_shared<DownLayer<T>>(cfg_.schedule.factors(s)));
  }
  stage_layers_.push_back(std::move(sl));
  ++stages_built_;
}

template <typename T>
std::unique_ptr<typename Critic<T>::Pipeline> Critic<T>::assemble(const FadeState& fade) {
  const int s = fade.stage_index;
  check_arg(s >= 0 && s < stages_built_, "critic: stage out of range");
  auto pipe = std::make_unique<Pipeline>();
  pipe->alpha = fade.alpha;
  pipe->blended = (s > 0 && fade.alpha < 1.0);

  auto& np = pipe->new_path;
  for (auto& l : stage_layers_[size_t(s)].from_vol) np.push_back(l);
  for (auto& l : stage_layers_[size_t(s)].block) np.push_back(l);
  if (pipe->blended) {
    pipe->old_path.push_back(std::make_shared<DownLayer<T>>(cfg_.schedule.factors(s)));
    for (auto& l : stage_layers_[size_t(s) - 1].from_vol) pipe->old_path.push_back(l);
  }
  for (int t = s - 1; t >= 1; --t)
    for (auto& l : stage_layers_[size_t(t)].block) pipe->trunk.push_back(l);
  for (auto& l : head_) pipe->trunk.push_back(l);
  return pipe;
}

template <typename T>
Tensor<T> Critic<T>::forward(const Tensor<T>& x, const FadeState& fade) {
  const auto& shape = cfg_.schedule.stages[size_t(fade.stage_index)];
  check_arg(x.rank() == 5 && x.dim(1) == shape[0] && x.dim(2) == shape[1] &&
                x.dim(3) == shape[2] && x.dim(4) == 1,
            "critic: input shape does not match the stage resolution");
  live_ = assemble(fade);
  Tensor<T> out = live_->forward(x);  // (N,1,1,1,1)
  return out.reshaped({out.dim(0)});
}

template <typename T>
Tensor<T> Critic<T>::backward(const Tensor<T>& seed, bool accum_params, bool save_adjoint) {
  check_arg(live_ != nullptr, "critic: backward without forward");
  Tensor<T> s = seed.reshaped({seed.dim(0), 1, 1, 1, 1});
  return live_->backward(s, accum_params, save_adjoint);
}

template <typename T>
void Critic<T>::gp_second_pass(const Tensor<T>& s0) {
  check_arg(live_ != nullptr, "critic: gp_second_pass without forward");
  live_->gp_second(s0);
}

// ---- Training ----------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> sample_noise(int64_t n, int64_t latent, Rng& rng) {
  Tensor<T> z({n, 2, 2, 2, latent});
  for (int64_t i = 0; i < z.size(); ++i) z[i] = T(rng.normal());
  return z;
}

// Box-average a batch of final-resolution volumes down to the stage shape.
template <typename T>
Tensor<T> downsample_to(const Tensor<T>& batch, const std::array<int64_t, 3>& target) {
  const std::array<int, 3> f = {int(batch.dim(1) / target[0]), int(batch.dim(2) / target[1]),
                                int(batch.dim(3) / target[2])};
  if (f[0] == 1 && f[1] == 1 && f[2] == 1) return batch;
  Tensor<T> out({batch.dim(0), target[0], target[1], target[2], batch.dim(4)});
  k::avgpool3d_forward(batch, f, out);
  return out;
}

template <typename T>
double mean_of(const Tensor<T>& t) {
  return double(k::reduce_sum_all(t)) / double(t.size());
}

}  // namespace

template <typename T>
TrainedPggan<T> train_pggan(const std::vector<voldata::CtVolume>& dataset,
                            const PgganConfig& cfg_in, const std::filesystem::path& out_dir) {
  PgganConfig cfg = cfg_in;
  cfg.finalize();
  check_arg(!dataset.empty(), "train_pggan: empty dataset");
  const auto final_shape = cfg.schedule.stages.back();
  for (const auto& v : dataset) {
    check_arg(v.depth() == final_shape[0] && v.height() == final_shape[1] &&
                  v.width() == final_shape[2],
              "train_pggan: dataset volume shape must match the final stage");
    check_arg(v.normalized, "train_pggan: volumes must be normalized to [0,1]");
  }

  TrainedPggan<T> out;
  out.generator = std::make_unique<Generator<T>>(cfg);
  out.critic = std::make_unique<Critic<T>>(cfg);
  Generator<T>& gen = *out.generator;
  Critic<T>& crit = *out.critic;

  nn::Adam<T> adam_g(gen.params().all(), T(cfg.adam_beta1), T(cfg.adam_beta2));
  nn::Adam<T> adam_d(crit.params().all(), T(cfg.adam_beta1), T(cfg.adam_beta2));
  // Optimizer slots grow with the networks, so rebuild on growth below.

  Rng data_rng(Rng::derive(cfg.seed, 1));
  Rng noise_rng(Rng::derive(cfg.seed, 2));
  Rng gp_rng(Rng::derive(cfg.seed, 3));

  const int64_t nb = cfg.batch_size;
  int64_t global_iter = 0;

  auto stage_ckpt = [&](int stage, double alpha, int64_t iter) {
    if (out_dir.empty()) return;
    std::filesystem::create_directories(out_dir);
    const auto base = out_dir / ("generator_stage" + std::to_string(stage));
    ckpt::save_params(base.string() + ".ckpt", gen.params());
    nlohmann::json j;
    j["stage"] = stage;
    j["alpha"] = alpha;
    j["iteration"] = iter;
    j["shape"] = cfg.schedule.stages[size_t(stage)];
    j["latent_channels"] = cfg.latent_channels;
    std::ofstream f(base.string() + ".json");
    f << j.dump(2) << "\n";
  };

  for (int stage = 0; stage < cfg.schedule.num_stages(); ++stage) {
    if (stage > 0) {
      gen.grow();
      crit.grow();
      adam_g = nn::Adam<T>(gen.params().all(), T(cfg.adam_beta1), T(cfg.adam_beta2));
      adam_d = nn::Adam<T>(crit.params().all(), T(cfg.adam_beta1), T(cfg.adam_beta2));
    }
    const auto stage_shape = cfg.schedule.stages[size_t(stage)];

    for (int64_t it = 0; it < cfg.schedule.iterations_per_stage; ++it, ++global_iter) {
      const FadeState fade = FadeState::at_iteration(cfg.schedule, stage, it);

      // real batch at stage resolution
      Tensor<T> real_full({nb, final_shape[0], final_shape[1], final_shape[2], 1});
      for (int64_t b = 0; b < nb; ++b) {
        const auto& v = dataset[size_t(data_rng.uniform_int(int64_t(dataset.size())))].data;
        for (int64_t i = 0; i < v.size(); ++i) real_full[b * v.size() + i] = T(v[i]);
      }
      const Tensor<T> real = downsample_to(real_full, stage_shape);

      // ---- critic update -----------------------------------------------------
      Tensor<T> fake;
      {
        Tape<T> tape;
        ad::Var<T> z = tape.constant(sample_noise<T>(nb, cfg.latent_channels, noise_rng));
        fake = gen.forward(tape, z, fade).value();
      }
      crit.params().zero_grads();
      Tensor<T> seed_neg({nb}, T(-1) / T(nb));
      Tensor<T> seed_pos({nb}, T(1) / T(nb));
      const Tensor<T> score_r = crit.forward(real, fade);
      crit.backward(seed_neg, true, false);
      const Tensor<T> score_f = crit.forward(fake, fade);
      crit.backward(seed_pos, true, false);

      // gradient penalty on per-sample interpolates
      Tensor<T> xhat(real.shape());
      const int64_t vox = real.size() / nb;
      for (int64_t b = 0; b < nb; ++b) {
        const T e = T(gp_rng.uniform());
        for (int64_t i = 0; i < vox; ++i)
          xhat[b * vox + i] = e * real[b * vox + i] + (T(1) - e) * fake[b * vox + i];
      }
      crit.forward(xhat, fade);
      Tensor<T> ones({nb}, T(1));
      const Tensor<T> grad_in = crit.backward(ones, false, true);
      double gp = 0.0;
      Tensor<T> s0(grad_in.shape());
      for (int64_t b = 0; b < nb; ++b) {
        double n2 = 0.0;
        for (int64_t i = 0; i < vox; ++i) n2 += double(grad_in[b * vox + i]) * grad_in[b * vox + i];
        const double norm = std::sqrt(std::max(n2, 1e-24));
        gp += (norm - 1.0) * (norm - 1.0) / double(nb);
        const T coeff = T(cfg.gp_weight * 2.0 * (norm - 1.0) / (double(nb) * norm));
        for (int64_t i = 0; i < vox; ++i) s0[b * vox + i] = coeff * grad_in[b * vox + i];
      }
      crit.gp_second_pass(s0);
      adam_d.step(T(cfg.d_lr));

      // ---- generator update ---------------------------------------------------
      gen.params().zero_grads();
      Tape<T> gtape;
      ad::Var<T> z2 = gtape.constant(sample_noise<T>(nb, cfg.latent_channels, noise_rng));
      ad::Var<T> fake_var = gen.forward(gtape, z2, fade);
      const Tensor<T> score_g = crit.forward(fake_var.value(), fade);
      const Tensor<T> gx = crit.backward(seed_neg, false, false);
      gtape.backward(fake_var, gx);
      adam_g.step(T(cfg.g_lr));

      PgganLogRow row;
      row.iteration = global_iter;
      row.stage = stage;
      row.alpha = fade.alpha;
      row.real_score = mean_of(score_r);
      row.fake_score = mean_of(score_f);
      row.gp = gp;
      row.critic_loss = row.fake_score - row.real_score + cfg.gp_weight * gp;
      row.gen_loss = -mean_of(score_g);
      check_runtime(std::isfinite(row.critic_loss) && std::isfinite(row.gen_loss),
                    "train_pggan: non-finite loss at iteration " + std::to_string(global_iter));
      out.log.push_back(row);
    }
    stage_ckpt(stage, 1.0, global_iter);
  }
  if (!out_dir.empty()) {
    ckpt::save_params((out_dir / "generator_final.ckpt").string(), gen.params());
  }
  return out;
}

template <typename T>
std::vector<voldata::CtVolume> synthesize(const Generator<T>& g, int n, uint64_t seed,
                                          const std::array<double, 3>& spacing_mm) {
  check_arg(n >= 0, "synthesize: negative count");
  check_arg(g.built_stages() == g.config().schedule.num_stages(),
            "synthesize: generator has not reached the final stage");
  FadeState fade;
  fade.stage_index = g.built_stages() - 1;
  fade.alpha = 1.0;
  Rng rng(Rng::derive(seed, 0x5f9));
  std::vector<voldata::CtVolume> out;
  const auto shape = g.config().schedule.stages.back();
  for (int i = 0; i < n; ++i) {
    Tape<T> tape;
    ad::Var<T> z = tape.constant(sample_noise<T>(1, g.config().latent_channels, rng));
    const Tensor<T>& v = g.forward(tape, z, fade).value();
    voldata::CtVolume vol;
    vol.spacing_mm = spacing_mm;
    vol.normalized = true;
    vol.data = Tensor<float>({shape[0], shape[1], shape[2]});
    for (int64_t j = 0; j < vol.data.size(); ++j) vol.data[j] = float(v[j]);
    out.push_back(std::move(vol));
  }
  return out;
}

#define VSEG_PGGAN_INSTANTIATE(T)                                                          \
  template class Generator<T>;                                                             \
  template class Critic<T>;                                                                \
  template TrainedPggan<T> train_pggan<T>(const std::vector<voldata::CtVolume>&,           \
                                          const PgganConfig&,                              \
                                          const std::filesystem::path&);                   \
  template std::vector<voldata::CtVolume> synthesize<T>(const Generator<T>&, int,          \
                                                        uint64_t,                          \
                                                        const std::array<double, 3>&);

VSEG_PGGAN_INSTANTIATE(float)
VSEG_PGGAN_INSTANTIATE(double)
#undef VSEG_PGGAN_INSTANTIATE

}  // namespace vseg::pggan
