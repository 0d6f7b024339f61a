#include "scgan/training.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <set>
#include <sstream>

#include "scgan/nn/ops.hpp"

namespace scgan {

namespace fs = std::filesystem;
using nn::Tensor;

// --- variants and config ----------------------------------------------------------

namespace {

struct VariantName {
  Variant variant;
  const char* name;
};
constexpr VariantName kVariantNames[] = {{Variant::Base, "base"},           {Variant::EdAtt, "edatt"},
                                         {Variant::DAtt, "datt"},           {Variant::St, "st"},
                                         {Variant::ScganWoSl, "scgan_wo_sl"}, {Variant::Scgan, "scgan"}};

}  // namespace

std::string to_string(Variant variant) {
  for (const auto& v : kVariantNames)
    if (v.variant == variant) return v.name;
  return "scgan";
}

Variant parse_variant(const std::string& name) {
  for (const auto& v : kVariantNames)
    if (name == v.name) return v.variant;
  throw std::invalid_argument("unknown variant \"" + name + "\"");
}

VariantTraits variant_traits(Variant variant) {
  switch (variant) {
    case Variant::Base: return {AttentionMode::None, false, false};
    case Variant::EdAtt: return {AttentionMode::EncoderAndDecoder, false, false};
    case Variant::DAtt: return {AttentionMode::DecoderOnly, false, false};
    case Variant::St: return {AttentionMode::None, true, true};
    case Variant::ScganWoSl: return {AttentionMode::DecoderOnly, true, false};
    case Variant::Scgan: return {AttentionMode::DecoderOnly, true, true};
  }
  return {AttentionMode::DecoderOnly, true, true};
}

void TrainConfig::validate() const {
  weights.validate();
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning_rate must be > 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw std::invalid_argument("adam betas must be in [0,1)");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (!(registered_fraction >= 0 && registered_fraction <= 1))
    throw std::invalid_argument("registered_fraction must be in [0,1]");
  if (pool_capacity < 0) throw std::invalid_argument("pool_capacity must be >= 0");
  if (keep_checkpoints < 1) throw std::invalid_argument("keep_checkpoints must be >= 1");
  generator.validate();
  discriminator.validate();
  canny.validate();
  if (discriminator_output_size(discriminator, generator.image_size) < 1)
    throw std::invalid_argument("image_size too small for the discriminator depth");
}

TrainConfig TrainConfig::resolved() const {
  TrainConfig out = *this;
  const VariantTraits t = variant_traits(variant);
  out.generator.attention_mode = t.attention;
  out.generator.use_structure_channel = t.structure_channel;
  if (!t.structural_loss) {
    out.weights.lambda4 = 0.0;
  } else if (out.weights.lambda4 == 0.0) {
    throw std::invalid_argument("variant " + to_string(variant) + " needs lambda4 > 0; use scgan_wo_sl instead");
  }
  return out;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"weights", c.weights},
       {"learning_rate", c.learning_rate},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"registered_fraction", c.registered_fraction},
       {"seed", c.seed},
       {"variant", to_string(c.variant)},
       {"generator", c.generator},
       {"discriminator", c.discriminator},
       {"canny", c.canny},
       {"pool_capacity", c.pool_capacity},
       {"keep_checkpoints", c.keep_checkpoints}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  static const std::set<std::string> known = {
      "weights", "learning_rate", "beta1",         "beta2",     "batch_size", "epochs",          "registered_fraction",
      "seed",    "variant",       "generator",     "discriminator", "canny",  "pool_capacity", "keep_checkpoints"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw std::invalid_argument("unknown train config key \"" + key + "\"");
  if (j.contains("weights")) c.weights = j.at("weights").get<LossWeights>();
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.registered_fraction = j.value("registered_fraction", c.registered_fraction);
  c.seed = j.value("seed", c.seed);
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("generator")) c.generator = j.at("generator").get<GeneratorConfig>();
  if (j.contains("discriminator")) c.discriminator = j.at("discriminator").get<DiscriminatorConfig>();
  if (j.contains("canny")) c.canny = j.at("canny").get<CannyParams>();
  c.pool_capacity = j.value("pool_capacity", c.pool_capacity);
  c.keep_checkpoints = j.value("keep_checkpoints", c.keep_checkpoints);

  const VariantTraits t = variant_traits(c.variant);
  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    if (g.contains("attention_mode") && c.generator.attention_mode != t.attention)
      throw std::invalid_argument("generator.attention_mode contradicts variant " + to_string(c.variant));
    if (g.contains("use_structure_channel") && c.generator.use_structure_channel != t.structure_channel)
      throw std::invalid_argument("generator.use_structure_channel contradicts variant " + to_string(c.variant));
  }
  c.generator.attention_mode = t.attention;
  c.generator.use_structure_channel = t.structure_channel;
}

// --- image pool and optimizer ---------------------------------------------------------

std::vector<std::vector<float>> update_image_pool(ImagePool& pool, const std::vector<std::vector<float>>& fakes,
                                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<std::vector<float>> out;
  out.reserve(fakes.size());
  for (const auto& fake : fakes) {
    if (pool.capacity == 0) {
      out.push_back(fake);
    } else if (pool.images.size() < pool.capacity) {
      pool.images.push_back(fake);
      out.push_back(fake);
    } else if (coin(rng) < 0.5) {
      const std::size_t slot = std::uniform_int_distribution<std::size_t>(0, pool.images.size() - 1)(rng);
      out.push_back(std::move(pool.images[slot]));
      pool.images[slot] = fake;
    } else {
      out.push_back(fake);
    }
  }
  return out;
}

void adam_update(ParamMap<float>& params, AdamMoments& moments, double lr, double beta1, double beta2,
                 std::int64_t t) {
  constexpr double kEps = 1e-8;
  auto& tensors = params.tensors();
  if (moments.m.size() != tensors.size()) {
    moments.m.assign(tensors.size(), {});
    moments.v.assign(tensors.size(), {});
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      moments.m[i].assign(tensors[i].size(), 0.0f);
      moments.v[i].assign(tensors[i].size(), 0.0f);
    }
  }
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& p = tensors[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto value = p.mutable_data();
    auto& m = moments.m[i];
    auto& v = moments.v[i];
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double gk = g[k];
      const double mk = beta1 * m[k] + (1.0 - beta1) * gk;
      const double vk = beta2 * v[k] + (1.0 - beta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      value[k] = static_cast<float>(value[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + kEps));
    }
  }
}

TrainState TrainState::clone() const {
  TrainState s = *this;
  s.g_he2ihc.params = g_he2ihc.params.clone();
  s.g_ihc2he.params = g_ihc2he.params.clone();
  s.d_ihc.params = d_ihc.params.clone();
  s.d_he.params = d_he.params.clone();
  return s;
}

namespace {

enum Stream : std::uint64_t {
  kInitGHe2Ihc = 11,
  kInitGIhc2He = 12,
  kInitDIhc = 13,
  kInitDHe = 14,
  kPoolStream = 21,
  kBatchStream = 22,
};

}  // namespace

TrainState init_train_state(const TrainConfig& config) {
  config.validate();
  TrainState s;
  s.g_he2ihc = init_generator<float>(config.generator, mix_seed(config.seed, kInitGHe2Ihc));
  s.g_ihc2he = init_generator<float>(config.generator, mix_seed(config.seed, kInitGIhc2He));
  s.d_ihc = init_discriminator<float>(config.discriminator, mix_seed(config.seed, kInitDIhc));
  s.d_he = init_discriminator<float>(config.discriminator, mix_seed(config.seed, kInitDHe));
  s.pool_ihc.capacity = s.pool_he.capacity = static_cast<std::size_t>(config.pool_capacity);
  return s;
}

double learning_rate_at(double base_rate, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return base_rate;
  const std::int64_t half = total_steps / 2;
  if (step < half) return base_rate;
  return base_rate * static_cast<double>(std::max<std::int64_t>(total_steps - step, 0)) /
         static_cast<double>(total_steps - half);
}

// --- the training step ------------------------------------------------------------------

namespace {

std::vector<const Image*> pixels_of(const std::vector<StainPatch>& patches) {
  std::vector<const Image*> out;
  for (const auto& p : patches) out.push_back(&p.pixels());
  return out;
}

std::vector<const EdgeMap*> pointers(const std::vector<EdgeMap>& edges) {
  std::vector<const EdgeMap*> out;
  for (const auto& e : edges) out.push_back(&e);
  return out;
}

std::vector<std::vector<float>> split_samples(const Tensor<float>& t) {
  const std::size_t n = static_cast<std::size_t>(t.dim(0));
  const std::size_t per = t.size() / n;
  std::vector<std::vector<float>> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i].assign(t.data().begin() + i * per, t.data().begin() + (i + 1) * per);
  return out;
}

Tensor<float> stack_samples(const std::vector<std::vector<float>>& samples, const nn::Shape& shape) {
  std::vector<float> v;
  for (const auto& s : samples) v.insert(v.end(), s.begin(), s.end());
  return Tensor<float>::constant(shape, std::move(v));
}

void check_finite(const Tensor<float>& loss, const char* term, std::int64_t step) {
  if (!std::isfinite(loss.item()))
    throw DivergenceError("non-finite " + std::string(term) + " loss at step " + std::to_string(step));
}

void check_batch(const PatchBatch& batch, const TrainConfig& config) {
  if (batch.he.empty() || batch.he.size() != batch.ihc.size())
    throw std::invalid_argument("batch needs equally many (>= 1) H&E and IHC patches");
  for (const auto& p : batch.he)
    if (p.stain() != Stain::HE) throw std::invalid_argument("batch.he holds a non-H&E patch");
  for (const auto& p : batch.ihc)
    if (p.stain() == Stain::HE) throw std::invalid_argument("batch.ihc holds an H&E patch");
  for (const auto* list : {&batch.he, &batch.ihc})
    for (const auto& p : *list)
      if (p.size() != config.generator.image_size)
        throw std::invalid_argument("patch size " + std::to_string(p.size()) + " does not match image_size " +
                                    std::to_string(config.generator.image_size));
}

Tensor<float> weighted_sum(const std::vector<std::pair<double, Tensor<float>>>& terms) {
  Tensor<float> acc;
  for (const auto& [w, t] : terms) {
    if (w == 0.0 || !t.defined()) continue;
    const Tensor<float> scaled = nn::scale(t, w);
    acc = acc.defined() ? nn::add(acc, scaled) : scaled;
  }
  return acc;
}

}  // namespace

LossReport train_step(TrainState& state, const PatchBatch& batch, const TrainConfig& config) {
  check_batch(batch, config);
  const LossWeights& w = config.weights;
  const bool structure = config.generator.use_structure_channel;
  const std::int64_t step = state.step;

  std::vector<EdgeMap> edges_he, edges_ihc;
  for (const auto& p : batch.he) edges_he.push_back(canny_edges(p.pixels(), config.canny));
  for (const auto& p : batch.ihc) edges_ihc.push_back(canny_edges(p.pixels(), config.canny));
  const Tensor<float> real_he = pack_rgb<float>(pixels_of(batch.he));
  const Tensor<float> real_ihc = pack_rgb<float>(pixels_of(batch.ihc));
  const Tensor<float> e_he = pack_edges<float>(pointers(edges_he));
  const Tensor<float> e_ihc = pack_edges<float>(pointers(edges_ihc));
  const Tensor<float> he4 = nn::concat_channels(real_he, e_he);
  const Tensor<float> ihc4 = nn::concat_channels(real_ihc, e_ihc);

  auto four = [](const GeneratorOutput<float>& o) { return nn::concat_channels(o.rgb, o.edge); };
  // Without the structure channel the edge input is ignored, so cycle and
  // identity terms compare RGB only.
  auto compared = [&](const GeneratorOutput<float>& o) { return structure ? four(o) : o.rgb; };
  const Tensor<float>& he_ref = structure ? he4 : real_he;
  const Tensor<float>& ihc_ref = structure ? ihc4 : real_ihc;

  auto& G_ab = state.g_he2ihc;
  auto& G_ba = state.g_ihc2he;
  auto& D_ihc = state.d_ihc;
  auto& D_he = state.d_he;

  // Generator update.
  const auto fake_ihc = generator_forward(G_ab, he4);
  const auto fake_he = generator_forward(G_ba, ihc4);
  const auto rec_he = generator_forward(G_ba, four(fake_ihc));
  const auto rec_ihc = generator_forward(G_ab, four(fake_he));

  const Tensor<float> adv_g = nn::add(adversarial_loss(discriminator_forward(D_ihc, fake_ihc.rgb), true),
                                      adversarial_loss(discriminator_forward(D_he, fake_he.rgb), true));
  const Tensor<float> cycle_f = cycle_loss(he_ref, compared(rec_he));
  const Tensor<float> cycle_b = cycle_loss(ihc_ref, compared(rec_ihc));
  Tensor<float> identity, structural, registered;
  if (w.lambda3 > 0) {
    const auto id_ihc = generator_forward(G_ab, ihc4);
    const auto id_he = generator_forward(G_ba, he4);
    identity = nn::add(identity_loss(ihc_ref, compared(id_ihc)), identity_loss(he_ref, compared(id_he)));
  }
  if (w.lambda4 > 0)
    structural = nn::add(structural_loss(e_he, fake_ihc.edge), structural_loss(e_ihc, fake_he.edge));
  if (batch.registered)
    registered = nn::add(registered_loss(fake_ihc.rgb, real_ihc), registered_loss(fake_he.rgb, real_he));

  check_finite(adv_g, "adv_g", step);
  check_finite(cycle_f, "cycle_f", step);
  check_finite(cycle_b, "cycle_b", step);
  if (identity.defined()) check_finite(identity, "identity", step);
  if (structural.defined()) check_finite(structural, "structural", step);
  if (registered.defined()) check_finite(registered, "registered", step);

  const Tensor<float> g_objective = weighted_sum({{w.lambda1, adv_g},
                                                  {w.lambda2, cycle_f},
                                                  {w.lambda2, cycle_b},
                                                  {w.lambda3, identity},
                                                  {w.lambda4, structural},
                                                  {w.lambda5, registered}});
  const double lr = learning_rate_at(config.learning_rate, step, state.total_steps);
  if (g_objective.defined()) nn::backward(g_objective);
  adam_update(G_ab.params, state.opt_g_he2ihc, lr, config.beta1, config.beta2, step + 1);
  adam_update(G_ba.params, state.opt_g_ihc2he, lr, config.beta1, config.beta2, step + 1);
  G_ab.params.zero_grad();
  G_ba.params.zero_grad();
  // The generator objective also reached the discriminators; discard that.
  D_ihc.params.zero_grad();
  D_he.params.zero_grad();

  // Discriminator update on real vs pooled fakes.
  const std::uint64_t pool_seed = mix_seed(mix_seed(config.seed, kPoolStream), static_cast<std::uint64_t>(step));
  const Tensor<float> pooled_ihc =
      stack_samples(update_image_pool(state.pool_ihc, split_samples(fake_ihc.rgb), mix_seed(pool_seed, 0)),
                    fake_ihc.rgb.shape());
  const Tensor<float> pooled_he =
      stack_samples(update_image_pool(state.pool_he, split_samples(fake_he.rgb), mix_seed(pool_seed, 1)),
                    fake_he.rgb.shape());
  const Tensor<float> d_ihc_loss =
      nn::scale(nn::add(adversarial_loss(discriminator_forward(D_ihc, real_ihc), true),
                        adversarial_loss(discriminator_forward(D_ihc, pooled_ihc), false)),
                0.5);
  const Tensor<float> d_he_loss = nn::scale(nn::add(adversarial_loss(discriminator_forward(D_he, real_he), true),
                                                    adversarial_loss(discriminator_forward(D_he, pooled_he), false)),
                                            0.5);
  const Tensor<float> adv_d = nn::add(d_ihc_loss, d_he_loss);
  check_finite(adv_d, "adv_d", step);
  nn::backward(adv_d);
  adam_update(D_ihc.params, state.opt_d_ihc, lr, config.beta1, config.beta2, step + 1);
  adam_update(D_he.params, state.opt_d_he, lr, config.beta1, config.beta2, step + 1);
  D_ihc.params.zero_grad();
  D_he.params.zero_grad();

  if (!G_ab.params.all_finite() || !G_ba.params.all_finite() || !D_ihc.params.all_finite() ||
      !D_he.params.all_finite())
    throw DivergenceError("parameters became non-finite at step " + std::to_string(step));
  ++state.step;

  LossReport r;
  r.adv_g = adv_g.item();
  r.adv_d = adv_d.item();
  r.cycle_f = cycle_f.item();
  r.cycle_b = cycle_b.item();
  r.identity = identity.defined() ? identity.item() : 0.0;
  r.structural = structural.defined() ? structural.item() : 0.0;
  r.registered = registered.defined() ? registered.item() : 0.0;
  r.total = total_loss(r, w, batch.registered);
  return r;
}

// --- training loop ---------------------------------------------------------------------

std::string format_loss_row(std::int64_t step, const LossReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(step),
                r.adv_g, r.adv_d, r.cycle_f, r.cycle_b, r.identity, r.structural, r.registered, r.total);
  return buf;
}

CheckpointData make_checkpoint(const TrainState& state, const TrainConfig& config, Stain ihc_stain) {
  CheckpointData ck;
  ck.config = {{"train", config}, {"ihc_stain", to_string(ihc_stain)}, {"step", state.step}};
  append_params(ck, "g_he2ihc.", state.g_he2ihc.params);
  append_params(ck, "g_ihc2he.", state.g_ihc2he.params);
  append_params(ck, "d_ihc.", state.d_ihc.params);
  append_params(ck, "d_he.", state.d_he.params);
  return ck;
}

namespace {

// Writes into a sibling temp directory, then swaps it into place.
void write_checkpoint_atomic(const fs::path& dir, const CheckpointData& ck) {
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  write_checkpoint(tmp, ck);
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

LossReport mean_of(const std::vector<LossReport>& reports) {
  LossReport m;
  if (reports.empty()) return m;
  for (const auto& r : reports) {
    m.adv_g += r.adv_g;
    m.adv_d += r.adv_d;
    m.cycle_f += r.cycle_f;
    m.cycle_b += r.cycle_b;
    m.identity += r.identity;
    m.structural += r.structural;
    m.registered += r.registered;
    m.total += r.total;
  }
  const double n = static_cast<double>(reports.size());
  for (double* f : {&m.adv_g, &m.adv_d, &m.cycle_f, &m.cycle_b, &m.identity, &m.structural, &m.registered, &m.total})
    *f /= n;
  return m;
}

std::string epoch_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04d", epoch);
  return buf;
}

}  // namespace

TrainResult train(const TrainConfig& config, const PatchDataset& data, const fs::path& out_dir,
                  const TrainHooks& hooks) {
  const TrainConfig cfg = config.resolved();
  cfg.validate();
  if (data.index.he.empty() || data.index.ihc.empty()) throw DataError("training data lacks one of the domains");
  if (data.patch_size() != cfg.generator.image_size)
    throw DataError("patch size " + std::to_string(data.patch_size()) + " does not match generator image_size " +
                    std::to_string(cfg.generator.image_size));
  const Stain ihc_stain = data.ihc_stain();

  std::error_code ec;
  fs::create_directories(out_dir / "checkpoints", ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

  TrainState state = init_train_state(cfg);
  const std::size_t largest = std::max(data.index.he.size(), data.index.ihc.size());
  const std::int64_t steps_per_epoch = std::max<std::int64_t>(1, static_cast<std::int64_t>(largest) / cfg.batch_size);
  state.total_steps = steps_per_epoch * cfg.epochs;
  const bool pairs_available = data.index.pairs.size() >= static_cast<std::size_t>(cfg.batch_size);

  TrainResult result;
  std::string csv = std::string(kLossCsvHeader) + "\n";
  std::vector<fs::path> kept;
  double best = std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<LossReport> reports;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      const std::uint64_t step_seed = mix_seed(mix_seed(cfg.seed, kBatchStream), static_cast<std::uint64_t>(state.step));
      bool registered = false;
      if (pairs_available && cfg.registered_fraction > 0) {
        std::mt19937_64 rng(step_seed);
        registered = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.registered_fraction;
      }
      const PatchBatch batch = sample_batch(data, registered ? BatchMode::Registered : BatchMode::Unregistered,
                                            cfg.batch_size, mix_seed(step_seed, 1));
      const std::int64_t step = state.step;
      const LossReport r = train_step(state, batch, cfg);
      reports.push_back(r);
      csv += format_loss_row(step, r) + "\n";
      if (hooks.on_step) hooks.on_step(step, r);
    }
    const LossReport mean = mean_of(reports);
    result.epoch_means.push_back(mean);
    write_file_atomic(out_dir / "loss_log.csv", csv);

    const CheckpointData ck = make_checkpoint(state, cfg, ihc_stain);
    const fs::path epoch_dir = out_dir / "checkpoints" / epoch_name(epoch);
    write_checkpoint_atomic(epoch_dir, ck);
    kept.push_back(epoch_dir);
    while (kept.size() > static_cast<std::size_t>(cfg.keep_checkpoints)) {
      fs::remove_all(kept.front());
      kept.erase(kept.begin());
    }
    if (mean.total < best) {
      best = mean.total;
      write_checkpoint_atomic(out_dir / "checkpoints" / "best", ck);
    }
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, state, mean);
  }

  result.final_checkpoint = out_dir / "final";
  write_checkpoint_atomic(result.final_checkpoint, make_checkpoint(state, cfg, ihc_stain));
  return result;
}

// --- inference --------------------------------------------------------------------------

std::string to_string(Direction direction) {
  return direction == Direction::HeToIhc ? "he_to_ihc" : "ihc_to_he";
}

Direction parse_direction(const std::string& name) {
  if (name == "he_to_ihc") return Direction::HeToIhc;
  if (name == "ihc_to_he") return Direction::IhcToHe;
  throw std::invalid_argument("unknown direction \"" + name + "\"");
}

LoadedGenerator load_generator(const fs::path& checkpoint, Direction direction) {
  const CheckpointData ck = read_checkpoint(checkpoint);
  LoadedGenerator out;
  try {
    out.config = ck.config.at("train").get<TrainConfig>();
    out.ihc_stain = parse_stain(ck.config.at("ihc_stain").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint config unreadable: " + std::string(e.what()));
  }
  out.generator = init_generator<float>(out.config.generator, 0);
  restore_params(ck, direction == Direction::HeToIhc ? "g_he2ihc." : "g_ihc2he.", out.generator.params);
  return out;
}

std::vector<Translation> translate(const GeneratorParams<float>& generator, const std::vector<StainPatch>& patches,
                                   Stain source, Stain target, const CannyParams& canny) {
  constexpr std::size_t kChunk = 8;
  std::vector<Translation> out;
  for (const auto& p : patches) {
    if (p.stain() != source)
      throw std::invalid_argument("translate expects " + to_string(source) + " patches, got " + to_string(p.stain()));
    if (p.size() != generator.config.image_size)
      throw std::invalid_argument("patch size " + std::to_string(p.size()) + " does not match model image_size " +
                                  std::to_string(generator.config.image_size));
  }
  for (std::size_t start = 0; start < patches.size(); start += kChunk) {
    const std::size_t end = std::min(patches.size(), start + kChunk);
    std::vector<const Image*> images;
    std::vector<EdgeMap> edges;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(&patches[i].pixels());
      edges.push_back(generator.config.use_structure_channel
                          ? canny_edges(patches[i].pixels(), canny)
                          : EdgeMap{Image(patches[i].size(), patches[i].size(), 1)});
    }
    const auto input = nn::concat_channels(pack_rgb<float>(images), pack_edges<float>(pointers(edges)));
    const auto result = generator_forward(generator, input);
    auto rgb = unpack_rgb(result.rgb);
    auto edge = unpack_edges(result.edge);
    for (std::size_t i = 0; i < rgb.size(); ++i) {
      const StainPatch& src = patches[start + i];
      out.push_back({StainPatch(std::move(rgb[i]), target, src.patient_id(), src.pair_id()), std::move(edge[i])});
    }
  }
  return out;
}

std::vector<Translation> translate(const fs::path& checkpoint, const std::vector<StainPatch>& patches,
                                   Direction direction) {
  const LoadedGenerator g = load_generator(checkpoint, direction);
  const bool forward = direction == Direction::HeToIhc;
  return translate(g.generator, patches, forward ? Stain::HE : g.ihc_stain, forward ? g.ihc_stain : Stain::HE,
                   g.config.canny);
}

double registered_mae(const TrainState& state, const PatchDataset& data, const CannyParams& canny) {
  if (data.index.pairs.empty()) throw DataError("registered_mae needs registered pairs");
  double acc = 0;
  for (const auto& [i, j] : data.index.pairs) {
    const StainPatch& he = data.patches[data.index.he[i]];
    const StainPatch& ihc = data.patches[data.index.ihc[j]];
    for (int dir = 0; dir < 2; ++dir) {
      const StainPatch& src = dir == 0 ? he : ihc;
      const StainPatch& dst = dir == 0 ? ihc : he;
      const auto& g = dir == 0 ? state.g_he2ihc : state.g_ihc2he;
      const EdgeMap e = canny_edges(src.pixels(), canny);
      const auto input = nn::concat_channels(pack_rgb<float>({&src.pixels()}), pack_edges<float>({&e}));
      const auto out = generator_forward(g, input);
      acc += nn::mean_absolute_error(out.rgb, pack_rgb<float>({&dst.pixels()})).item();
    }
  }
  return acc / (2.0 * static_cast<double>(data.index.pairs.size()));
}

}  // namespace scgan
