#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scgan/checkpoint.hpp"
#include "scgan/data.hpp"
#include "scgan/losses.hpp"
#include "scgan/model.hpp"
#include "scgan/structure.hpp"

namespace scgan {

// Ablation variants:
//   base         no attention, RGB-only input, no structural loss
//   edatt        encoder+decoder attention, RGB-only input, no structural loss
//   datt         decoder attention, RGB-only input, no structural loss
//   st           no attention, edge channel + structural loss
//   scgan_wo_sl  decoder attention, edge channel, no structural loss
//   scgan        decoder attention, edge channel + structural loss
enum class Variant { Base, EdAtt, DAtt, St, ScganWoSl, Scgan };

std::string to_string(Variant variant);
Variant parse_variant(const std::string& name);

struct VariantTraits {
  AttentionMode attention;
  bool structure_channel;
  bool structural_loss;
};
VariantTraits variant_traits(Variant variant);

struct TrainConfig {
  LossWeights weights;
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int batch_size = 1;
  int epochs = 5;
  double registered_fraction = 0.0;
  std::uint64_t seed = 0;
  Variant variant = Variant::Scgan;
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  CannyParams canny;
  int pool_capacity = 50;
  int keep_checkpoints = 3;

  void validate() const;
  // Copy whose generator flags and lambda4 follow the variant. Throws if a
  // variant with structural loss is given lambda4 == 0.
  TrainConfig resolved() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
// Rejects unknown keys and generator flags that contradict the variant.
void from_json(const nlohmann::json& j, TrainConfig& c);

// Fake-image history for one discriminator. Each entry is one [3,H,W] image.
struct ImagePool {
  std::size_t capacity = 50;
  std::vector<std::vector<float>> images;
};

// Fill phase: store and return each fake. At capacity: with probability 0.5
// return a random stored fake and store the fresh one in its slot, otherwise
// return the fresh fake.
std::vector<std::vector<float>> update_image_pool(ImagePool& pool, const std::vector<std::vector<float>>& fakes,
                                                  std::uint64_t seed);

struct AdamMoments {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

void adam_update(ParamMap<float>& params, AdamMoments& moments, double lr, double beta1, double beta2,
                 std::int64_t t);

struct TrainState {
  GeneratorParams<float> g_he2ihc;
  GeneratorParams<float> g_ihc2he;
  DiscriminatorParams<float> d_ihc;
  DiscriminatorParams<float> d_he;
  AdamMoments opt_g_he2ihc, opt_g_ihc2he, opt_d_ihc, opt_d_he;
  std::int64_t step = 0;
  std::int64_t total_steps = 0;  // 0 keeps the learning rate constant
  ImagePool pool_ihc;
  ImagePool pool_he;

  TrainState clone() const;
};

TrainState init_train_state(const TrainConfig& config);

// Constant for the first half of training, then linear decay towards 0.
double learning_rate_at(double base_rate, std::int64_t step, std::int64_t total_steps);

// One generator update followed by one update of each discriminator.
// `config` must be resolved. Throws DivergenceError naming the first
// non-finite loss term.
LossReport train_step(TrainState& state, const PatchBatch& batch, const TrainConfig& config);

struct TrainHooks {
  std::function<void(std::int64_t step, const LossReport&)> on_step;
  std::function<void(int epoch, const TrainState&, const LossReport& epoch_mean)> on_epoch_end;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::vector<LossReport> epoch_means;
};

inline constexpr const char* kLossCsvHeader = "step,adv_g,adv_d,cycle_f,cycle_b,identity,structural,registered,total";

// Writes <out>/loss_log.csv, <out>/checkpoints/epoch_NNNN (last
// keep_checkpoints kept), <out>/checkpoints/best and <out>/final.
TrainResult train(const TrainConfig& config, const PatchDataset& data, const std::filesystem::path& out_dir,
                  const TrainHooks& hooks = {});

std::string format_loss_row(std::int64_t step, const LossReport& r);

// --- checkpoints and inference ---------------------------------------------------

CheckpointData make_checkpoint(const TrainState& state, const TrainConfig& config, Stain ihc_stain);

enum class Direction { HeToIhc, IhcToHe };
std::string to_string(Direction direction);
Direction parse_direction(const std::string& name);

struct LoadedGenerator {
  TrainConfig config;
  Stain ihc_stain = Stain::CDX2;
  GeneratorParams<float> generator;
};

LoadedGenerator load_generator(const std::filesystem::path& checkpoint, Direction direction);

struct Translation {
  StainPatch patch;
  EdgeMap edges;
};

// Deterministic inference; output RGB mapped back to [0,1].
std::vector<Translation> translate(const GeneratorParams<float>& generator, const std::vector<StainPatch>& patches,
                                   Stain source, Stain target, const CannyParams& canny);
std::vector<Translation> translate(const std::filesystem::path& checkpoint, const std::vector<StainPatch>& patches,
                                   Direction direction);

// Mean absolute error in model space ([-1,1]) between translations and their
// registered counterparts, averaged over both directions and all pairs.
double registered_mae(const TrainState& state, const PatchDataset& data, const CannyParams& canny);

}  // namespace scgan
