#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dectseg/checkpoint.hpp"
#include "dectseg/preproc.hpp"

namespace dectseg {

/// Where the stage-2 guide channel of a training sample comes from.
enum class GuideSource {
  stage1,  // the trained stage-1 network's prediction, as at inference
  truth,   // ground-truth foreground at stage-1 resolution
};

struct StagePlan {
  int stage = 1;
  Index downsample = 2;  // stage 1 only
  Index patch = 32;
  int batch = 2;
  int iterations = 1000;
  double learning_rate = 1e-3;
  double foreground_fraction = 0.5;
  double class_weight_power = 1.0;  // exponent on the inverse-frequency weights; 0 disables weighting
  double alpha_training = 0.6;
  Index roi_margin = kDefaultRoiMargin;  // stage 2 training crop
  int validate_every = 0;  // 0: keep the final iterate
  GuideSource guide = GuideSource::stage1;

  /// Throws ConfigError.
  void validate(const UNetConfig& net) const;
};

/// Inference-side geometry shared by both stages.
struct CascadeOptions {
  Index downsample = 2;
  Index stage1_patch = 32;
  Index stage2_patch = 32;
  double overlap = 0.5;
  Index roi_margin = kDefaultRoiMargin;

  static CascadeOptions from_plans(const StagePlan& stage1, const StagePlan& stage2);
};

/// A case after mixing, skin-contour masking and normalisation.
struct CaseInput {
  std::string id;
  Volume mixed;
  MaskVolume body;
  Volume normalized;
  std::optional<LabelVolume> labels;
};

CaseInput prepare_case(const DectPair& pair, double alpha, const LabelVolume* labels = nullptr);

/// Network-ready training region: two input channels plus targets.
struct StageSample {
  std::string id;
  Volume image;   // normalised mixed image
  Volume guide;   // mask channel, -1 / +1
  LabelVolume labels;
  MaskVolume body;  // sampling domain for non-foreground draws
};

/// Downsampled whole case. Regions smaller than `patch` are padded by edge
/// replication.
StageSample make_stage1_sample(const CaseInput& c, Index factor, Index patch);
/// Crop around the ground-truth foreground (dilated by `margin`, grown to at
/// least `patch`) with `guide` as the mask channel.
StageSample make_stage2_sample(const CaseInput& c, const MaskVolume& guide, Index margin, Index patch);
/// Ground-truth foreground after the stage-1 round trip (majority
/// downsampling, nearest upsampling).
MaskVolume truth_guide(const LabelVolume& labels, Index factor);

/// (N_total / (K * N_c))^power over all sample labels, clamped to
/// [0.1, 10]. Absent classes get the upper clamp.
std::vector<double> class_weights(const std::vector<StageSample>& samples, double power = 1.0);

struct PatchDraw {
  std::size_t sample = 0;
  std::array<Index, 3> start{};  // x, y, z
  bool foreground = false;       // centre drawn from the foreground set
};

struct PatchBatch {
  Tensor<float> input;                // (B, 2, P, P, P)
  std::vector<std::uint8_t> target;   // B * P^3
};

/// Deterministic stream of training patches.
class PatchSampler {
 public:
  PatchSampler(const std::vector<StageSample>& samples, Index patch, double foreground_fraction,
               std::uint64_t seed);

  PatchDraw next();
  PatchBatch next_batch(int batch);
  PatchBatch extract(const std::vector<PatchDraw>& draws) const;

 private:
  const std::vector<StageSample>* samples_;
  Index patch_;
  double fraction_;
  std::mt19937_64 rng_;
  std::vector<std::vector<Index>> foreground_;  // linear indices per sample
  std::vector<std::vector<Index>> body_;
};

/// Seed of the patch stream train_stage derives from its run seed.
std::uint64_t sampler_seed(std::uint64_t seed);

struct TrainLogRow {
  std::int64_t iteration = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;          // the selected iterate
  std::vector<TrainLogRow> log;
  std::vector<std::pair<std::int64_t, double>> validation;  // iteration, score
};

/// Higher is better. Called in inference mode.
using Validator = std::function<double(UNet<float>&)>;

/// Patch training with weighted cross-entropy and Adam. With `init` the
/// network starts from that checkpoint (fine-tuning). With a validator and
/// plan.validate_every > 0 the best-scoring iterate is returned (first best
/// on ties), otherwise the last one.
TrainResult train_stage(const std::vector<StageSample>& samples, const StagePlan& plan, const UNetConfig& net,
                        std::uint64_t seed, const Checkpoint* init = nullptr, const Validator& validator = {});

/// Weighted cross-entropy of one batch, training-mode forward, no update.
double batch_loss(UNet<float>& net, const PatchBatch& batch, const std::vector<double>& weights);

void write_training_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path);

/// Per-axis patch origins: stride floor(patch * (1 - overlap)), last patch
/// flush with the far edge. extent <= patch gives {0}.
std::vector<Index> tile_starts(Index extent, Index patch, double overlap);

struct ProbabilityMaps {
  Dims dims;
  std::vector<float> values;  // class-major, kNumClasses * dims.count()

  float at(int cls, Index voxel) const { return values[static_cast<std::size_t>(cls * dims.count() + voxel)]; }
  std::vector<std::uint8_t> argmax() const;
};

/// Softmax of uniformly averaged logits over an overlapping patch grid.
/// Logits are accumulated in canonical tile order whatever the evaluation
/// order; a nonzero `evaluation_seed` shuffles evaluation.
ProbabilityMaps tile_inference(UNet<float>& net, const Volume& image, const Volume& guide, Index patch,
                               double overlap = 0.5, std::uint64_t evaluation_seed = 0);

struct Stage1Result {
  ProbabilityMaps coarse;
  MaskVolume mask;  // full resolution
  BoundingBox roi;
  bool fallback = false;  // empty prediction, ROI is the body box
};

Stage1Result predict_stage1(const CaseInput& c, UNet<float>& stage1, const CascadeOptions& opts);

/// Stage 2 on the stage-1 ROI (grown to at least one patch), embedded into
/// the full grid; voxels outside the body mask are background.
LabelVolume predict_stage2(const CaseInput& c, const Stage1Result& stage1, UNet<float>& stage2,
                           const CascadeOptions& opts);

LabelVolume predict_cascade(const CaseInput& c, UNet<float>& stage1, UNet<float>& stage2,
                            const CascadeOptions& opts);
/// Validates stage ids and configs before any inference.
LabelVolume predict_cascade(const DectPair& pair, double alpha, const Checkpoint& stage1, const Checkpoint& stage2,
                            const CascadeOptions& opts);

struct CascadeCheckpoints {
  Checkpoint stage1;
  Checkpoint stage2;
};

struct CascadeTraining {
  CascadeCheckpoints checkpoints;
  TrainResult stage1;
  TrainResult stage2;
};

/// Trains stage 1, then stage 2 on guides from the selected stage 1.
/// Validation scores are mean organ Dice on `validation` (coarse labels for
/// stage 1, full cascade for stage 2). With `init` both stages fine-tune.
CascadeTraining train_cascade(const std::vector<CaseInput>& training, const std::vector<CaseInput>& validation,
                              const StagePlan& stage1, const StagePlan& stage2, const UNetConfig& net,
                              std::uint64_t seed, const CascadeCheckpoints* init = nullptr);

}  // namespace dectseg
