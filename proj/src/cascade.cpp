#include "dectseg/cascade.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "dectseg/metrics.hpp"
#include "dectseg/optim.hpp"

namespace dectseg {

namespace {

// Grows every axis shorter than `patch` to `patch` by replicating the far edge.
template <typename T>
Grid<T> pad_to_patch(const Grid<T>& g, Index patch) {
  const Dims d = g.dims();
  const Dims p{std::max(d.x, patch), std::max(d.y, patch), std::max(d.z, patch)};
  if (p == d) return g;
  std::vector<T> out(static_cast<std::size_t>(p.count()));
  for (Index z = 0; z < p.z; ++z)
    for (Index y = 0; y < p.y; ++y)
      for (Index x = 0; x < p.x; ++x)
        out[static_cast<std::size_t>(x + p.x * (y + p.y * z))] =
            g(std::min(x, d.x - 1), std::min(y, d.y - 1), std::min(z, d.z - 1));
  return Grid<T>(p, g.spacing(), std::move(out));
}

Volume to_signed(const MaskVolume& m) {
  std::vector<float> v(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.size(); ++i) v[static_cast<std::size_t>(i)] = m[i] ? 1.0f : -1.0f;
  return Volume(m.dims(), m.spacing(), std::move(v));
}

struct CoarseInput {
  Volume image;
  Volume guide;
  MaskVolume body;
};

CoarseInput stage1_inputs(const CaseInput& c, Index factor) {
  const auto f = uniform_factor(factor);
  MaskVolume body = downsample(c.body, f);
  Volume guide = to_signed(body);
  return {downsample(c.normalized, f), std::move(guide), std::move(body)};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void StagePlan::validate(const UNetConfig& net) const {
  net.validate();
  if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
  if (downsample < 1) throw ConfigError("downsample factor must be >= 1");
  if (patch < 1 || patch % net.patch_multiple() != 0) {
    throw ConfigError(fmt::format("patch {} must be a positive multiple of {}", patch, net.patch_multiple()));
  }
  if (batch < 1) throw ConfigError("batch size must be >= 1");
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(foreground_fraction >= 0.0 && foreground_fraction <= 1.0)) {
    throw ConfigError("foreground fraction must lie in [0, 1]");
  }
  if (!(class_weight_power >= 0.0 && class_weight_power <= 4.0)) {
    throw ConfigError("class weight power must lie in [0, 4]");
  }
  if (!(alpha_training >= 0.0 && alpha_training <= 1.0)) throw ConfigError("alpha_training must lie in [0, 1]");
  if (roi_margin < 0) throw ConfigError("roi margin must be >= 0");
  if (validate_every < 0) throw ConfigError("validate_every must be >= 0");
}

CascadeOptions CascadeOptions::from_plans(const StagePlan& stage1, const StagePlan& stage2) {
  CascadeOptions o;
  o.downsample = stage1.downsample;
  o.stage1_patch = stage1.patch;
  o.stage2_patch = stage2.patch;
  o.roi_margin = stage2.roi_margin;
  return o;
}

CaseInput prepare_case(const DectPair& pair, double alpha, const LabelVolume* labels) {
  CaseInput c;
  c.id = pair.id();
  c.mixed = mix(pair, MixConfig(alpha));
  c.body = body_mask(c.mixed);
  c.normalized = normalize(c.mixed, c.body);
  if (labels) {
    if (!same_geometry(*labels, pair.low())) throw ShapeError("case " + pair.id() + ": labels do not match images");
    c.labels = *labels;
  }
  return c;
}

StageSample make_stage1_sample(const CaseInput& c, Index factor, Index patch) {
  if (!c.labels) throw ConfigError("case " + c.id + " has no labels");
  CoarseInput in = stage1_inputs(c, factor);
  return {c.id, pad_to_patch(in.image, patch), pad_to_patch(in.guide, patch),
          pad_to_patch(downsample(*c.labels, uniform_factor(factor)), patch), pad_to_patch(in.body, patch)};
}

StageSample make_stage2_sample(const CaseInput& c, const MaskVolume& guide, Index margin, Index patch) {
  if (!c.labels) throw ConfigError("case " + c.id + " has no labels");
  if (!same_geometry(guide, c.body)) throw ShapeError("stage-2 guide does not match case " + c.id);
  BoundingBox box;
  try {
    box = roi_from_mask(foreground(*c.labels), margin);
  } catch (const DomainError&) {
    spdlog::warn("case {}: no foreground labels, stage-2 crop falls back to the body box", c.id);
    box = roi_from_mask(c.body, 0);
  }
  box = expand_box(box, patch, c.body.dims());
  return {c.id, pad_to_patch(crop(c.normalized, box), patch), pad_to_patch(to_signed(crop(guide, box)), patch),
          pad_to_patch(crop(*c.labels, box), patch), pad_to_patch(crop(c.body, box), patch)};
}

MaskVolume truth_guide(const LabelVolume& labels, Index factor) {
  const auto f = uniform_factor(factor);
  return upsample_nearest(downsample(foreground(labels), f), f, labels.dims());
}

std::vector<double> class_weights(const std::vector<StageSample>& samples, double power) {
  std::vector<double> count(kNumClasses, 0.0);
  double total = 0.0;
  for (const auto& s : samples) {
    for (Organ o : s.labels.values()) count[static_cast<std::size_t>(o)] += 1.0;
    total += static_cast<double>(s.labels.size());
  }
  std::vector<double> w(kNumClasses);
  for (std::size_t k = 0; k < w.size(); ++k) {
    w[k] = count[k] == 0.0 ? 10.0 : std::clamp(std::pow(total / (kNumClasses * count[k]), power), 0.1, 10.0);
  }
  return w;
}

PatchSampler::PatchSampler(const std::vector<StageSample>& samples, Index patch, double foreground_fraction,
                           std::uint64_t seed)
    : samples_(&samples), patch_(patch), fraction_(foreground_fraction), rng_(seed) {
  if (samples.empty()) throw ConfigError("no training samples");
  for (const auto& s : samples) {
    const Dims d = s.image.dims();
    if (d.x < patch || d.y < patch || d.z < patch) throw ShapeError("sample " + s.id + " is smaller than a patch");
    if (!same_geometry(s.image, s.guide) || !same_geometry(s.image, s.labels) || !same_geometry(s.image, s.body)) {
      throw ShapeError("sample " + s.id + " has mismatched channels");
    }
    std::vector<Index> fg, body;
    for (Index i = 0; i < s.labels.size(); ++i) {
      if (s.labels[i] != Organ::background) fg.push_back(i);
      if (s.body[i]) body.push_back(i);
    }
    if (body.empty()) {
      body.resize(static_cast<std::size_t>(s.labels.size()));
      std::iota(body.begin(), body.end(), Index{0});
    }
    if (fg.empty() && fraction_ > 0.0) {
      spdlog::warn("sample {}: no foreground voxels, drawing from the body mask only", s.id);
    }
    foreground_.push_back(std::move(fg));
    body_.push_back(std::move(body));
  }
}

PatchDraw PatchSampler::next() {
  PatchDraw d;
  d.sample = std::uniform_int_distribution<std::size_t>(0, samples_->size() - 1)(rng_);
  const bool want_fg = std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < fraction_;
  const auto& fg = foreground_[d.sample];
  d.foreground = want_fg && !fg.empty();
  const auto& pool = d.foreground ? fg : body_[d.sample];
  const Index centre = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng_)];
  const Dims dims = (*samples_)[d.sample].image.dims();
  const Index c[3] = {centre % dims.x, (centre / dims.x) % dims.y, centre / (dims.x * dims.y)};
  for (int a = 0; a < 3; ++a) d.start[a] = std::clamp<Index>(c[a] - patch_ / 2, 0, dims[a] - patch_);
  return d;
}

PatchBatch PatchSampler::next_batch(int batch) {
  std::vector<PatchDraw> draws;
  for (int b = 0; b < batch; ++b) draws.push_back(next());
  return extract(draws);
}

PatchBatch PatchSampler::extract(const std::vector<PatchDraw>& draws) const {
  const Index P = patch_, n = P * P * P;
  const auto B = static_cast<Index>(draws.size());
  std::vector<float> input(static_cast<std::size_t>(B * 2 * n));
  std::vector<std::uint8_t> target(static_cast<std::size_t>(B * n));
  for (Index b = 0; b < B; ++b) {
    const PatchDraw& d = draws[static_cast<std::size_t>(b)];
    const StageSample& s = (*samples_)[d.sample];
    float* img = input.data() + b * 2 * n;
    float* gd = img + n;
    std::uint8_t* tg = target.data() + b * n;
    Index i = 0;
    for (Index z = 0; z < P; ++z)
      for (Index y = 0; y < P; ++y)
        for (Index x = 0; x < P; ++x, ++i) {
          const Index src = s.image.index(d.start[0] + x, d.start[1] + y, d.start[2] + z);
          img[i] = s.image[src];
          gd[i] = s.guide[src];
          tg[i] = static_cast<std::uint8_t>(s.labels[src]);
        }
  }
  return {Tensor<float>({B, 2, P, P, P}, std::move(input)), std::move(target)};
}

std::uint64_t sampler_seed(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ULL; }

double batch_loss(UNet<float>& net, const PatchBatch& batch, const std::vector<double>& weights) {
  NoGradGuard guard;
  const std::vector<std::uint8_t> mask(batch.target.size(), 1);
  return weighted_cross_entropy(net.forward(batch.input, Mode::training), batch.target, weights, mask).item();
}

TrainResult train_stage(const std::vector<StageSample>& samples, const StagePlan& plan, const UNetConfig& net,
                        std::uint64_t seed, const Checkpoint* init, const Validator& validator) {
  plan.validate(net);
  if (samples.empty()) throw ConfigError("stage " + std::to_string(plan.stage) + ": empty training set");
  if (init && !(init->meta.config == net)) {
    throw ConfigError("init checkpoint config " + to_string(init->meta.config) + " != " + to_string(net));
  }
  UNet<float> model = init ? restore_network(*init) : UNet<float>(net, seed);
  const std::vector<double> weights = class_weights(samples, plan.class_weight_power);
  PatchSampler sampler(samples, plan.patch, plan.foreground_fraction, sampler_seed(seed));
  Adam<float> opt(model.parameters(), AdamOptions{plan.learning_rate});
  const std::vector<std::uint8_t> mask(static_cast<std::size_t>(plan.batch * plan.patch * plan.patch * plan.patch), 1);

  TrainResult result;
  const bool selecting = validator && plan.validate_every > 0;
  double best_score = -std::numeric_limits<double>::infinity();
  std::vector<StoredTensor> best_state = model.state();
  std::int64_t best_iteration = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (int it = 0; it < plan.iterations; ++it) {
    const PatchBatch batch = sampler.next_batch(plan.batch);
    opt.zero_grad();
    const Tensor<float> loss = weighted_cross_entropy(model.forward(batch.input, Mode::training), batch.target,
                                                      weights, mask);
    result.log.push_back({it, loss.item(), plan.learning_rate, seconds_since(t0)});
    loss.backward();
    opt.step();
    const bool last = it + 1 == plan.iterations;
    if (selecting && ((it + 1) % plan.validate_every == 0 || last)) {
      const double score = validator(model);
      result.validation.emplace_back(it + 1, score);
      spdlog::info("stage {} iteration {}: loss {:.4f}, validation {:.4f} ({:.0f} s)", plan.stage, it + 1, loss.item(),
                   score, seconds_since(t0));
      if (score > best_score) {
        best_score = score;
        best_state = model.state();
        best_iteration = it + 1;
      }
    } else if ((it + 1) % 100 == 0 || last) {
      spdlog::info("stage {} iteration {}: loss {:.4f} ({:.0f} s)", plan.stage, it + 1, loss.item(), seconds_since(t0));
    }
  }
  if (!selecting) {
    best_state = model.state();
    best_iteration = plan.iterations;
  }

  CheckpointMeta meta;
  meta.config = net;
  meta.stage = plan.stage;
  meta.alpha_training = plan.alpha_training;
  meta.iteration = (init ? init->meta.iteration : 0) + best_iteration;
  meta.seed = seed;
  const auto tail_end = static_cast<std::size_t>(best_iteration);
  for (std::size_t i = tail_end >= 10 ? tail_end - 10 : 0; i < tail_end; ++i) meta.loss_tail.push_back(result.log[i].loss);
  result.checkpoint = Checkpoint{std::move(meta), std::move(best_state)};
  return result;
}

void write_training_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  // Wall time stays out of the file so reruns are byte-identical.
  f << "iteration,loss,learning_rate\n";
  for (const auto& r : log) f << fmt::format("{},{},{}\n", r.iteration, r.loss, r.learning_rate);
  if (!f) throw IoError("write failed: " + path.string());
}

std::vector<Index> tile_starts(Index extent, Index patch, double overlap) {
  if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("overlap must lie in [0, 1)");
  if (patch < 1) throw ConfigError("patch must be positive");
  if (extent <= patch) return {0};
  const Index step = std::max<Index>(1, static_cast<Index>(std::floor(static_cast<double>(patch) * (1.0 - overlap))));
  std::vector<Index> out;
  for (Index s = 0;; s = std::min(s + step, extent - patch)) {
    out.push_back(s);
    if (s + patch >= extent) break;
  }
  return out;
}

std::vector<std::uint8_t> ProbabilityMaps::argmax() const {
  return argmax_channel<float>(values, kNumClasses, dims.count());
}

ProbabilityMaps tile_inference(UNet<float>& net, const Volume& image, const Volume& guide, Index patch,
                               double overlap, std::uint64_t evaluation_seed) {
  if (!same_geometry(image, guide)) throw ShapeError("tile_inference: channel grids differ");
  if (patch % net.config().patch_multiple() != 0) throw ConfigError("tile_inference: patch not valid for the net");
  const Dims orig = image.dims();
  const Volume img = pad_to_patch(image, patch);
  const Volume gd = pad_to_patch(guide, patch);
  const Dims d = img.dims();
  const auto xs = tile_starts(d.x, patch, overlap);
  const auto ys = tile_starts(d.y, patch, overlap);
  const auto zs = tile_starts(d.z, patch, overlap);
  std::vector<std::array<Index, 3>> tiles;
  for (Index z : zs)
    for (Index y : ys)
      for (Index x : xs) tiles.push_back({x, y, z});

  std::vector<std::size_t> order(tiles.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (evaluation_seed != 0) {
    std::mt19937_64 rng(evaluation_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }

  const Index n = patch * patch * patch;
  std::vector<std::vector<float>> logits(tiles.size());
  {
    NoGradGuard guard;
    std::vector<float> in(static_cast<std::size_t>(2 * n));
    for (std::size_t t : order) {
      const auto& o = tiles[t];
      Index i = 0;
      for (Index z = 0; z < patch; ++z)
        for (Index y = 0; y < patch; ++y)
          for (Index x = 0; x < patch; ++x, ++i) {
            const Index src = img.index(o[0] + x, o[1] + y, o[2] + z);
            in[static_cast<std::size_t>(i)] = img[src];
            in[static_cast<std::size_t>(n + i)] = gd[src];
          }
      const Tensor<float> out = net.forward(Tensor<float>({1, 2, patch, patch, patch}, in), Mode::inference);
      logits[t].assign(out.data().begin(), out.data().end());
    }
  }

  // Canonical accumulation order keeps the sums independent of evaluation order.
  const Index N = d.count();
  std::vector<float> acc(static_cast<std::size_t>(kNumClasses * N), 0.0f);
  std::vector<float> hits(static_cast<std::size_t>(N), 0.0f);
  for (std::size_t t = 0; t < tiles.size(); ++t) {
    const auto& o = tiles[t];
    Index i = 0;
    for (Index z = 0; z < patch; ++z)
      for (Index y = 0; y < patch; ++y)
        for (Index x = 0; x < patch; ++x, ++i) {
          const Index dst = img.index(o[0] + x, o[1] + y, o[2] + z);
          for (int c = 0; c < kNumClasses; ++c) acc[static_cast<std::size_t>(c * N + dst)] += logits[t][static_cast<std::size_t>(c * n + i)];
          hits[static_cast<std::size_t>(dst)] += 1.0f;
        }
  }

  ProbabilityMaps out;
  out.dims = orig;
  const Index M = orig.count();
  out.values.resize(static_cast<std::size_t>(kNumClasses * M));
  for (Index z = 0; z < orig.z; ++z)
    for (Index y = 0; y < orig.y; ++y)
      for (Index x = 0; x < orig.x; ++x) {
        const Index src = img.index(x, y, z);
        const Index dst = x + orig.x * (y + orig.y * z);
        const float h = hits[static_cast<std::size_t>(src)];
        double mean[kNumClasses];
        double top = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < kNumClasses; ++c) {
          mean[c] = acc[static_cast<std::size_t>(c * N + src)] / h;
          top = std::max(top, mean[c]);
        }
        double total = 0.0;
        for (double& m : mean) total += (m = std::exp(m - top));
        for (int c = 0; c < kNumClasses; ++c) out.values[static_cast<std::size_t>(c * M + dst)] = static_cast<float>(mean[c] / total);
      }
  return out;
}

Stage1Result predict_stage1(const CaseInput& c, UNet<float>& stage1, const CascadeOptions& opts) {
  const CoarseInput in = stage1_inputs(c, opts.downsample);
  Stage1Result r;
  r.coarse = tile_inference(stage1, in.image, in.guide, opts.stage1_patch, opts.overlap);
  const auto cls = r.coarse.argmax();
  std::vector<std::uint8_t> fg(cls.size());
  for (std::size_t i = 0; i < cls.size(); ++i) fg[i] = cls[i] != 0;
  const MaskVolume coarse(in.image.dims(), in.image.spacing(), std::move(fg));
  r.mask = upsample_nearest(coarse, uniform_factor(opts.downsample), c.body.dims());
  try {
    r.roi = roi_from_mask(r.mask, opts.roi_margin);
  } catch (const DomainError&) {
    spdlog::warn("case {}: empty stage-1 prediction, using the body box as ROI", c.id);
    r.roi = roi_from_mask(c.body, 0);
    r.fallback = true;
  }
  return r;
}

LabelVolume predict_stage2(const CaseInput& c, const Stage1Result& s1, UNet<float>& stage2,
                           const CascadeOptions& opts) {
  const Dims dims = c.body.dims();
  const BoundingBox box = expand_box(s1.roi, opts.stage2_patch, dims);
  const ProbabilityMaps p = tile_inference(stage2, crop(c.normalized, box), to_signed(crop(s1.mask, box)),
                                           opts.stage2_patch, opts.overlap);
  const auto cls = p.argmax();
  std::vector<Organ> labels(cls.size());
  for (std::size_t i = 0; i < cls.size(); ++i) labels[i] = static_cast<Organ>(cls[i]);
  LabelVolume full = embed(LabelVolume(box.extent(), c.body.spacing(), std::move(labels)), box, dims, Organ::background);
  std::vector<Organ> gated = std::move(full).release();
  for (Index i = 0; i < c.body.size(); ++i) {
    if (!c.body[i]) gated[static_cast<std::size_t>(i)] = Organ::background;
  }
  return LabelVolume(dims, c.body.spacing(), std::move(gated));
}

LabelVolume predict_cascade(const CaseInput& c, UNet<float>& stage1, UNet<float>& stage2, const CascadeOptions& opts) {
  return predict_stage2(c, predict_stage1(c, stage1, opts), stage2, opts);
}

LabelVolume predict_cascade(const DectPair& pair, double alpha, const Checkpoint& stage1, const Checkpoint& stage2,
                            const CascadeOptions& opts) {
  if (stage1.meta.stage != 1) throw ConfigError("first checkpoint is not a stage-1 model");
  if (stage2.meta.stage != 2) throw ConfigError("second checkpoint is not a stage-2 model");
  if (!(stage1.meta.config == stage2.meta.config)) {
    throw ConfigError("checkpoint configs differ: " + to_string(stage1.meta.config) + " vs " +
                      to_string(stage2.meta.config));
  }
  UNet<float> n1 = restore_network(stage1);
  UNet<float> n2 = restore_network(stage2);
  return predict_cascade(prepare_case(pair, alpha), n1, n2, opts);
}

CascadeTraining train_cascade(const std::vector<CaseInput>& training, const std::vector<CaseInput>& validation,
                              const StagePlan& stage1, const StagePlan& stage2, const UNetConfig& net,
                              std::uint64_t seed, const CascadeCheckpoints* init) {
  if (stage1.stage != 1 || stage2.stage != 2) throw ConfigError("train_cascade: plans must be stage 1 then stage 2");
  stage1.validate(net);
  stage2.validate(net);
  if (training.empty()) throw ConfigError("train_cascade: empty training set");
  const CascadeOptions opts = CascadeOptions::from_plans(stage1, stage2);

  std::vector<StageSample> s1;
  for (const auto& c : training) s1.push_back(make_stage1_sample(c, stage1.downsample, stage1.patch));

  struct CoarseCase {
    CoarseInput in;
    LabelVolume labels;
  };
  std::vector<CoarseCase> coarse_val;
  for (const auto& c : validation) {
    if (!c.labels) throw ConfigError("validation case " + c.id + " has no labels");
    coarse_val.push_back({stage1_inputs(c, stage1.downsample), downsample(*c.labels, uniform_factor(stage1.downsample))});
  }
  Validator v1;
  if (!validation.empty()) {
    v1 = [&](UNet<float>& m) {
      double total = 0.0;
      for (const auto& cv : coarse_val) {
        const auto cls = tile_inference(m, cv.in.image, cv.in.guide, stage1.patch, opts.overlap).argmax();
        std::vector<Organ> labels(cls.size());
        for (std::size_t i = 0; i < cls.size(); ++i) labels[i] = static_cast<Organ>(cls[i]);
        total += mean_organ_dice(LabelVolume(cv.labels.dims(), cv.labels.spacing(), std::move(labels)), cv.labels);
      }
      return total / static_cast<double>(coarse_val.size());
    };
  }
  CascadeTraining out;
  out.stage1 = train_stage(s1, stage1, net, seed, init ? &init->stage1 : nullptr, v1);
  UNet<float> net1 = restore_network(out.stage1.checkpoint);

  std::vector<StageSample> s2;
  for (const auto& c : training) {
    const MaskVolume guide = stage2.guide == GuideSource::stage1 ? predict_stage1(c, net1, opts).mask
                                                                 : truth_guide(*c.labels, stage1.downsample);
    s2.push_back(make_stage2_sample(c, guide, stage2.roi_margin, stage2.patch));
  }
  Validator v2;
  if (!validation.empty()) {
    v2 = [&](UNet<float>& m) {
      double total = 0.0;
      for (const auto& c : validation) total += mean_organ_dice(predict_cascade(c, net1, m, opts), *c.labels);
      return total / static_cast<double>(validation.size());
    };
  }
  out.stage2 = train_stage(s2, stage2, net, seed + 1, init ? &init->stage2 : nullptr, v2);
  out.checkpoints = {out.stage1.checkpoint, out.stage2.checkpoint};
  return out;
}

}  // namespace dectseg
