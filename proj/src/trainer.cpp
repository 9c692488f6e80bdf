#include "ddrn/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <ostream>

namespace ddrn {

namespace {

const char* const kNeckNames[2] = {"bn.local", "bn.global"};

Tensor<float> vec_tensor(const std::vector<float>& v) { return Tensor<float>({v.size()}, v); }

const Tensor<float>& require_tensor(const Checkpoint& ckpt, const std::string& name, const Shape& shape) {
  auto it = ckpt.tensors.find(name);
  if (it == ckpt.tensors.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
  if (it->second.shape() != shape) {
    throw CheckpointError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                          ", model expects " + shape_str(shape));
  }
  return it->second;
}

}  // namespace

template <typename T>
AdamState make_adam_state(const Model<T>& model) {
  AdamState s;
  for (const auto& p : model.params()) {
    s.m.emplace_back(p.value.numel(), 0.0f);
    s.v.emplace_back(p.value.numel(), 0.0f);
  }
  return s;
}

template <typename T>
void adamw_step(Model<T>& model, AdamState& state, const TrainConfig& cfg, double lr) {
  auto& params = model.params();
  if (state.m.size() != params.size()) throw std::logic_error("adamw_step: optimizer state does not match model");
  const std::uint64_t t = state.step + 1;
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
  const float b1 = static_cast<float>(cfg.adam_beta1), b2 = static_cast<float>(cfg.adam_beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& w = params[i].value;
    if (!w.has_grad()) continue;
    const auto& g = w.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double decay = params[i].decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) {
      const float gk = static_cast<float>(g[k]);
      m[k] = b1 * m[k] + (1.0f - b1) * gk;
      v[k] = b2 * v[k] + (1.0f - b2) * gk * gk;
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      double wk = static_cast<double>(w[k]);
      wk -= decay * wk;
      wk -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
      w[k] = static_cast<T>(wk);
    }
  }
  state.step = t;
}

double learning_rate(const TrainConfig& cfg, std::uint64_t step, std::uint64_t total_steps) {
  if (total_steps == 0) return cfg.lr;
  const auto warm = static_cast<std::uint64_t>(std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warm) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double span = static_cast<double>(std::max<std::uint64_t>(1, total_steps - warm));
  const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
LossBreakdown<T> total_loss(Model<T>& model, const std::vector<Var<T>>& p, const typename Model<T>::Forward& fwd,
                            const std::vector<int>& labels, const TrainConfig& cfg) {
  const HeadOutputs<T>& h = fwd.heads;
  const T smoothing = static_cast<T>(cfg.id_smoothing);
  const T margin = static_cast<T>(cfg.triplet_margin);
  validate_triplet_batch(labels);

  Var<T> hs = cfg.hs_arcface
                  ? hs_arcface_loss(h.global_feat, labels, p[model.index_of("hs.centers")], model.hierarchy(),
                                    ArcMarginParams{cfg.arc_margin, cfg.arc_scale})
                  : id_loss(matmul_nt(h.global_feat, p[model.index_of("head.global.weight")]), labels, smoothing);
  Var<T> id = id_loss(h.id_logits, labels, smoothing);
  Var<T> tri = add(triplet_loss(h.global_pre, labels, margin), triplet_loss(h.local_pre, labels, margin));

  LossBreakdown<T> out;
  out.hs = static_cast<double>(hs.item());
  out.id = static_cast<double>(id.item());
  out.tri = static_cast<double>(tri.item());
  out.total = add(add(scale(hs, static_cast<T>(cfg.lambda_hs)), scale(id, static_cast<T>(cfg.lambda_id))),
                  scale(tri, static_cast<T>(cfg.lambda_tri)));
  if (model.config().embedding_space && cfg.orthogonal_loss) {
    Var<T> orth = orthogonal_loss(p[model.index_of("codebook")]);
    out.orth = static_cast<double>(orth.item());
    out.total = add(out.total, scale(orth, static_cast<T>(cfg.lambda_orth)));
  }
  out.total_value = static_cast<double>(out.total.item());
  return out;
}

std::string format_metrics(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f", m.epoch, m.loss_total, m.loss_hs,
                m.loss_id, m.loss_tri, m.loss_orth, m.mAP, m.rank1);
  return buf;
}

SubSeeds SubSeeds::from(const RunConfig& cfg) {
  const std::uint64_t master = cfg.train.seed;
  SubSeeds s;
  s.data = cfg.synth.data_seed != 0 ? cfg.synth.data_seed : derive_seed(master, "data");
  s.init = derive_seed(master, "init");
  s.gumbel = derive_seed(master, "gumbel");
  s.erasing = derive_seed(master, "erasing");
  s.sampler = derive_seed(master, "sampler");
  return s;
}

EvalResult evaluate_split(Model<float>& model, const std::vector<Sample>& query, const std::vector<Sample>& gallery) {
  auto embed = [&](const std::vector<Sample>& set) {
    std::vector<const Tensor<float>*> imgs;
    for (const auto& s : set) imgs.push_back(&s.image);
    return model.inference_embedding(stack_images(imgs));
  };
  RetrievalRun run;
  run.query = embed(query);
  run.gallery = embed(gallery);
  for (const auto& s : query) {
    run.query_ids.push_back(s.id);
    run.query_cams.push_back(s.camera);
  }
  for (const auto& s : gallery) {
    run.gallery_ids.push_back(s.id);
    run.gallery_cams.push_back(s.camera);
  }
  return evaluate(run);
}

Checkpoint make_checkpoint(const Model<float>& model, const RunConfig& cfg, std::uint64_t step, std::size_t epoch,
                           const AdamState* adam) {
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.step = step;
  ckpt.epoch = epoch;
  const auto& params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<float> value(params[i].value.shape(), params[i].value.storage());
    ckpt.tensors.emplace(params[i].name, std::move(value));
    if (adam != nullptr) {
      ckpt.tensors.emplace("adam.m." + params[i].name, Tensor<float>(params[i].value.shape(), adam->m[i]));
      ckpt.tensors.emplace("adam.v." + params[i].name, Tensor<float>(params[i].value.shape(), adam->v[i]));
    }
  }
  for (int global = 0; global < 2; ++global) {
    const auto& stats = model.neck_stats(global == 1);
    ckpt.tensors.emplace(std::string(kNeckNames[global]) + ".running_mean", vec_tensor(stats.running_mean));
    ckpt.tensors.emplace(std::string(kNeckNames[global]) + ".running_var", vec_tensor(stats.running_var));
  }
  return ckpt;
}

Model<float> restore_model(const Checkpoint& ckpt) {
  ckpt.config.model.validate();
  Rng unused(0);
  Model<float> model(ckpt.config.model, unused);
  for (auto& p : model.params()) {
    const Tensor<float>& t = require_tensor(ckpt, p.name, p.value.shape());
    p.value.storage() = t.storage();
  }
  for (int global = 0; global < 2; ++global) {
    auto& stats = model.neck_stats(global == 1);
    const Shape shape{stats.running_mean.size()};
    stats.running_mean = require_tensor(ckpt, std::string(kNeckNames[global]) + ".running_mean", shape).storage();
    stats.running_var = require_tensor(ckpt, std::string(kNeckNames[global]) + ".running_var", shape).storage();
  }
  return model;
}

AdamState restore_adam(const Checkpoint& ckpt, const Model<float>& model) {
  AdamState s;
  for (const auto& p : model.params()) {
    s.m.push_back(require_tensor(ckpt, "adam.m." + p.name, p.value.shape()).storage());
    s.v.push_back(require_tensor(ckpt, "adam.v." + p.name, p.value.shape()).storage());
  }
  s.step = ckpt.step;
  return s;
}

TrainResult train(const RunConfig& cfg, const SynthDataset& data, const TrainHooks& hooks, const Checkpoint* resume) {
  cfg.validate();
  const SubSeeds seeds = SubSeeds::from(cfg);
  Rng init_rng(seeds.init);
  TrainResult result{Model<float>(cfg.model, init_rng), {}, 0, 0, {}};
  result.adam = make_adam_state(result.model);
  if (resume != nullptr) {
    if (format_config(resume->config) != format_config(cfg)) {
      throw ConfigError("resume checkpoint was written with a different configuration");
    }
    result.model = restore_model(*resume);
    result.adam = restore_adam(*resume, result.model);
    result.step = resume->step;
    result.epochs_done = resume->epoch;
  }
  Model<float>& model = result.model;

  std::vector<int> labels;
  for (const auto& s : data.train) labels.push_back(s.id);
  std::vector<std::vector<std::vector<std::size_t>>> plans;
  std::uint64_t total_steps = 0;
  for (std::size_t e = 0; e < cfg.train.epochs; ++e) {
    Rng r(splitmix64(seeds.sampler + e));
    plans.push_back(pk_batches(labels, cfg.train.ids_per_batch, cfg.train.instances_per_id, r));
    total_steps += plans.back().size();
  }

  AugmentOptions aug;
  aug.pad = cfg.train.pad;
  aug.out_height = cfg.model.image_height;
  aug.out_width = cfg.model.image_width;
  aug.erasing_prob = cfg.train.erasing_prob;

  model.set_requires_grad(true);
  for (std::size_t e = result.epochs_done; e < cfg.train.epochs; ++e) {
    EpochMetrics em;
    em.epoch = e + 1;
    for (const auto& batch : plans[e]) {
      Rng arng(splitmix64(seeds.erasing + result.step));
      std::vector<Tensor<float>> augmented;
      augmented.reserve(batch.size());
      std::vector<int> y;
      for (std::size_t idx : batch) {
        augmented.push_back(augment(data.train[idx].image, arng, aug));
        y.push_back(data.train[idx].id);
      }
      std::vector<const Tensor<float>*> ptrs;
      for (const auto& t : augmented) ptrs.push_back(&t);
      const Tensor<float> images = stack_images(ptrs);

      Tape<float> tape;
      const std::vector<Var<float>> p = model.bind(tape);
      GumbelNoise noise = GumbelNoise::sampled(splitmix64(seeds.gumbel + result.step));
      LossBreakdown<float> loss;
      try {
        const auto fwd = model.forward(p, images, true, noise);
        loss = total_loss(model, p, fwd, y, cfg.train);
      } catch (const NumericError& err) {
        throw NonFiniteLossError("non-finite value at step " + std::to_string(result.step) + ": " + err.what());
      }
      model.zero_grad();
      tape.backward(loss.total);
      adamw_step(model, result.adam, cfg.train, learning_rate(cfg.train, result.step, total_steps));
      ++result.step;
      em.loss_total += loss.total_value;
      em.loss_hs += loss.hs;
      em.loss_id += loss.id;
      em.loss_tri += loss.tri;
      em.loss_orth += loss.orth;
      if (hooks.on_step) hooks.on_step(result.step, loss.total_value);
    }
    const double n = static_cast<double>(std::max<std::size_t>(1, plans[e].size()));
    em.loss_total /= n;
    em.loss_hs /= n;
    em.loss_id /= n;
    em.loss_tri /= n;
    em.loss_orth /= n;
    const bool last = e + 1 == cfg.train.epochs;
    if (last || (cfg.train.eval_every > 0 && (e + 1) % cfg.train.eval_every == 0)) {
      const EvalResult er = evaluate_split(model, data.query, data.gallery);
      em.mAP = er.mAP;
      em.rank1 = er.rank(1);
    } else {
      em.mAP = em.rank1 = std::numeric_limits<double>::quiet_NaN();
    }
    result.epochs_done = e + 1;
    result.metrics.push_back(em);
    if (hooks.log != nullptr) *hooks.log << format_metrics(em) << '\n' << std::flush;
    if (hooks.on_epoch) hooks.on_epoch(em);
    if (hooks.on_epoch_state) hooks.on_epoch_state(model, result.adam, result.step, result.epochs_done);
  }
  model.set_requires_grad(false);
  model.zero_grad();
  return result;
}

template AdamState make_adam_state(const Model<float>&);
template AdamState make_adam_state(const Model<double>&);
template void adamw_step(Model<float>&, AdamState&, const TrainConfig&, double);
template void adamw_step(Model<double>&, AdamState&, const TrainConfig&, double);
template LossBreakdown<float> total_loss(Model<float>&, const std::vector<Var<float>>&,
                                         const Model<float>::Forward&, const std::vector<int>&, const TrainConfig&);
template LossBreakdown<double> total_loss(Model<double>&, const std::vector<Var<double>>&,
                                          const Model<double>::Forward&, const std::vector<int>&, const TrainConfig&);

}  // namespace ddrn
