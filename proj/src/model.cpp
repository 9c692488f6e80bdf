#include "ddrn/model.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

namespace ddrn {

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double std, Rng& rng) {
  std::normal_distribution<double> n(0.0, std);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(n(rng));
  return t;
}

constexpr double kInitStd = 0.02;
constexpr double kHeadInitStd = 0.001;
constexpr std::size_t kEmbedChunk = 64;

}  // namespace

template <typename T>
std::vector<std::size_t> TokenSequence<T>::cls_rows(std::size_t which) const {
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) rows[b] = b * length + which;
  return rows;
}

template <typename T>
std::vector<std::size_t> TokenSequence<T>::patch_rows() const {
  std::vector<std::size_t> rows;
  rows.reserve(batch * num_patches());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 2; t < length; ++t) rows.push_back(b * length + t);
  }
  return rows;
}

template <typename T>
Tensor<T> im2col(const Tensor<T>& images, const ModelConfig& c) {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != c.image_height || images.dim(3) != c.image_width) {
    throw ShapeError("expected images [B×3×" + std::to_string(c.image_height) + "×" + std::to_string(c.image_width) +
                     "], got " + shape_str(images.shape()));
  }
  const std::size_t batch = images.dim(0), h = c.image_height, w = c.image_width, p = c.patch_size;
  const std::size_t ny = c.patches_y(), nx = c.patches_x();
  Tensor<T> out({batch * ny * nx, c.patch_dim()});
  auto src = images.data();
  T* dst = out.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t py = 0; py < ny; ++py) {
      for (std::size_t px = 0; px < nx; ++px) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
          for (std::size_t i = 0; i < p; ++i) {
            const T* row = src.data() + ((b * 3 + ch) * h + py * c.stride + i) * w + px * c.stride;
            dst = std::copy_n(row, p, dst);
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
std::size_t Model<T>::add_param(std::string name, Tensor<T> value, bool decay) {
  params_.push_back({std::move(name), std::move(value), decay});
  return params_.size() - 1;
}

template <typename T>
Model<T>::Model(const ModelConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.embed_dim, hidden = d * config_.mlp_ratio;
  patch_w_ = add_param("patch.weight", normal_tensor<T>({d, config_.patch_dim()}, kInitStd, rng), true);
  patch_b_ = add_param("patch.bias", Tensor<T>({d}), false);
  cls_global_ = add_param("cls.global", normal_tensor<T>({1, d}, kInitStd, rng), false);
  cls_local_ = add_param("cls.local", normal_tensor<T>({1, d}, kInitStd, rng), false);
  pos_ = add_param("pos", normal_tensor<T>({config_.seq_len(), d}, kInitStd, rng), false);
  for (std::size_t i = 0; i < config_.num_blocks; ++i) {
    const std::string pre = "blocks." + std::to_string(i) + ".";
    BlockIndex bi{};
    bi.ln1_gain = add_param(pre + "ln1.gain", Tensor<T>({d}, T(1)), false);
    bi.ln1_bias = add_param(pre + "ln1.bias", Tensor<T>({d}), false);
    bi.q_w = add_param(pre + "attn.q.weight", normal_tensor<T>({d, d}, kInitStd, rng), true);
    bi.q_b = add_param(pre + "attn.q.bias", Tensor<T>({d}), false);
    bi.k_w = add_param(pre + "attn.k.weight", normal_tensor<T>({d, d}, kInitStd, rng), true);
    bi.k_b = add_param(pre + "attn.k.bias", Tensor<T>({d}), false);
    bi.v_w = add_param(pre + "attn.v.weight", normal_tensor<T>({d, d}, kInitStd, rng), true);
    bi.v_b = add_param(pre + "attn.v.bias", Tensor<T>({d}), false);
    bi.proj_w = add_param(pre + "attn.proj.weight", normal_tensor<T>({d, d}, kInitStd, rng), true);
    bi.proj_b = add_param(pre + "attn.proj.bias", Tensor<T>({d}), false);
    bi.ln2_gain = add_param(pre + "ln2.gain", Tensor<T>({d}, T(1)), false);
    bi.ln2_bias = add_param(pre + "ln2.bias", Tensor<T>({d}), false);
    bi.fc1_w = add_param(pre + "mlp.fc1.weight", normal_tensor<T>({hidden, d}, kInitStd, rng), true);
    bi.fc1_b = add_param(pre + "mlp.fc1.bias", Tensor<T>({hidden}), false);
    bi.fc2_w = add_param(pre + "mlp.fc2.weight", normal_tensor<T>({d, hidden}, kInitStd, rng), true);
    bi.fc2_b = add_param(pre + "mlp.fc2.bias", Tensor<T>({d}), false);
    blocks_.push_back(bi);
  }
  norm_gain_ = add_param("norm.gain", Tensor<T>({d}, T(1)), false);
  norm_bias_ = add_param("norm.bias", Tensor<T>({d}), false);
  codebook_ = add_param("codebook", init_codebook<T>(config_.codebook_size, d, rng), false);
  hs_centers_ = add_param("hs.centers", normal_tensor<T>({hierarchy().total_rows(), d}, 1.0, rng), false);
  neck_global_gain_ = add_param("neck.global.gain", Tensor<T>({d}, T(1)), false);
  neck_local_gain_ = add_param("neck.local.gain", Tensor<T>({d}, T(1)), false);
  head_local_ = add_param("head.local.weight", normal_tensor<T>({config_.num_ids, d}, kHeadInitStd, rng), true);
  head_global_ = add_param("head.global.weight", normal_tensor<T>({config_.num_ids, d}, kHeadInitStd, rng), true);
  neck_global_ = BatchNormStats<T>(d);
  neck_local_ = BatchNormStats<T>(d);
}

template <typename T>
std::size_t Model<T>::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

template <typename T>
Parameter<T>& Model<T>::param(const std::string& name) {
  return params_[index_of(name)];
}

template <typename T>
const Parameter<T>& Model<T>::param(const std::string& name) const {
  return params_[index_of(name)];
}

template <typename T>
void Model<T>::set_requires_grad(bool on) {
  for (auto& p : params_) p.value.set_requires_grad(on);
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.value.clear_grad();
}

template <typename T>
std::vector<Var<T>> Model<T>::bind(Tape<T>& tape) {
  std::vector<Var<T>> vars;
  vars.reserve(params_.size());
  for (auto& p : params_) vars.push_back(tape.leaf(p.value));
  return vars;
}

template <typename T>
TokenSequence<T> Model<T>::patch_embed(const std::vector<Var<T>>& p, const Tensor<T>& images) const {
  Tape<T>& tape = p[patch_w_].tape();
  const std::size_t batch = images.dim(0), np = config_.num_patches(), len = config_.seq_len();
  Var<T> patches = linear(tape.constant(im2col(images, config_)), p[patch_w_], p[patch_b_]);
  Var<T> stacked = concat_rows<T>({p[cls_global_], p[cls_local_], patches});
  std::vector<std::size_t> order(batch * len), pos_index(batch * len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      order[b * len + t] = t < 2 ? t : 2 + b * np + (t - 2);
      pos_index[b * len + t] = t;
    }
  }
  TokenSequence<T> seq;
  seq.tokens = add(gather_rows(stacked, order), gather_rows(p[pos_], pos_index));
  seq.batch = batch;
  seq.length = len;
  return seq;
}

template <typename T>
TokenSequence<T> Model<T>::run_blocks(const std::vector<Var<T>>& p, const TokenSequence<T>& x, std::size_t first,
                                      std::size_t last) const {
  TokenSequence<T> out = x;
  for (std::size_t i = first; i < last; ++i) {
    const BlockIndex& b = blocks_[i];
    AttentionParams<T> ap{p[b.q_w], p[b.q_b], p[b.k_w], p[b.k_b], p[b.v_w], p[b.v_b], p[b.proj_w], p[b.proj_b]};
    Var<T> h = layer_norm(out.tokens, p[b.ln1_gain], p[b.ln1_bias]);
    Var<T> y = add(out.tokens, multi_head_attention(h, ap, x.batch, x.length, config_.heads));
    Var<T> m = layer_norm(y, p[b.ln2_gain], p[b.ln2_bias]);
    m = linear(gelu(linear(m, p[b.fc1_w], p[b.fc1_b])), p[b.fc2_w], p[b.fc2_b]);
    out.tokens = add(y, m);
  }
  return out;
}

template <typename T>
TokenSequence<T> Model<T>::encode(const std::vector<Var<T>>& p, const TokenSequence<T>& x) const {
  return run_blocks(p, x, 0, config_.num_blocks - 1);
}

template <typename T>
TokenSequence<T> Model<T>::decode(const std::vector<Var<T>>& p, const TokenSequence<T>& x) const {
  return run_blocks(p, x, config_.num_blocks - 1, config_.num_blocks);
}

template <typename T>
TokenSequence<T> Model<T>::reconstruct(const std::vector<Var<T>>& p, const TokenSequence<T>& x, GumbelNoise& noise,
                                       QuantizeResult<T>* quant) const {
  QuantizeOptions opt;
  opt.tau = config_.tau;
  opt.softmax_first = config_.resample_softmax_first;
  QuantizeResult<T> q = quantize_st(gather_rows(x.tokens, x.patch_rows()), p[codebook_], opt, noise);
  const std::size_t total = x.batch * x.length, np = x.num_patches();
  std::vector<std::size_t> order(total);
  for (std::size_t b = 0; b < x.batch; ++b) {
    for (std::size_t t = 0; t < x.length; ++t) {
      order[b * x.length + t] = t < 2 ? b * x.length + t : total + b * np + (t - 2);
    }
  }
  TokenSequence<T> out = x;
  out.tokens = gather_rows(concat_rows<T>({x.tokens, q.quantized}), order);
  if (quant != nullptr) *quant = std::move(q);
  return out;
}

template <typename T>
HeadOutputs<T> Model<T>::heads(const std::vector<Var<T>>& p, const TokenSequence<T>& x, bool training) {
  HeadOutputs<T> h;
  Var<T> normed = layer_norm(x.tokens, p[norm_gain_], p[norm_bias_]);
  h.global_pre = gather_rows(normed, x.cls_rows(0));
  h.local_pre = add(gather_rows(normed, x.cls_rows(1)), mean_pool(gather_rows(normed, x.patch_rows()), x.batch));
  h.global_feat = batch_norm_1d(h.global_pre, p[neck_global_gain_], Var<T>(), neck_global_, training);
  h.local_feat = batch_norm_1d(h.local_pre, p[neck_local_gain_], Var<T>(), neck_local_, training);
  h.id_logits = matmul_nt(h.local_feat, p[head_local_]);
  return h;
}

template <typename T>
typename Model<T>::Forward Model<T>::forward(const std::vector<Var<T>>& p, const Tensor<T>& images, bool training,
                                             GumbelNoise& noise) {
  Forward f;
  TokenSequence<T> seq = encode(p, patch_embed(p, images));
  if (config_.embedding_space) seq = reconstruct(p, seq, noise, &f.quant);
  f.decoded = decode(p, seq);
  f.heads = heads(p, f.decoded, training);
  return f;
}

template <typename T>
Tensor<T> Model<T>::inference_embedding(const Tensor<T>& images) {
  if (images.rank() != 4) throw ShapeError("inference_embedding: expected [B×3×H×W]");
  const std::size_t n = images.dim(0), per = images.numel() / n, d = config_.embed_dim;
  Tensor<T> out({n, 2 * d});
  for (std::size_t start = 0; start < n; start += kEmbedChunk) {
    const std::size_t count = std::min(kEmbedChunk, n - start);
    Shape shape = images.shape();
    shape[0] = count;
    Tensor<T> chunk(shape, std::vector<T>(images.data().begin() + start * per,
                                          images.data().begin() + (start + count) * per));
    Tape<T> tape;
    std::vector<Var<T>> p;
    p.reserve(params_.size());
    for (const auto& param : params_) p.push_back(tape.view(param.value));
    GumbelNoise noise = GumbelNoise::zero();
    Forward f = forward(p, chunk, false, noise);
    Var<T> desc = l2_normalize_rows(concat_cols<T>({f.heads.global_feat, f.heads.local_feat}));
    std::copy(desc.value().begin(), desc.value().end(), out.data().begin() + start * 2 * d);
  }
  return out;
}

template struct TokenSequence<float>;
template struct TokenSequence<double>;
template class Model<float>;
template class Model<double>;
template Tensor<float> im2col(const Tensor<float>&, const ModelConfig&);
template Tensor<double> im2col(const Tensor<double>&, const ModelConfig&);

}  // namespace ddrn
