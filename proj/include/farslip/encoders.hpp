#pragma once

#include <cctype>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "farslip/autodiff.hpp"
#include "farslip/rng.hpp"
#include "farslip/tensor.hpp"

namespace farslip {

using ParamMap = std::map<std::string, Matrix>;  // ordered: deterministic iteration
using VarMap = std::map<std::string, ad::Var>;

struct VisionEncoderConfig {
  int patch_size = 8;
  int image_size = 32;
  int depth = 2;
  int width = 32;
  int heads = 4;
  int channels = 3;
  uint64_t seed = 0;

  int head_dim() const { return width / heads; }
  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid() + 1; }

  void validate() const {
    require(width % heads == 0, "VisionEncoderConfig: width not divisible by heads");
    require(image_size % patch_size == 0, "VisionEncoderConfig: image_size not divisible by patch_size");
  }
};

struct TextEncoderConfig {
  int vocab = 512;
  int max_len = 77;
  int depth = 2;
  int width = 32;
  int heads = 4;
  uint64_t seed = 0;

  int head_dim() const { return width / heads; }

  void validate() const { require(width % heads == 0, "TextEncoderConfig: width not divisible by heads"); }
};

struct EncodedImage {
  Vector cls;
  PatchGrid patches;
};

struct EncodedText {
  Vector cls;
  bool truncated = false;
};

// Differentiable counterparts carrying tape vars.
struct EncodedImageVar {
  ad::Var cls;      // 1 x d
  ad::Var patches;  // (h*w) x d
  int h = 0, w = 0;
};

namespace detail {

inline Matrix randn(Rng& rng, int rows, int cols, double scale) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

inline void init_block(ParamMap& p, const std::string& prefix, int d, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  p[prefix + ".ln1.g"] = Matrix::Ones(1, d);
  p[prefix + ".ln1.b"] = Matrix::Zero(1, d);
  p[prefix + ".attn.wq"] = randn(rng, d, d, s);
  p[prefix + ".attn.bq"] = Matrix::Zero(1, d);
  p[prefix + ".attn.wk"] = randn(rng, d, d, s);
  p[prefix + ".attn.bk"] = Matrix::Zero(1, d);
  p[prefix + ".attn.wv"] = randn(rng, d, d, s);
  p[prefix + ".attn.bv"] = Matrix::Zero(1, d);
  p[prefix + ".attn.wo"] = randn(rng, d, d, s);
  p[prefix + ".attn.bo"] = Matrix::Zero(1, d);
  p[prefix + ".ln2.g"] = Matrix::Ones(1, d);
  p[prefix + ".ln2.b"] = Matrix::Zero(1, d);
  p[prefix + ".mlp.w1"] = randn(rng, d, 4 * d, s);
  p[prefix + ".mlp.b1"] = Matrix::Zero(1, 4 * d);
  p[prefix + ".mlp.w2"] = randn(rng, 4 * d, d, 0.5 * s);
  p[prefix + ".mlp.b2"] = Matrix::Zero(1, d);
}

// Pre-LN residual attention block: x += MHA(LN1(x)); x += MLP(LN2(x)).
inline ad::Var transformer_block(ad::Tape& tape, const VarMap& v, const std::string& prefix, ad::Var x,
                                 int heads) {
  const int d = static_cast<int>(x.val().cols());
  const int dh = d / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ad::Var xn = ad::layernorm_rows(x, v.at(prefix + ".ln1.g"), v.at(prefix + ".ln1.b"));
  ad::Var q = ad::add_rowvec(ad::matmul(xn, v.at(prefix + ".attn.wq")), v.at(prefix + ".attn.bq"));
  ad::Var k = ad::add_rowvec(ad::matmul(xn, v.at(prefix + ".attn.wk")), v.at(prefix + ".attn.bk"));
  ad::Var val = ad::add_rowvec(ad::matmul(xn, v.at(prefix + ".attn.wv")), v.at(prefix + ".attn.bv"));

  std::vector<ad::Var> head_outs;
  for (int h = 0; h < heads; ++h) {
    ad::Var qh = ad::cols(q, h * dh, dh);
    ad::Var kh = ad::cols(k, h * dh, dh);
    ad::Var vh = ad::cols(val, h * dh, dh);
    ad::Var att = ad::row_softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), att_scale));
    head_outs.push_back(ad::matmul(att, vh));
  }
  ad::Var attn_out =
      ad::add_rowvec(ad::matmul(ad::hcat(head_outs), v.at(prefix + ".attn.wo")), v.at(prefix + ".attn.bo"));
  x = ad::add(x, attn_out);

  ad::Var yn = ad::layernorm_rows(x, v.at(prefix + ".ln2.g"), v.at(prefix + ".ln2.b"));
  ad::Var h1 = ad::gelu(ad::add_rowvec(ad::matmul(yn, v.at(prefix + ".mlp.w1")), v.at(prefix + ".mlp.b1")));
  ad::Var mlp_out = ad::add_rowvec(ad::matmul(h1, v.at(prefix + ".mlp.w2")), v.at(prefix + ".mlp.b2"));
  return ad::add(x, mlp_out);
}

}  // namespace detail

// Registers every parameter on a tape; needs_grad=false detaches the
// whole encoder (frozen text tower, teacher).
inline VarMap register_params(ad::Tape& tape, const ParamMap& params, bool needs_grad) {
  VarMap v;
  for (const auto& [name, m] : params) v.emplace(name, tape.leaf(m, needs_grad));
  return v;
}

inline void collect_grads(const ad::Tape& tape, const VarMap& vars, std::map<std::string, Matrix>& grads) {
  for (const auto& [name, var] : vars) {
    const Matrix& g = tape.grad(var);
    if (g.size() == 0) continue;
    auto it = grads.find(name);
    if (it == grads.end())
      grads[name] = g;
    else
      it->second += g;
  }
}

// --- vision encoder ---------------------------------------------------------

class VisionEncoder {
 public:
  VisionEncoder() = default;
  explicit VisionEncoder(const VisionEncoderConfig& config) : config_(config) {
    config_.validate();
    Rng rng = Rng(config.seed).split("vision_init");
    const int d = config.width;
    const int pd = config.patch_size * config.patch_size * config.channels;
    const double s = 1.0 / std::sqrt(static_cast<double>(pd));
    params_["patch_embed.w"] = detail::randn(rng, pd, d, s);
    params_["patch_embed.b"] = Matrix::Zero(1, d);
    params_["cls"] = detail::randn(rng, 1, d, 0.02);
    params_["pos"] = detail::randn(rng, config.tokens(), d, 0.02);
    for (int i = 0; i < config.depth; ++i) detail::init_block(params_, "blk" + std::to_string(i), d, rng);
    params_["ln_f.g"] = Matrix::Ones(1, d);
    params_["ln_f.b"] = Matrix::Zero(1, d);
    params_["proj.w"] = detail::randn(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d)));
    params_["proj.b"] = Matrix::Zero(1, d);
  }

  const VisionEncoderConfig& config() const { return config_; }
  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }

  // Flattens image patches into a (1+g*g) x d token matrix (CLS first).
  Matrix tokenize(const Image& image) const {
    require(image.height == config_.image_size && image.width == config_.image_size &&
                image.channels == config_.channels,
            "encode_image: image size mismatch");
    const int g = config_.grid();
    const int p = config_.patch_size;
    Matrix patches(g * g, p * p * config_.channels);
    for (int py = 0; py < g; ++py)
      for (int px = 0; px < g; ++px) {
        int row = py * g + px;
        int col = 0;
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx)
            for (int c = 0; c < config_.channels; ++c)
              patches(row, col++) = image.at(py * p + dy, px * p + dx, c);
      }
    return patches;
  }

  // Full forward pass on a tape. Embedding, L residual blocks, final
  // layernorm and a shared linear projection over all tokens.
  EncodedImageVar forward(ad::Tape& tape, const VarMap& v, const Image& image) const {
    const int g = config_.grid();
    ad::Var raw = tape.constant(tokenize(image));
    ad::Var embedded = ad::add_rowvec(ad::matmul(raw, v.at("patch_embed.w")), v.at("patch_embed.b"));
    ad::Var x = ad::vcat({v.at("cls"), embedded});
    x = ad::add(x, v.at("pos"));
    for (int i = 0; i < config_.depth; ++i)
      x = detail::transformer_block(tape, v, "blk" + std::to_string(i), x, config_.heads);
    x = ad::layernorm_rows(x, v.at("ln_f.g"), v.at("ln_f.b"));
    ad::Var projected = ad::add_rowvec(ad::matmul(x, v.at("proj.w")), v.at("proj.b"));
    EncodedImageVar out;
    out.cls = ad::rows(projected, 0, 1);
    out.patches = ad::rows(projected, 1, g * g);
    out.h = out.w = g;
    return out;
  }

  EncodedImage encode(const Image& image) const {
    ad::Tape tape;
    VarMap v = register_params(tape, params_, false);
    EncodedImageVar enc = forward(tape, v, image);
    EncodedImage out;
    out.cls = enc.cls.val().row(0).transpose();
    out.patches = PatchGrid(enc.h, enc.w, config_.width);
    out.patches.features = enc.patches.val();
    return out;
  }

  // Residual-free attention at the final block: per-source self-grams
  // A_tt = softmax(t t^T / sqrt(d_h)) for t in {q,k,v}, A = A_qq+A_kk+A_vv,
  // y = Proj(A v) reusing the final block's output projection. Earlier
  // blocks run unmodified; the CLS row is dropped from the result.
  ad::Var dense_forward(ad::Tape& tape, const VarMap& v, const Image& image,
                        std::vector<Matrix>* attention_rows_out = nullptr) const {
    const int g = config_.grid();
    ad::Var raw = tape.constant(tokenize(image));
    ad::Var embedded = ad::add_rowvec(ad::matmul(raw, v.at("patch_embed.w")), v.at("patch_embed.b"));
    ad::Var x = ad::vcat({v.at("cls"), embedded});
    x = ad::add(x, v.at("pos"));
    for (int i = 0; i + 1 < config_.depth; ++i)
      x = detail::transformer_block(tape, v, "blk" + std::to_string(i), x, config_.heads);

    const std::string last = "blk" + std::to_string(config_.depth - 1);
    const int d = config_.width;
    const int dh = config_.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    ad::Var xn = ad::layernorm_rows(x, v.at(last + ".ln1.g"), v.at(last + ".ln1.b"));
    ad::Var q = ad::add_rowvec(ad::matmul(xn, v.at(last + ".attn.wq")), v.at(last + ".attn.bq"));
    ad::Var k = ad::add_rowvec(ad::matmul(xn, v.at(last + ".attn.wk")), v.at(last + ".attn.bk"));
    ad::Var val = ad::add_rowvec(ad::matmul(xn, v.at(last + ".attn.wv")), v.at(last + ".attn.bv"));

    std::vector<ad::Var> head_outs;
    for (int h = 0; h < config_.heads; ++h) {
      ad::Var qh = ad::cols(q, h * dh, dh);
      ad::Var kh = ad::cols(k, h * dh, dh);
      ad::Var vh = ad::cols(val, h * dh, dh);
      ad::Var a_qq = ad::row_softmax(ad::scale(ad::matmul(qh, ad::transpose(qh)), att_scale));
      ad::Var a_kk = ad::row_softmax(ad::scale(ad::matmul(kh, ad::transpose(kh)), att_scale));
      ad::Var a_vv = ad::row_softmax(ad::scale(ad::matmul(vh, ad::transpose(vh)), att_scale));
      if (attention_rows_out) {
        attention_rows_out->push_back(a_qq.val());
        attention_rows_out->push_back(a_kk.val());
        attention_rows_out->push_back(a_vv.val());
      }
      ad::Var a = ad::add(ad::add(a_qq, a_kk), a_vv);
      head_outs.push_back(ad::matmul(a, vh));
    }
    ad::Var y = ad::add_rowvec(ad::matmul(ad::hcat(head_outs), v.at(last + ".attn.wo")), v.at(last + ".attn.bo"));
    y = ad::layernorm_rows(y, v.at("ln_f.g"), v.at("ln_f.b"));
    y = ad::add_rowvec(ad::matmul(y, v.at("proj.w")), v.at("proj.b"));
    (void)d;
    return ad::rows(y, 1, g * g);  // discard the class embedding
  }

  PatchGrid dense_features(const Image& image, std::vector<Matrix>* attention_rows_out = nullptr) const {
    ad::Tape tape;
    VarMap v = register_params(tape, params_, false);
    ad::Var y = dense_forward(tape, v, image, attention_rows_out);
    PatchGrid grid(config_.grid(), config_.grid(), config_.width);
    grid.features = y.val();
    return grid;
  }

 private:
  VisionEncoderConfig config_;
  ParamMap params_;
};

inline PatchGrid dense_features(const VisionEncoder& encoder, const Image& image) {
  return encoder.dense_features(image);
}

// --- text encoder ------------------------------------------------------

// Word-level toy tokenizer: lowercase alnum runs hashed into the vocab.
inline std::vector<int> tokenize_text(const std::string& text, int vocab) {
  std::vector<int> ids;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    uint64_t h = 1469598103934665603ull;
    for (char c : word) {
      h ^= static_cast<uint8_t>(c);
      h *= 1099511628211ull;
    }
    ids.push_back(1 + static_cast<int>(h % static_cast<uint64_t>(vocab - 1)));
    word.clear();
  };
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c)))
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    else
      flush();
  }
  flush();
  return ids;
}

class TextEncoder {
 public:
  TextEncoder() = default;
  explicit TextEncoder(const TextEncoderConfig& config) : config_(config) {
    config_.validate();
    Rng rng = Rng(config.seed).split("text_init");
    const int d = config.width;
    params_["tok_embed"] = detail::randn(rng, config.vocab, d, 0.02);
    params_["pos"] = detail::randn(rng, config.max_len, d, 0.02);
    for (int i = 0; i < config.depth; ++i) detail::init_block(params_, "blk" + std::to_string(i), d, rng);
    params_["ln_f.g"] = Matrix::Ones(1, d);
    params_["ln_f.b"] = Matrix::Zero(1, d);
    params_["proj.w"] = detail::randn(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d)));
    params_["proj.b"] = Matrix::Zero(1, d);
  }

  const TextEncoderConfig& config() const { return config_; }
  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }
  int truncation_warnings() const { return truncation_warnings_; }

  // Sequence is [CLS](token id 0) + word tokens, truncated to max_len.
  std::vector<int> prepare(const std::string& text, bool* truncated = nullptr) const {
    std::vector<int> ids = tokenize_text(text, config_.vocab);
    require(!ids.empty(), "encode_text: empty string after tokenization");
    bool trunc = static_cast<int>(ids.size()) + 1 > config_.max_len;
    if (trunc) ids.resize(config_.max_len - 1);
    if (truncated) *truncated = trunc;
    std::vector<int> seq;
    seq.push_back(0);
    seq.insert(seq.end(), ids.begin(), ids.end());
    return seq;
  }

  ad::Var forward(ad::Tape& tape, const VarMap& v, const std::string& text, bool* truncated = nullptr) const {
    std::vector<int> seq = prepare(text, truncated);
    ad::Var x = ad::gather_rows(v.at("tok_embed"), seq);
    std::vector<int> pos_idx(seq.size());
    for (size_t i = 0; i < seq.size(); ++i) pos_idx[i] = static_cast<int>(i);
    x = ad::add(x, ad::gather_rows(v.at("pos"), pos_idx));
    for (int i = 0; i < config_.depth; ++i)
      x = detail::transformer_block(tape, v, "blk" + std::to_string(i), x, config_.heads);
    x = ad::layernorm_rows(x, v.at("ln_f.g"), v.at("ln_f.b"));
    ad::Var projected = ad::add_rowvec(ad::matmul(x, v.at("proj.w")), v.at("proj.b"));
    return ad::rows(projected, 0, 1);  // CLS position
  }

  EncodedText encode(const std::string& text) const {
    ad::Tape tape;
    VarMap v = register_params(tape, params_, false);
    bool truncated = false;
    ad::Var cls = forward(tape, v, text, &truncated);
    if (truncated) ++truncation_warnings_;
    EncodedText out;
    out.cls = cls.val().row(0).transpose();
    out.truncated = truncated;
    return out;
  }

  // Swaps in an extended positional table and raises max_len accordingly.
  void set_positional_table(Matrix table) {
    config_.max_len = static_cast<int>(table.rows());
    params_["pos"] = std::move(table);
  }

 private:
  TextEncoderConfig config_;
  ParamMap params_;
  mutable int truncation_warnings_ = 0;
};

inline EncodedImage encode_image(const VisionEncoder& encoder, const Image& image) { return encoder.encode(image); }
inline EncodedText encode_text(const TextEncoder& encoder, const std::string& text) { return encoder.encode(text); }

// --- long-text positional extension ---------------------------------------

// Long-CLIP style stretch: rows 0..19 kept verbatim, the remaining rows
// produced by 4x linear interpolation along the position axis.
inline Matrix extend_positional_embeddings(const Matrix& table, int target_len = 248) {
  const int src_len = static_cast<int>(table.rows());
  require(target_len >= src_len, "extend_positional_embeddings: target shorter than source");
  const int keep = std::min(20, src_len);
  Matrix out(target_len, table.cols());
  out.topRows(keep) = table.topRows(keep);
  for (int i = keep; i < target_len; ++i) {
    double s = keep + (i - keep) / 4.0;
    int lo = static_cast<int>(std::floor(s));
    int hi = std::min(lo + 1, src_len - 1);
    lo = std::min(lo, src_len - 1);
    double frac = s - std::floor(s);
    out.row(i) = (1.0 - frac) * table.row(lo) + frac * table.row(hi);
  }
  return out;
}

// --- similarity --------------------------------------------------------------

inline double similarity(const Vector& a, const Vector& b) {
  double na = a.norm(), nb = b.norm();
  require(na > 1e-12 && nb > 1e-12, "similarity: zero vector");
  return a.dot(b) / (na * nb);
}

// --- teacher-student bundle --------------------------------------------------

enum class TeacherStrategy { frozen, ema, online };

inline const char* to_string(TeacherStrategy s) {
  switch (s) {
    case TeacherStrategy::frozen: return "frozen";
    case TeacherStrategy::ema: return "ema";
    case TeacherStrategy::online: return "online";
  }
  return "?";
}

inline TeacherStrategy teacher_strategy_from_string(const std::string& s) {
  if (s == "frozen") return TeacherStrategy::frozen;
  if (s == "ema") return TeacherStrategy::ema;
  if (s == "online") return TeacherStrategy::online;
  throw std::invalid_argument("unknown teacher strategy: " + s);
}

struct TeacherStudentBundle {
  VisionEncoder student;
  VisionEncoder teacher_storage;  // unused under online (teacher aliases student)
  TextEncoder text;
  TeacherStrategy strategy = TeacherStrategy::ema;
  double ema_momentum = 0.99;
  bool text_frozen = false;
  Matrix log_temp;  // 1x1, init log(1/0.07)

  static constexpr double kMinTemperature = 0.01;

  TeacherStudentBundle() { log_temp = Matrix::Constant(1, 1, std::log(1.0 / 0.07)); }

  TeacherStudentBundle(const VisionEncoderConfig& vcfg, const TextEncoderConfig& tcfg,
                       TeacherStrategy strat = TeacherStrategy::ema, double momentum = 0.99)
      : student(vcfg), text(tcfg), strategy(strat), ema_momentum(momentum) {
    log_temp = Matrix::Constant(1, 1, std::log(1.0 / 0.07));
    if (strategy != TeacherStrategy::online) teacher_storage = student;
  }

  const VisionEncoder& teacher() const {
    return strategy == TeacherStrategy::online ? student : teacher_storage;
  }

  double temperature() const { return std::max(std::exp(log_temp(0, 0)), kMinTemperature); }

  // Effective tau on the tape, clamped from below.
  ad::Var temperature_var(ad::Tape& tape, ad::Var log_temp_var) const {
    return ad::clamp_min(ad::cwise_exp(log_temp_var), kMinTemperature);
  }
};

// Once per optimizer step: frozen is a no-op, online needs no copy, ema
// blends teacher <- mu*teacher + (1-mu)*student parameter-wise.
inline void update_teacher(TeacherStudentBundle& bundle) {
  if (bundle.strategy != TeacherStrategy::ema) return;
  const double mu = bundle.ema_momentum;
  for (auto& [name, m] : bundle.teacher_storage.params())
    m = mu * m + (1.0 - mu) * bundle.student.params().at(name);
}

}  // namespace farslip
