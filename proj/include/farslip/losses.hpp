#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "farslip/autodiff.hpp"
#include "farslip/tensor.hpp"

namespace farslip {

struct LossWeights {
  double w_glo = 1.0;
  double w_loc = 1.0;
  double w_dis = 0.1;

  void validate() const { require(w_glo >= 0 && w_loc >= 0 && w_dis >= 0, "LossWeights: negative weight"); }
};

enum class TrainStage { s1, s2 };

inline const char* to_string(TrainStage s) { return s == TrainStage::s1 ? "s1" : "s2"; }
inline TrainStage stage_from_string(const std::string& s) {
  if (s == "s1") return TrainStage::s1;
  if (s == "s2") return TrainStage::s2;
  throw std::invalid_argument("unknown stage: " + s);
}

namespace detail {

inline void check_finite(const Matrix& m, const char* what) {
  require(m.allFinite(), std::string(what) + ": non-finite input");
}

inline ad::Var cosine_logits(ad::Var a, ad::Var b, ad::Var tau) {
  ad::Var an = ad::l2_normalize_rows(a);
  ad::Var bn = ad::l2_normalize_rows(b);
  ad::Var sim = ad::matmul(an, ad::transpose(bn));
  return ad::scale_by(sim, ad::cwise_reciprocal(tau));
}

// Mean over rows of (logsumexp(row) - diagonal): the InfoNCE direction.
inline ad::Var infonce_direction(ad::Var logits) {
  ad::Var lse = ad::logsumexp_rows(logits);
  return ad::mean_all(ad::sub(lse, ad::diagonal(logits)));
}

}  // namespace detail

// Symmetric InfoNCE over N matched image/text CLS embeddings (rows are
// L2-normalized internally; tau is the 1x1 temperature).
inline ad::Var loss_glo(ad::Var v, ad::Var t, ad::Var tau) {
  require(v.val().rows() >= 2 && v.val().rows() == t.val().rows(), "loss_glo: need N >= 2 matched pairs");
  require(tau.scalar() > 0.0, "loss_glo: tau must be positive");
  detail::check_finite(v.val(), "loss_glo");
  detail::check_finite(t.val(), "loss_glo");
  ad::Var logits = detail::cosine_logits(v, t, tau);
  ad::Var i2t = detail::infonce_direction(logits);
  ad::Var t2i = detail::infonce_direction(ad::transpose(logits));
  return ad::scale(ad::add(i2t, t2i), 0.5);
}

// Multi-positive contrastive loss over M region/category pairs. The
// positive sets come from category equality and are used symmetrically
// for both directions; duplicate category texts stay in the denominator.
inline ad::Var loss_loc(ad::Var vr, ad::Var tc, const std::vector<std::vector<int>>& positives, ad::Var tau) {
  const int m = static_cast<int>(vr.val().rows());
  require(m >= 2 && tc.val().rows() == m, "loss_loc: need M >= 2 matched pairs");
  require(static_cast<int>(positives.size()) == m, "loss_loc: positive sets size mismatch");
  require(tau.scalar() > 0.0, "loss_loc: tau must be positive");
  detail::check_finite(vr.val(), "loss_loc");
  detail::check_finite(tc.val(), "loss_loc");
  for (int i = 0; i < m; ++i) require(!positives[i].empty(), "loss_loc: empty positive set");

  // W(i,j) = 1/(M*|P(i)|) for j in P(i): the loss is sum W .* (lse_i - logits_ij).
  Matrix weight = Matrix::Zero(m, m);
  for (int i = 0; i < m; ++i)
    for (int j : positives[i]) weight(i, j) = 1.0 / (static_cast<double>(m) * positives[i].size());

  ad::Tape& tape = *vr.tape;
  ad::Var logits = detail::cosine_logits(vr, tc, tau);
  ad::Var wconst = tape.constant(weight);
  ad::Var ones_row = tape.constant(Matrix::Ones(1, m));

  auto direction = [&](ad::Var lg) {
    ad::Var lse_mat = ad::matmul(ad::logsumexp_rows(lg), ones_row);  // broadcast column
    return ad::sum_all(ad::cmul(wconst, ad::sub(lse_mat, lg)));
  };
  // Category equality is symmetric, so the text-side positive sets reuse W.
  return ad::scale(ad::add(direction(logits), direction(ad::transpose(logits))), 0.5);
}

// Patch-to-patch distillation: mean (1 - cosine) per matched row. The
// caller detaches the teacher rows under frozen/ema strategies.
inline ad::Var loss_dis(ad::Var p_roi, ad::Var p_local) {
  require(p_roi.val().rows() >= 1 && p_roi.val().rows() == p_local.val().rows(), "loss_dis: row mismatch");
  detail::check_finite(p_roi.val(), "loss_dis");
  detail::check_finite(p_local.val(), "loss_dis");
  ad::Var cos = ad::sum_rowwise(ad::cmul(ad::l2_normalize_rows(p_roi), ad::l2_normalize_rows(p_local)));
  return ad::add_const(ad::scale(ad::mean_all(cos), -1.0), 1.0);
}

struct LossComponents {
  std::optional<ad::Var> glo;
  std::optional<ad::Var> loc;
  std::optional<ad::Var> dis;
};

struct LossReport {
  double total = 0;
  std::map<std::string, double> components;  // component values before weighting
};

// Stage recipe: s1 = w_glo*L_glo + w_dis*L_dis, s2 = w_glo*L_glo +
// w_loc*L_loc. Absent components contribute zero; L_loc in stage one is
// rejected unless explicitly allowed.
inline ad::Var total_loss(ad::Tape& tape, const LossComponents& c, const LossWeights& w, TrainStage stage,
                          LossReport* report = nullptr, bool allow_off_stage = false) {
  w.validate();
  if (stage == TrainStage::s1 && c.loc && !allow_off_stage)
    throw std::invalid_argument("total_loss: L_loc requested in stage s1 without override");

  ad::Var total = tape.constant(Matrix::Zero(1, 1));
  auto apply = [&](const std::optional<ad::Var>& part, double weight, const char* name, bool in_stage) {
    if (report && part) report->components[name] = part->scalar();
    if (!in_stage && !allow_off_stage) return;
    if (part && weight != 0.0) total = ad::add(total, ad::scale(*part, weight));
  };
  apply(c.glo, w.w_glo, "glo", true);
  apply(c.loc, w.w_loc, "loc", stage == TrainStage::s2);
  apply(c.dis, w.w_dis, "dis", stage == TrainStage::s1);
  if (report) report->total = total.scalar();
  return total;
}

// --- convenience plain-number entry points ----------------------------------

inline double loss_glo(const Matrix& v, const Matrix& t, double tau) {
  ad::Tape tape;
  return loss_glo(tape.constant(v), tape.constant(t), tape.constant(Matrix::Constant(1, 1, tau))).scalar();
}

inline double loss_loc(const Matrix& vr, const Matrix& tc, const std::vector<std::vector<int>>& positives,
                       double tau) {
  ad::Tape tape;
  return loss_loc(tape.constant(vr), tape.constant(tc), positives, tape.constant(Matrix::Constant(1, 1, tau)))
      .scalar();
}

inline double loss_dis(const Matrix& p_roi, const Matrix& p_local) {
  ad::Tape tape;
  return loss_dis(tape.constant(p_roi), tape.constant(p_local)).scalar();
}

}  // namespace farslip
