// Copyright 2026 The clforge Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "clforge/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "clforge/error.hpp"
#include "clforge/kernels.hpp"

namespace clforge {
namespace {

std::string encoder_weight(std::size_t k) {
  return "encoder.block" + std::to_string(k) + ".weight";
}
std::string encoder_bias(std::size_t k) {
  return "encoder.block" + std::to_string(k) + ".bias";
}
std::string head_prefix(int task_id) {
  return "task" + std::to_string(task_id) + ".";
}

constexpr const char* kLocationName = "decoder.location";

std::vector<EntrySpec> head_entries(const ModelConfig& c,
                                    const std::string& prefix) {
  const std::size_t h = c.hidden;
  return {
      {prefix + "ctc.weight", {c.ctc_classes(), h}},
      {prefix + "ctc.bias", {c.ctc_classes()}},
      {prefix + "decoder.embed", {c.vocab + 1, h}},
      {prefix + "decoder.query.weight", {h, h}},
      {prefix + "decoder.query.bias", {h}},
      {prefix + kLocationName, {1}},
      {prefix + "decoder.end", {h}},
      {prefix + "decoder.out.weight", {c.dec_classes(), 2 * h}},
      {prefix + "decoder.out.bias", {c.dec_classes()}},
  };
}

/// Entry indices used by one forward pass.
struct Resolved {
  std::vector<std::size_t> enc_w, enc_b;
  std::size_t ctc_w, ctc_b, embed, q_w, q_b, loc, end, out_w, out_b;
  bool head_shared;
};

Resolved resolve(const ParamStore& p, const ModelConfig& c, int task_id) {
  Resolved r{};
  for (std::size_t k = 0; k < c.blocks; ++k) {
    r.enc_w.push_back(p.index_of(encoder_weight(k)));
    r.enc_b.push_back(p.index_of(encoder_bias(k)));
  }
  std::string prefix = head_prefix(task_id);
  if (!p.contains(prefix + "ctc.weight")) {
    if (!p.contains("ctc.weight")) {
      throw Error(Errc::missing_head,
                  "no output head for task " + std::to_string(task_id));
    }
    prefix.clear();
  }
  const auto spec = head_entries(c, prefix);
  std::size_t* slots[] = {&r.ctc_w, &r.ctc_b, &r.embed, &r.q_w,
                          &r.q_b,   &r.loc,   &r.end,   &r.out_w,
                          &r.out_b};
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto idx = p.index_of(spec[i].name);
    if (p.entry(idx).shape != spec[i].shape) {
      throw Error(Errc::structural_mismatch,
                  "entry '" + spec[i].name + "' does not match the model config");
    }
    *slots[i] = idx;
  }
  r.head_shared = p.entry(r.ctc_w).tag.is_shared();
  for (std::size_t k = 0; k < c.blocks; ++k) {
    const std::size_t in = k == 0 ? c.input_dim : c.hidden;
    if (p.entry(r.enc_w[k]).count != c.hidden * (2 * c.context + 1) * in ||
        p.entry(r.enc_b[k]).count != c.hidden) {
      throw Error(Errc::structural_mismatch,
                  "encoder block " + std::to_string(k) +
                      " does not match the model config");
    }
  }
  return r;
}

void log_softmax_inplace(std::span<double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  const double lse = m + std::log(s);
  for (double& v : row) v -= lse;
}

/// Gathers frames t-c..t+c of `in` into `window`, zero beyond the edges.
void gather_window(const Matrix& in, std::size_t t, std::size_t ctx,
                   std::span<double> window) {
  const std::size_t cols = in.cols;
  for (std::size_t o = 0; o < 2 * ctx + 1; ++o) {
    const auto src = static_cast<std::ptrdiff_t>(t + o) -
                     static_cast<std::ptrdiff_t>(ctx);
    auto dst = window.subspan(o * cols, cols);
    if (src < 0 || src >= static_cast<std::ptrdiff_t>(in.rows)) {
      std::fill(dst.begin(), dst.end(), 0.0);
    } else {
      const auto row = in.row(static_cast<std::size_t>(src));
      std::copy(row.begin(), row.end(), dst.begin());
    }
  }
}

std::vector<Matrix> run_encoder(const ParamStore& p, const ModelConfig& c,
                                const Resolved& r, const Matrix& x) {
  std::vector<Matrix> outs;
  outs.reserve(c.blocks);
  const Matrix* in = &x;
  std::vector<double> window;
  for (std::size_t k = 0; k < c.blocks; ++k) {
    Matrix out(x.rows, c.hidden);
    window.resize((2 * c.context + 1) * in->cols);
    const auto w = p.values(r.enc_w[k]);
    const auto b = p.values(r.enc_b[k]);
    for (std::size_t t = 0; t < x.rows; ++t) {
      gather_window(*in, t, c.context, window);
      auto y = out.row(t);
      kernels::affine(w, b, window, y);
      for (double& v : y) v = std::tanh(v);
    }
    outs.push_back(std::move(out));
    in = &outs.back();
  }
  return outs;
}

double start_position(const ModelConfig& c) {
  return 0.5 - c.frames_per_token;
}

/// Encoder state of slot t, or the end vector for t == L.
std::span<const double> slot_state(const Matrix& enc, std::span<const double> end,
                                   std::size_t t) {
  return t < enc.rows ? enc.row(t) : end;
}

/// One decoder step. Writes query, attention weights, context and logits
/// (log-softmaxed) and returns the expected attended frame.
double decoder_step(const ParamStore& p, const ModelConfig& c,
                    const Resolved& r, const Matrix& enc, std::size_t input,
                    double prev_position, std::span<double> query,
                    std::span<double> attention, std::span<double> context,
                    std::span<double> logprobs, std::vector<double>& feat) {
  const std::size_t h = c.hidden;
  const auto embed = p.values(r.embed).subspan(input * h, h);
  kernels::affine(p.values(r.q_w), p.values(r.q_b), embed, query);
  const double beta = p.values(r.loc)[0];
  const double center = prev_position + c.frames_per_token;
  const auto end = p.values(r.end);
  double m = -INFINITY;
  for (std::size_t t = 0; t <= enc.rows; ++t) {
    const double d = static_cast<double>(t) - center;
    attention[t] = kernels::dot(query, slot_state(enc, end, t)) - beta * d * d;
    m = std::max(m, attention[t]);
  }
  double s = 0.0;
  for (double& a : attention) {
    a = std::exp(a - m);
    s += a;
  }
  std::fill(context.begin(), context.end(), 0.0);
  double position = 0.0;
  for (std::size_t t = 0; t <= enc.rows; ++t) {
    attention[t] /= s;
    position += attention[t] * static_cast<double>(t);
    kernels::axpy(attention[t], slot_state(enc, end, t), context);
  }
  feat.resize(2 * h);
  std::copy(context.begin(), context.end(), feat.begin());
  std::copy(embed.begin(), embed.end(), feat.begin() + static_cast<std::ptrdiff_t>(h));
  kernels::affine(p.values(r.out_w), p.values(r.out_b), feat, logprobs);
  log_softmax_inplace(logprobs);
  return position;
}

void check_utterance(const ModelConfig& c, const Matrix& features) {
  if (features.cols != c.input_dim) {
    throw Error(Errc::structural_mismatch,
                "features have " + std::to_string(features.cols) +
                    " columns, model expects " + std::to_string(c.input_dim));
  }
  if (features.rows == 0) {
    throw Error(Errc::structural_mismatch, "utterance has no frames");
  }
}

/// d(loss)/d(logits) from d(loss)/d(log-softmax output), row by row.
void log_softmax_backward(const Matrix& logprobs, Matrix& g) {
  for (std::size_t i = 0; i < g.rows; ++i) {
    auto row = g.row(i);
    double sum = 0.0;
    for (double v : row) sum += v;
    const auto lp = logprobs.row(i);
    for (std::size_t k = 0; k < row.size(); ++k) {
      row[k] -= std::exp(lp[k]) * sum;
    }
  }
}

bool all_zero(const Matrix& m) {
  return std::all_of(m.data.begin(), m.data.end(),
                     [](double v) { return v == 0.0; });
}

} // namespace

ModelConfig ModelConfig::for_vocab(std::size_t v) {
  ModelConfig c;
  c.vocab = v;
  c.blank_id = static_cast<int>(v);
  c.sos_id = static_cast<int>(v) + 1;
  c.eos_id = static_cast<int>(v) + 2;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw Error(Errc::configuration, "model config: " + msg);
  };
  if (input_dim < 1) fail("input_dim must be >= 1");
  if (hidden < 1) fail("hidden must be >= 1");
  if (blocks < 1) fail("blocks must be >= 1");
  if (vocab < 1) fail("vocab must be >= 1");
  const auto v = static_cast<long long>(vocab);
  for (int id : {blank_id, sos_id, eos_id}) {
    if (id >= 0 && id < v) fail("reserved ids must lie outside [0, vocab)");
  }
  if (blank_id == sos_id || blank_id == eos_id || sos_id == eos_id) {
    fail("reserved ids must be distinct");
  }
  if (!(frames_per_token > 0.0)) fail("frames_per_token must be positive");
  if (!(init_range >= 0.0)) fail("init_range must be non-negative");
}

LossSpec LossSpec::hybrid(const LossConfig& cfg) {
  LossSpec s;
  s.alpha = cfg.alpha;
  s.kd_mean = cfg.kd_mean;
  return s;
}

LossSpec LossSpec::with_teacher(const LossConfig& cfg,
                                const OutputDistributions& teacher) {
  LossSpec s = hybrid(cfg);
  s.lambda = cfg.lambda;
  s.teacher = &teacher;
  return s;
}

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
}

std::vector<EntrySpec> Model::head_spec(int task_id) const {
  return head_entries(config_, head_prefix(task_id));
}

ParamStore Model::init_params(std::uint64_t seed, HeadMode mode) const {
  const auto& c = config_;
  ParamStore::Builder b;
  for (std::size_t k = 0; k < c.blocks; ++k) {
    const std::size_t in = (k == 0 ? c.input_dim : c.hidden) * (2 * c.context + 1);
    const auto wn = encoder_weight(k);
    const auto bn = encoder_bias(k);
    b.add(wn, {c.hidden, in}, PartitionTag::shared(),
          init_uniform(c.hidden * in, seed, wn, c.init_range));
    b.add(bn, {c.hidden}, PartitionTag::shared(),
          init_uniform(c.hidden, seed, bn, c.init_range));
  }
  const bool own = mode == HeadMode::own;
  const auto tag = own ? PartitionTag::task_specific(1) : PartitionTag::shared();
  for (const auto& e : head_entries(c, own ? head_prefix(1) : std::string())) {
    auto values = init_uniform(shape_count(e.shape), seed, e.name, c.init_range);
    if (e.name.ends_with(kLocationName)) values.assign(1, c.location_init);
    b.add(e.name, e.shape, tag, std::move(values));
  }
  return std::move(b).build();
}

ParamStore Model::add_task_head(const ParamStore& params, int task_id,
                                std::uint64_t seed) const {
  const auto spec = head_spec(task_id);
  ParamStore out = init_task_head(params, task_id, spec, seed, config_.init_range);
  out.mutable_values(out.index_of(head_prefix(task_id) + kLocationName))[0] =
      config_.location_init;
  return out;
}

ForwardOut Model::forward(const ParamStore& p, const Utterance& utt,
                          int task_id) const {
  const auto& c = config_;
  check_utterance(c, utt.features);
  for (int tok : utt.target) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= c.vocab) {
      throw Error(Errc::structural_mismatch,
                  "target token " + std::to_string(tok) + " outside vocabulary");
    }
  }
  const Resolved r = resolve(p, c, task_id);
  ForwardOut out;
  out.acts.blocks = run_encoder(p, c, r, utt.features);
  const Matrix& enc = out.acts.blocks.back();
  const std::size_t frames = enc.rows;

  out.ctc_logprobs = Matrix(frames, c.ctc_classes());
  for (std::size_t t = 0; t < frames; ++t) {
    auto row = out.ctc_logprobs.row(t);
    kernels::affine(p.values(r.ctc_w), p.values(r.ctc_b), enc.row(t), row);
    log_softmax_inplace(row);
  }

  const std::size_t steps = utt.target.size() + 1;
  auto& a = out.acts;
  a.queries = Matrix(steps, c.hidden);
  a.attention = Matrix(steps, frames + 1);
  a.contexts = Matrix(steps, c.hidden);
  a.positions.assign(steps, 0.0);
  a.dec_inputs.resize(steps);
  out.dec_logprobs = Matrix(steps, c.dec_classes());
  std::vector<double> feat;
  double position = start_position(c);
  for (std::size_t i = 0; i < steps; ++i) {
    a.dec_inputs[i] = i == 0 ? c.sos_column()
                             : static_cast<std::size_t>(utt.target[i - 1]);
    position = decoder_step(p, c, r, enc, a.dec_inputs[i], position,
                            a.queries.row(i), a.attention.row(i),
                            a.contexts.row(i), out.dec_logprobs.row(i), feat);
    a.positions[i] = position;
  }
  return out;
}

LossTerms Model::loss(const ParamStore& params, const Utterance& utt,
                      int task_id, const LossSpec& spec) const {
  const ForwardOut fo = forward(params, utt, task_id);
  LossTerms terms;
  if (spec.hybrid_weight != 0.0) {
    if (spec.alpha != 0.0) {
      terms.ctc = ctc_loss(fo.ctc_logprobs, utt.target, config_.blank_column()).value;
    }
    if (spec.alpha != 1.0) {
      terms.ce = ce_loss(fo.dec_logprobs, utt.target, config_.eos_column()).value;
    }
  }
  if (spec.lambda != 0.0 && spec.teacher != nullptr) {
    terms.kd = kd_loss(*spec.teacher, fo, spec.alpha, spec.kd_mean).value;
  }
  terms.total = spec.hybrid_weight * hybrid_loss(terms.ctc, terms.ce, spec.alpha) +
                spec.lambda * terms.kd;
  return terms;
}

Gradient Model::backward(const ParamStore& params, const Utterance& utt,
                         int task_id, const LossSpec& spec) const {
  Gradient g;
  g.grad = params.zeros_like();
  g.loss = accumulate_gradient(params, utt, task_id, spec, 1.0,
                               g.grad.mutable_flat());
  return g;
}

LossTerms Model::accumulate_gradient(const ParamStore& p, const Utterance& utt,
                                     int task_id, const LossSpec& spec,
                                     double weight,
                                     std::span<double> grad) const {
  const auto& c = config_;
  if (grad.size() != p.value_count()) {
    throw Error(Errc::structural_mismatch,
                "gradient buffer does not match the parameter layout");
  }
  const ForwardOut fo = forward(p, utt, task_id);
  const Resolved r = resolve(p, c, task_id);
  const std::size_t frames = utt.features.rows;
  const std::size_t steps = utt.target.size() + 1;
  const std::size_t h = c.hidden;

  // d(loss)/d(log-probabilities), already scaled by `weight`.
  LossTerms terms;
  Matrix g_ctc(frames, c.ctc_classes(), 0.0);
  Matrix g_dec(steps, c.dec_classes(), 0.0);
  if (spec.hybrid_weight != 0.0) {
    if (spec.alpha != 0.0) {
      auto l = ctc_loss(fo.ctc_logprobs, utt.target, c.blank_column());
      terms.ctc = l.value;
      kernels::axpy(weight * spec.hybrid_weight * spec.alpha, l.grad.data, g_ctc.data);
    }
    if (spec.alpha != 1.0) {
      auto l = ce_loss(fo.dec_logprobs, utt.target, c.eos_column());
      terms.ce = l.value;
      kernels::axpy(weight * spec.hybrid_weight * (1.0 - spec.alpha), l.grad.data,
                    g_dec.data);
    }
  }
  if (spec.lambda != 0.0 && spec.teacher != nullptr) {
    auto l = kd_loss(*spec.teacher, fo, spec.alpha, spec.kd_mean);
    terms.kd = l.value;
    kernels::axpy(weight * spec.lambda, l.ctc_grad.data, g_ctc.data);
    kernels::axpy(weight * spec.lambda, l.dec_grad.data, g_dec.data);
  }
  terms.total = spec.hybrid_weight * hybrid_loss(terms.ctc, terms.ce, spec.alpha) +
                spec.lambda * terms.kd;

  const bool train_head = spec.train_shared || !r.head_shared;
  const bool train_encoder = spec.train_shared;
  if (!train_head && !train_encoder) return terms;

  auto slot = [&](std::size_t idx) {
    const auto& e = p.entry(idx);
    return grad.subspan(e.offset, e.count);
  };
  const Matrix& enc = fo.acts.blocks.back();
  Matrix d_enc(frames, h, 0.0);

  // CTC head.
  if (!all_zero(g_ctc)) {
    log_softmax_backward(fo.ctc_logprobs, g_ctc);
    const auto w = p.values(r.ctc_w);
    for (std::size_t t = 0; t < frames; ++t) {
      if (train_head) {
        kernels::affine_backward_params(g_ctc.row(t), enc.row(t), slot(r.ctc_w),
                                        slot(r.ctc_b));
      }
      if (train_encoder) kernels::affine_backward_input(w, g_ctc.row(t), d_enc.row(t));
    }
  }

  // Decoder, last step first so the position gradient can flow backwards.
  if (!all_zero(g_dec)) {
    log_softmax_backward(fo.dec_logprobs, g_dec);
    const auto& a = fo.acts;
    const auto embed = p.values(r.embed);
    const auto w_out = p.values(r.out_w);
    const auto w_q = p.values(r.q_w);
    const double beta = p.values(r.loc)[0];
    const auto end = p.values(r.end);
    auto d_embed = slot(r.embed);
    auto d_end = slot(r.end);
    std::vector<double> feat(2 * h), d_feat(2 * h), d_alpha(frames + 1),
        d_score(frames + 1), d_query(h);
    double d_loc = 0.0;
    double g_position = 0.0; // d(loss)/d(position of this step)
    for (std::size_t i = steps; i-- > 0;) {
      const auto ctx = a.contexts.row(i);
      const auto e = embed.subspan(a.dec_inputs[i] * h, h);
      std::copy(ctx.begin(), ctx.end(), feat.begin());
      std::copy(e.begin(), e.end(), feat.begin() + static_cast<std::ptrdiff_t>(h));
      if (train_head) {
        kernels::affine_backward_params(g_dec.row(i), feat, slot(r.out_w),
                                        slot(r.out_b));
      }
      std::fill(d_feat.begin(), d_feat.end(), 0.0);
      kernels::affine_backward_input(w_out, g_dec.row(i), d_feat);
      const std::span<const double> d_ctx(d_feat.data(), h);
      std::span<double> d_e(d_feat.data() + h, h);

      const auto att = a.attention.row(i);
      double mean = 0.0;
      for (std::size_t t = 0; t <= frames; ++t) {
        d_alpha[t] = kernels::dot(d_ctx, slot_state(enc, end, t)) +
                     g_position * static_cast<double>(t);
        mean += att[t] * d_alpha[t];
        if (t == frames) {
          if (train_head) kernels::axpy(att[t], d_ctx, d_end);
        } else if (train_encoder) {
          kernels::axpy(att[t], d_ctx, d_enc.row(t));
        }
      }
      const double prev = i == 0 ? start_position(c) : a.positions[i - 1];
      const double center = prev + c.frames_per_token;
      const auto q = a.queries.row(i);
      std::fill(d_query.begin(), d_query.end(), 0.0);
      double g_prev = 0.0;
      for (std::size_t t = 0; t <= frames; ++t) {
        d_score[t] = att[t] * (d_alpha[t] - mean);
        if (d_score[t] == 0.0) continue;
        const double dist = static_cast<double>(t) - center;
        kernels::axpy(d_score[t], slot_state(enc, end, t), d_query);
        if (t == frames) {
          if (train_head) kernels::axpy(d_score[t], q, d_end);
        } else if (train_encoder) {
          kernels::axpy(d_score[t], q, d_enc.row(t));
        }
        d_loc -= d_score[t] * dist * dist;
        g_prev += d_score[t] * 2.0 * beta * dist;
      }
      g_position = g_prev;

      if (train_head) {
        kernels::affine_backward_params(d_query, e, slot(r.q_w), slot(r.q_b));
        kernels::affine_backward_input(w_q, d_query, d_e);
        kernels::axpy(1.0, d_e, d_embed.subspan(a.dec_inputs[i] * h, h));
      }
    }
    if (train_head) slot(r.loc)[0] += d_loc;
  }

  // Encoder blocks, top down.
  if (train_encoder) {
    std::vector<double> window, d_window, d_z(h);
    Matrix d_out = std::move(d_enc);
    for (std::size_t k = c.blocks; k-- > 0;) {
      const Matrix& in = k == 0 ? utt.features : fo.acts.blocks[k - 1];
      const Matrix& out = fo.acts.blocks[k];
      const auto w = p.values(r.enc_w[k]);
      window.resize((2 * c.context + 1) * in.cols);
      d_window.resize(window.size());
      Matrix d_in(k > 0 ? frames : 0, in.cols, 0.0);
      for (std::size_t t = 0; t < frames; ++t) {
        const auto y = out.row(t);
        const auto dy = d_out.row(t);
        bool any = false;
        for (std::size_t j = 0; j < h; ++j) {
          d_z[j] = dy[j] * (1.0 - y[j] * y[j]);
          any = any || d_z[j] != 0.0;
        }
        if (!any) continue;
        gather_window(in, t, c.context, window);
        kernels::affine_backward_params(d_z, window, slot(r.enc_w[k]),
                                        slot(r.enc_b[k]));
        if (k == 0) continue;
        std::fill(d_window.begin(), d_window.end(), 0.0);
        kernels::affine_backward_input(w, d_z, d_window);
        for (std::size_t o = 0; o < 2 * c.context + 1; ++o) {
          const auto src = static_cast<std::ptrdiff_t>(t + o) -
                           static_cast<std::ptrdiff_t>(c.context);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(frames)) continue;
          kernels::axpy(1.0,
                        std::span<const double>(d_window).subspan(o * in.cols, in.cols),
                        d_in.row(static_cast<std::size_t>(src)));
        }
      }
      d_out = std::move(d_in);
    }
  }
  return terms;
}

std::vector<int> Model::greedy_decode(const ParamStore& p,
                                      const Matrix& features, int task_id,
                                      std::size_t max_len) const {
  const auto& c = config_;
  check_utterance(c, features);
  const Resolved r = resolve(p, c, task_id);
  const auto blocks = run_encoder(p, c, r, features);
  const Matrix& enc = blocks.back();
  std::vector<double> query(c.hidden), attention(enc.rows + 1), context(c.hidden),
      logprobs(c.dec_classes()), feat;
  std::vector<int> out;
  std::size_t input = c.sos_column();
  double position = start_position(c);
  while (out.size() < max_len) {
    position = decoder_step(p, c, r, enc, input, position, query, attention,
                            context, logprobs, feat);
    std::size_t best = 0;
    for (std::size_t k = 1; k < logprobs.size(); ++k) {
      if (k == c.sos_column()) continue;
      if (logprobs[k] > logprobs[best]) best = k;
    }
    if (best == c.eos_column()) break;
    out.push_back(static_cast<int>(best));
    input = best;
  }
  return out;
}

} // namespace clforge
