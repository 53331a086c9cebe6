#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "gift/errors.hpp"
#include "gift/rng.hpp"

namespace gift {

// Conditional denoiser eps(x_t, c, t): an input projection of [x_t; time embedding], residual
// fully connected trunk blocks interleaved with conditioning blocks, and a linear head.
//
// A conditioning block is single-head cross-attention from the hidden state (query) to two
// key/value tokens: the concept embedding and a learned null key with zero value. With one
// real token the softmax reduces to a sigmoid gate g = sigmoid(q.(k - k_null)/sqrt(d)):
//
//   z = silu(h + W_o (g * (W_v e + b_v)) + b_o)
//
// The conditioning blocks and the concept table form the psi subset of theta.
struct Arch {
  int width = 128;
  int trunk_blocks = 4;
  int cond_blocks = 3;
  int embed_dim = 16;
  int attn_dim = 16;
  int time_dim = 16;

  bool operator==(const Arch&) const = default;
};

void validate_arch(const Arch& arch);
nlohmann::json arch_to_json(const Arch& arch);
Arch arch_from_json(const nlohmann::json& j);

enum class LayerSet { conditioning, all };

struct DenseSlot {
  Eigen::Index weight = 0;
  Eigen::Index bias = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
};

struct CondSlot {
  DenseSlot query, key, value, out;
  Eigen::Index null_key = 0;
};

enum class BlockKind { trunk, conditioning };
struct BlockRef {
  BlockKind kind;
  int index;
};

// Offsets of every tensor in the flat parameter vector. Non-psi tensors come first, then
// the conditioning blocks, then the concept table (embed_dim x rows, one column per concept).
struct ParamLayout {
  DenseSlot input;
  std::vector<DenseSlot> trunk;
  DenseSlot output;
  std::vector<CondSlot> cond;
  std::vector<BlockRef> order;
  Eigen::Index psi_begin = 0;
  Eigen::Index table = 0;
  Eigen::Index table_rows = 0;
  Eigen::Index size = 0;
};

ParamLayout make_layout(const Arch& arch, Eigen::Index table_rows);

// Closed-form parameter count of all conditioning blocks.
Eigen::Index conditioning_param_count(const Arch& arch);

template <typename Scalar = double>
struct DenoiserParams {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Arch arch;
  ParamLayout layout;
  Vector theta;
  std::vector<Eigen::Index> psi_index;

  Eigen::Index table_rows() const { return layout.table_rows; }
  Eigen::Index size() const { return theta.size(); }
};

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Matrix2X = Eigen::Matrix<Scalar, 2, Eigen::Dynamic>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
auto weight_of(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& theta, const DenseSlot& s) {
  return Eigen::Map<const Matrix<Scalar>>(theta.data() + s.weight, s.rows, s.cols);
}
template <typename Scalar>
auto weight_of(Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& theta, const DenseSlot& s) {
  return Eigen::Map<Matrix<Scalar>>(theta.data() + s.weight, s.rows, s.cols);
}
template <typename Scalar>
auto bias_of(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& theta, const DenseSlot& s) {
  return Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(theta.data() + s.bias, s.rows);
}
template <typename Scalar>
auto bias_of(Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& theta, const DenseSlot& s) {
  return Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(theta.data() + s.bias, s.rows);
}
template <typename Scalar, typename V>
auto vector_at(V& theta, Eigen::Index offset, Eigen::Index n) {
  using Target = std::conditional_t<std::is_const_v<V>, const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>,
                                    Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
  return Eigen::Map<Target>(theta.data() + offset, n);
}
template <typename Scalar>
auto table_of(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& theta, const ParamLayout& l, int embed_dim) {
  return Eigen::Map<const Matrix<Scalar>>(theta.data() + l.table, embed_dim, l.table_rows);
}
template <typename Scalar>
auto table_of(Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& theta, const ParamLayout& l, int embed_dim) {
  return Eigen::Map<Matrix<Scalar>>(theta.data() + l.table, embed_dim, l.table_rows);
}

// Variance-scaled normal weights, zero biases, unit-normal concept embeddings.
template <typename Scalar = double>
DenoiserParams<Scalar> init_denoiser(const Arch& arch, int table_rows, std::uint64_t seed) {
  validate_arch(arch);
  if (table_rows < 1) throw ValidationError("init_denoiser: concept table needs at least one row");
  DenoiserParams<Scalar> p;
  p.arch = arch;
  p.layout = make_layout(arch, table_rows);
  p.theta = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(p.layout.size);
  Rng rng(seed);
  auto init_dense = [&](const DenseSlot& s) {
    auto w = weight_of(p.theta, s);
    fill_standard_normal(w, rng);
    w *= Scalar(1) / std::sqrt(Scalar(s.cols));
  };
  init_dense(p.layout.input);
  for (const auto& s : p.layout.trunk) init_dense(s);
  init_dense(p.layout.output);
  for (const auto& c : p.layout.cond) {
    init_dense(c.query);
    init_dense(c.key);
    init_dense(c.value);
    init_dense(c.out);
  }
  auto table = table_of(p.theta, p.layout, arch.embed_dim);
  fill_standard_normal(table, rng);
  p.psi_index.resize(static_cast<std::size_t>(p.layout.size - p.layout.psi_begin));
  std::iota(p.psi_index.begin(), p.psi_index.end(), p.layout.psi_begin);
  return p;
}

template <typename Scalar>
Matrix<Scalar> time_embedding(std::span<const int> t, int dim) {
  const int half = dim / 2;
  Matrix<Scalar> emb(dim, static_cast<Eigen::Index>(t.size()));
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      const Scalar freq = std::exp(-std::log(Scalar(10000)) * Scalar(i) / Scalar(half));
      const Scalar angle = Scalar(t[b]) * freq;
      emb(i, static_cast<Eigen::Index>(b)) = std::sin(angle);
      emb(half + i, static_cast<Eigen::Index>(b)) = std::cos(angle);
    }
  }
  return emb;
}

template <typename Derived>
auto sigmoid(const Eigen::ArrayBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  return (Scalar(1) / (Scalar(1) + (-a).exp()));
}

template <typename Scalar>
struct ActivationLayer {
  Matrix<Scalar> z;  // width x batch
  Scalar mu = 0;
  Scalar var = 0;
};

template <typename Scalar>
struct ActivationTrace {
  std::vector<ActivationLayer<Scalar>> layers;
};

template <typename Scalar>
struct BlockTape {
  Matrix<Scalar> h_in;
  Matrix<Scalar> pre;  // trunk: W h + b; conditioning: h + o
  Matrix<Scalar> emb, query, key_diff, value, mixed;
  RowVector<Scalar> gate;
};

template <typename Scalar>
struct ForwardTape {
  Matrix<Scalar> input;
  std::vector<int> ids;
  std::vector<BlockTape<Scalar>> blocks;
  Matrix<Scalar> last_hidden;
};

template <typename Scalar>
void check_forward_inputs(const DenoiserParams<Scalar>& params, Eigen::Index batch, std::span<const int> ids,
                          std::span<const int> t) {
  if (static_cast<Eigen::Index>(ids.size()) != batch || static_cast<Eigen::Index>(t.size()) != batch)
    throw ValidationError("forward: batch shape mismatch");
  for (int id : ids)
    if (id < 0 || id >= params.table_rows()) throw ValidationError("forward: unknown concept id " + std::to_string(id));
  for (int step : t)
    if (step < 0) throw ValidationError("forward: negative timestep");
  if (params.theta.size() != params.layout.size) throw ValidationError("forward: parameter vector size mismatch");
}

inline bool traced(LayerSet layers, BlockKind kind) {
  return layers == LayerSet::all || kind == BlockKind::conditioning;
}

// Forward pass. When `tape` is given it receives everything backward() needs; when `trace`
// is given it receives the post-activation output of each traced block. Neither affects the
// returned prediction.
template <typename Scalar>
Matrix2X<Scalar> forward(const DenoiserParams<Scalar>& params, const Matrix2X<Scalar>& x_t,
                         std::span<const int> ids, std::span<const int> t,
                         std::type_identity_t<ActivationTrace<Scalar>>* trace = nullptr,
                         std::type_identity_t<ForwardTape<Scalar>>* tape = nullptr,
                         LayerSet layers = LayerSet::conditioning) {
  const auto batch = x_t.cols();
  check_forward_inputs(params, batch, ids, t);
  const auto& arch = params.arch;
  const auto& L = params.layout;
  const auto& theta = params.theta;

  Matrix<Scalar> input(2 + arch.time_dim, batch);
  input.topRows(2) = x_t;
  input.bottomRows(arch.time_dim) = time_embedding<Scalar>(t, arch.time_dim);

  Matrix<Scalar> h = (weight_of(theta, L.input) * input).colwise() + bias_of(theta, L.input);
  if (tape) {
    tape->input = input;
    tape->ids.assign(ids.begin(), ids.end());
    tape->blocks.clear();
    tape->blocks.reserve(L.order.size());
  }
  if (trace) trace->layers.clear();

  const auto table = table_of(theta, L, arch.embed_dim);
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(Scalar(arch.attn_dim));

  for (const BlockRef& ref : L.order) {
    BlockTape<Scalar> bt;
    if (ref.kind == BlockKind::trunk) {
      const auto& s = L.trunk[static_cast<std::size_t>(ref.index)];
      Matrix<Scalar> a = (weight_of(theta, s) * h).colwise() + bias_of(theta, s);
      Matrix<Scalar> out = h + (a.array() * sigmoid(a.array())).matrix();
      if (tape) {
        bt.h_in = std::move(h);
        bt.pre = std::move(a);
      }
      h = std::move(out);
    } else {
      const auto& c = L.cond[static_cast<std::size_t>(ref.index)];
      Matrix<Scalar> emb(arch.embed_dim, batch);
      for (Eigen::Index b = 0; b < batch; ++b) emb.col(b) = table.col(ids[static_cast<std::size_t>(b)]);
      Matrix<Scalar> q = (weight_of(theta, c.query) * h).colwise() + bias_of(theta, c.query);
      Matrix<Scalar> kd = ((weight_of(theta, c.key) * emb).colwise() + bias_of(theta, c.key)).colwise() -
                          vector_at<Scalar>(theta, c.null_key, arch.attn_dim);
      Matrix<Scalar> v = (weight_of(theta, c.value) * emb).colwise() + bias_of(theta, c.value);
      RowVector<Scalar> score = (q.array() * kd.array()).colwise().sum() * inv_sqrt_d;
      RowVector<Scalar> gate = sigmoid(score.array()).matrix();
      Matrix<Scalar> mixed = v.array().rowwise() * gate.array();
      Matrix<Scalar> u = h + ((weight_of(theta, c.out) * mixed).colwise() + bias_of(theta, c.out));
      Matrix<Scalar> out = u.array() * sigmoid(u.array());
      if (tape) {
        bt.h_in = std::move(h);
        bt.pre = std::move(u);
        bt.emb = std::move(emb);
        bt.query = std::move(q);
        bt.key_diff = std::move(kd);
        bt.value = std::move(v);
        bt.mixed = std::move(mixed);
        bt.gate = std::move(gate);
      }
      h = std::move(out);
    }
    if (trace && traced(layers, ref.kind)) {
      ActivationLayer<Scalar> layer;
      layer.z = h;
      layer.mu = h.mean();
      layer.var = (h.array() - layer.mu).square().mean();
      trace->layers.push_back(std::move(layer));
    }
    if (tape) tape->blocks.push_back(std::move(bt));
  }

  Matrix2X<Scalar> out = (weight_of(theta, L.output) * h).colwise() + bias_of(theta, L.output);
  if (tape) tape->last_hidden = std::move(h);
  return out;
}

template <typename Derived>
auto silu_grad(const Eigen::ArrayBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  const auto s = sigmoid(a).eval();
  return (s * (Scalar(1) + a * (Scalar(1) - s))).eval();
}

// Reverse pass. `d_out` is dLoss/d(prediction); `d_trace` optionally holds dLoss/dz for each
// traced layer (same order and LayerSet as the forward trace). Returns dLoss/dtheta.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> backward(const DenoiserParams<Scalar>& params, const ForwardTape<Scalar>& tape,
                                                  const Matrix2X<Scalar>& d_out,
                                                  std::span<const Matrix<Scalar>> d_trace = {},
                                                  LayerSet layers = LayerSet::conditioning) {
  const auto& arch = params.arch;
  const auto& L = params.layout;
  const auto& theta = params.theta;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> grad = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(L.size);
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(Scalar(arch.attn_dim));

  weight_of(grad, L.output).noalias() = d_out * tape.last_hidden.transpose();
  bias_of(grad, L.output) = d_out.rowwise().sum();
  Matrix<Scalar> dh = weight_of(theta, L.output).transpose() * d_out;

  // Index of each traced layer in forward order.
  std::vector<int> trace_slot(L.order.size(), -1);
  {
    int k = 0;
    for (std::size_t i = 0; i < L.order.size(); ++i)
      if (traced(layers, L.order[i].kind)) trace_slot[i] = k++;
    if (!d_trace.empty() && static_cast<int>(d_trace.size()) != k)
      throw ValidationError("backward: activation gradient count mismatch");
  }

  auto table_grad = table_of(grad, L, arch.embed_dim);

  for (std::size_t i = L.order.size(); i-- > 0;) {
    const BlockRef ref = L.order[i];
    const BlockTape<Scalar>& bt = tape.blocks[i];
    if (!d_trace.empty() && trace_slot[i] >= 0) dh += d_trace[static_cast<std::size_t>(trace_slot[i])];

    if (ref.kind == BlockKind::trunk) {
      const auto& s = L.trunk[static_cast<std::size_t>(ref.index)];
      Matrix<Scalar> da = (dh.array() * silu_grad(bt.pre.array())).matrix();
      weight_of(grad, s).noalias() = da * bt.h_in.transpose();
      bias_of(grad, s) = da.rowwise().sum();
      dh.noalias() += weight_of(theta, s).transpose() * da;
    } else {
      const auto& c = L.cond[static_cast<std::size_t>(ref.index)];
      Matrix<Scalar> du = (dh.array() * silu_grad(bt.pre.array())).matrix();
      weight_of(grad, c.out).noalias() = du * bt.mixed.transpose();
      bias_of(grad, c.out) = du.rowwise().sum();
      Matrix<Scalar> dmixed = weight_of(theta, c.out).transpose() * du;
      Matrix<Scalar> dv = dmixed.array().rowwise() * bt.gate.array();
      RowVector<Scalar> dgate = (dmixed.array() * bt.value.array()).colwise().sum();
      RowVector<Scalar> dscore =
          (dgate.array() * bt.gate.array() * (Scalar(1) - bt.gate.array())).matrix() * inv_sqrt_d;
      Matrix<Scalar> dq = bt.key_diff.array().rowwise() * dscore.array();
      Matrix<Scalar> dk = bt.query.array().rowwise() * dscore.array();

      weight_of(grad, c.query).noalias() = dq * bt.h_in.transpose();
      bias_of(grad, c.query) = dq.rowwise().sum();
      weight_of(grad, c.key).noalias() = dk * bt.emb.transpose();
      bias_of(grad, c.key) = dk.rowwise().sum();
      vector_at<Scalar>(grad, c.null_key, arch.attn_dim) = -dk.rowwise().sum();
      weight_of(grad, c.value).noalias() = dv * bt.emb.transpose();
      bias_of(grad, c.value) = dv.rowwise().sum();

      Matrix<Scalar> demb = weight_of(theta, c.key).transpose() * dk;
      demb.noalias() += weight_of(theta, c.value).transpose() * dv;
      for (Eigen::Index b = 0; b < demb.cols(); ++b) table_grad.col(tape.ids[static_cast<std::size_t>(b)]) += demb.col(b);

      // Residual path plus the query projection.
      dh = du;
      dh.noalias() += weight_of(theta, c.query).transpose() * dq;
    }
  }

  weight_of(grad, L.input).noalias() = dh * tape.input.transpose();
  bias_of(grad, L.input) = dh.rowwise().sum();
  return grad;
}

struct TokenInit {
  enum class Kind { random, copy_of };
  Kind kind = Kind::random;
  int source = -1;         // copy_of
  std::uint64_t seed = 0;  // random
};

// Appends one concept embedding column. theta grows by embed_dim entries at its end and the
// new entries join psi; every existing parameter keeps its value and index.
template <typename Scalar>
std::pair<DenoiserParams<Scalar>, int> add_concept_token(const DenoiserParams<Scalar>& params, const TokenInit& init) {
  if (init.kind == TokenInit::Kind::copy_of && (init.source < 0 || init.source >= params.table_rows()))
    throw ValidationError("add_concept_token: copy-of references unknown concept id " + std::to_string(init.source));
  const int new_id = static_cast<int>(params.table_rows());
  DenoiserParams<Scalar> out;
  out.arch = params.arch;
  out.layout = make_layout(params.arch, params.table_rows() + 1);
  out.theta.resize(out.layout.size);
  out.theta.head(params.theta.size()) = params.theta;
  auto row = out.theta.tail(params.arch.embed_dim);
  if (init.kind == TokenInit::Kind::copy_of) {
    row = table_of(params.theta, params.layout, params.arch.embed_dim).col(init.source);
  } else {
    Rng rng(init.seed);
    fill_standard_normal(row, rng);
  }
  out.psi_index = params.psi_index;
  for (Eigen::Index i = params.theta.size(); i < out.layout.size; ++i) out.psi_index.push_back(i);
  return {std::move(out), new_id};
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> gather(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& v,
                                                std::span<const Eigen::Index> index) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(static_cast<Eigen::Index>(index.size()));
  for (std::size_t i = 0; i < index.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[index[i]];
  return out;
}

template <typename Scalar>
void scatter_add(Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& v, std::span<const Eigen::Index> index,
                 const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& values) {
  for (std::size_t i = 0; i < index.size(); ++i) v[index[i]] += values[static_cast<Eigen::Index>(i)];
}

}  // namespace gift
