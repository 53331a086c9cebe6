#include "gift/denoiser.hpp"

#include <algorithm>

namespace gift {

void validate_arch(const Arch& a) {
  if (a.width < 1 || a.trunk_blocks < 0 || a.cond_blocks < 1 || a.embed_dim < 1 || a.attn_dim < 1 || a.time_dim < 2)
    throw ValidationError("invalid architecture: widths and block counts must be positive");
  if (a.time_dim % 2 != 0) throw ValidationError("invalid architecture: time_dim must be even");
}

nlohmann::json arch_to_json(const Arch& a) {
  return {{"width", a.width},         {"trunk_blocks", a.trunk_blocks}, {"cond_blocks", a.cond_blocks},
          {"embed_dim", a.embed_dim}, {"attn_dim", a.attn_dim},         {"time_dim", a.time_dim}};
}

Arch arch_from_json(const nlohmann::json& j) {
  Arch a;
  a.width = j.value("width", a.width);
  a.trunk_blocks = j.value("trunk_blocks", a.trunk_blocks);
  a.cond_blocks = j.value("cond_blocks", a.cond_blocks);
  a.embed_dim = j.value("embed_dim", a.embed_dim);
  a.attn_dim = j.value("attn_dim", a.attn_dim);
  a.time_dim = j.value("time_dim", a.time_dim);
  validate_arch(a);
  return a;
}

ParamLayout make_layout(const Arch& arch, Eigen::Index table_rows) {
  validate_arch(arch);
  ParamLayout l;
  Eigen::Index cursor = 0;
  auto dense = [&cursor](Eigen::Index rows, Eigen::Index cols) {
    DenseSlot s{cursor, cursor + rows * cols, rows, cols};
    cursor += rows * cols + rows;
    return s;
  };
  l.input = dense(arch.width, 2 + arch.time_dim);
  for (int i = 0; i < arch.trunk_blocks; ++i) l.trunk.push_back(dense(arch.width, arch.width));
  l.output = dense(2, arch.width);
  l.psi_begin = cursor;
  for (int j = 0; j < arch.cond_blocks; ++j) {
    CondSlot c;
    c.query = dense(arch.attn_dim, arch.width);
    c.key = dense(arch.attn_dim, arch.embed_dim);
    c.value = dense(arch.attn_dim, arch.embed_dim);
    c.null_key = cursor;
    cursor += arch.attn_dim;
    c.out = dense(arch.width, arch.attn_dim);
    l.cond.push_back(c);
  }
  l.table = cursor;
  l.table_rows = table_rows;
  cursor += arch.embed_dim * table_rows;
  l.size = cursor;

  for (int i = 0; i < std::max(arch.trunk_blocks, arch.cond_blocks); ++i) {
    if (i < arch.trunk_blocks) l.order.push_back({BlockKind::trunk, i});
    if (i < arch.cond_blocks) l.order.push_back({BlockKind::conditioning, i});
  }
  return l;
}

Eigen::Index conditioning_param_count(const Arch& a) {
  const Eigen::Index w = a.width, e = a.embed_dim, d = a.attn_dim;
  const Eigen::Index per_block = (d * w + d) + 2 * (d * e + d) + d + (w * d + w);
  return a.cond_blocks * per_block;
}

template struct DenoiserParams<double>;
template Matrix2X<double> forward<double>(const DenoiserParams<double>&, const Matrix2X<double>&, std::span<const int>,
                                          std::span<const int>, ActivationTrace<double>*, ForwardTape<double>*, LayerSet);
template Eigen::VectorXd backward<double>(const DenoiserParams<double>&, const ForwardTape<double>&,
                                          const Matrix2X<double>&, std::span<const Matrix<double>>, LayerSet);

}  // namespace gift
