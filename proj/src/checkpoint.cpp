#include "gift/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace gift {

namespace {

constexpr char kMagic[8] = {'G', 'I', 'F', 'T', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian hosts");

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const Params& params, const std::filesystem::path& path, const CheckpointInfo& info) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  nlohmann::json header = {{"arch", arch_to_json(params.arch)},
                                 {"table_rows", params.table_rows()},
                                 {"theta_size", params.theta.size()},
                                 {"psi_size", params.psi_index.size()},
                                 {"psi_policy", "all conditioning-block parameters (incl. biases, null keys) + concept table"},
                                 {"provenance", info.provenance}};
  nlohmann::json tokens = nlohmann::json::object();
  for (const auto& [id, row] : info.tokens) tokens[std::to_string(id)] = row;
  header["tokens"] = tokens;
  const std::string text = header.dump();
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kCheckpointSchemaVersion);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(params.theta.data()),
            static_cast<std::streamsize>(params.theta.size() * sizeof(double)));
  for (Eigen::Index i : params.psi_index) write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(i));
  if (!out) throw IoError("write failed: " + path.string());
}

Params load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError(path.string() + ": not a checkpoint");
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointSchemaVersion)
    throw IoError(path.string() + ": unsupported checkpoint schema version " + std::to_string(version));
  const auto header_len = read_pod<std::uint32_t>(in);
  std::string text(header_len, '\0');
  in.read(text.data(), header_len);
  if (!in) throw IoError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad header: ") + e.what());
  }
  Params p;
  p.arch = arch_from_json(header.at("arch"));
  p.layout = make_layout(p.arch, header.at("table_rows").get<Eigen::Index>());
  const auto n = header.at("theta_size").get<Eigen::Index>();
  if (n != p.layout.size) throw IoError("checkpoint: theta size does not match architecture");
  p.theta.resize(n);
  in.read(reinterpret_cast<char*>(p.theta.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw IoError("checkpoint: truncated parameters");
  const auto psi = header.at("psi_size").get<std::size_t>();
  p.psi_index.resize(psi);
  for (auto& i : p.psi_index) i = static_cast<Eigen::Index>(read_pod<std::uint64_t>(in));
  if (info) {
    info->provenance = header.value("provenance", "");
    info->tokens.clear();
    if (header.contains("tokens"))
      for (const auto& [id, row] : header.at("tokens").items()) info->tokens[std::stoi(id)] = row.get<int>();
  }
  return p;
}

}  // namespace gift
