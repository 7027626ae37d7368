#include "qmx/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include "qmx/errors.hpp"

namespace qmx {
namespace {

constexpr char kMagic[8] = {'Q', 'M', 'X', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw DataError("truncated checkpoint: " + path.string());
  return value;
}

bool is_float(const torch::Tensor& t) { return t.is_floating_point(); }

}  // namespace

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::int64_t Checkpoint::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries)
    if (e.kind == EntryKind::parameter) n += e.values.numel();
  return n;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  const auto meta = ckpt.meta.dump();
  put<std::uint64_t>(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.kind));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.values.dim()));
    for (auto d : e.values.sizes()) put<std::int64_t>(out, d);
    auto data = e.values.to(torch::kCPU, torch::kFloat32).contiguous();
    out.write(reinterpret_cast<const char*>(data.data_ptr<float>()),
              static_cast<std::streamsize>(data.numel() * sizeof(float)));
  }
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw DataError("not a qmx checkpoint: " + path.string());
  if (auto v = get<std::uint32_t>(in, path); v != kVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(v));

  Checkpoint ckpt;
  const auto meta_len = get<std::uint64_t>(in, path);
  std::string meta(meta_len, '\0');
  if (!in.read(meta.data(), static_cast<std::streamsize>(meta_len))) throw DataError("truncated checkpoint metadata");
  ckpt.meta = nlohmann::json::parse(meta);

  const auto count = get<std::uint32_t>(in, path);
  ckpt.entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name.resize(get<std::uint32_t>(in, path));
    if (!in.read(e.name.data(), static_cast<std::streamsize>(e.name.size()))) throw DataError("truncated entry name");
    const auto kind = get<std::uint8_t>(in, path);
    if (kind > 1) throw DataError("bad entry kind for " + e.name);
    e.kind = static_cast<EntryKind>(kind);
    std::vector<std::int64_t> dims(get<std::uint32_t>(in, path));
    for (auto& d : dims) d = get<std::int64_t>(in, path);
    e.values = torch::empty(dims, torch::kFloat32);
    if (!in.read(reinterpret_cast<char*>(e.values.data_ptr<float>()),
                 static_cast<std::streamsize>(e.values.numel() * sizeof(float))))
      throw DataError("truncated values for " + e.name);
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

Checkpoint capture_state(const torch::nn::Module& module, nlohmann::json meta) {
  Checkpoint ckpt;
  ckpt.meta = std::move(meta);
  for (const auto& p : module.named_parameters(true))
    ckpt.entries.push_back({p.key(), EntryKind::parameter, p.value().detach().to(torch::kFloat32).clone()});
  for (const auto& b : module.named_buffers(true))
    if (is_float(b.value()))
      ckpt.entries.push_back({b.key(), EntryKind::buffer, b.value().detach().to(torch::kFloat32).clone()});
  return ckpt;
}

void restore_state(torch::nn::Module& module, const Checkpoint& ckpt) {
  torch::NoGradGuard guard;
  std::unordered_set<std::string> seen;
  auto assign = [&](const std::string& name, torch::Tensor& target) {
    const auto* e = ckpt.find(name);
    if (!e) throw DataError("checkpoint is missing " + name);
    if (e->values.sizes() != target.sizes()) throw DataError("shape mismatch for " + name);
    target.copy_(e->values.to(target.dtype()));
    seen.insert(name);
  };
  for (auto& p : module.named_parameters(true)) assign(p.key(), p.value());
  for (auto& b : module.named_buffers(true))
    if (is_float(b.value())) assign(b.key(), b.value());
  for (const auto& e : ckpt.entries)
    if (!seen.count(e.name)) throw DataError("unexpected checkpoint entry " + e.name);
}

}  // namespace qmx
