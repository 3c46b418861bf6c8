#include "qfat/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "qfat/error.hpp"

namespace qfat {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[4] = {'Q', 'F', 'A', 'T'};

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& in, const std::filesystem::path& path) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  require(static_cast<bool>(in), "checkpoint " + path.string() + ": truncated file");
  return v;
}

}  // namespace

void save_parameters(const std::filesystem::path& path, const ParameterStore<float>& store) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), "checkpoint: cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& p : store) {
    require(p.name.size() <= 0xffff, "checkpoint: parameter name too long");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(p.shape.size()));
    for (auto d : p.shape) put<std::uint32_t>(out, d);
    out.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.size() * sizeof(float)));
  }
  require(static_cast<bool>(out), "checkpoint: write to " + path.string() + " failed");
}

ParameterStore<float> load_parameters(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "checkpoint: cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  require(static_cast<bool>(in) && std::memcmp(magic, kMagic, 4) == 0,
          "checkpoint " + path.string() + ": bad magic (not a QFAT parameter file)");
  const auto version = get<std::uint32_t>(in, path);
  require(version == kCheckpointVersion, "checkpoint " + path.string() + ": unsupported version " +
                                             std::to_string(version) + " (expected " +
                                             std::to_string(kCheckpointVersion) + ")");
  const auto count = get<std::uint32_t>(in, path);

  ParameterStore<float> store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint16_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    require(static_cast<bool>(in), "checkpoint " + path.string() + ": truncated parameter name");
    const auto rank = get<std::uint8_t>(in, path);
    require(rank == 1 || rank == 2, "checkpoint " + path.string() + ": parameter '" + name + "' has rank " +
                                        std::to_string(rank));
    std::vector<std::uint32_t> shape(rank);
    for (auto& d : shape) d = get<std::uint32_t>(in, path);
    auto& p = store[store.add(name, shape)];
    in.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(p.size() * sizeof(float)));
    require(static_cast<bool>(in), "checkpoint " + path.string() + ": truncated payload for '" + name + "'");
  }
  require(in.peek() == std::ifstream::traits_type::eof(), "checkpoint " + path.string() + ": trailing bytes");
  return store;
}

void assign_parameters(ParameterStore<float>& target, const ParameterStore<float>& loaded) {
  require(target.size() == loaded.size(), "checkpoint: parameter count mismatch (expected " +
                                              std::to_string(target.size()) + ", file has " +
                                              std::to_string(loaded.size()) + ")");
  for (std::size_t i = 0; i < target.size(); ++i) {
    require(target[i].name == loaded[i].name,
            "checkpoint: expected parameter '" + target[i].name + "', found '" + loaded[i].name + "'");
    require(target[i].shape == loaded[i].shape, "checkpoint: shape mismatch for '" + target[i].name + "'");
    target[i].value = loaded[i].value;
  }
}

}  // namespace qfat
