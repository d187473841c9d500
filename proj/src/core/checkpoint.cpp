#include "ofa/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ofa/error.hpp"

namespace ofa::checkpoint {

namespace {

template <class T>
void put_le(std::vector<uint8_t>& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<uint8_t>(static_cast<uint64_t>(v) >> (8 * i)));
}

template <class T>
T get_le(const uint8_t* p) {
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return static_cast<T>(v);
}

uint32_t float_bits(float f) {
  uint32_t u;
  std::memcpy(&u, &f, 4);
  return u;
}

float bits_float(uint32_t u) {
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace

const Blob& Container::at(const std::string& key) const {
  for (const auto& b : tensors)
    if (b.key == key) return b;
  throw FormatError("checkpoint has no tensor '" + key + "'");
}

bool Container::contains(const std::string& key) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const Blob& b) { return b.key == key; });
}

void Container::add(std::string key, const Tensor& t) {
  add(std::move(key), t.shape(), std::vector<float>(t.data().begin(), t.data().end()));
}

void Container::add(std::string key, Shape shape, std::vector<float> data) {
  if (contains(key)) throw Error(ErrorKind::internal, "duplicate checkpoint key '" + key + "'");
  tensors.push_back(Blob{std::move(key), std::move(shape), std::move(data)});
}

std::vector<uint8_t> encode(const Container& c) {
  nlohmann::json list = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& b : c.tensors) {
    list.push_back({{"key", b.key}, {"shape", b.shape}, {"offset", offset}, {"numel", b.data.size()}});
    offset += b.data.size();
  }
  const nlohmann::json manifest = {
      {"schema_version", kVersion}, {"kind", c.kind}, {"meta", c.meta}, {"tensors", list}};
  const std::string text = manifest.dump();
  std::vector<uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<uint32_t>(out, kVersion);
  put_le<uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset * 4);
  for (const auto& b : c.tensors)
    for (float f : b.data) put_le<uint32_t>(out, float_bits(f));
  return out;
}

Container decode(const std::vector<uint8_t>& bytes, const std::string& origin) {
  const size_t header = sizeof(kMagic) + 4 + 8;
  if (bytes.size() < header || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    throw FormatError(origin + ": not a checkpoint (bad magic)");
  const auto version = get_le<uint32_t>(bytes.data() + 8);
  if (version != kVersion)
    throw VersionError(origin + ": checkpoint version " + std::to_string(version) + ", expected " +
                       std::to_string(kVersion));
  const auto len = get_le<uint64_t>(bytes.data() + 12);
  if (len > bytes.size() - header) throw FormatError(origin + ": truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + header, bytes.begin() + static_cast<std::ptrdiff_t>(header + len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": corrupt manifest: " + e.what());
  }
  Container c;
  try {
    if (manifest.at("schema_version").get<uint32_t>() != kVersion)
      throw VersionError(origin + ": manifest schema_version " + manifest.at("schema_version").dump());
    c.kind = manifest.at("kind").get<std::string>();
    c.meta = manifest.at("meta");
    const size_t payload = header + len;
    const uint64_t avail = (bytes.size() - payload) / 4;
    for (const auto& t : manifest.at("tensors")) {
      Blob b;
      b.key = t.at("key").get<std::string>();
      b.shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<uint64_t>();
      const auto numel = t.at("numel").get<uint64_t>();
      if (static_cast<int64_t>(numel) != shape_numel(b.shape))
        throw FormatError(origin + ": tensor '" + b.key + "' numel does not match its shape");
      if (offset + numel > avail) throw FormatError(origin + ": tensor '" + b.key + "' lies past the end of the file");
      b.data.resize(numel);
      const uint8_t* p = bytes.data() + payload + offset * 4;
      for (uint64_t i = 0; i < numel; ++i) b.data[i] = bits_float(get_le<uint32_t>(p + 4 * i));
      if (c.contains(b.key)) throw FormatError(origin + ": tensor '" + b.key + "' listed twice");
      c.tensors.push_back(std::move(b));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": corrupt manifest: " + e.what());
  }
  return c;
}

void write(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode(c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp.string(), "cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(tmp.string(), "write failed");
  }
  std::filesystem::rename(tmp, path);
}

Container read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open checkpoint");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes, path.string());
}

void put_supernet(Container& c, const std::string& prefix, const Supernet& net) {
  for (const auto& [name, p] : net.params()) c.add(prefix + name, p.tensor);
}

namespace {

void copy_into(const Blob& b, Tensor& t) {
  if (b.shape != t.shape())
    throw FormatError("checkpoint tensor '" + b.key + "' has shape " + shape_str(b.shape) + ", expected " +
                      shape_str(t.shape()));
  std::copy(b.data.begin(), b.data.end(), t.data().begin());
}

}  // namespace

void get_supernet(const Container& c, const std::string& prefix, Supernet& net) {
  for (auto& [name, p] : net.params()) copy_into(c.at(prefix + name), p.tensor);
}

void put_network(Container& c, const std::string& prefix, NetworkWeights& net) {
  visit_tensors(net, [&](const std::string& name, Tensor& t, TensorRole) { c.add(prefix + name, t); });
}

void get_network(const Container& c, const std::string& prefix, NetworkWeights& net) {
  visit_tensors(net, [&](const std::string& name, Tensor& t, TensorRole) { copy_into(c.at(prefix + name), t); });
}

elastic::StandaloneNet subnet_from(const Container& c, const std::string& prefix, const nlohmann::json& meta) {
  ArchSpec arch;
  try {
    arch = meta.at("arch").get<ArchSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint meta has no valid arch: ") + e.what());
  }
  const SubnetConfig cfg = subnet_from_json(meta.at("config"), arch);
  elastic::StandaloneNet net = elastic::standalone_skeleton(arch, cfg);
  get_network(c, prefix, net.weights());
  return net;
}

void save_subnet(const std::filesystem::path& path, elastic::StandaloneNet& net) {
  Container c;
  c.kind = "subnet";
  nlohmann::json cfg;
  to_json(cfg, net.config());
  c.meta = {{"arch", net.arch()}, {"config", cfg}, {"parameters", net.parameter_count()}};
  put_network(c, "", net.weights());
  write(path, c);
}

elastic::StandaloneNet load_subnet(const std::filesystem::path& path) {
  const Container c = read(path);
  if (c.kind != "subnet") throw FormatError(path.string() + ": expected a subnet checkpoint, found '" + c.kind + "'");
  return subnet_from(c, "", c.meta);
}

}  // namespace ofa::checkpoint
