#include "ihk/common/array_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <thread>

namespace ihk {

static_assert(std::endian::native == std::endian::little, "array container assumes a little-endian host");

const torch::Tensor& ArrayFile::at(const std::string& name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return t;
  }
  throw std::out_of_range("array file has no entry '" + name + "'");
}

bool ArrayFile::contains(const std::string& name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return true;
  }
  return false;
}

void ArrayFile::add(std::string name, const torch::Tensor& t) {
  if (name == "__metadata__") throw std::invalid_argument("reserved array name");
  arrays.emplace_back(std::move(name), t.detach().to(torch::kCPU, torch::kFloat32).contiguous());
}

std::string encode_array_file(const ArrayFile& file) {
  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : file.arrays) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    header[name] = {{"dtype", "F32"}, {"shape", t.sizes().vec()}, {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
  }
  if (!file.metadata.empty()) {
    // safetensors metadata values are strings.
    nlohmann::json meta = nlohmann::json::object();
    for (auto it = file.metadata.begin(); it != file.metadata.end(); ++it) {
      meta[it.key()] = it->is_string() ? it->get<std::string>() : it->dump();
    }
    header["__metadata__"] = meta;
  }
  std::string head = header.dump();
  while ((head.size() + 8) % 8 != 0) head.push_back(' ');

  std::string out;
  out.reserve(8 + head.size() + offset);
  const std::uint64_t len = head.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += head;
  for (const auto& [name, t] : file.arrays) {
    auto c = t.to(torch::kFloat32).contiguous();
    out.append(reinterpret_cast<const char*>(c.data_ptr<float>()), c.numel() * sizeof(float));
  }
  return out;
}

ArrayFile decode_array_file(const std::string& bytes) {
  if (bytes.size() < 8) throw std::runtime_error("array file truncated before header length");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), sizeof(len));
  if (len > bytes.size() - 8) throw std::runtime_error("array file header length exceeds file size");
  const auto header = nlohmann::json::parse(bytes.substr(8, len));
  const std::size_t base = 8 + len;

  ArrayFile file;
  std::vector<std::tuple<std::uint64_t, std::string, torch::Tensor>> ordered;
  for (auto it = header.begin(); it != header.end(); ++it) {
    if (it.key() == "__metadata__") {
      for (auto m = it->begin(); m != it->end(); ++m) {
        const auto s = m->get<std::string>();
        auto parsed = nlohmann::json::parse(s, nullptr, false);
        file.metadata[m.key()] = parsed.is_discarded() ? nlohmann::json(s) : parsed;
      }
      continue;
    }
    if ((*it)["dtype"] != "F32") throw std::runtime_error("unsupported dtype for '" + it.key() + "'");
    const auto shape = (*it)["shape"].get<std::vector<int64_t>>();
    const auto off = (*it)["data_offsets"].get<std::vector<std::uint64_t>>();
    int64_t numel = 1;
    for (auto s : shape) numel *= s;
    if (off.size() != 2 || off[1] - off[0] != static_cast<std::uint64_t>(numel) * sizeof(float) ||
        base + off[1] > bytes.size()) {
      throw std::runtime_error("corrupt data offsets for '" + it.key() + "'");
    }
    auto t = torch::empty(shape, torch::kFloat32);
    std::memcpy(t.data_ptr<float>(), bytes.data() + base + off[0], off[1] - off[0]);
    ordered.emplace_back(off[0], it.key(), t);
  }
  std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return std::get<0>(a) < std::get<0>(b); });
  for (auto& [o, n, t] : ordered) file.arrays.emplace_back(n, t);
  return file;
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write-then-rename so readers never observe a half-written file.
  auto tmp = path;
  tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_array_file(const std::filesystem::path& path, const ArrayFile& file) {
  write_file_bytes(path, encode_array_file(file));
}

ArrayFile load_array_file(const std::filesystem::path& path) { return decode_array_file(read_file_bytes(path)); }

}  // namespace ihk
