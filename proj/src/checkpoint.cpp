#include "palm/checkpoint.hpp"

#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include "palm/config.hpp"

namespace palm {

namespace {

constexpr char kMagic[4] = {'P', 'L', 'M', 'C'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  [[nodiscard]] bool done() const { return pos_ == data_.size(); }
  [[nodiscard]] std::size_t remaining() const { return data_.size() - pos_; }
  [[noreturn]] void fail(const std::string& msg) const { throw CheckpointError(path_ + ": " + msg); }

 private:
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) {
      fail(std::string("truncated while reading ") + what);
    }
  }
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError("cannot read checkpoint " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> read_header(Reader& r) {
  if (r.bytes(4, "magic") != std::string(kMagic, 4)) {
    r.fail("not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    r.fail("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t len = r.u32("header length");
  const std::string text = r.bytes(len, "header");
  std::map<std::string, std::string> header;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      r.fail("malformed header line '" + line + "'");
    }
    header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return header;
}

ModelConfig model_config_from(const std::map<std::string, std::string>& header, Reader& r) {
  RunConfig rc;
  for (const auto& [k, v] : header) {
    if (k.starts_with("model.")) {
      try {
        rc.set(k, v);
      } catch (const ConfigError& e) {
        r.fail(e.what());
      }
    }
  }
  try {
    rc.model.validate();
  } catch (const std::invalid_argument& e) {
    r.fail(std::string("stored model config invalid: ") + e.what());
  }
  return rc.model;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  RunConfig rc;
  rc.model = ckpt.params.config;
  std::string header;
  std::istringstream all(rc.serialize());
  for (std::string line; std::getline(all, line);) {
    if (line.starts_with("model.")) {
      header += line + "\n";
    }
  }
  header += "tied_output=1\n";
  for (const auto& [k, v] : ckpt.meta) {
    if (k.starts_with("model.") || k == "tied_output" || k.find_first_of("=\n") != std::string::npos ||
        v.find('\n') != std::string::npos) {
      throw CheckpointError("checkpoint: invalid metadata key '" + k + "'");
    }
    header += k + "=" + v + "\n";
  }

  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;

  std::vector<std::pair<std::string, const Matrix<float>*>> arrays;
  ckpt.params.visit([&](const std::string& name, const Matrix<float>& m) { arrays.emplace_back(name, &m); });
  for (const auto& [name, m] : ckpt.state) {
    arrays.emplace_back(name, &m);
  }
  put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, m] : arrays) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, 2);
    put_u32(out, static_cast<std::uint32_t>(m->rows()));
    put_u32(out, static_cast<std::uint32_t>(m->cols()));
    for (Index i = 0; i < m->size(); ++i) {
      put_f32(out, m->data()[i]);
    }
  }

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) {
      throw CheckpointError("cannot write checkpoint " + path.string());
    }
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) {
      throw CheckpointError("write failed for " + path.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

std::map<std::string, std::string> read_checkpoint_header(const std::filesystem::path& path) {
  Reader r(slurp(path), path.string());
  return read_header(r);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(slurp(path), path.string());
  auto header = read_header(r);
  if (header["tied_output"] != "1") {
    r.fail("output projection is not tied to the token embedding");
  }
  Checkpoint ckpt;
  ckpt.params = ModelParams<float>::shaped(model_config_from(header, r));
  for (const auto& [k, v] : header) {
    if (!k.starts_with("model.") && k != "tied_output") {
      ckpt.meta[k] = v;
    }
  }

  std::map<std::string, Matrix<float>*> expected;
  ckpt.params.visit([&](const std::string& name, Matrix<float>& m) { expected[name] = &m; });
  std::map<std::string, bool> seen;

  const std::uint32_t count = r.u32("array count");
  for (std::uint32_t a = 0; a < count; ++a) {
    const std::string name = r.bytes(r.u32("name length"), "array name");
    const std::uint32_t rank = r.u32("rank");
    if (rank < 1 || rank > 2) {
      r.fail("array '" + name + "' has unsupported rank " + std::to_string(rank));
    }
    Index rows = r.u32("dims");
    Index cols = rank == 2 ? static_cast<Index>(r.u32("dims")) : 1;
    if (rank == 1) {
      std::swap(rows, cols);
    }
    if (static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) > r.remaining() / 4) {
      r.fail("truncated while reading array '" + name + "'");
    }
    Matrix<float> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
      m.data()[i] = r.f32("array values");
    }
    auto it = expected.find(name);
    if (it == expected.end()) {
      if (name.starts_with("lm.output") || name.starts_with("output.")) {
        r.fail("untied output projection '" + name + "' present");
      }
      ckpt.state[name] = std::move(m);
      continue;
    }
    if (m.rows() != it->second->rows() || m.cols() != it->second->cols()) {
      r.fail("array '" + name + "' has shape " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
             ", config implies " + std::to_string(it->second->rows()) + "x" +
             std::to_string(it->second->cols()));
    }
    *it->second = std::move(m);
    seen[name] = true;
  }
  if (!r.done()) {
    r.fail("trailing bytes after last array");
  }
  for (const auto& [name, m] : expected) {
    if (!seen.count(name)) {
      r.fail("missing array '" + name + "'");
    }
  }
  return ckpt;
}

}  // namespace palm
