#pragma once

// Named tensor tables, the Adam optimizer, and the checkpoint file format.
//
// Checkpoint layout (all integers little-endian u32):
//   "PSTN" magic, version, tensor count,
//   per tensor: name length, name bytes, rows, cols, rows*cols f32 (row-major).
// A JSON sidecar `<file>.json` carries hyper-parameters and bookkeeping.

#include "protostyle/autodiff.hpp"
#include "protostyle/core.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace protostyle {

using json = nlohmann::json;

class ParamSet {
 public:
  Matrix& operator[](const std::string& name) { return tensors_[name]; }

  const Matrix& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw StateError("missing parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
  void set(const std::string& name, Matrix m) { tensors_[name] = std::move(m); }
  const std::map<std::string, Matrix>& tensors() const { return tensors_; }
  std::map<std::string, Matrix>& tensors() { return tensors_; }
  size_t size() const { return tensors_.size(); }

  Index scalar_count() const {
    Index n = 0;
    for (const auto& [_, m] : tensors_) n += m.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& [_, m] : tensors_)
      if (!m.allFinite()) return false;
    return true;
  }

  void round_to_f32() {
    for (auto& [_, m] : tensors_) protostyle::round_to_f32(m);
  }

  // Copies every tensor whose name starts with `prefix` from `other`.
  void merge(const ParamSet& other, const std::string& prefix = "") {
    for (const auto& [name, m] : other.tensors_)
      if (name.rfind(prefix, 0) == 0) tensors_[name] = m;
  }

  ParamSet subset(const std::string& prefix) const {
    ParamSet out;
    for (const auto& [name, m] : tensors_)
      if (name.rfind(prefix, 0) == 0) out.tensors_[name] = m;
    return out;
  }

 private:
  std::map<std::string, Matrix> tensors_;
};

inline ad::Var P(ad::Tape& t, const ParamSet& ps, const std::string& name) { return t.param(name, ps.at(name)); }

// Adam with decoupled weight decay; only names accepted by `trainable` move.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 0.0;  // 0 disables global-norm clipping
  };

  Adam() = default;
  explicit Adam(Options opt) : opt_(opt) {}

  void set_lr(double lr) { opt_.lr = lr; }
  const Options& options() const { return opt_; }
  long steps() const { return step_; }

  void step(ParamSet& params, const ad::GradMap& grads,
            const std::function<bool(const std::string&)>& trainable = nullptr) {
    ++step_;
    double scale = 1.0;
    if (opt_.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& [name, g] : grads)
        if (!trainable || trainable(name)) sq += g.squaredNorm();
      const double norm = std::sqrt(sq);
      if (norm > opt_.clip_norm) scale = opt_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    for (const auto& [name, g_raw] : grads) {
      if (trainable && !trainable(name)) continue;
      Matrix& p = params[name];
      require_shape(p.rows() == g_raw.rows() && p.cols() == g_raw.cols(), "adam: grad shape for " + name);
      Matrix g = g_raw * scale;
      auto [it, inserted] = m_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
      Matrix& m = it->second;
      Matrix& v = v_.try_emplace(name, Matrix::Zero(p.rows(), p.cols())).first->second;
      m = opt_.beta1 * m + (1.0 - opt_.beta1) * g;
      v = opt_.beta2 * v + (1.0 - opt_.beta2) * g.cwiseProduct(g);
      if (opt_.weight_decay > 0.0) p *= (1.0 - opt_.lr * opt_.weight_decay);
      p.array() -= opt_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + opt_.eps);
    }
  }

 private:
  Options opt_;
  long step_ = 0;
  std::map<std::string, Matrix> m_;
  std::map<std::string, Matrix> v_;
};

// ---- binary helpers -----------------------------------------------------------

namespace io_detail {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw IoError("truncated checkpoint");
  return v;
}

}  // namespace io_detail

inline void write_f32_matrix(std::ostream& os, const Matrix& m) {
  std::vector<float> buf(static_cast<size_t>(m.size()));
  size_t k = 0;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) buf[k++] = static_cast<float>(m(i, j));
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

inline Matrix read_f32_matrix(std::istream& is, Index rows, Index cols) {
  std::vector<float> buf(static_cast<size_t>(rows * cols));
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!is) throw IoError("truncated tensor data");
  Matrix m(rows, cols);
  size_t k = 0;
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = static_cast<double>(buf[k++]);
  return m;
}

// Raw L x D sequence file: row-major little-endian f32, no header.
inline void write_sequence_file(const std::filesystem::path& path, const Matrix& frames) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_f32_matrix(os, frames);
  if (!os) throw IoError("write failed: " + path.string());
}

inline Matrix read_sequence_file(const std::filesystem::path& path, Index rows, Index cols) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  is.seekg(0, std::ios::end);
  const auto bytes = static_cast<Index>(is.tellg());
  if (bytes != rows * cols * 4)
    throw IoError(path.string() + ": expected " + std::to_string(rows * cols * 4) + " bytes, found " + std::to_string(bytes));
  is.seekg(0);
  return read_f32_matrix(is, rows, cols);
}

inline void save_tensors(const std::filesystem::path& path, const ParamSet& params, const json& sidecar = json::object()) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write("PSTN", 4);
  io_detail::put_u32(os, 1);
  io_detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, m] : params.tensors()) {
    io_detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io_detail::put_u32(os, static_cast<std::uint32_t>(m.rows()));
    io_detail::put_u32(os, static_cast<std::uint32_t>(m.cols()));
    write_f32_matrix(os, m);
  }
  if (!os) throw IoError("write failed: " + path.string());
  std::ofstream js(path.string() + ".json");
  js << sidecar.dump(2) << "\n";
}

inline ParamSet load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PSTN", 4) != 0) throw IoError(path.string() + ": bad checkpoint magic");
  const auto version = io_detail::get_u32(is);
  if (version != 1) throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto count = io_detail::get_u32(is);
  ParamSet out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = io_detail::get_u32(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rows = io_detail::get_u32(is);
    const auto cols = io_detail::get_u32(is);
    out.set(name, read_f32_matrix(is, rows, cols));
  }
  return out;
}

inline json load_sidecar(const std::filesystem::path& path) {
  std::ifstream is(path.string() + ".json");
  if (!is) return json::object();
  return json::parse(is);
}

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot hash " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return sha256_hex(buf.str());
}

}  // namespace protostyle
