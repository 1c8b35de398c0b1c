#include "clsr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "clsr/config.hpp"
#include "clsr/errors.hpp"

namespace clsr {

namespace {

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}

  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 4);
  }
  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void tensor_data(const Tensor& t) {
    for (double v : t.values()) f64(v);
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::string path) : in_(in), path_(std::move(path)) {}

  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw DataError(path_ + ": truncated checkpoint");
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u32();
    if (n > (1u << 30)) throw DataError(path_ + ": implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  Shape shape() {
    const auto rank = u8();
    if (rank > 2) throw DataError(path_ + ": tensor rank " + std::to_string(rank) + " unsupported");
    Shape s;
    s.rank = rank;
    for (std::size_t i = 0; i < rank; ++i) s.dims[i] = u64();
    return s;
  }
  void tensor_data(Tensor& t) {
    for (auto& v : t.values()) v = f64();
  }
  const std::string& path() const { return path_; }

 private:
  std::ifstream& in_;
  std::string path_;
};

void write_shape(Writer& w, const Shape& s) {
  w.u8(static_cast<std::uint8_t>(s.rank));
  for (std::size_t i = 0; i < s.rank; ++i) w.u64(s.dims[i]);
}

}  // namespace

std::string checkpoint_echo(const model::ClsrModel& m) {
  std::string out;
  for (const auto& [k, v] : model_key_values(m.config())) out += k + " = " + v + "\n";
  out += "n_users = " + std::to_string(m.n_users()) + "\n";
  out += "n_items = " + std::to_string(m.n_items()) + "\n";
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const model::ClsrModel& m, const AdamState& adam,
                     const TrainingState& training, const std::vector<std::string>& user_ids,
                     const std::vector<std::string>& item_ids, const std::string& run_config) {
  const auto& params = m.params();
  if (!adam.m.empty() && (adam.m.size() != params.size() || adam.v.size() != params.size()))
    throw ShapeError("save_checkpoint: optimiser state does not match the parameter list");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    Writer w(out);
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.u32(kCheckpointVersion);
    w.str(checkpoint_echo(m));
    w.str(run_config);

    w.u64(params.size());
    for (const auto& p : params) {
      w.str(p->name);
      w.u8(static_cast<std::uint8_t>((p->trainable ? 1 : 0) | (p->regularized ? 2 : 0)));
      write_shape(w, p->value.shape());
      w.tensor_data(p->value);
    }

    w.u64(adam.step);
    w.u8(adam.m.empty() ? 0 : 1);
    if (!adam.m.empty()) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        w.tensor_data(adam.m[i]);
        w.tensor_data(adam.v[i]);
      }
    }

    w.u64(training.epoch);
    w.u64(training.step);
    w.f64(training.best_gauc);
    w.u64(training.best_epoch);
    w.u64(training.bad_epochs);
    w.str(training.rng_state);

    w.u64(user_ids.size());
    for (const auto& s : user_ids) w.str(s);
    w.u64(item_ids.size());
    for (const auto& s : item_ids) w.str(s);
    out.flush();
    if (!out) throw DataError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointContents load_checkpoint(const std::filesystem::path& path, model::ClsrModel& m) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw DataError(path.string() + ": not a checkpoint file");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));

  CheckpointContents c;
  c.config_echo = r.str();
  const auto expected = checkpoint_echo(m);
  if (c.config_echo != expected)
    throw ConfigError(path.string() + ": checkpoint was written for a different model configuration\n"
                      "checkpoint:\n" + c.config_echo + "current:\n" + expected);
  c.run_config = r.str();

  auto& params = m.params();
  const auto n = r.u64();
  if (n != params.size())
    throw ConfigError(path.string() + ": " + std::to_string(n) + " tensors, model has " +
                      std::to_string(params.size()));
  // Read into scratch first so a failed load leaves the model untouched.
  std::vector<Tensor> values;
  values.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto name = r.str();
    const auto flags = r.u8();
    const auto shape = r.shape();
    const auto& p = params[i];
    if (name != p.name) throw ConfigError(path.string() + ": tensor " + std::to_string(i) + " is '" + name +
                                          "', expected '" + p.name + "'");
    if (!(shape == p.value.shape()))
      throw ConfigError(path.string() + ": tensor '" + name + "' has shape " + shape.str() + ", model expects " +
                        p.value.shape().str());
    if (((flags & 1) != 0) != p.trainable) throw ConfigError(path.string() + ": tensor '" + name + "' flag mismatch");
    Tensor t(shape);
    r.tensor_data(t);
    values.push_back(std::move(t));
  }

  c.adam.step = r.u64();
  if (r.u8() != 0) {
    for (std::size_t i = 0; i < n; ++i) {
      Tensor mt(values[i].shape());
      Tensor vt(values[i].shape());
      r.tensor_data(mt);
      r.tensor_data(vt);
      c.adam.m.push_back(std::move(mt));
      c.adam.v.push_back(std::move(vt));
    }
  }

  c.training.epoch = r.u64();
  c.training.step = r.u64();
  c.training.best_gauc = r.f64();
  c.training.best_epoch = r.u64();
  c.training.bad_epochs = r.u64();
  c.training.rng_state = r.str();

  const auto nu = r.u64();
  for (std::uint64_t i = 0; i < nu; ++i) c.user_ids.push_back(r.str());
  const auto ni = r.u64();
  for (std::uint64_t i = 0; i < ni; ++i) c.item_ids.push_back(r.str());

  for (std::size_t i = 0; i < n; ++i) params[i].value = std::move(values[i]);
  return c;
}

}  // namespace clsr
