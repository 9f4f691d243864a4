#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "sstx/trainer.hpp"

namespace sstx {

namespace {

constexpr char kMagic[4] = {'S', 'S', 'T', 'X'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float f) { uint(std::bit_cast<std::uint32_t>(f)); }
  void string(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::vector<char> data, std::string path) : buf_(std::move(data)), path_(std::move(path)) {}

  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n)
      throw FormatError(path_ + ": truncated while reading " + what + " at byte " + std::to_string(pos_));
  }
  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>("tensor values")); }
  std::string string(const char* what) {
    const auto n = uint<std::uint32_t>(what);
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }
  std::size_t position() const { return pos_; }
  const std::string& path() const { return path_; }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
  std::string path_;
};

void write_entry(Writer& w, const std::string& name, const Matrix& m) {
  w.string(name);
  w.uint(std::uint32_t{2});
  w.uint(static_cast<std::uint32_t>(m.rows()));
  w.uint(static_cast<std::uint32_t>(m.cols()));
  for (Index i = 0; i < m.size(); ++i) w.f32(static_cast<float>(m.data()[i]));
}

Matrix read_entry(Reader& r, const std::string& expected_name, Index rows, Index cols) {
  const std::string name = r.string("entry name");
  if (name != expected_name)
    throw FormatError(r.path() + ": expected entry '" + expected_name + "', found '" + name + "'");
  const auto rank = r.uint<std::uint32_t>("rank");
  if (rank != 2) throw FormatError(r.path() + ": entry '" + name + "' has rank " + std::to_string(rank));
  const auto d0 = r.uint<std::uint32_t>("dims");
  const auto d1 = r.uint<std::uint32_t>("dims");
  if (d0 != rows || d1 != cols)
    throw FormatError(r.path() + ": entry '" + name + "' is " + std::to_string(d0) + "x" + std::to_string(d1) +
                      ", model expects " + std::to_string(rows) + "x" + std::to_string(cols));
  r.need(static_cast<std::size_t>(d0) * d1 * 4, "tensor values");
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = r.f32();
  if (!kernels::all_finite(m)) throw FormatError(r.path() + ": entry '" + name + "' holds non-finite values");
  return m;
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
  const auto& params = state.model.parameters();
  Writer w;
  w.bytes(kMagic, 4);
  w.uint(kCheckpointVersion);
  w.uint(static_cast<std::uint32_t>(3 * params.size()));
  for (const auto& p : params) write_entry(w, p.name, p.tensor.value());
  const bool have_moments = state.adam.m.size() == params.size();
  for (const char* prefix : {"adam.m:", "adam.v:"}) {
    const auto& moments = prefix[5] == 'm' ? state.adam.m : state.adam.v;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& t = params[i].tensor;
      write_entry(w, prefix + params[i].name, have_moments ? moments[i] : Matrix::Zero(t.rows(), t.cols()).eval());
    }
  }
  w.uint(static_cast<std::uint64_t>(state.step));
  for (std::uint64_t s : state.rng.state()) w.uint(s);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    if (!out) throw DataError("failed writing checkpoint " + path);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

void round_to_checkpoint_precision(TrainState& state) {
  auto round = [](Matrix& m) { m = m.cast<float>().cast<double>(); };
  for (auto& p : state.model.parameters()) round(p.tensor.mutable_value());
  for (auto& m : state.adam.m) round(m);
  for (auto& v : state.adam.v) round(v);
}

TrainState load_checkpoint(const std::string& path, const TransformerConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(data), path);

  r.need(4, "magic");
  std::array<char, 4> magic{};
  for (char& c : magic) c = static_cast<char>(r.uint<std::uint8_t>("magic"));
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError(path + ": not a checkpoint (bad magic)");
  const auto version = r.uint<std::uint16_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));

  TrainState state(config, 0);
  auto& params = state.model.parameters();
  const auto count = r.uint<std::uint32_t>("entry count");
  if (count != 3 * params.size())
    throw FormatError(path + ": holds " + std::to_string(count) + " entries, model expects " +
                      std::to_string(3 * params.size()));
  for (auto& p : params) p.tensor.mutable_value() = read_entry(r, p.name, p.tensor.rows(), p.tensor.cols());
  for (const char* prefix : {"adam.m:", "adam.v:"}) {
    auto& moments = prefix[5] == 'm' ? state.adam.m : state.adam.v;
    for (const auto& p : params) moments.push_back(read_entry(r, prefix + p.name, p.tensor.rows(), p.tensor.cols()));
  }
  state.step = static_cast<std::int64_t>(r.uint<std::uint64_t>("step counter"));
  if (state.step < 0) throw FormatError(path + ": step counter out of range");
  std::array<std::uint64_t, 4> rng_state{};
  for (auto& s : rng_state) s = r.uint<std::uint64_t>("rng state");
  if (rng_state == std::array<std::uint64_t, 4>{}) throw FormatError(path + ": all-zero rng state");
  state.rng.set_state(rng_state);
  if (!r.done())
    throw FormatError(path + ": " + std::to_string(r.position()) + " bytes parsed but the file is longer");
  return state;
}

}  // namespace sstx
