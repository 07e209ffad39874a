#include "m2/numerics.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

namespace m2 {

template <typename T>
Tensor<T> init_tensor(const ParamSpec& spec) {
  if (spec.rows == 0 || spec.cols == 0) throw ConfigError("init_tensor: empty shape");
  const std::size_t fan_in = spec.fan_in ? spec.fan_in : spec.rows;
  const std::size_t fan_out = spec.fan_out ? spec.fan_out : spec.cols;
  Tensor<T> t = Tensor<T>::matrix(spec.rows, spec.cols);
  std::mt19937_64 rng(spec.seed);
  switch (spec.kind) {
    case InitKind::Zero:
      break;
    case InitKind::One:
      t.fill(T(1));
      break;
    case InitKind::GlorotUniform: {
      const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (T& v : t.storage()) v = T(u(rng));
      break;
    }
    case InitKind::He: {
      std::normal_distribution<double> n(0.0, std::sqrt(2.0 / double(fan_in)));
      for (T& v : t.storage()) v = T(n(rng));
      break;
    }
    case InitKind::MemoryKey: {
      if (spec.n_memory < 1) throw ConfigError("init_tensor: memory kinds require n_memory >= 1");
      if (spec.d_k < 1) throw ConfigError("init_tensor: memory-key kind requires d_k >= 1");
      std::normal_distribution<double> n(0.0, std::sqrt(1.0 / double(spec.d_k)));
      for (T& v : t.storage()) v = T(n(rng));
      break;
    }
    case InitKind::MemoryValue: {
      if (spec.n_memory < 1) throw ConfigError("init_tensor: memory kinds require n_memory >= 1");
      std::normal_distribution<double> n(0.0, std::sqrt(1.0 / double(spec.n_memory)));
      for (T& v : t.storage()) v = T(n(rng));
      break;
    }
  }
  return t;
}

template Tensor<float> init_tensor<float>(const ParamSpec&);
template Tensor<double> init_tensor<double>(const ParamSpec&);

double warmup_lr(std::uint64_t step, std::size_t d_model, std::uint64_t warmup) {
  if (step == 0) throw ContractError("warmup_lr: step must be >= 1");
  if (d_model == 0 || warmup == 0) throw ConfigError("warmup_lr: d_model and warmup must be positive");
  const double s = double(step);
  return std::pow(double(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(double(warmup), -1.5));
}

// ---- Adam ---------------------------------------------------------------

template <typename T>
Adam<T>::Adam(const ParamStore<T>& params, AdamConfig config) : config_(config) {
  m_ = params.zero_grads();
  v_ = params.zero_grads();
}

template <typename T>
void Adam<T>::step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads, double lr) {
  if (grads.size() != params.size() || m_.size() != params.size())
    throw ShapeError("adam: gradient/moment count does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params.at(i).value.shape())
      throw ShapeError("adam: gradient shape mismatch for " + params.at(i).name);
    if (params.at(i).trainable && !grads[i].all_finite())
      throw NumericError("adam: non-finite gradient for parameter " + params.at(i).name);
  }
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(step_));
  const double c2 = 1.0 - std::pow(b2, double(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = params.at(i);
    if (!p.trainable) continue;
    Tensor<T>& m = m_[i];
    Tensor<T>& v = v_[i];
    const Tensor<T>& g = grads[i];
    for (std::size_t j = 0; j < g.size(); ++j) {
      m[j] = T(b1 * double(m[j]) + (1.0 - b1) * double(g[j]));
      v[j] = T(b2 * double(v[j]) + (1.0 - b2) * double(g[j]) * double(g[j]));
      const double mhat = double(m[j]) / c1;
      const double vhat = double(v[j]) / c2;
      p.value[j] = T(double(p.value[j]) - lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

template class Adam<float>;
template class Adam<double>;

// ---- gradient oracle ------------------------------------------------------

Tensor<double> finite_diff_grad(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                const Tensor<double>& x, double h) {
  if (!(h > 0)) throw ContractError("finite_diff_grad: step must be positive");
  auto eval = [&](const Tensor<double>& at) {
    Tensor<double> y = f(at);
    if (y.size() != 1) throw ContractError("finite_diff_grad: function output is not scalar");
    return y[0];
  };
  Tensor<double> grad(x.shape());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = eval(probe);
    probe[i] = x[i] - h;
    const double down = eval(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2 * h);
  }
  return grad;
}

Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                double h) {
  return finite_diff_grad(
      [&f](const Tensor<double>& at) -> Tensor<double> { return Tensor<double>({1}, {f(at)}); }, x, h);
}

double max_relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor) {
  if (a.shape() != b.shape()) throw ShapeError("max_relative_error: shape mismatch");
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

// ---- checkpoint container -------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'M', '2', 'C', 'K', 'P', 'T', '0', '1'};

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

void put_bytes(std::vector<std::uint8_t>& out, const std::string& s) { out.insert(out.end(), s.begin(), s.end()); }

class Reader {
 public:
  explicit Reader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

  const std::uint8_t* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw FormatError("checkpoint: truncated file");
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8() { return *take(1); }
  std::uint32_t u32() {
    const std::uint8_t* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const std::uint8_t* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    return v;
  }
  std::string str(std::size_t n) {
    const std::uint8_t* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_params(const ParamStore<float>& params) {
  std::vector<std::uint8_t> out;
  put_u32(out, std::uint32_t(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter<float>& p = params.at(i);
    put_u32(out, std::uint32_t(p.name.size()));
    put_bytes(out, p.name);
    put_u8(out, p.trainable ? 1 : 0);
    put_u32(out, std::uint32_t(p.value.rank()));
    for (std::size_t d : p.value.shape()) put_u64(out, d);
    for (float v : p.value.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

void write_checkpoint(const std::string& path, const std::string& manifest, const ParamStore<float>& params) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u32(out, std::uint32_t(manifest.size()));
  put_bytes(out, manifest);
  const auto body = serialize_params(params);
  out.insert(out.end(), body.begin(), body.end());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("checkpoint: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
  if (!f) throw FormatError("checkpoint: write failed for " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes));
  const std::uint8_t* magic = r.take(8);
  if (!std::equal(magic, magic + 8, kCheckpointMagic)) throw FormatError("checkpoint: bad magic in " + path);
  Checkpoint ck;
  ck.manifest = r.str(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = r.str(r.u32());
    const bool trainable = r.u8() != 0;
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    Tensor<float> t(shape);
    for (float& v : t.storage()) v = std::bit_cast<float>(r.u32());
    ck.params.add(std::move(name), std::move(t), trainable);
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes in " + path);
  return ck;
}

}  // namespace m2
