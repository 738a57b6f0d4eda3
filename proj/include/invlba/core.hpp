#pragma once

// Core scalar/tensor types, error taxonomy, seeded RNG and hashing used by
// every other header in the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace invlba {

using Scalar = double;

// ---------------------------------------------------------------------------
// Errors

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct IngestionError : Error {
  using Error::Error;
};
struct InfeasibilityError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};
struct DegenerateStepError : Error {
  using Error::Error;
};
struct OptimizationError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Hashing and seed derivation

inline uint64_t fnv1a64(const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Stage seeds derive from the master seed by name + index, so rerunning a
// single stage reproduces the exact stream a full run would use.
inline uint64_t derive_seed(uint64_t master, std::string_view stage, uint64_t index = 0) {
  return splitmix64(master ^ fnv1a64(stage) ^ (0x9e3779b97f4a7c15ull * (index + 1)));
}

// ---------------------------------------------------------------------------
// RNG
//
// Wraps mt19937_64 with hand-rolled uniform/normal transforms so streams do
// not depend on libstdc++ distribution internals.

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  double uniform() {  // [0,1)
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {  // Box-Muller, no cached second value
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // integer in [0, n)
  uint64_t below(uint64_t n) {
    if (n == 0) throw ContractError("Rng::below: n must be positive");
    // rejection sampling keeps the draw unbiased
    uint64_t lim = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
    uint64_t x = gen_();
    while (x >= lim) x = gen_();
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), returned sorted
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k < 0 || k > n) throw ContractError("sample_without_replacement: k out of range");
    std::vector<int> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < k; ++i) {
      int j = i + static_cast<int>(below(static_cast<uint64_t>(n - i)));
      std::swap(pool[i], pool[j]);
    }
    std::vector<int> out(pool.begin(), pool.begin() + k);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// Tensor: dense row-major array of doubles with a small shape vector.
// Images are stored CHW in [0,1]; latents are CHW as well.

struct Tensor {
  std::vector<int> shape;
  std::vector<Scalar> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, Scalar fill = 0.0) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(count(shape)), fill);
  }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw ContractError("Tensor: nonpositive dimension");
      n *= d;
    }
    return n;
  }

  static Tensor scalar(Scalar x) {
    Tensor t({1});
    t.v[0] = x;
    return t;
  }

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape); }

  int size() const { return static_cast<int>(v.size()); }
  Scalar& operator[](int i) { return v[static_cast<size_t>(i)]; }
  Scalar operator[](int i) const { return v[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // CHW indexing
  Scalar& at(int c, int y, int x) {
    return v[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  Scalar at(int c, int y, int x) const {
    return v[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  Tensor reshaped(std::vector<int> s) const {
    if (count(s) != static_cast<int64_t>(v.size())) throw ContractError("reshape: size mismatch");
    Tensor t = *this;
    t.shape = std::move(s);
    return t;
  }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (!a.same_shape(b)) throw ContractError(std::string(where) + ": shape mismatch");
}

// Elementwise helpers for oracle-free plain math paths.
inline Tensor t_add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "t_add");
  Tensor r = a;
  for (int i = 0; i < r.size(); ++i) r[i] += b[i];
  return r;
}
inline Tensor t_sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "t_sub");
  Tensor r = a;
  for (int i = 0; i < r.size(); ++i) r[i] -= b[i];
  return r;
}
inline Tensor t_mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "t_mul");
  Tensor r = a;
  for (int i = 0; i < r.size(); ++i) r[i] *= b[i];
  return r;
}
inline Tensor t_scale(const Tensor& a, Scalar s) {
  Tensor r = a;
  for (auto& x : r.v) x *= s;
  return r;
}
inline Tensor t_axpy(Scalar a, const Tensor& x, Scalar b, const Tensor& y) {
  check_same_shape(x, y, "t_axpy");
  Tensor r = x;
  for (int i = 0; i < r.size(); ++i) r[i] = a * x[i] + b * y[i];
  return r;
}
inline Tensor t_clip(const Tensor& a, Scalar lo, Scalar hi) {
  Tensor r = a;
  for (auto& x : r.v) x = std::min(hi, std::max(lo, x));
  return r;
}

inline Scalar linf_norm(const Tensor& a) {
  Scalar m = 0;
  for (Scalar x : a.v) m = std::max(m, std::abs(x));
  return m;
}
inline Scalar linf_dist(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "linf_dist");
  Scalar m = 0;
  for (int i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}
inline Scalar mean_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mean_abs_diff");
  Scalar s = 0;
  for (int i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / a.size();
}
inline Scalar mse(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mse");
  Scalar s = 0;
  for (int i = 0; i < a.size(); ++i) {
    Scalar d = a[i] - b[i];
    s += d * d;
  }
  return s / a.size();
}
// Peak signal-to-noise ratio for [0,1] images.
inline Scalar psnr(const Tensor& a, const Tensor& b) {
  Scalar m = mse(a, b);
  if (m <= 0) return std::numeric_limits<Scalar>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

inline uint64_t tensor_hash(const Tensor& t, uint64_t h0 = 0xcbf29ce484222325ull) {
  uint64_t h = h0;
  for (int d : t.shape) h = splitmix64(h ^ static_cast<uint64_t>(d));
  if (!t.v.empty()) h ^= fnv1a64(t.v.data(), t.v.size() * sizeof(Scalar));
  return h;
}

// ---------------------------------------------------------------------------
// Binary artifact IO (little-endian doubles, versioned magic header)

class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : f_(path, std::ios::binary) {
    if (!f_) throw IoError("cannot open for write: " + path);
  }
  void magic(const std::string& tag, uint32_t version) {
    u32(0x494e564cu);  // 'INVL'
    str(tag);
    u32(version);
  }
  void u32(uint32_t x) { f_.write(reinterpret_cast<const char*>(&x), 4); }
  void u64(uint64_t x) { f_.write(reinterpret_cast<const char*>(&x), 8); }
  void f64(double x) { f_.write(reinterpret_cast<const char*>(&x), 8); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    f_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensor(const Tensor& t) {
    u32(static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) u32(static_cast<uint32_t>(d));
    f_.write(reinterpret_cast<const char*>(t.v.data()),
             static_cast<std::streamsize>(t.v.size() * sizeof(Scalar)));
  }
  void f64_vec(const std::vector<double>& xs) {
    u32(static_cast<uint32_t>(xs.size()));
    f_.write(reinterpret_cast<const char*>(xs.data()),
             static_cast<std::streamsize>(xs.size() * sizeof(double)));
  }

 private:
  std::ofstream f_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : f_(path, std::ios::binary), path_(path) {
    if (!f_) throw IoError("cannot open for read: " + path);
  }
  void magic(const std::string& tag, uint32_t expect_version) {
    if (u32() != 0x494e564cu) throw IoError(path_ + ": bad magic");
    if (str() != tag) throw IoError(path_ + ": wrong artifact kind, expected " + tag);
    uint32_t v = u32();
    if (v != expect_version) throw IoError(path_ + ": unsupported version " + std::to_string(v));
  }
  uint32_t u32() {
    uint32_t x;
    read(&x, 4);
    return x;
  }
  uint64_t u64() {
    uint64_t x;
    read(&x, 8);
    return x;
  }
  double f64() {
    double x;
    read(&x, 8);
    return x;
  }
  std::string str() {
    uint32_t n = u32();
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  Tensor tensor() {
    uint32_t rank = u32();
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(u32());
    Tensor t(shape);
    read(t.v.data(), t.v.size() * sizeof(Scalar));
    return t;
  }
  std::vector<double> f64_vec() {
    uint32_t n = u32();
    std::vector<double> xs(n);
    read(xs.data(), n * sizeof(double));
    return xs;
  }

 private:
  void read(void* dst, size_t n) {
    f_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!f_) throw IoError(path_ + ": truncated artifact");
  }
  std::ifstream f_;
  std::string path_;
};

// round-half-up for poison counting and step indices
inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

}  // namespace invlba
