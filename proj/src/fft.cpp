#include "morseflow/fft.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>

namespace morseflow {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

void fft(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0)
    throw std::invalid_argument("fft: size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? kTwoPi : -kTwoPi) / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& x : a) x *= inv;
  }
}

std::vector<double> spectral_derivative(const std::vector<double>& f, int order) {
  const std::size_t n = f.size();
  std::vector<std::complex<double>> a(n);
  for (std::size_t k = 0; k < n; ++k) a[k] = f[k];
  fft(a, false);
  for (std::size_t k = 0; k < n; ++k) {
    const long sk = (k <= n / 2) ? static_cast<long>(k)
                                 : static_cast<long>(k) - static_cast<long>(n);
    const double w = kTwoPi * static_cast<double>(sk);
    if (order == 1) {
      // Nyquist maps to zero so the derivative of real data stays real.
      a[k] *= (k == n / 2) ? std::complex<double>(0.0, 0.0)
                           : std::complex<double>(0.0, w);
    } else if (order == 2) {
      a[k] *= -w * w;
    } else {
      throw std::invalid_argument("spectral_derivative: order must be 1 or 2");
    }
  }
  fft(a, true);
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = a[k].real();
  return out;
}

std::vector<double> apply_symbol(const std::vector<double>& f,
                                 const std::function<double(double)>& g) {
  const std::size_t n = f.size();
  std::vector<std::complex<double>> a(n);
  for (std::size_t k = 0; k < n; ++k) a[k] = f[k];
  fft(a, false);
  for (std::size_t k = 0; k < n; ++k) {
    const long sk = (k <= n / 2) ? static_cast<long>(k)
                                 : static_cast<long>(k) - static_cast<long>(n);
    const double w = kTwoPi * static_cast<double>(sk);
    a[k] *= g(w * w);
  }
  fft(a, true);
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = a[k].real();
  return out;
}

}  // namespace morseflow
