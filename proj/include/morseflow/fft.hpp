#pragma once

#include <complex>
#include <functional>
#include <vector>

namespace morseflow {

// In-place radix-2 complex FFT (forward: sign -1 in the exponent).  Grid
// sizes are powers of two throughout the project, so no other kernel is
// needed.  Twiddle factors are computed from std::polar on demand; the
// routine is serial and bitwise deterministic.
void fft(std::vector<std::complex<double>>& a, bool inverse);

// Spectral periodic derivative helpers on n samples of a real 1-periodic
// function, n a power of two.  Conventions: first derivative uses symbol
// i*2*pi*k with the Nyquist mode mapped to zero (the only real-valued
// choice); second derivative uses symbol -(2*pi*k)^2 including Nyquist.
std::vector<double> spectral_derivative(const std::vector<double>& f, int order);

// Applies the multiplier g((2*pi*k)^2) to each Fourier mode of f, e.g.
// g(w) = 1/(1 + eps*w) for the resolvent (1 - eps*d_tt)^(-1).
std::vector<double> apply_symbol(const std::vector<double>& f,
                                 const std::function<double(double)>& g);

}  // namespace morseflow
