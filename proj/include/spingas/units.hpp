#pragma once

#include <cmath>
#include <complex>
#include <numbers>

#include <Eigen/Dense>

namespace spingas {

using cd = std::complex<double>;
using CMat = Eigen::MatrixXcd;
using RMat = Eigen::MatrixXd;
using RVec = Eigen::VectorXd;

inline constexpr double two_pi = 2.0 * std::numbers::pi;

// Internal units: rates and energies in s^-1 (angular), fields in gauss,
// lengths in cm, densities in cm^-3.
enum class FreqConvention { ordinary, angular };

// Converts a quoted frequency in Hz to internal s^-1. "ordinary" treats the
// value as nu and multiplies by 2 pi.
inline double quoted_hz(double hz, FreqConvention c = FreqConvention::ordinary) {
  return c == FreqConvention::ordinary ? two_pi * hz : hz;
}

namespace phys {
inline constexpr double k_B = 1.380649e-23;          // J/K
inline constexpr double amu = 1.66053906660e-27;     // kg
inline constexpr double c_light = 2.99792458e8;      // m/s
inline constexpr double cs_mass_amu = 132.905451933;
inline constexpr double cs_d1_wavelength = 894.59295986e-9;  // m
inline constexpr double cs_d1_natural_hz = 4.575e6;           // FWHM, Hz
}  // namespace phys

// 1/e half-width of the k.v distribution, in s^-1.
inline double doppler_width(double temperature_c, double wavelength_m = phys::cs_d1_wavelength,
                            double mass_amu = phys::cs_mass_amu) {
  const double T = temperature_c + 273.15;
  const double u = std::sqrt(2.0 * phys::k_B * T / (mass_amu * phys::amu));
  return two_pi / wavelength_m * u;
}

}  // namespace spingas
