#ifndef MMPC_STATS_HPP
#define MMPC_STATS_HPP

#include <Eigen/Dense>

namespace mmpc {

/// Standard normal CDF.
double norm_cdf(double x);

/// Inverse standard normal CDF. Rational approximation refined by one
/// Newton step; absolute error below 1e-10 on (0, 1).
/// Throws std::invalid_argument for p outside (0, 1).
double norm_inv(double p);

/// Principal symmetric square root of a symmetric PSD 2x2 matrix.
/// Throws std::invalid_argument if the input is asymmetric or indefinite.
Eigen::Matrix2d sqrt_psd_2x2(const Eigen::Matrix2d& m);

/// Principal symmetric square root of a symmetric PSD matrix of any size.
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m);

/// Wrap an angle to (-pi, pi].
double wrap_angle(double a);

}  // namespace mmpc

#endif
