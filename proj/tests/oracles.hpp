// Independent reference implementations used to cross-check the library.
// Everything here is deliberately written from scratch against the documented
// contracts (no shared code with src/), favoring clarity over speed.
#pragma once

#include <cstddef>
#include <vector>

namespace oracle {

using Matrix = std::vector<std::vector<long double>>;  // row-major, rectangular

// Eigenvalues of a symmetric matrix via cyclic Jacobi sweeps, descending.
std::vector<long double> jacobi_eigenvalues(Matrix a);

// Full spectrum pipeline on an MxC response matrix: column-center, unbiased
// covariance, Jacobi eigenvalues, clamp below 1e-12*max to zero, normalize.
std::vector<long double> covariance_spectrum(const Matrix& rows);

// sum lambda_k * ln(lambda_k * C) with 0*ln(0) = 0, in extended precision.
long double kl_to_uniform(const std::vector<long double>& values);

// Smallest k with values[0]+...+values[k-1] >= tau, scanned in plain double
// left to right (the arithmetic order the energy rule documents); C if the
// running sum never reaches tau.
int minimal_prefix(const std::vector<double>& values, double tau);

// Greedy correlation-based filter selection, recomputed from scratch every
// iteration: drop the column whose |Pearson r| row has the largest l1 norm
// over surviving columns (self excluded); ties to the largest single |r|,
// then the lowest index; zero-variance columns are removed first. Returns
// the kept indices ascending; removed_order (optional) gets the drop trace.
std::vector<int> greedy_selection(const std::vector<std::vector<double>>& columns,
                                  std::size_t samples, int kept_count,
                                  std::vector<int>* removed_order = nullptr);

// Plain nested-loop slicer for a [d0,d1,d2,d3] tensor keeping the given
// indices along axis 2 (input channels) and axis 3 (output channels).
std::vector<float> slice_kernel(const std::vector<float>& data, const int dims[4],
                                const std::vector<int>& in_keep,
                                const std::vector<int>& out_keep);

}  // namespace oracle
