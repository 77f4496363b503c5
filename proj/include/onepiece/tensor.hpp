#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

namespace onepiece {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Repo-wide binary matrix format: a single JSON line {"rows":R,"cols":C}
// followed by R*C little-endian float32 values in row-major order.
void write_matrix(std::ostream& out, const MatF& m);
MatF read_matrix(std::istream& in);
void save_matrix(const std::filesystem::path& path, const MatF& m);
MatF load_matrix(const std::filesystem::path& path);

}  // namespace onepiece
