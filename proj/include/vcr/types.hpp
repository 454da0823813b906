#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace vcr {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Stored features are f32 (the on-disk precision); scores and reductions run in f64.
using FeatureVector = Vector<float>;
using FeatureMatrix = RowMatrix<float>;
using Logits = Vector<double>;

using Index = Eigen::Index;

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingEmbedding : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class ValidationError : public std::runtime_error {
 public:
  ValidationError(const std::string& what, std::vector<Index> rows = {})
      : std::runtime_error(what + describe(rows)), rows_(std::move(rows)) {}
  const std::vector<Index>& rows() const noexcept { return rows_; }

 private:
  static std::string describe(const std::vector<Index>& rows) {
    if (rows.empty()) return {};
    std::string s = " (rows:";
    for (std::size_t i = 0; i < rows.size() && i < 16; ++i) s += " " + std::to_string(rows[i]);
    if (rows.size() > 16) s += " ...";
    return s + ")";
  }
  std::vector<Index> rows_;
};

}  // namespace vcr
