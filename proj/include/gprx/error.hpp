#ifndef GPRX_ERROR_HPP
#define GPRX_ERROR_HPP

#include <stdexcept>
#include <string>

namespace gprx {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Input file does not match the expected column schema.
class SchemaError : public Error {
public:
  using Error::Error;
};

/// A cell could not be parsed or holds a non-finite value.
class ParseError : public Error {
public:
  using Error::Error;
};

/// A column has zero sample standard deviation and cannot be standardized.
class ConstantColumnError : public Error {
public:
  explicit ConstantColumnError(std::string column)
      : Error("constant column cannot be standardized: " + column),
        column_(std::move(column)) {}

  const std::string &column() const noexcept { return column_; }

private:
  std::string column_;
};

/// Covariance matrix stayed non positive definite after the largest jitter.
class CholeskyError : public Error {
public:
  using Error::Error;
};

/// r2 is undefined because the reference values have zero variance.
class ZeroVarianceError : public Error {
public:
  using Error::Error;
};

/// Coordinate descent hit its sweep cap before converging.
class ConvergenceError : public Error {
public:
  ConvergenceError(const std::string &what, int sweeps)
      : Error(what), sweeps_(sweeps) {}

  int sweeps() const noexcept { return sweeps_; }

private:
  int sweeps_;
};

} // namespace gprx

#endif // GPRX_ERROR_HPP
