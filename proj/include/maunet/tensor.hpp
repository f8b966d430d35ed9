#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>

namespace maunet {

/// Extents of a rank-4 tensor in (batch, channel, height, width) order.
struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    std::size_t size() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

/// Dense rank-4 array of doubles, row-major with N outermost, plus an
/// optional gradient buffer of identical length.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, Eigen::ArrayXd data);

    static Tensor zeros(Shape shape) { return Tensor(shape, 0.0); }
    static Tensor ones(Shape shape) { return Tensor(shape, 1.0); }
    static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng);
    static Tensor scalar(double v) { return Tensor(Shape{}, v); }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return shape_.size(); }

    Eigen::ArrayXd& data() { return data_; }
    const Eigen::ArrayXd& data() const { return data_; }

    std::size_t index(int n, int c, int y, int x) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }
    double& at(int n, int c, int y, int x) { return data_[static_cast<Eigen::Index>(index(n, c, y, x))]; }
    double at(int n, int c, int y, int x) const {
        return data_[static_cast<Eigen::Index>(index(n, c, y, x))];
    }
    double item() const;

    /// Contiguous H*W plane for one (n, c) pair.
    std::span<double> plane(int n, int c);
    std::span<const double> plane(int n, int c) const;

    bool has_grad() const { return grad_.has_value(); }
    Eigen::ArrayXd& grad();
    const Eigen::ArrayXd& grad() const;
    void zero_grad();
    void drop_grad() { grad_.reset(); }

    bool all_finite() const { return data_.isFinite().all(); }
    /// Throws NumericError naming `where` if any element is NaN or Inf.
    void check_finite(std::string_view where) const;

    /// Sample `n` of a batch as a standalone 1xCxHxW tensor.
    Tensor slice_batch(int n) const;

private:
    Shape shape_{};
    Eigen::ArrayXd data_ = Eigen::ArrayXd::Zero(1);
    std::optional<Eigen::ArrayXd> grad_;
};

/// Concatenate 1xCxHxW tensors along the batch axis.
Tensor stack_batch(std::span<const Tensor> items);

}  // namespace maunet
