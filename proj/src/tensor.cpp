#include "maunet/tensor.hpp"

#include "maunet/errors.hpp"

#include <sstream>

namespace maunet {

std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << s.n << "x" << s.c << "x" << s.h << "x" << s.w;
    return os.str();
}

namespace {

void check_extents(const Shape& s) {
    if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0) {
        throw ShapeError("tensor extents must be positive, got " + to_string(s));
    }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(shape) {
    check_extents(shape_);
    data_ = Eigen::ArrayXd::Constant(static_cast<Eigen::Index>(shape_.size()), fill);
}

Tensor::Tensor(Shape shape, Eigen::ArrayXd data) : shape_(shape), data_(std::move(data)) {
    check_extents(shape_);
    if (static_cast<std::size_t>(data_.size()) != shape_.size()) {
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         to_string(shape_));
    }
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
    Tensor t(shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (Eigen::Index i = 0; i < t.data_.size(); ++i) t.data_[i] = dist(rng);
    return t;
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() requires a single-element tensor, got " + to_string(shape_));
    return data_[0];
}

std::span<double> Tensor::plane(int n, int c) {
    return {data_.data() + index(n, c, 0, 0), shape_.plane()};
}

std::span<const double> Tensor::plane(int n, int c) const {
    return {data_.data() + index(n, c, 0, 0), shape_.plane()};
}

Eigen::ArrayXd& Tensor::grad() {
    if (!grad_) grad_ = Eigen::ArrayXd::Zero(data_.size());
    return *grad_;
}

const Eigen::ArrayXd& Tensor::grad() const {
    if (!grad_) throw GraphError("tensor has no gradient buffer");
    return *grad_;
}

void Tensor::zero_grad() { grad_ = Eigen::ArrayXd::Zero(data_.size()); }

void Tensor::check_finite(std::string_view where) const {
    if (!all_finite()) throw NumericError("non-finite value produced by " + std::string(where));
}

Tensor Tensor::slice_batch(int n) const {
    if (n < 0 || n >= shape_.n) throw IndexError("batch index out of range");
    const auto len = static_cast<Eigen::Index>(shape_.size() / shape_.n);
    return Tensor({1, shape_.c, shape_.h, shape_.w}, data_.segment(n * len, len));
}

Tensor stack_batch(std::span<const Tensor> items) {
    if (items.empty()) throw ShapeError("cannot stack an empty batch");
    Shape s = items.front().shape();
    if (s.n != 1) throw ShapeError("stack_batch expects 1xCxHxW items");
    Tensor out({static_cast<int>(items.size()), s.c, s.h, s.w});
    const auto len = static_cast<Eigen::Index>(s.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].shape() != s) throw ShapeError("stack_batch: mismatched item shapes");
        out.data().segment(static_cast<Eigen::Index>(i) * len, len) = items[i].data();
    }
    return out;
}

}  // namespace maunet
