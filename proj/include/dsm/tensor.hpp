#pragma once

#include <cstring>
#include <memory>
#include <span>
#include <vector>

#include "dsm/common.hpp"

namespace dsm {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct TensorImpl {
    Shape shape;
    Dtype dtype = Dtype::F32;
    int64_t numel = 0;
    // Exactly one of these is populated, matching dtype. Shared so that
    // detached handles can alias the same buffer.
    std::shared_ptr<std::vector<float>> f32;
    std::shared_ptr<std::vector<double>> f64;
    bool requires_grad = false;
    std::shared_ptr<TensorImpl> grad; // lazily allocated, same shape/dtype
};

} // namespace detail

// Dense row-major tensor handle. Data is immutable after forward creation
// except for gradient accumulation and explicit parameter updates; handles
// may be shared read-only across threads.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, Dtype dt = Dtype::F32);
    static Tensor full(Shape shape, double value, Dtype dt = Dtype::F32);
    static Tensor from_values(const std::vector<double>& values, Shape shape,
                              Dtype dt = Dtype::F64);
    static Tensor randn(Rng& rng, Shape shape, double stddev = 1.0,
                        Dtype dt = Dtype::F32);
    static Tensor uniform(Rng& rng, Shape shape, double lo, double hi,
                          Dtype dt = Dtype::F32);
    // 2-D identity.
    static Tensor eye(int64_t n, Dtype dt = Dtype::F32);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t ndim() const { return static_cast<int64_t>(impl_->shape.size()); }
    int64_t dim(int64_t i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return impl_->numel; }
    Dtype dtype() const { return impl_->dtype; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    template <typename T>
    T* data();
    template <typename T>
    const T* cdata() const;
    template <typename T>
    std::span<T> values() { return {data<T>(), static_cast<size_t>(numel())}; }
    template <typename T>
    std::span<const T> cvalues() const {
        return {cdata<T>(), static_cast<size_t>(numel())};
    }

    // Scalar accessors for tests and glue code (dtype-dispatched).
    double at(int64_t flat_index) const;
    void set(int64_t flat_index, double value);
    double item() const; // numel()==1

    bool has_grad() const { return impl_ && impl_->grad != nullptr; }
    // Gradient as a tensor handle sharing the accumulator buffer.
    Tensor grad() const;
    // Allocate (zeros) the gradient accumulator if absent, return handle.
    Tensor ensure_grad();
    void zero_grad() { impl_->grad.reset(); }

    // New handle sharing the data buffer but detached from autodiff.
    Tensor detach() const;
    // Deep copy (data only; grad not copied).
    Tensor clone() const;
    // Dtype-converting copy; detached.
    Tensor to(Dtype dt) const;
    // Same-extent metadata change sharing the buffer; detached (use the
    // reshape op from ops.hpp inside differentiable code).
    Tensor view(Shape new_shape) const;
    // Overwrite values in place from a same-shape/dtype tensor.
    void copy_from(const Tensor& src);

    bool all_finite() const;

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl) {
        Tensor t;
        t.impl_ = std::move(impl);
        return t;
    }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Throws NumericError if any element is NaN/Inf. `what` names the context.
void ensure_finite(const Tensor& t, const char* what);

// Invoke f.template operator()<T>() with T = float or double.
template <class F>
decltype(auto) dispatch_dtype(Dtype dt, F&& f) {
    if (dt == Dtype::F32) {
        return f.template operator()<float>();
    }
    return f.template operator()<double>();
}

} // namespace dsm
