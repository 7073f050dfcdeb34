#include "dsm/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dsm {

Dtype dtype_from_name(const std::string& name) {
    if (name == "f32" || name == "float32") return Dtype::F32;
    if (name == "f64" || name == "float64") return Dtype::F64;
    throw ContractError("unknown dtype name: " + name);
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 1e-300);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d <= 0) throw ContractError("tensor extents must be positive, got " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

namespace {

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, Dtype dt) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->numel = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->dtype = dt;
    if (dt == Dtype::F32) {
        impl->f32 = std::make_shared<std::vector<float>>(static_cast<size_t>(impl->numel), 0.0f);
    } else {
        impl->f64 = std::make_shared<std::vector<double>>(static_cast<size_t>(impl->numel), 0.0);
    }
    return impl;
}

} // namespace

Tensor Tensor::zeros(Shape shape, Dtype dt) {
    return wrap(make_impl(std::move(shape), dt));
}

Tensor Tensor::full(Shape shape, double value, Dtype dt) {
    Tensor t = zeros(std::move(shape), dt);
    dispatch_dtype(dt, [&]<typename T>() {
        auto v = t.values<T>();
        std::fill(v.begin(), v.end(), static_cast<T>(value));
    });
    return t;
}

Tensor Tensor::from_values(const std::vector<double>& values, Shape shape, Dtype dt) {
    Tensor t = zeros(std::move(shape), dt);
    if (static_cast<int64_t>(values.size()) != t.numel()) {
        throw ContractError("from_values: value count " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(t.shape()));
    }
    dispatch_dtype(dt, [&]<typename T>() {
        T* p = t.data<T>();
        for (size_t i = 0; i < values.size(); ++i) p[i] = static_cast<T>(values[i]);
    });
    return t;
}

Tensor Tensor::randn(Rng& rng, Shape shape, double stddev, Dtype dt) {
    Tensor t = zeros(std::move(shape), dt);
    dispatch_dtype(dt, [&]<typename T>() {
        T* p = t.data<T>();
        for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(rng.normal() * stddev);
    });
    return t;
}

Tensor Tensor::uniform(Rng& rng, Shape shape, double lo, double hi, Dtype dt) {
    Tensor t = zeros(std::move(shape), dt);
    dispatch_dtype(dt, [&]<typename T>() {
        T* p = t.data<T>();
        for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(rng.uniform(lo, hi));
    });
    return t;
}

Tensor Tensor::eye(int64_t n, Dtype dt) {
    Tensor t = zeros({n, n}, dt);
    for (int64_t i = 0; i < n; ++i) t.set(i * n + i, 1.0);
    return t;
}

template <typename T>
T* Tensor::data() {
    if constexpr (std::is_same_v<T, float>) {
        if (impl_->dtype != Dtype::F32) throw ContractError("tensor is not f32");
        return impl_->f32->data();
    } else {
        if (impl_->dtype != Dtype::F64) throw ContractError("tensor is not f64");
        return impl_->f64->data();
    }
}

template <typename T>
const T* Tensor::cdata() const {
    if constexpr (std::is_same_v<T, float>) {
        if (impl_->dtype != Dtype::F32) throw ContractError("tensor is not f32");
        return impl_->f32->data();
    } else {
        if (impl_->dtype != Dtype::F64) throw ContractError("tensor is not f64");
        return impl_->f64->data();
    }
}

template float* Tensor::data<float>();
template double* Tensor::data<double>();
template const float* Tensor::cdata<float>() const;
template const double* Tensor::cdata<double>() const;

double Tensor::at(int64_t i) const {
    if (i < 0 || i >= numel()) throw ContractError("tensor index out of range");
    return dispatch_dtype(dtype(), [&]<typename T>() -> double {
        return static_cast<double>(cdata<T>()[i]);
    });
}

void Tensor::set(int64_t i, double value) {
    if (i < 0 || i >= numel()) throw ContractError("tensor index out of range");
    dispatch_dtype(dtype(), [&]<typename T>() { data<T>()[i] = static_cast<T>(value); });
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a single-element tensor");
    return at(0);
}

Tensor Tensor::grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return wrap(impl_->grad);
}

Tensor Tensor::ensure_grad() {
    if (!impl_->grad) {
        impl_->grad = make_impl(impl_->shape, impl_->dtype);
    }
    return wrap(impl_->grad);
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->dtype = impl_->dtype;
    impl->numel = impl_->numel;
    impl->f32 = impl_->f32;
    impl->f64 = impl_->f64;
    impl->requires_grad = false;
    return wrap(impl);
}

Tensor Tensor::clone() const {
    Tensor t = zeros(impl_->shape, impl_->dtype);
    dispatch_dtype(dtype(), [&]<typename T>() {
        std::memcpy(t.data<T>(), cdata<T>(), static_cast<size_t>(numel()) * sizeof(T));
    });
    return t;
}

Tensor Tensor::to(Dtype dt) const {
    if (dt == dtype()) return clone();
    Tensor t = zeros(impl_->shape, dt);
    for (int64_t i = 0; i < numel(); ++i) t.set(i, at(i));
    return t;
}

Tensor Tensor::view(Shape new_shape) const {
    if (shape_numel(new_shape) != numel()) {
        throw ContractError("view: element count mismatch " + shape_str(impl_->shape) +
                            " -> " + shape_str(new_shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(new_shape);
    impl->dtype = impl_->dtype;
    impl->numel = impl_->numel;
    impl->f32 = impl_->f32;
    impl->f64 = impl_->f64;
    impl->requires_grad = false;
    return wrap(impl);
}

void Tensor::copy_from(const Tensor& src) {
    if (src.shape() != shape() || src.dtype() != dtype()) {
        throw ContractError("copy_from: shape/dtype mismatch");
    }
    dispatch_dtype(dtype(), [&]<typename T>() {
        std::memcpy(data<T>(), src.cdata<T>(), static_cast<size_t>(numel()) * sizeof(T));
    });
}

bool Tensor::all_finite() const {
    return dispatch_dtype(dtype(), [&]<typename T>() -> bool {
        const T* p = cdata<T>();
        for (int64_t i = 0; i < numel(); ++i) {
            if (!std::isfinite(static_cast<double>(p[i]))) return false;
        }
        return true;
    });
}

void ensure_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) {
        throw NumericError(std::string("non-finite values in ") + what);
    }
}

} // namespace dsm
