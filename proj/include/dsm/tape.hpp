#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dsm/tensor.hpp"

namespace dsm {

// Reverse-mode tape. Ops executed inside an active Tape::Scope record a
// backward closure; Tape::backward replays them last-to-first.
class Tape {
public:
    struct Node {
        std::string name;
        std::function<void()> backward;
    };

    void record(std::string name, std::function<void()> backward) {
        nodes_.push_back({std::move(name), std::move(backward)});
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss)=1 on the scalar `loss` and runs all recorded
    // backward closures in reverse order.
    void backward(Tensor loss);

    static Tape* active() { return active_; }
    static bool recording() { return active_ != nullptr; }

    // RAII activation. Nested scopes restore the previous tape on exit.
    class Scope {
    public:
        explicit Scope(Tape& tape) : prev_(active_) { active_ = &tape; }
        ~Scope() { active_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    // RAII deactivation: ops inside run without recording (inference paths,
    // detached branches).
    class NoGrad {
    public:
        NoGrad() : prev_(active_) { active_ = nullptr; }
        ~NoGrad() { active_ = prev_; }
        NoGrad(const NoGrad&) = delete;
        NoGrad& operator=(const NoGrad&) = delete;

    private:
        Tape* prev_;
    };

private:
    std::vector<Node> nodes_;
    static thread_local Tape* active_;
};

// Accumulates `delta` into `t`'s gradient buffer (allocating it on first use).
void accumulate_grad(Tensor t, const Tensor& delta);

} // namespace dsm
