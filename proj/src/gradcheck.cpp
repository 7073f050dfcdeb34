#include "dsm/gradcheck.hpp"

#include <cmath>

namespace dsm {

GradcheckReport gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                          std::vector<Tensor> inputs, uint64_t seed, double eps) {
    for (auto& t : inputs) {
        if (t.dtype() != Dtype::F64) throw ContractError("gradcheck: inputs must be float64");
        t.set_requires_grad(true);
    }

    Tensor probe;
    {
        Tape::NoGrad ng;
        probe = f(inputs);
    }
    Rng rng(Rng::mix(seed, 0x6772616463686bull)); // salt: "gradchk"
    Tensor w = Tensor::uniform(rng, probe.shape(), -1.0, 1.0, Dtype::F64);

    auto objective = [&]() -> double {
        Tape::NoGrad ng;
        Tensor out = f(inputs);
        const double* op = out.cdata<double>();
        const double* wp = w.cdata<double>();
        double acc = 0.0;
        for (int64_t i = 0; i < out.numel(); ++i) acc += op[i] * wp[i];
        return acc;
    };

    std::vector<Tensor> analytic;
    {
        for (auto& t : inputs) t.zero_grad();
        Tape tape;
        Tape::Scope scope(tape);
        Tensor out = f(inputs);
        Tensor loss = ops::sum_all(ops::mul(out, w));
        tape.backward(loss);
        for (auto& t : inputs) {
            analytic.push_back(t.has_grad() ? t.grad().clone()
                                            : Tensor::zeros(t.shape(), Dtype::F64));
        }
    }

    GradcheckReport rep;
    for (size_t i = 0; i < inputs.size(); ++i) {
        Tensor& x = inputs[i];
        for (int64_t j = 0; j < x.numel(); ++j) {
            double orig = x.at(j);
            x.set(j, orig + eps);
            double lp = objective();
            x.set(j, orig - eps);
            double lm = objective();
            x.set(j, orig);
            double num = (lp - lm) / (2.0 * eps);
            double ana = analytic[i].at(j);
            double abs_err = std::abs(ana - num);
            double rel_err = abs_err / std::max({1.0, std::abs(ana), std::abs(num)});
            if (rel_err > rep.max_rel_err) {
                rep.max_rel_err = rel_err;
                rep.worst = "input#" + std::to_string(i) + "[" + std::to_string(j) + "]";
            }
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
        }
    }
    return rep;
}

} // namespace dsm
