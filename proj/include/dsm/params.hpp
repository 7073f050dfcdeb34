#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dsm/tensor.hpp"

namespace dsm {

// Ordered, uniquely named parameter registry. Blocks append their learnable
// tensors under a dotted prefix; the optimizer and checkpoint walk the list.
struct ParamMap {
    std::vector<std::pair<std::string, Tensor>> items;

    void add(const std::string& name, Tensor t) {
        for (const auto& [n, _] : items) {
            if (n == name) throw ContractError("duplicate parameter name: " + name);
        }
        items.emplace_back(name, std::move(t));
    }

    Tensor find(const std::string& name) const {
        for (const auto& [n, t] : items) {
            if (n == name) return t;
        }
        throw ContractError("unknown parameter: " + name);
    }

    size_t size() const { return items.size(); }
};

} // namespace dsm
