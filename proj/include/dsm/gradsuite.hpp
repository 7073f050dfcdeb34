#pragma once

#include <string>
#include <vector>

#include "dsm/gradcheck.hpp"

// Named finite-difference gradient checks covering every differentiable
// building block, from primitives (tight tolerance) up to the composite
// attention / filtering / diffusion paths (looser tolerance, longer chains).
// The CLI `gradcheck` subcommand and the acceptance gate both walk this
// registry so they can never drift apart.
namespace dsm::gradsuite {

struct Case {
    std::string name;
    double tol;   // rel-err bound the case must meet
    bool primitive; // single-op checks vs multi-op composites
    GradcheckReport (*run)(uint64_t seed);
};

const std::vector<Case>& all_cases();

// nullptr when no case carries that name
const Case* find_case(const std::string& name);

} // namespace dsm::gradsuite
