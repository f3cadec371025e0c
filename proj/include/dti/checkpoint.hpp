#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "dti/tensor.hpp"

namespace dti::checkpoint {

// Named-tensor container with a JSON metadata block. Float payloads are
// written raw, so save/load round-trips bitwise.
struct Checkpoint {
    nlohmann::json meta;
    std::map<std::string, Tensor> tensors;
};

void save(const std::string& path, const Checkpoint& ckpt);
Checkpoint load(const std::string& path);

}  // namespace dti::checkpoint
