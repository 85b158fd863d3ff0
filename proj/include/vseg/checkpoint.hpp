#pragma once

#include <filesystem>
#include <string>

#include "vseg/nn.hpp"

namespace vseg::ckpt {

// Versioned binary blob of named tensors (little-endian float32/float64).
// When an optimizer is supplied its moment tensors and step count ride along
// so training can resume exactly.
template <typename T>
void save_params(const std::filesystem::path& file, const nn::ParamSet<T>& params,
                 const nn::Adam<T>* adam = nullptr);

// Loads by name; every blob entry must match an existing parameter shape.
template <typename T>
void load_params(const std::filesystem::path& file, nn::ParamSet<T>& params,
                 nn::Adam<T>* adam = nullptr);

// Order-insensitive content checksum (name + payload bits) used by the
// growth-preservation and determinism checks.
template <typename T>
uint64_t params_checksum(const nn::ParamSet<T>& params);

template <typename T>
uint64_t tensor_checksum(const Tensor<T>& t);

}  // namespace vseg::ckpt
