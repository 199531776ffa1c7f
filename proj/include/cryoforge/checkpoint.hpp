#pragma once

// Named-array container for parameter checkpoints.
//
// Layout (little-endian throughout):
//   magic "CFTS" | u32 version | u32 array count |
//   per array: u32 name length | UTF-8 name | u32 rank | u64 extents | raw floats
// Version 1 stores f32 payloads, version 2 stores f64.

#include <cstdint>
#include <string>
#include <vector>

#include "cryoforge/tensor.hpp"

namespace cryoforge {

template <class S>
struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<S> data;
};

template <class S>
void save_checkpoint(const std::string& path, const std::vector<NamedArray<S>>& arrays);

// Reads a checkpoint, converting the payload to S if the stored width differs.
template <class S>
std::vector<NamedArray<S>> load_checkpoint(const std::string& path);

}  // namespace cryoforge
