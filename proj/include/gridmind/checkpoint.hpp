#pragma once

#include <gridmind/model.hpp>

#include <string>

namespace gridmind {

// binary parameter file (name/shape/raw doubles, bit-exact) plus a
// <path>.json sidecar carrying the model config and vocabulary words
void save_checkpoint(const Policy& p, const std::string& path);
Policy load_checkpoint(const std::string& path, Role role = Role::current);

}  // namespace gridmind
