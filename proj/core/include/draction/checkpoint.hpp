// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "draction/pipeline.hpp"

#include <string>

namespace draction {

/// Versioned JSON checkpoint holding every learnable tensor plus the
/// topology, bindings recipe and hyperparameters needed to rebuild the
/// model. Values are stored as doubles and round-trip bit-exactly.
void save_checkpoint(const RenderModel<double>& model, const std::string& path);
void save_checkpoint(const RenderModel<float>& model, const std::string& path);

template <typename T>
RenderModel<T> load_checkpoint(const std::string& path);

extern template RenderModel<double> load_checkpoint<double>(const std::string&);
extern template RenderModel<float> load_checkpoint<float>(const std::string&);

} // namespace draction
