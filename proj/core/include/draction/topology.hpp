// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace draction {

enum class FormatTag {
    kKinectV2_25,
    kKinectV1_20,
    kCoco17,
    kSmpl22,
    kCustom,
};

std::string to_string(FormatTag tag);
FormatTag format_tag_from_string(const std::string& name);

/// Format-agnostic skeleton description: everything downstream of loading
/// depends on the skeleton only through this type.
struct Topology {
    int num_joints = 0;
    std::vector<std::pair<int, int>> edges;
    bool has_orientations = false;
    FormatTag format_tag = FormatTag::kCustom;

    int num_edges() const { return static_cast<int>(edges.size()); }

    /// Throws ValidationError on self-loops, duplicate (unordered) edges,
    /// out-of-range endpoints, J < 2 or an empty edge list.
    void validate() const;
};

/// Registry entry for one of the built-in skeleton layouts. Joint counts and
/// edge lists follow the sensor vendors' standard definitions.
Topology registered_topology(FormatTag tag);

} // namespace draction
