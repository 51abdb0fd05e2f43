// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#include "draction/topology.hpp"

#include "draction/errors.hpp"

#include <algorithm>
#include <set>

namespace draction {

std::string to_string(FormatTag tag) {
    switch (tag) {
    case FormatTag::kKinectV2_25: return "kinect_v2_25";
    case FormatTag::kKinectV1_20: return "kinect_v1_20";
    case FormatTag::kCoco17: return "coco_17";
    case FormatTag::kSmpl22: return "smpl_22";
    case FormatTag::kCustom: return "custom";
    }
    return "custom";
}

FormatTag format_tag_from_string(const std::string& name) {
    if (name == "kinect_v2_25") return FormatTag::kKinectV2_25;
    if (name == "kinect_v1_20") return FormatTag::kKinectV1_20;
    if (name == "coco_17") return FormatTag::kCoco17;
    if (name == "smpl_22") return FormatTag::kSmpl22;
    if (name == "custom") return FormatTag::kCustom;
    throw ValidationError("unknown format tag: " + name);
}

void Topology::validate() const {
    if (num_joints < 2) {
        throw ValidationError("topology needs at least 2 joints, got " +
                              std::to_string(num_joints));
    }
    if (edges.empty()) {
        throw ValidationError("topology needs at least one edge");
    }
    std::set<std::pair<int, int>> seen;
    for (const auto& [a, b] : edges) {
        if (a < 0 || b < 0 || a >= num_joints || b >= num_joints) {
            throw ValidationError("edge (" + std::to_string(a) + "," +
                                  std::to_string(b) + ") out of range for J=" +
                                  std::to_string(num_joints));
        }
        if (a == b) {
            throw ValidationError("self-loop edge at joint " + std::to_string(a));
        }
        const auto key = std::minmax(a, b);
        if (!seen.insert(key).second) {
            throw ValidationError("duplicate edge (" + std::to_string(a) + "," +
                                  std::to_string(b) + ")");
        }
    }
}

namespace {

Topology make(FormatTag tag, int joints, std::vector<std::pair<int, int>> edges,
              bool orientations) {
    Topology t;
    t.format_tag = tag;
    t.num_joints = joints;
    t.edges = std::move(edges);
    t.has_orientations = orientations;
    t.validate();
    return t;
}

} // namespace

Topology registered_topology(FormatTag tag) {
    switch (tag) {
    case FormatTag::kKinectV2_25:
        // Kinect v2 skeleton (NTU RGB+D joint order, 0-indexed).
        return make(tag, 25,
                    {{0, 1},   {1, 20},  {2, 20},  {3, 2},   {4, 20},  {5, 4},
                     {6, 5},   {7, 6},   {8, 20},  {9, 8},   {10, 9},  {11, 10},
                     {12, 0},  {13, 12}, {14, 13}, {15, 14}, {16, 0},  {17, 16},
                     {18, 17}, {19, 18}, {21, 22}, {22, 7},  {23, 24}, {24, 11}},
                    true);
    case FormatTag::kKinectV1_20:
        // Kinect v1 skeleton (NW-UCLA joint order).
        return make(tag, 20,
                    {{0, 1},   {1, 2},   {2, 3},   {2, 4},   {4, 5},
                     {5, 6},   {6, 7},   {2, 8},   {8, 9},   {9, 10},
                     {10, 11}, {0, 12},  {12, 13}, {13, 14}, {14, 15},
                     {0, 16},  {16, 17}, {17, 18}, {18, 19}},
                    false);
    case FormatTag::kCoco17:
        // COCO keypoints connected as a spanning tree rooted at the nose.
        return make(tag, 17,
                    {{0, 1},   {0, 2},   {1, 3},   {2, 4},   {0, 5},  {0, 6},
                     {5, 7},   {7, 9},   {6, 8},   {8, 10},  {5, 11}, {6, 12},
                     {11, 13}, {13, 15}, {12, 14}, {14, 16}},
                    false);
    case FormatTag::kSmpl22:
        // First 22 joints of the SMPL kinematic tree (child, parent).
        return make(tag, 22,
                    {{1, 0},   {2, 0},   {3, 0},   {4, 1},   {5, 2},   {6, 3},
                     {7, 4},   {8, 5},   {9, 6},   {10, 7},  {11, 8},  {12, 9},
                     {13, 9},  {14, 9},  {15, 12}, {16, 13}, {17, 14}, {18, 16},
                     {19, 17}, {20, 18}, {21, 19}},
                    false);
    case FormatTag::kCustom:
        throw ValidationError("custom topologies must be supplied by the input file");
    }
    throw ValidationError("unhandled format tag");
}

} // namespace draction
