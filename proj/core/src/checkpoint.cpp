// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#include "draction/checkpoint.hpp"

#include "draction/errors.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

namespace draction {

using nlohmann::json;

namespace {

constexpr const char* kCheckpointVersion = "draction/1-checkpoint";

json matrix_to_json(const MatX<double>& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            row.push_back(m(r, c));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

MatX<double> matrix_from_json(const json& j) {
    const auto rows = j.size();
    const auto cols = rows == 0 ? 0 : j.at(0).size();
    MatX<double> m(rows, cols);
    for (size_t r = 0; r < rows; ++r) {
        for (size_t c = 0; c < cols; ++c) {
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                j.at(r).at(c).get<double>();
        }
    }
    return m;
}

json vector_to_json(const VecX<double>& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        out.push_back(v(i));
    }
    return out;
}

VecX<double> vector_from_json(const json& j) {
    VecX<double> v(j.size());
    for (size_t i = 0; i < j.size(); ++i) {
        v(static_cast<Eigen::Index>(i)) = j.at(i).get<double>();
    }
    return v;
}

json save_impl(const RenderModel<double>& model) {
    const CanonicalGaussianSet<double>& canon = model.canon;
    json doc;
    doc["format"] = kCheckpointVersion;
    doc["format_tag"] = to_string(canon.topology.format_tag);
    doc["num_joints"] = canon.topology.num_joints;
    json edges = json::array();
    for (const auto& [a, b] : canon.topology.edges) {
        edges.push_back({a, b});
    }
    doc["edges"] = edges;
    doc["has_orientations"] = canon.topology.has_orientations;
    doc["n_samples"] = canon.n_samples;
    doc["feature_dim"] = canon.feature_dim;

    json centers = json::array();
    json log_scales = json::array();
    json orientations = json::array();
    json opacity = json::array();
    for (int k = 0; k < canon.primitive_count(); ++k) {
        centers.push_back({canon.centers[k](0), canon.centers[k](1), canon.centers[k](2)});
        log_scales.push_back(
            {canon.log_scales[k](0), canon.log_scales[k](1), canon.log_scales[k](2)});
        orientations.push_back({canon.orientations[k](0), canon.orientations[k](1),
                                canon.orientations[k](2), canon.orientations[k](3)});
        opacity.push_back(canon.opacity_logits[k]);
    }
    doc["centers"] = std::move(centers);
    doc["log_scales"] = std::move(log_scales);
    doc["orientations"] = std::move(orientations);
    doc["opacity_logits"] = std::move(opacity);
    doc["features"] = matrix_to_json(canon.features);

    json modulator;
    model.modulator.for_each_tensor([&](const char* name, const auto& t) {
        using Tensor = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<Tensor, MatX<double>>) {
            modulator[name] = matrix_to_json(t);
        } else {
            modulator[name] = vector_to_json(t);
        }
    });
    doc["modulator"] = std::move(modulator);
    doc["theta_mix"] = model.theta_mix;
    return doc;
}

RenderModel<double> load_impl(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("parse failure in " + path + " at byte " +
                              std::to_string(e.byte) + ": " + e.what());
    }
    try {
        if (doc.at("format").get<std::string>() != kCheckpointVersion) {
            throw ValidationError("unsupported checkpoint version in " + path);
        }
        Topology topo;
        topo.format_tag = format_tag_from_string(doc.at("format_tag"));
        topo.num_joints = doc.at("num_joints").get<int>();
        for (const auto& e : doc.at("edges")) {
            topo.edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
        }
        topo.has_orientations = doc.at("has_orientations").get<bool>();
        topo.validate();

        RenderModel<double> model;
        CanonicalGaussianSet<double>& canon = model.canon;
        canon.topology = topo;
        canon.n_samples = doc.at("n_samples").get<int>();
        canon.feature_dim = doc.at("feature_dim").get<int>();
        canon.bindings = make_bindings(topo, canon.n_samples);
        const int K = canon.primitive_count();

        auto read_vec3 = [&](const json& arr, std::vector<Vec3<double>>& out) {
            if (static_cast<int>(arr.size()) != K) {
                throw ValidationError("checkpoint tensor size mismatch");
            }
            out.resize(K);
            for (int k = 0; k < K; ++k) {
                out[k] = Vec3<double>(arr.at(k).at(0).get<double>(),
                                      arr.at(k).at(1).get<double>(),
                                      arr.at(k).at(2).get<double>());
            }
        };
        read_vec3(doc.at("centers"), canon.centers);
        read_vec3(doc.at("log_scales"), canon.log_scales);
        canon.orientations.resize(K);
        for (int k = 0; k < K; ++k) {
            const auto& q = doc.at("orientations").at(k);
            canon.orientations[k] = Vec4<double>(q.at(0).get<double>(), q.at(1).get<double>(),
                                                 q.at(2).get<double>(), q.at(3).get<double>());
        }
        canon.opacity_logits.resize(K);
        for (int k = 0; k < K; ++k) {
            canon.opacity_logits[k] = doc.at("opacity_logits").at(k).get<double>();
        }
        canon.features = matrix_from_json(doc.at("features"));
        if (canon.features.rows() != K || canon.features.cols() != canon.feature_dim) {
            throw ValidationError("checkpoint feature matrix mismatch");
        }

        canon.weight_logits = lbs_weight_logits<double>(canon.bindings, topo.num_joints);
        canon.weights = canon.weight_logits;
        for (int k = 0; k < K; ++k) {
            softmax_row(canon.weights, k);
        }
        canon.sparse_weights = sparsify_weights(canon.weights, canon.bindings);

        model.modulator = make_modulator<double>(canon.feature_dim, 0);
        const json& mod = doc.at("modulator");
        model.modulator.for_each_tensor([&](const char* name, auto& t) {
            using Tensor = std::decay_t<decltype(t)>;
            if constexpr (std::is_same_v<Tensor, MatX<double>>) {
                MatX<double> loaded = matrix_from_json(mod.at(name));
                if (loaded.rows() != t.rows() || loaded.cols() != t.cols()) {
                    throw ValidationError(std::string("checkpoint shape mismatch for ") + name);
                }
                t = std::move(loaded);
            } else {
                VecX<double> loaded = vector_from_json(mod.at(name));
                if (loaded.size() != t.size()) {
                    throw ValidationError(std::string("checkpoint shape mismatch for ") + name);
                }
                t = std::move(loaded);
            }
        });
        model.theta_mix = doc.at("theta_mix").get<double>();
        return model;
    } catch (const json::exception& e) {
        throw ValidationError("schema error in " + path + ": " + e.what());
    }
}

template <typename From, typename To>
RenderModel<To> convert_model(const RenderModel<From>& src) {
    RenderModel<To> dst;
    dst.canon.topology = src.canon.topology;
    dst.canon.n_samples = src.canon.n_samples;
    dst.canon.feature_dim = src.canon.feature_dim;
    dst.canon.bindings = src.canon.bindings;
    dst.canon.warnings = src.canon.warnings;
    const int K = src.canon.primitive_count();
    dst.canon.centers.resize(K);
    dst.canon.log_scales.resize(K);
    dst.canon.orientations.resize(K);
    dst.canon.opacity_logits.resize(K);
    for (int k = 0; k < K; ++k) {
        dst.canon.centers[k] = src.canon.centers[k].template cast<To>();
        dst.canon.log_scales[k] = src.canon.log_scales[k].template cast<To>();
        dst.canon.orientations[k] = src.canon.orientations[k].template cast<To>();
        dst.canon.opacity_logits[k] = static_cast<To>(src.canon.opacity_logits[k]);
    }
    dst.canon.features = src.canon.features.template cast<To>();
    dst.canon.weight_logits = src.canon.weight_logits.template cast<To>();
    dst.canon.weights = src.canon.weights.template cast<To>();
    dst.canon.sparse_weights.resize(src.canon.sparse_weights.size());
    for (size_t k = 0; k < src.canon.sparse_weights.size(); ++k) {
        const auto& s = src.canon.sparse_weights[k];
        dst.canon.sparse_weights[k] = {s.idx_a, s.idx_b, static_cast<To>(s.w_a),
                                       static_cast<To>(s.w_b), static_cast<To>(s.w_bg)};
    }
    dst.modulator = make_modulator<To>(src.canon.feature_dim, 0);
    std::vector<const MatX<From>*> src_m;
    std::vector<const VecX<From>*> src_v;
    src.modulator.for_each_tensor([&](const char*, const auto& t) {
        using Tensor = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<Tensor, MatX<From>>) {
            src_m.push_back(&t);
        } else {
            src_v.push_back(&t);
        }
    });
    size_t im = 0, iv = 0;
    dst.modulator.for_each_tensor([&](const char*, auto& t) {
        using Tensor = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<Tensor, MatX<To>>) {
            t = src_m[im++]->template cast<To>();
        } else {
            t = src_v[iv++]->template cast<To>();
        }
    });
    dst.theta_mix = static_cast<To>(src.theta_mix);
    return dst;
}

void write_doc(const json& doc, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out << doc.dump();
    if (!out) {
        throw IoError("write failed for " + path);
    }
}

} // namespace

void save_checkpoint(const RenderModel<double>& model, const std::string& path) {
    write_doc(save_impl(model), path);
}

void save_checkpoint(const RenderModel<float>& model, const std::string& path) {
    write_doc(save_impl(convert_model<float, double>(model)), path);
}

template <typename T>
RenderModel<T> load_checkpoint(const std::string& path) {
    if constexpr (std::is_same_v<T, double>) {
        return load_impl(path);
    } else {
        return convert_model<double, T>(load_impl(path));
    }
}

template RenderModel<double> load_checkpoint<double>(const std::string&);
template RenderModel<float> load_checkpoint<float>(const std::string&);

} // namespace draction
