#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "kdrop/error.hpp"
#include "kdrop/matrix.hpp"

namespace kdrop {

struct Instance {
    std::string id;
    std::vector<float> vector;
    std::size_t label = 0;

    Vector values() const { return Vector(vector.begin(), vector.end()); }

    bool operator==(const Instance &) const = default;
};

/// Labeled fixed-dimension embeddings. Vectors are stored as float32, the
/// on-disk precision; computation widens them to double.
struct EmbeddingDataset {
    std::string name;
    std::size_t dim = 0;
    std::vector<std::string> classes;
    std::vector<Instance> instances;
    nlohmann::json provenance; // free-form extraction settings, null when absent

    std::size_t size() const { return instances.size(); }
    std::size_t num_classes() const { return classes.size(); }

    void validate() const {
        if (dim < 1) throw DataError("dataset '" + name + "': dim must be >= 1");
        std::unordered_set<std::string> seen;
        for (const auto &inst : instances) {
            if (inst.vector.size() != dim)
                throw DataError("instance '" + inst.id + "': vector length " + std::to_string(inst.vector.size()) +
                                " != dim " + std::to_string(dim));
            for (float v : inst.vector)
                if (!std::isfinite(v)) throw DataError("instance '" + inst.id + "': non-finite vector entry");
            if (inst.label >= classes.size())
                throw DataError("instance '" + inst.id + "': label " + std::to_string(inst.label) + " out of range");
            if (!seen.insert(inst.id).second) throw DataError("duplicate instance id '" + inst.id + "'");
        }
    }

    /// Dataset restricted to the given instance indices, in that order.
    EmbeddingDataset subset(const std::vector<std::size_t> &indices) const {
        EmbeddingDataset out{name, dim, classes, {}, provenance};
        out.instances.reserve(indices.size());
        for (auto i : indices) out.instances.push_back(instances.at(i));
        return out;
    }

    bool operator==(const EmbeddingDataset &) const = default;
};

} // namespace kdrop
