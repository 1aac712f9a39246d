// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "comoe/adapters.hpp"

namespace comoe {

namespace {

constexpr const char* kMagic = "comoe-params v1";

std::string format_value(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void save_params(const std::string& path, const std::vector<NamedParam>& params) {
    std::map<std::string, bool> seen;
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << kMagic << "\n";
    for (const auto& p : params) {
        if (p.name.empty() || p.name.find_first_of(" \t\n") != std::string::npos)
            throw IoError("parameter name unusable in text format: '" + p.name + "'");
        if (!seen.emplace(p.name, true).second)
            throw IoError("duplicate parameter name: " + p.name);
        out << "param " << p.name << " " << p.tensor.rank();
        for (std::size_t i = 0; i < p.tensor.rank(); ++i) out << " " << p.tensor.dim(i);
        out << "\n";
        const auto& v = p.tensor.data();
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i) out << " ";
            out << format_value(v[i]);
        }
        out << "\n";
    }
    out.flush();
    if (!out) throw IoError("write failed for " + path);
}

void load_params(const std::string& path, const std::vector<NamedParam>& params) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != kMagic)
        throw IoError(path + ": not a parameter file (bad header)");

    struct Entry {
        Shape shape;
        std::vector<double> values;
    };
    std::map<std::string, Entry> entries;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream hs(line);
        std::string tag, name;
        std::size_t rank = 0;
        if (!(hs >> tag >> name >> rank) || tag != "param")
            throw IoError(path + ": malformed entry header: " + line);
        Entry e;
        e.shape.resize(rank);
        for (auto& d : e.shape)
            if (!(hs >> d)) throw IoError(path + ": truncated shape for " + name);
        const std::size_t n = shape_numel(e.shape);
        if (!std::getline(in, line)) throw IoError(path + ": missing values for " + name);
        std::istringstream vs(line);
        e.values.resize(n);
        for (auto& v : e.values)
            if (!(vs >> v)) throw IoError(path + ": truncated values for " + name);
        double extra;
        if (vs >> extra) throw IoError(path + ": excess values for " + name);
        if (!entries.emplace(name, std::move(e)).second)
            throw IoError(path + ": duplicate entry " + name);
    }

    for (const auto& p : params) {
        auto it = entries.find(p.name);
        if (it == entries.end()) throw IoError(path + ": missing parameter " + p.name);
        if (it->second.shape != p.tensor.shape())
            throw IoError(path + ": shape mismatch for " + p.name + ": file has " +
                          shape_to_string(it->second.shape) + ", expected " +
                          shape_to_string(p.tensor.shape()));
        Tensor target = p.tensor;  // handles share the underlying node
        target.update_data(it->second.values);
        entries.erase(it);
    }
    if (!entries.empty())
        throw IoError(path + ": file contains unknown parameter " + entries.begin()->first);
}

}  // namespace comoe
