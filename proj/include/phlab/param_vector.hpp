#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "phlab/errors.hpp"

namespace phlab {

struct ParamSlice {
    std::string name;
    Eigen::Index offset = 0;
    Eigen::Index length = 0;
};

/// Flat storage for every trainable scalar of a model, with a name -> slice
/// index map. Slices are appended contiguously, so the map is a partition.
class ParamVector {
public:
    ParamVector() = default;

    /// Reserves `length` new entries under `name`; returns their offset.
    Eigen::Index append(std::string name, Eigen::Index length) {
        for (const auto& s : slices_)
            if (s.name == name)
                throw StructuralError("duplicate parameter component: " + name);
        const Eigen::Index off = values_.size();
        values_.conservativeResize(off + length);
        values_.segment(off, length).setZero();
        slices_.push_back({std::move(name), off, length});
        return off;
    }

    const ParamSlice& slice(const std::string& name) const {
        for (const auto& s : slices_)
            if (s.name == name)
                return s;
        throw StructuralError("unknown parameter component: " + name);
    }

    auto segment(const std::string& name) {
        const auto& s = slice(name);
        return values_.segment(s.offset, s.length);
    }
    auto segment(const std::string& name) const {
        const auto& s = slice(name);
        return values_.segment(s.offset, s.length);
    }

    Eigen::VectorXd& values() noexcept { return values_; }
    const Eigen::VectorXd& values() const noexcept { return values_; }
    const std::vector<ParamSlice>& slices() const noexcept { return slices_; }
    Eigen::Index size() const noexcept { return values_.size(); }

    /// Same names and slice geometry.
    bool same_layout(const ParamVector& other) const {
        if (slices_.size() != other.slices_.size())
            return false;
        for (std::size_t i = 0; i < slices_.size(); ++i) {
            const auto& a = slices_[i];
            const auto& b = other.slices_[i];
            if (a.name != b.name || a.offset != b.offset || a.length != b.length)
                return false;
        }
        return true;
    }

    nlohmann::json layout_json() const {
        nlohmann::json comps = nlohmann::json::array();
        for (const auto& s : slices_)
            comps.push_back({{"name", s.name}, {"offset", s.offset}, {"length", s.length}});
        return comps;
    }

    // Wire format: one line of JSON header, '\n', then size() little-endian
    // IEEE-754 doubles. `extra` is merged into the header (model descriptors).
    void write(std::ostream& os, const nlohmann::json& extra = nlohmann::json::object()) const {
        nlohmann::json header = extra;
        header["components"] = layout_json();
        header["length"] = values_.size();
        os << header.dump() << '\n';
        for (Eigen::Index i = 0; i < values_.size(); ++i) {
            std::uint64_t bits = std::bit_cast<std::uint64_t>(values_[i]);
            unsigned char bytes[8];
            for (int b = 0; b < 8; ++b)
                bytes[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xffu);
            os.write(reinterpret_cast<const char*>(bytes), 8);
        }
    }

    /// Reads the format written by write(); returns the parsed header.
    static ParamVector read(std::istream& is, nlohmann::json* header_out = nullptr) {
        std::string line;
        if (!std::getline(is, line))
            throw std::runtime_error("parameter file: missing header");
        const nlohmann::json header = nlohmann::json::parse(line);
        ParamVector pv;
        for (const auto& c : header.at("components")) {
            const auto off = pv.append(c.at("name").get<std::string>(), c.at("length").get<Eigen::Index>());
            if (off != c.at("offset").get<Eigen::Index>())
                throw StructuralError("parameter file: non-contiguous component layout");
        }
        if (pv.size() != header.at("length").get<Eigen::Index>())
            throw StructuralError("parameter file: length does not match components");
        for (Eigen::Index i = 0; i < pv.size(); ++i) {
            unsigned char bytes[8];
            if (!is.read(reinterpret_cast<char*>(bytes), 8))
                throw std::runtime_error("parameter file: truncated payload");
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
            pv.values_[i] = std::bit_cast<double>(bits);
        }
        if (header_out)
            *header_out = header;
        return pv;
    }

    void save(const std::string& path, const nlohmann::json& extra = nlohmann::json::object()) const {
        std::ofstream os(path, std::ios::binary);
        if (!os)
            throw std::runtime_error("cannot open for writing: " + path);
        write(os, extra);
    }

    static ParamVector load(const std::string& path, nlohmann::json* header_out = nullptr) {
        std::ifstream is(path, std::ios::binary);
        if (!is)
            throw std::runtime_error("cannot open: " + path);
        return read(is, header_out);
    }

private:
    Eigen::VectorXd values_;
    std::vector<ParamSlice> slices_;
};

} // namespace phlab
