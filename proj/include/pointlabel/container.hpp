#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "pointlabel/errors.hpp"
#include "pointlabel/matrix.hpp"

namespace pointlabel {

/// Binary tensor container shared by checkpoints and block payloads:
///
///     PTLBL1\n
///     layers <n>\n
///     tensor <name> <rows> <cols>\n<rows*cols little-endian float32>
///     ...
///     end\n
struct NamedTensor {
    std::string name;
    Matrix<float> value;
};

struct Container {
    std::size_t layers = 0;
    std::vector<NamedTensor> tensors;

    const Matrix<float>* find(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t.value;
        return nullptr;
    }

    const Matrix<float>& at(std::string_view name) const {
        if (const auto* m = find(name)) return *m;
        throw SchemaError("container has no tensor '" + std::string(name) + "'");
    }
};

inline constexpr std::string_view kContainerMagic = "PTLBL1";

inline void write_container(std::ostream& out, const Container& c) {
    out << kContainerMagic << "\nlayers " << c.layers << '\n';
    std::vector<char> bytes;
    for (const auto& t : c.tensors) {
        if (t.name.empty() || t.name.find_first_of(" \t\n") != std::string::npos)
            throw SchemaError("tensor name '" + t.name + "' must be a single non-empty token");
        out << "tensor " << t.name << ' ' << t.value.rows() << ' ' << t.value.cols() << '\n';
        bytes.resize(t.value.size() * 4);
        for (std::size_t i = 0; i < t.value.size(); ++i) {
            const auto u = std::bit_cast<std::uint32_t>(t.value.values()[i]);
            for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xFFu);
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    out << "end\n";
    if (!out) throw IoError("failed writing tensor container");
}

inline Container read_container(std::istream& in) {
    auto read_line = [&](const char* what) {
        std::string line;
        if (!std::getline(in, line)) throw ParseError(std::string("truncated container: expected ") + what);
        return line;
    };
    if (read_line("magic") != kContainerMagic) throw ParseError("not a PTLBL1 container");
    Container c;
    {
        std::istringstream hs(read_line("layers line"));
        std::string key;
        if (!(hs >> key >> c.layers) || key != "layers") throw ParseError("malformed layers line");
    }
    std::vector<char> bytes;
    while (true) {
        const std::string line = read_line("tensor or end");
        if (line == "end") break;
        std::istringstream ls(line);
        std::string key, name;
        std::size_t rows = 0, cols = 0;
        if (!(ls >> key >> name >> rows >> cols) || key != "tensor") throw ParseError("malformed tensor line '" + line + "'");
        bytes.resize(rows * cols * 4);
        in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
            throw ParseError("truncated payload for tensor '" + name + "'");
        std::vector<float> vals(rows * cols);
        for (std::size_t i = 0; i < vals.size(); ++i) {
            std::uint32_t u = 0;
            for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
            vals[i] = std::bit_cast<float>(u);
        }
        c.tensors.push_back({name, Matrix<float>(rows, cols, std::move(vals))});
    }
    return c;
}

inline void save_container(const std::filesystem::path& path, const Container& c) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot create " + path.string());
    write_container(out, c);
}

inline Container load_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return read_container(in);
}

}  // namespace pointlabel
