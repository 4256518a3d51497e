#ifndef HAMKIT_IO_HPP
#define HAMKIT_IO_HPP

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "matrix.hpp"

namespace hamkit {

class io_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shortest round-trip decimal form, so re-runs are byte-identical.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    // Trim to the shortest representation that still round-trips.
    for (int prec = 1; prec < 17; ++prec) {
        char s[32];
        std::snprintf(s, sizeof(s), "%.*g", prec, v);
        if (std::strtod(s, nullptr) == v) return s;
    }
    return buf;
}

// CSV: one row per line, '.' decimal separator, no header.
inline void write_matrix_csv(const Matrix& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for writing: " + path);
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j) {
            if (j) f << ',';
            f << format_double(m(i, j));
        }
        f << '\n';
    }
}

inline Matrix read_matrix_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open for reading: " + path);
    std::vector<double> data;
    std::size_t rows = 0, cols = 0;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t c = 0;
        while (std::getline(ss, cell, ',')) {
            data.push_back(std::strtod(cell.c_str(), nullptr));
            ++c;
        }
        if (rows == 0)
            cols = c;
        else if (c != cols)
            throw io_error("ragged CSV row in " + path);
        ++rows;
    }
    return Matrix(rows, cols, std::move(data));
}

// Tagged binary form: magic "HAMM", u32 rows, u32 cols, little-endian f64 payload.
inline void write_matrix_binary(const Matrix& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open for writing: " + path);
    f.write("HAMM", 4);
    const std::uint32_t r = static_cast<std::uint32_t>(m.rows);
    const std::uint32_t c = static_cast<std::uint32_t>(m.cols);
    f.write(reinterpret_cast<const char*>(&r), 4);
    f.write(reinterpret_cast<const char*>(&c), 4);
    f.write(reinterpret_cast<const char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    if (!f) throw io_error("write failed: " + path);
}

inline Matrix read_matrix_binary(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open for reading: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "HAMM")
        throw io_error("bad magic in " + path);
    std::uint32_t r = 0, c = 0;
    f.read(reinterpret_cast<char*>(&r), 4);
    f.read(reinterpret_cast<char*>(&c), 4);
    Matrix m(r, c);
    f.read(reinterpret_cast<char*>(m.data.data()),
           static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    if (!f) throw io_error("truncated payload in " + path);
    return m;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for writing: " + path);
    f << content;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open for reading: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace hamkit

#endif
