#pragma once
// Plain-text formats.
//
// Matrix: a header line "rows cols" followed by one whitespace-separated row
// per line. Kernel: a header line "c_out c_in kh kw" followed by c_out*c_in
// lines of kh*kw values each. Blank lines and lines starting with '#' are
// skipped by the readers. Writers emit the shortest round-trip decimal form.

#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "ucgsd/errors.hpp"
#include "ucgsd/tensor.hpp"

namespace ucgsd {

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

inline bool next_content_line(std::istream& in, std::string& line, std::size_t& lineno) {
    while (std::getline(in, line)) {
        ++lineno;
        auto toks = split_ws(line);
        if (toks.empty() || toks.front().front() == '#') continue;
        return true;
    }
    return false;
}

inline double parse_double(std::string_view tok, std::size_t lineno) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || ptr != tok.data() + tok.size())
        throw ParseError("line " + std::to_string(lineno) + ": bad number '" + std::string(tok) + "'");
    if (!std::isfinite(v))
        throw ParseError("line " + std::to_string(lineno) + ": non-finite value");
    return v;
}

inline std::size_t parse_count(std::string_view tok, std::size_t lineno) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || ptr != tok.data() + tok.size())
        throw ParseError("line " + std::to_string(lineno) + ": bad count '" + std::string(tok) + "'");
    return v;
}

inline std::vector<std::size_t> read_header(std::istream& in, std::size_t n, std::size_t& lineno) {
    std::string line;
    if (!next_content_line(in, line, lineno)) throw ParseError("missing header line");
    auto toks = split_ws(line);
    if (toks.size() != n)
        throw ParseError("line " + std::to_string(lineno) + ": header needs " + std::to_string(n) +
                         " counts");
    std::vector<std::size_t> dims;
    for (auto t : toks) dims.push_back(parse_count(t, lineno));
    return dims;
}

inline void read_rows(std::istream& in, std::size_t nrows, std::size_t ncols,
                      std::vector<double>& out, std::size_t& lineno) {
    std::string line;
    out.reserve(nrows * ncols);
    for (std::size_t r = 0; r < nrows; ++r) {
        if (!next_content_line(in, line, lineno))
            throw ParseError("expected " + std::to_string(nrows) + " rows, got " + std::to_string(r));
        auto toks = split_ws(line);
        if (toks.size() != ncols)
            throw ParseError("line " + std::to_string(lineno) + ": expected " +
                             std::to_string(ncols) + " values, got " + std::to_string(toks.size()));
        for (auto t : toks) out.push_back(parse_double(t, lineno));
    }
}

} // namespace detail

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

inline Matrix read_matrix(std::istream& in) {
    std::size_t lineno = 0;
    auto dims = detail::read_header(in, 2, lineno);
    std::vector<double> data;
    detail::read_rows(in, dims[0], dims[1], data, lineno);
    return Matrix(dims[0], dims[1], std::move(data));
}

inline void write_matrix(std::ostream& out, const Matrix& m) {
    out << m.rows() << ' ' << m.cols() << '\n';
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (j) out << ' ';
            out << format_double(m(i, j));
        }
        out << '\n';
    }
}

/// Writes a vector as a 1 x n matrix.
inline void write_vector(std::ostream& out, const Vector& v) {
    write_matrix(out, Matrix(1, v.size(), v));
}

inline Vector read_vector(std::istream& in) {
    Matrix m = read_matrix(in);
    if (m.rows() != 1) throw ParseError("vector block must have exactly one row");
    return Vector(m.data().begin(), m.data().end());
}

inline Tensor4 read_tensor4(std::istream& in) {
    std::size_t lineno = 0;
    auto dims = detail::read_header(in, 4, lineno);
    std::vector<double> data;
    detail::read_rows(in, dims[0] * dims[1], dims[2] * dims[3], data, lineno);
    return Tensor4(dims[0], dims[1], dims[2], dims[3], std::move(data));
}

inline void write_tensor4(std::ostream& out, const Tensor4& k) {
    out << k.c_out() << ' ' << k.c_in() << ' ' << k.kh() << ' ' << k.kw() << '\n';
    const auto data = k.data();
    const std::size_t per_line = k.spatial();
    for (std::size_t line = 0; line < k.c_out() * k.c_in(); ++line) {
        for (std::size_t s = 0; s < per_line; ++s) {
            if (s) out << ' ';
            out << format_double(data[line * per_line + s]);
        }
        out << '\n';
    }
}

} // namespace ucgsd
