#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ikv/errors.hpp"
#include "ikv/matrix.hpp"

namespace ikv {

// Little-endian binary encoder over an in-memory buffer.
class BinaryWriter {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }

    // Length-prefixed row-major tensor payload.
    void tensor(const Matrix& m) {
        u64(static_cast<std::uint64_t>(m.data.size()));
        for (double v : m.data) f64(v);
    }
    void tensor(const Vector& v) {
        u64(static_cast<std::uint64_t>(v.size()));
        for (double x : v) f64(x);
    }

    const std::vector<char>& buffer() const { return buf_; }

private:
    std::vector<char> buf_;
};

// Little-endian binary decoder; failures report the byte offset.
class BinaryReader {
public:
    explicit BinaryReader(std::vector<char> data) : data_(std::move(data)) {}

    std::uint64_t offset() const { return pos_; }
    bool exhausted() const { return pos_ == data_.size(); }

    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint8_t u8() {
        need(1, "u8");
        return static_cast<std::uint8_t>(data_[pos_++]);
    }
    std::uint64_t u64() {
        need(8, "u64");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }

    void magic(const char* expect4) {
        const std::uint64_t at = pos_;
        need(4, "magic");
        for (int i = 0; i < 4; ++i)
            if (data_[pos_ + i] != expect4[i])
                throw FormatError(std::string("bad magic, expected \"") + expect4 + "\"", at);
        pos_ += 4;
    }

    // Reads a length-prefixed tensor payload of exactly `expect` elements.
    std::vector<double> tensor(std::uint64_t expect, const char* what) {
        const std::uint64_t at = pos_;
        const std::uint64_t n = u64();
        if (n != expect)
            throw FormatError(std::string(what) + ": element count " + std::to_string(n) +
                                  ", expected " + std::to_string(expect),
                              at);
        std::vector<double> out(n);
        for (std::uint64_t i = 0; i < n; ++i) out[i] = f64();
        return out;
    }

private:
    void need(std::size_t n, const char* what) {
        if (pos_ + n > data_.size())
            throw FormatError(std::string("truncated file while reading ") + what, pos_);
    }
    std::vector<char> data_;
    std::uint64_t pos_ = 0;
};

inline std::vector<char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open file: " + path);
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

// Writes via a temp file and renames, so a failed run never leaves a
// truncated artifact at the target path.
inline void atomic_write_file(const std::string& path, const char* data, std::size_t n) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("cannot open file for writing: " + tmp);
        out.write(data, static_cast<std::streamsize>(n));
        if (!out) throw InputError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline void atomic_write_file(const std::string& path, const std::vector<char>& data) {
    atomic_write_file(path, data.data(), data.size());
}

inline void atomic_write_file(const std::string& path, const std::string& data) {
    atomic_write_file(path, data.data(), data.size());
}

// One corpus line: token ids plus an optional loss-start position
// ("offset N :" prefix), used to restrict calibration loss to a suffix.
struct CorpusSequence {
    std::vector<int> tokens;
    std::size_t loss_start = 0;
};

// UTF-8 text, one sequence per line, ids as space-separated decimal
// integers; blank lines ignored.
inline std::vector<CorpusSequence> read_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open corpus: " + path);
    std::vector<CorpusSequence> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        CorpusSequence seq;
        std::string first;
        if (!(ls >> first)) continue;  // blank line
        if (first == "offset") {
            long long n = -1;
            std::string colon;
            if (!(ls >> n >> colon) || colon != ":" || n < 0)
                throw InputError(path + ":" + std::to_string(lineno) + ": malformed offset prefix");
            seq.loss_start = static_cast<std::size_t>(n);
        } else {
            try {
                seq.tokens.push_back(std::stoi(first));
            } catch (const std::exception&) {
                throw InputError(path + ":" + std::to_string(lineno) + ": bad token id '" + first + "'");
            }
        }
        long long id = 0;
        while (ls >> id) {
            if (id < 0) throw InputError(path + ":" + std::to_string(lineno) + ": negative token id");
            seq.tokens.push_back(static_cast<int>(id));
        }
        if (!ls.eof())
            throw InputError(path + ":" + std::to_string(lineno) + ": trailing non-numeric data");
        if (!seq.tokens.empty()) out.push_back(std::move(seq));
    }
    return out;
}

inline void write_corpus(const std::string& path, const std::vector<CorpusSequence>& seqs) {
    std::string text;
    for (const auto& s : seqs) {
        if (s.loss_start > 0) text += "offset " + std::to_string(s.loss_start) + " :";
        bool first = s.loss_start == 0;
        for (int t : s.tokens) {
            if (!first) text += ' ';
            text += std::to_string(t);
            first = false;
        }
        text += '\n';
    }
    atomic_write_file(path, text);
}

}  // namespace ikv
