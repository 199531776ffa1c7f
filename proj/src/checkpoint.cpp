#include "cryoforge/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <memory>

namespace cryoforge {

namespace {

constexpr char kMagic[4] = {'C', 'F', 'T', 'S'};

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_bytes(std::FILE* f, const void* p, std::size_t n, const std::string& path) {
    if (std::fwrite(p, 1, n, f) != n) throw IoError("checkpoint: short write to " + path);
}

void read_bytes(std::FILE* f, void* p, std::size_t n, const std::string& path) {
    if (std::fread(p, 1, n, f) != n) throw IoError("checkpoint: short read from " + path);
}

template <class T>
void write_pod(std::FILE* f, T v, const std::string& path) {
    write_bytes(f, &v, sizeof(T), path);
}

template <class T>
T read_pod(std::FILE* f, const std::string& path) {
    T v;
    read_bytes(f, &v, sizeof(T), path);
    return v;
}

}  // namespace

template <class S>
void save_checkpoint(const std::string& path, const std::vector<NamedArray<S>>& arrays) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
    write_bytes(f.get(), kMagic, 4, path);
    const std::uint32_t version = sizeof(S) == 4 ? 1u : 2u;
    write_pod<std::uint32_t>(f.get(), version, path);
    write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(arrays.size()), path);
    for (const auto& a : arrays) {
        write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(a.name.size()), path);
        write_bytes(f.get(), a.name.data(), a.name.size(), path);
        write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(a.shape.size()), path);
        for (auto e : a.shape) write_pod<std::uint64_t>(f.get(), e, path);
        if (shape_numel(a.shape) != a.data.size())
            throw ShapeError("checkpoint: array " + a.name + " shape/data mismatch");
        write_bytes(f.get(), a.data.data(), a.data.size() * sizeof(S), path);
    }
}

template <class S>
std::vector<NamedArray<S>> load_checkpoint(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("checkpoint: cannot open " + path);
    char magic[4];
    read_bytes(f.get(), magic, 4, path);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic in " + path + " (expected CFTS)");
    const auto version = read_pod<std::uint32_t>(f.get(), path);
    if (version != 1 && version != 2)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " in " +
                          path);
    const auto count = read_pod<std::uint32_t>(f.get(), path);
    std::vector<NamedArray<S>> arrays;
    arrays.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray<S> a;
        const auto name_len = read_pod<std::uint32_t>(f.get(), path);
        a.name.resize(name_len);
        read_bytes(f.get(), a.name.data(), name_len, path);
        const auto rank = read_pod<std::uint32_t>(f.get(), path);
        a.shape.resize(rank);
        for (auto& e : a.shape) e = read_pod<std::uint64_t>(f.get(), path);
        const std::size_t n = shape_numel(a.shape);
        a.data.resize(n);
        if (version == 1) {
            std::vector<float> buf(n);
            read_bytes(f.get(), buf.data(), n * sizeof(float), path);
            for (std::size_t j = 0; j < n; ++j) a.data[j] = static_cast<S>(buf[j]);
        } else {
            std::vector<double> buf(n);
            read_bytes(f.get(), buf.data(), n * sizeof(double), path);
            for (std::size_t j = 0; j < n; ++j) a.data[j] = static_cast<S>(buf[j]);
        }
        arrays.push_back(std::move(a));
    }
    return arrays;
}

template void save_checkpoint<float>(const std::string&, const std::vector<NamedArray<float>>&);
template void save_checkpoint<double>(const std::string&, const std::vector<NamedArray<double>>&);
template std::vector<NamedArray<float>> load_checkpoint<float>(const std::string&);
template std::vector<NamedArray<double>> load_checkpoint<double>(const std::string&);

}  // namespace cryoforge
