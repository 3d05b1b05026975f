#include "ouro/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace ouro {

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'O', 'U', 'R', 'O'};

struct Writer {
    std::vector<std::uint8_t> buf;
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
};

struct Reader {
    std::vector<std::uint8_t> buf;
    std::size_t pos = 0;
    std::string name;
    void raw(void* p, std::size_t n) {
        if (pos + n > buf.size()) throw IoError(name + ": truncated tensor file");
        std::memcpy(p, buf.data() + pos, n);
        pos += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, 8);
        return v;
    }
};

void write_header(Writer& w, const Shape& shape, Dtype dtype) {
    w.raw(kMagic, 4);
    w.u32(kTensorFormatVersion);
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) w.u64(d);
    w.u32(static_cast<std::uint32_t>(dtype));
}

Reader open_reader(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open tensor file: " + path.string());
    Reader r;
    r.name = path.string();
    r.buf.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    return r;
}

std::pair<Shape, Dtype> read_header(Reader& r) {
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw IoError(r.name + ": bad magic, not a tensor file");
    std::uint32_t version = r.u32();
    if (version != kTensorFormatVersion)
        throw IoError(r.name + ": unsupported tensor format version " + std::to_string(version));
    std::uint32_t rank = r.u32();
    if (rank > 16) throw IoError(r.name + ": implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
    std::uint32_t dt = r.u32();
    if (dt > 2) throw IoError(r.name + ": unknown dtype tag " + std::to_string(dt));
    return {shape, static_cast<Dtype>(dt)};
}

void expect_dtype(const std::string& name, Dtype got, Dtype want) {
    if (got != want)
        throw IoError(name + ": dtype mismatch, file holds tag " +
                      std::to_string(static_cast<unsigned>(got)));
}

}  // namespace

void atomic_write_bytes(const std::filesystem::path& path, const void* data, std::size_t size) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot create file: " + tmp.string());
        f.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!f) throw IoError("short write: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed: " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
    atomic_write_bytes(path, text.data(), text.size());
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open file: " + path.string());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void write_tensor_f64(const std::filesystem::path& path, const Tensor& t) {
    Writer w;
    write_header(w, t.shape, Dtype::F64);
    w.raw(t.ptr(), t.numel() * sizeof(double));
    atomic_write_bytes(path, w.buf.data(), w.buf.size());
}

Tensor read_tensor_f64(const std::filesystem::path& path) {
    Reader r = open_reader(path);
    auto [shape, dt] = read_header(r);
    expect_dtype(r.name, dt, Dtype::F64);
    std::vector<double> v(numel_of(shape));
    r.raw(v.data(), v.size() * sizeof(double));
    return Tensor::from(shape, std::move(v));
}

void write_tensor_i8(const std::filesystem::path& path, const Shape& shape,
                     const std::vector<std::int8_t>& v) {
    require(numel_of(shape) == v.size(), "write_tensor_i8: size does not match shape");
    Writer w;
    write_header(w, shape, Dtype::I8);
    w.raw(v.data(), v.size());
    atomic_write_bytes(path, w.buf.data(), w.buf.size());
}

std::pair<Shape, std::vector<std::int8_t>> read_tensor_i8(const std::filesystem::path& path) {
    Reader r = open_reader(path);
    auto [shape, dt] = read_header(r);
    expect_dtype(r.name, dt, Dtype::I8);
    std::vector<std::int8_t> v(numel_of(shape));
    r.raw(v.data(), v.size());
    return {shape, std::move(v)};
}

void write_tensor_u4(const std::filesystem::path& path, const Shape& shape,
                     const std::vector<std::int8_t>& codes) {
    require(numel_of(shape) == codes.size(), "write_tensor_u4: size does not match shape");
    Writer w;
    write_header(w, shape, Dtype::U4);
    std::vector<std::uint8_t> packed((codes.size() + 1) / 2, 0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        require(codes[i] >= -8 && codes[i] <= 7, "write_tensor_u4: code out of int4 range");
        std::uint8_t nib = static_cast<std::uint8_t>(codes[i]) & 0x0F;
        if (i % 2 == 0)
            packed[i / 2] |= nib;
        else
            packed[i / 2] |= static_cast<std::uint8_t>(nib << 4);
    }
    w.raw(packed.data(), packed.size());
    atomic_write_bytes(path, w.buf.data(), w.buf.size());
}

std::pair<Shape, std::vector<std::int8_t>> read_tensor_u4(const std::filesystem::path& path) {
    Reader r = open_reader(path);
    auto [shape, dt] = read_header(r);
    expect_dtype(r.name, dt, Dtype::U4);
    std::size_t n = numel_of(shape);
    std::vector<std::uint8_t> packed((n + 1) / 2);
    r.raw(packed.data(), packed.size());
    std::vector<std::int8_t> codes(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint8_t nib = (i % 2 == 0) ? (packed[i / 2] & 0x0F) : (packed[i / 2] >> 4);
        // Sign-extend the two's-complement nibble.
        codes[i] = static_cast<std::int8_t>((nib & 0x08) ? (nib | 0xF0) : nib);
    }
    return {shape, std::move(codes)};
}

TensorFileInfo tensor_file_info(const std::filesystem::path& path) {
    Reader r = open_reader(path);
    auto [shape, dt] = read_header(r);
    return {shape, dt};
}

}  // namespace ouro
