#include "streamdiff/formats.hpp"

#include <cstring>

#include "streamdiff/errors.hpp"

namespace streamdiff {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& path, const char* what) {
    unsigned char b[4];
    const auto offset = static_cast<std::int64_t>(in.tellg());
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError(path + ": truncated reading " + what + " at offset " +
                          std::to_string(offset));
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void check_magic(std::istream& in, const std::string& path, const char* magic) {
    char got[4];
    if (!in.read(got, 4) || std::memcmp(got, magic, 4) != 0) {
        throw FormatError(path + ": bad magic at offset 0, expected " + magic);
    }
}

}  // namespace

JavlWriter::JavlWriter(const std::string& path, int c, int h, int w, int frames_per_block)
    : path_(path), out_(path, std::ios::binary), c_(c), h_(h), w_(w), fpb_(frames_per_block) {
    if (!out_) {
        throw InputError("cannot open " + path + " for writing");
    }
    if (c <= 0 || h <= 0 || w <= 0 || frames_per_block <= 0) {
        throw ArgumentError("latent stream extents must be positive");
    }
    out_.write("JAVL", 4);
    put_u32(out_, 1);
    put_u32(out_, static_cast<std::uint32_t>(c));
    put_u32(out_, static_cast<std::uint32_t>(h));
    put_u32(out_, static_cast<std::uint32_t>(w));
    put_u32(out_, static_cast<std::uint32_t>(frames_per_block));
    out_.flush();
}

void JavlWriter::write_frame(const Tensor& frame) {
    const Index elems = static_cast<Index>(c_) * h_ * w_;
    if (frame.size() != elems) {
        throw ArgumentError("latent frame has " + std::to_string(frame.size()) +
                            " values, stream expects " + std::to_string(elems));
    }
    out_.write(reinterpret_cast<const char*>(frame.data()),
               static_cast<std::streamsize>(elems) * 4);
    ++frames_;
    if (++block_fill_ == fpb_) end_block();
}

void JavlWriter::end_block() {
    block_fill_ = 0;
    out_.flush();
    if (!out_) {
        throw InputError("write failed on " + path_);
    }
}

void JavlWriter::close() {
    out_.flush();
    out_.close();
    if (out_.fail()) {
        throw InputError("close failed on " + path_);
    }
}

JavlData read_javl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot open " + path);
    }
    check_magic(in, path, "JAVL");
    const std::uint32_t version = get_u32(in, path, "version");
    if (version != 1) {
        throw FormatError(path + ": unsupported version " + std::to_string(version));
    }
    JavlData d;
    d.c = static_cast<int>(get_u32(in, path, "channels"));
    d.h = static_cast<int>(get_u32(in, path, "height"));
    d.w = static_cast<int>(get_u32(in, path, "width"));
    d.frames_per_block = static_cast<int>(get_u32(in, path, "frames_per_block"));
    if (d.c <= 0 || d.h <= 0 || d.w <= 0 || d.frames_per_block <= 0) {
        throw FormatError(path + ": non-positive extents in header");
    }
    const Index elems = static_cast<Index>(d.c) * d.h * d.w;
    std::vector<float> values;
    std::vector<float> frame(static_cast<size_t>(elems));
    Index n = 0;
    while (in.read(reinterpret_cast<char*>(frame.data()),
                   static_cast<std::streamsize>(elems) * 4)) {
        values.insert(values.end(), frame.begin(), frame.end());
        ++n;
    }
    if (in.gcount() != 0) {
        throw FormatError(path + ": trailing partial frame of " + std::to_string(in.gcount()) +
                          " bytes after frame " + std::to_string(n));
    }
    if (n == 0) {
        throw FormatError(path + ": no frames after header");
    }
    d.frames = Tensor({n, d.c, d.h, d.w}, std::move(values));
    return d;
}

void write_jaaf(const std::string& path, const Tensor& features) {
    if (features.rank() != 2) {
        throw ArgumentError("audio features must be [frames x dim], got " +
                            shape_string(features.shape()));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw InputError("cannot open " + path + " for writing");
    }
    out.write("JAAF", 4);
    put_u32(out, 1);
    put_u32(out, static_cast<std::uint32_t>(features.dim(1)));
    put_u32(out, static_cast<std::uint32_t>(features.dim(0)));
    out.write(reinterpret_cast<const char*>(features.data()),
              static_cast<std::streamsize>(features.size()) * 4);
    if (!out) {
        throw InputError("write failed on " + path);
    }
}

Tensor read_jaaf(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot open " + path);
    }
    check_magic(in, path, "JAAF");
    const std::uint32_t version = get_u32(in, path, "version");
    if (version != 1) {
        throw FormatError(path + ": unsupported version " + std::to_string(version));
    }
    const std::uint32_t dim    = get_u32(in, path, "dim");
    const std::uint32_t frames = get_u32(in, path, "frame count");
    if (dim == 0) {
        throw FormatError(path + ": zero feature dim");
    }
    if (frames == 0) {
        throw FormatError(path + ": zero frames");
    }
    const Index total = static_cast<Index>(dim) * frames;
    std::vector<float> data(static_cast<size_t>(total));
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(total) * 4)) {
        throw FormatError(path + ": truncated, expected " + std::to_string(total * 4) +
                          " payload bytes, got " + std::to_string(in.gcount()));
    }
    char extra;
    if (in.read(&extra, 1)) {
        throw FormatError(path + ": trailing bytes after declared " + std::to_string(frames) +
                          " frames");
    }
    return Tensor({static_cast<Index>(frames), static_cast<Index>(dim)}, std::move(data));
}

}  // namespace streamdiff
